//! One device's semantic link: encoder, channel codec, MIMO physical layer
//! with refined CSI, channel decoder and task head.

use flsc_tensor::nn::Mode;
use flsc_tensor::{CustomOp, Graph, ModelWeights, Var};
use num_complex::Complex64;
use rand::Rng;

use crate::codec::{bandwidth_to_length, ChannelCodec};
use crate::error::{CoreError, Result};
use crate::hvt::{ClassHead, Dtcnn, DtcnnConfig, HvtConfig, HvtEncoder, Preset, Task};
use crate::mimo::{self, ChannelRealization, ComplexMatrix, Pilot, Svd};
use crate::refiner::{self, CsiRefiner, RefinerConfig};
use crate::seeds::{stream, Purpose};

/// Shape parameters of a link.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkSpec {
    pub task: Task,
    pub preset: Preset,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub bandwidth_ratio: f64,
    pub n_t: usize,
    pub n_r: usize,
}

/// Task-specific back end of the link.
#[derive(Clone, Debug)]
pub enum TaskHead {
    Classify(ClassHead),
    Reconstruct(Dtcnn),
}

#[derive(Clone, Debug)]
pub struct LinkModel {
    pub spec: LinkSpec,
    pub encoder: HvtEncoder,
    pub codec: ChannelCodec,
    pub head: TaskHead,
    pub refiner: CsiRefiner,
}

/// Forward results of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LinkOutput {
    /// `(cls, dist)` logits for classification, the image batch otherwise.
    pub task: TaskOutput,
    /// Refined channel estimate `[1, 2, n_r, n_t]`.
    pub refined_csi: Var,
}

#[derive(Clone, Copy, Debug)]
pub enum TaskOutput {
    Logits { cls: Var, dist: Var },
    Images(Var),
}

impl LinkModel {
    pub fn new(spec: LinkSpec, refiner_config: RefinerConfig) -> Result<Self> {
        if refiner_config.n_t != spec.n_t || refiner_config.n_r != spec.n_r {
            return Err(crate::error::invalid(
                "link",
                format!(
                    "refiner is {}x{} but the link uses {}x{} antennas",
                    refiner_config.n_r, refiner_config.n_t, spec.n_r, spec.n_t
                ),
            ));
        }
        if spec.n_r < spec.n_t {
            return Err(crate::error::invalid("link", "need at least as many receive as transmit antennas"));
        }
        let hvt = HvtConfig::preset(spec.preset, spec.task, spec.in_channels, spec.height, spec.width, spec.classes);
        let encoder = HvtEncoder::new(hvt)?;
        let semantic_len = encoder.semantic_len();
        let codeword_len = bandwidth_to_length(spec.bandwidth_ratio, spec.height, spec.width, spec.in_channels, spec.n_t)?;
        let head = match spec.task {
            Task::Classify => TaskHead::Classify(ClassHead {
                token_dim: semantic_len / 2,
                classes: spec.classes,
            }),
            Task::Reconstruct => {
                let cfg = DtcnnConfig::for_encoder(&encoder, spec.preset, spec.in_channels);
                let dtcnn = Dtcnn::new(cfg)?;
                let (c, h, w) = dtcnn.config.output_dims();
                if (c, h, w) != (spec.in_channels, spec.height, spec.width) {
                    return Err(crate::error::invalid(
                        "link",
                        format!("decoder produces {c}x{h}x{w}, not the {}x{}x{} input", spec.in_channels, spec.height, spec.width),
                    ));
                }
                TaskHead::Reconstruct(dtcnn)
            }
        };
        Ok(Self {
            codec: ChannelCodec {
                semantic_len,
                codeword_len,
            },
            spec,
            encoder,
            head,
            refiner: CsiRefiner::new(refiner_config)?,
        })
    }

    /// Fresh weights for every part except the refiner, which is taken from
    /// `refiner_weights` when given.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, refiner_weights: Option<&ModelWeights>) -> Result<ModelWeights> {
        let mut w = ModelWeights::new();
        self.encoder.init(&mut w, rng);
        self.codec.init(&mut w, rng);
        match &self.head {
            TaskHead::Classify(h) => h.init(&mut w, rng),
            TaskHead::Reconstruct(d) => d.init(&mut w, rng),
        }
        let mut fresh = ModelWeights::new();
        self.refiner.init(&mut fresh, rng);
        if let Some(pre) = refiner_weights {
            fresh.check_aggregable(pre)?;
            fresh = pre.clone();
        }
        for (k, v) in fresh.iter() {
            w.insert(k.to_string(), v.clone());
        }
        Ok(w)
    }

    /// Full link for a batch `[B, C, H, W]` over one channel block.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        w: &ModelWeights,
        images: Var,
        block: &ChannelBlock,
        noise: &mut R,
        mode: Mode,
    ) -> Result<LinkOutput> {
        let sem = self.encoder.forward(g, w, images)?;
        let code = self.codec.encode(g, w, sem)?;
        let ls = g.constant(vec![1, 2, self.spec.n_r, self.spec.n_t], block.ls_estimate.to_planes())?;
        // batch statistics of a single 2x2 estimate are meaningless
        let refined = self.refiner.forward(g, w, ls, Mode::Eval)?;
        let csi = ComplexMatrix::from_planes(self.spec.n_r, self.spec.n_t, g.value(refined))?;
        let received = mimo_layer(g, code, &block.channel, &mimo::svd(&csi)?, noise)?;
        let decoded = self.codec.decode(g, w, received)?;
        let task = match &self.head {
            TaskHead::Classify(h) => {
                let (cls, dist) = h.forward(g, w, decoded)?;
                TaskOutput::Logits { cls, dist }
            }
            TaskHead::Reconstruct(d) => TaskOutput::Images(d.forward(g, w, decoded, mode)?),
        };
        Ok(LinkOutput {
            task,
            refined_csi: refined,
        })
    }
}

/// A block-fading draw plus the pilot-based LS estimate of it.
#[derive(Clone, Debug)]
pub struct ChannelBlock {
    pub channel: ChannelRealization,
    pub ls_estimate: ComplexMatrix,
}

/// Which family of random streams a channel block draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

impl Phase {
    fn purposes(self) -> [Purpose; 3] {
        match self {
            Phase::Train => [Purpose::Channel, Purpose::Pilot, Purpose::Noise],
            Phase::Eval => [Purpose::Eval, Purpose::EvalPilot, Purpose::EvalNoise],
        }
    }

    /// Payload noise stream for one batch.
    pub fn noise_stream(self, seed: u64, round: u64, device: u64, batch: u64) -> rand_chacha::ChaCha8Rng {
        stream(seed, self.purposes()[2], round, device, batch)
    }
}

impl ChannelBlock {
    /// Fading draw and its LS estimate for one batch of one device.
    pub fn draw(seed: u64, phase: Phase, round: u64, device: u64, batch: u64, spec: &LinkSpec, snr_db: f64) -> Result<Self> {
        let [chan, pilot, _] = phase.purposes();
        let channel = mimo::draw_channel(&mut stream(seed, chan, round, device, batch), spec.n_r, spec.n_t, snr_db, batch);
        let gamma = Pilot::scaled_identity(spec.n_t, 1.0)?;
        let ls_estimate = mimo::pilot_ls_estimate(&channel, &gamma, &mut stream(seed, pilot, round, device, batch))?;
        Ok(Self { channel, ls_estimate })
    }

    pub fn true_planes(&self) -> Vec<f64> {
        self.channel.h.to_planes()
    }
}

/// Backward rule of the physical layer: per codeword the detected symbols are
/// `M·x + noise` with `M` fixed for the batch, so the input gradient is
/// `Mᴴ` applied to the output gradient symbol by symbol.
struct MimoBackward {
    map: ComplexMatrix,
    n_t: usize,
    codeword_len: usize,
}

impl CustomOp for MimoBackward {
    fn name(&self) -> &'static str {
        "mimo_link"
    }

    fn backward(&self, _inputs: &[&[f64]], _output: &[f64], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mh = self.map.adjoint();
        let n = self.n_t;
        let mut gx = vec![0.0; grad_out.len()];
        for (gy_row, gx_row) in grad_out.chunks(self.codeword_len).zip(gx.chunks_mut(self.codeword_len)) {
            for col in 0..self.codeword_len / (2 * n) {
                let sym = |a: usize| {
                    let k = col * n + a;
                    Complex64::new(gy_row[2 * k], gy_row[2 * k + 1])
                };
                for i in 0..n {
                    let v: Complex64 = (0..n).map(|j| mh[(i, j)] * sym(j)).sum();
                    let k = col * n + i;
                    gx_row[2 * k] = v.re;
                    gx_row[2 * k + 1] = v.im;
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Sends every row of `codewords` `[B, L]` through pack, precode, channel and
/// detect. The channel realization is a constant of the forward pass.
pub fn mimo_layer<R: Rng + ?Sized>(
    g: &mut Graph,
    codewords: Var,
    channel: &ChannelRealization,
    csi: &Svd,
    noise: &mut R,
) -> Result<Var> {
    let shape = g.shape(codewords).to_vec();
    let n_t = channel.h.cols();
    if shape.len() != 2 || shape[1] % (2 * n_t) != 0 {
        return Err(CoreError::Shape {
            op: "mimo_layer",
            expected: format!("[B, multiple of {}]", 2 * n_t),
            actual: format!("{shape:?}"),
        });
    }
    let len = shape[1];
    let mut out = Vec::with_capacity(shape[0] * len);
    for row in g.value(codewords).chunks(len) {
        out.extend(mimo::transmit(row, channel, csi, noise)?);
    }
    let op = MimoBackward {
        map: mimo::effective_map(&channel.h, csi)?,
        n_t,
        codeword_len: len,
    };
    Ok(g.custom(&[codewords], shape, out, Box::new(op))?)
}

/// Auxiliary refiner loss against the true channel of the block.
pub fn csi_loss(g: &mut Graph, refined: Var, block: &ChannelBlock) -> Result<Var> {
    let s = g.shape(refined).to_vec();
    let truth = g.constant(s, block.true_planes())?;
    refiner::refiner_loss(g, refined, truth)
}

//! Images, IDX and FIMG files, synthetic scenes and the overlapping-view
//! partition.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, CoreError, Result};

/// Planar (CHW) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != channels * height * width || channels * height * width == 0 {
            return Err(CoreError::Shape {
                op: "Image::new",
                expected: format!("{channels}x{height}x{width} pixels"),
                actual: pixels.len().to_string(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            pixels: vec![value; channels * height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    /// Full-height crop of columns `x0..x0 + width`.
    pub fn crop_columns(&self, x0: usize, width: usize) -> Result<Image> {
        if x0 + width > self.width || width == 0 {
            return Err(invalid(
                "crop_columns",
                format!("columns {x0}..{} outside width {}", x0 + width, self.width),
            ));
        }
        let mut pixels = Vec::with_capacity(self.channels * self.height * width);
        for c in 0..self.channels {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                pixels.extend_from_slice(&self.pixels[row + x0..row + x0 + width]);
            }
        }
        Image::new(self.channels, self.height, width, pixels)
    }
}

#[derive(Clone, Debug, Default)]
pub struct LabeledImages {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

// ---- IDX ---------------------------------------------------------------

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const PADDED_EXTENT: usize = 32;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::Format {
                path: self.name.to_string(),
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn be_u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn le_u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn check_magic(cur: &mut Cursor<'_>, want: u32) -> Result<()> {
    let magic = cur.be_u32("magic")?;
    if magic != want {
        return Err(CoreError::Format {
            path: cur.name.to_string(),
            offset: 0,
            reason: format!("bad magic {magic:#010x}, expected {want:#010x}"),
        });
    }
    Ok(())
}

/// Parses an IDX image file; images no larger than 32×32 are zero-padded
/// (centred) to 32×32.
pub fn parse_idx_images(bytes: &[u8], name: &str) -> Result<Vec<Image>> {
    let mut cur = Cursor { bytes, pos: 0, name };
    check_magic(&mut cur, IDX_IMAGES_MAGIC)?;
    let count = cur.be_u32("image count")? as usize;
    let rows = cur.be_u32("row count")? as usize;
    let cols = cur.be_u32("column count")? as usize;
    let (out_h, out_w) = (rows.max(PADDED_EXTENT), cols.max(PADDED_EXTENT));
    let (top, left) = ((out_h - rows) / 2, (out_w - cols) / 2);
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let raw = cur.take(rows * cols, &format!("pixels of image {i}"))?;
        let mut img = Image::filled(1, out_h, out_w, 0.0);
        for y in 0..rows {
            for x in 0..cols {
                img.set(0, top + y, left + x, raw[y * cols + x] as f64 / 255.0);
            }
        }
        images.push(img);
    }
    Ok(images)
}

pub fn parse_idx_labels(bytes: &[u8], name: &str) -> Result<Vec<usize>> {
    let mut cur = Cursor { bytes, pos: 0, name };
    check_magic(&mut cur, IDX_LABELS_MAGIC)?;
    let count = cur.be_u32("label count")? as usize;
    Ok(cur.take(count, "labels")?.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledImages> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = fs::read(ip).map_err(io_err(format!("reading {}", ip.display())))?;
    let lb = fs::read(lp).map_err(io_err(format!("reading {}", lp.display())))?;
    let images = parse_idx_images(&ib, &ip.display().to_string())?;
    let labels = parse_idx_labels(&lb, &lp.display().to_string())?;
    if images.len() != labels.len() {
        return Err(invalid(
            "load_idx",
            format!("{} images but {} labels", images.len(), labels.len()),
        ));
    }
    Ok(LabeledImages { images, labels })
}

/// Encodes raw u8 images in IDX layout.
pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

// ---- FIMG ----------------------------------------------------------------

pub const FIMG_MAGIC: &[u8; 4] = b"FIMG";

/// 16-byte header (`FIMG`, then little-endian u32 height, width, channels)
/// followed by interleaved (HWC) 8-bit samples.
pub fn encode_fimg(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.len());
    out.extend_from_slice(FIMG_MAGIC);
    for v in [img.height, img.width, img.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.push((img.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn decode_fimg(bytes: &[u8], name: &str) -> Result<Image> {
    let mut cur = Cursor { bytes, pos: 0, name };
    if cur.take(4, "magic")? != FIMG_MAGIC {
        return Err(CoreError::Format {
            path: name.to_string(),
            offset: 0,
            reason: "bad magic, expected FIMG".into(),
        });
    }
    let h = cur.le_u32("height")? as usize;
    let w = cur.le_u32("width")? as usize;
    let c = cur.le_u32("channels")? as usize;
    let raw = cur.take(h * w * c, "pixel data")?;
    let mut img = Image::filled(c, h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                img.set(ch, y, x, raw[(y * w + x) * c + ch] as f64 / 255.0);
            }
        }
    }
    Ok(img)
}

pub fn write_fimg(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let p = path.as_ref();
    let mut f = fs::File::create(p).map_err(io_err(format!("creating {}", p.display())))?;
    f.write_all(&encode_fimg(img)).map_err(io_err(format!("writing {}", p.display())))
}

pub fn read_fimg(path: impl AsRef<Path>) -> Result<Image> {
    let p = path.as_ref();
    let bytes = fs::read(p).map_err(io_err(format!("reading {}", p.display())))?;
    decode_fimg(&bytes, &p.display().to_string())
}

// ---- synthetic scenes ----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneStyle {
    /// Single-channel stripe field; the label is the stripe orientation.
    Stripes { classes: usize },
    /// Three-channel gradient background with coloured rectangles.
    Shapes,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Image,
    pub label: Option<usize>,
}

pub fn synth_scene<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, style: SceneStyle) -> Scene {
    match style {
        SceneStyle::Stripes { classes } => {
            let label = rng.gen_range(0..classes.max(1));
            let theta = std::f64::consts::PI * label as f64 / classes.max(1) as f64;
            let (ct, st) = (theta.cos(), theta.sin());
            let freq = rng.gen_range(0.12..0.22);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let contrast = rng.gen_range(0.3..0.5);
            let base = rng.gen_range(0.4..0.6);
            let mut img = Image::filled(1, height, width, 0.0);
            for y in 0..height {
                for x in 0..width {
                    let t = std::f64::consts::TAU * freq * (x as f64 * ct + y as f64 * st) + phase;
                    let noise = rng.gen_range(-0.05..0.05);
                    img.set(0, y, x, (base + contrast * t.sin() + noise).clamp(0.0, 1.0));
                }
            }
            Scene {
                image: img,
                label: Some(label),
            }
        }
        SceneStyle::Shapes => {
            let mut img = Image::filled(3, height, width, 0.0);
            let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
            let gx: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.4..0.4));
            let gy: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.4..0.4));
            for c in 0..3 {
                for y in 0..height {
                    for x in 0..width {
                        let u = x as f64 / width as f64 - 0.5;
                        let v = y as f64 / height as f64 - 0.5;
                        img.set(c, y, x, (c0[c] + gx[c] * u + gy[c] * v).clamp(0.0, 1.0));
                    }
                }
            }
            let count = rng.gen_range(3..7);
            for _ in 0..count {
                let rw = rng.gen_range(4..=(width / 3).max(5));
                let rh = rng.gen_range(4..=(height / 2).max(5));
                let x0 = rng.gen_range(0..width.saturating_sub(rw).max(1));
                let y0 = rng.gen_range(0..height.saturating_sub(rh).max(1));
                let col: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
                for c in 0..3 {
                    for y in y0..(y0 + rh).min(height) {
                        for x in x0..(x0 + rw).min(width) {
                            img.set(c, y, x, col[c]);
                        }
                    }
                }
            }
            Scene { image: img, label: None }
        }
    }
}

// ---- partition -----------------------------------------------------------

/// Horizontal view placement for `n` devices.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewLayout {
    pub view_width: usize,
    pub stride: usize,
    pub offsets: Vec<usize>,
}

impl ViewLayout {
    pub fn new(n: usize, delta: f64, view_width: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("partition", "device count must be at least 1"));
        }
        if !(0.0..=1.0).contains(&delta) {
            return Err(invalid("partition", format!("overlap ratio {delta} outside [0, 1]")));
        }
        let stride = ((1.0 - delta) * view_width as f64).round() as usize;
        Ok(Self {
            view_width,
            stride,
            offsets: (0..n).map(|i| i * stride).collect(),
        })
    }

    /// Scene width needed to hold every view.
    pub fn required_width(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0) + self.view_width
    }

    /// Overlap fraction between adjacent views.
    pub fn realized_delta(&self) -> f64 {
        self.view_width.saturating_sub(self.stride) as f64 / self.view_width as f64
    }
}

#[derive(Clone, Debug)]
pub struct ImageSample {
    pub image: Image,
    pub label: Option<usize>,
    pub offset: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Shard {
    pub device: usize,
    pub samples: Vec<ImageSample>,
    pub realized_delta: f64,
}

/// Device `i` receives view `i` of every scene.
pub fn partition(scenes: &[Scene], layout: &ViewLayout) -> Result<Vec<Shard>> {
    let need = layout.required_width();
    if let Some(s) = scenes.iter().find(|s| s.image.width < need) {
        return Err(invalid(
            "partition",
            format!(
                "{} views of width {} at stride {} need a scene {need} pixels wide, got {}",
                layout.offsets.len(),
                layout.view_width,
                layout.stride,
                s.image.width
            ),
        ));
    }
    layout
        .offsets
        .iter()
        .enumerate()
        .map(|(device, &x0)| {
            let samples = scenes
                .iter()
                .map(|s| {
                    Ok(ImageSample {
                        image: s.image.crop_columns(x0, layout.view_width)?,
                        label: s.label,
                        offset: (x0, 0),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Shard {
                device,
                samples,
                realized_delta: layout.realized_delta(),
            })
        })
        .collect()
}

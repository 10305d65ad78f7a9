use flsc_core::config::ExperimentConfig;
use flsc_core::federation::{
    aggregate_results_classification, build_data, csi_loss, fedavg_aggregate, local_update, train_teacher,
    ChannelBlock, DeviceState, FederatedData, Federation, LinkModel, LocalContext, Phase, Teacher, TeacherConfig,
    TaskOutput,
};
use flsc_core::hvt::{softmax_row, Task};
use flsc_core::seeds::{stream, Purpose};
use flsc_core::CoreError;
use flsc_tensor::{Graph, Mode, ModelWeights, Tensor};
use proptest::prelude::*;

fn tiny(task: Task) -> ExperimentConfig {
    ExperimentConfig {
        task,
        classes: 2,
        devices: 2,
        train_scenes: 16,
        test_scenes: 8,
        batch_size: 8,
        local_epochs: 1,
        rounds: Some(1),
        seed: 5,
        ..ExperimentConfig::default()
    }
}

fn lenient_teacher(data: &FederatedData, classes: usize) -> Teacher {
    let images: Vec<_> = data.train.iter().flat_map(|s| s.samples.iter().map(|x| &x.image)).collect();
    let labels: Vec<usize> = data.train.iter().flat_map(|s| s.samples.iter().map(|x| x.label.unwrap())).collect();
    let cfg = TeacherConfig {
        max_epochs: 3,
        required_accuracy: 0.0,
        ..TeacherConfig::default()
    };
    train_teacher(&images, &labels, classes, &cfg, 1).unwrap()
}

fn context(cfg: &ExperimentConfig, epochs: usize) -> LocalContext {
    LocalContext {
        seed: cfg.seed,
        round: 0,
        snr_db: cfg.snr_db,
        epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr_start,
        kd: cfg.kd(),
    }
}

fn setup(task: Task) -> (ExperimentConfig, LinkModel, ModelWeights, FederatedData, Option<Teacher>) {
    let cfg = tiny(task);
    let data = build_data(&cfg).unwrap();
    let teacher = (task == Task::Classify).then(|| lenient_teacher(&data, cfg.classes));
    let model = LinkModel::new(cfg.link_spec(), cfg.refiner_config()).unwrap();
    let w = model.init(&mut stream(cfg.seed, Purpose::Init, 0, 0, 0), None).unwrap();
    (cfg, model, w, data, teacher)
}

#[test]
fn zero_local_epochs_leave_weights_unchanged() {
    let (cfg, model, w, data, teacher) = setup(Task::Classify);
    let mut dev = DeviceState::new(data.train[0].clone(), teacher.as_ref()).unwrap();
    let out = local_update(&model, &w, &mut dev, &context(&cfg, 0)).unwrap();
    assert_eq!(out.steps, 0);
    assert!(out.mean_loss.is_nan());
    for (name, t) in w.iter() {
        assert_eq!(out.weights.require(name).unwrap().data(), t.data(), "{name}");
    }
}

#[test]
fn local_update_is_deterministic() {
    let (cfg, model, w, data, _) = setup(Task::Reconstruct);
    let run = || {
        let mut dev = DeviceState::new(data.train[1].clone(), None).unwrap();
        local_update(&model, &w, &mut dev, &context(&cfg, 1)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.mean_loss, b.mean_loss);
    for (name, t) in a.weights.iter() {
        assert_eq!(b.weights.require(name).unwrap().data(), t.data(), "{name}");
    }
}

#[test]
fn gradients_reach_every_parameter_group() {
    for task in [Task::Classify, Task::Reconstruct] {
        let (cfg, model, mut w, data, teacher) = setup(task);
        let samples = &data.train[0].samples[..4];
        let block = ChannelBlock::draw(cfg.seed, Phase::Train, 0, 0, 0, &model.spec, cfg.snr_db).unwrap();
        let mut noise = Phase::Train.noise_stream(cfg.seed, 0, 0, 0);
        let mut g = Graph::new();
        let img = &samples[0].image;
        let pixels: Vec<f64> = samples.iter().flat_map(|s| s.image.pixels.iter().copied()).collect();
        let x = g
            .constant(vec![samples.len(), img.channels, img.height, img.width], pixels.clone())
            .unwrap();
        let out = model.forward(&mut g, &w, x, &block, &mut noise, Mode::Train).unwrap();
        let task_loss = match out.task {
            TaskOutput::Logits { cls, dist } => {
                let labels: Vec<usize> = samples.iter().map(|s| s.label.unwrap()).collect();
                let logits = teacher.as_ref().unwrap().logits(&samples.iter().map(|s| &s.image).collect::<Vec<_>>());
                flsc_core::federation::kd_loss(&mut g, cls, dist, &labels, &logits.unwrap(), &cfg.kd()).unwrap()
            }
            TaskOutput::Images(y) => {
                let t = g.constant(g.shape(y).to_vec(), pixels).unwrap();
                flsc_core::federation::reconstruction_loss(&mut g, y, t).unwrap()
            }
        };
        let aux = csi_loss(&mut g, out.refined_csi, &block).unwrap();
        let loss = g.add(task_loss, aux).unwrap();
        g.backward(loss).unwrap().write_to(&g, &mut w).unwrap();
        let head = if task == Task::Classify { "head" } else { "dtcnn" };
        for prefix in ["hvt", "chan_enc", "chan_dec", head, "refiner"] {
            assert!(w.grad_norm(prefix) > 0.0, "{task:?}: no gradient reached {prefix}");
        }
        let unbound: Vec<&str> = w
            .iter()
            .filter(|(_, t)| t.requires_grad && t.grad.is_none())
            .map(|(n, _)| n)
            .collect();
        assert!(unbound.is_empty(), "{task:?}: parameters outside the graph: {unbound:?}");
    }
}

#[test]
fn single_device_round_equals_central_training() {
    let mut cfg = tiny(Task::Reconstruct);
    cfg.devices = 1;
    cfg.local_epochs = 2;
    let data = build_data(&cfg).unwrap();
    let shard = data.train[0].clone();
    let mut fed = Federation::new(cfg.clone(), data, None, None).unwrap();
    let start = fed.global.clone();
    fed.run_round(0).unwrap();

    let mut dev = DeviceState::new(shard, None).unwrap();
    let central = local_update(&fed.model, &start, &mut dev, &context(&cfg, 2)).unwrap();
    for (name, t) in central.weights.iter() {
        assert_eq!(fed.global.require(name).unwrap().data(), t.data(), "{name}");
    }
}

#[test]
fn classification_loss_falls_over_local_steps() {
    let (mut cfg, model, w, data, teacher) = setup(Task::Classify);
    cfg.lr_start = 1e-3;
    let mut dev = DeviceState::new(data.train[0].clone(), teacher.as_ref()).unwrap();
    let mut ctx = context(&cfg, 1);
    let first = local_update(&model, &w, &mut dev, &ctx).unwrap();
    ctx.epochs = 24;
    let long = local_update(&model, &first.weights, &mut dev, &ctx).unwrap();
    assert!(first.steps + long.steps >= 50);
    let mut ctx_last = ctx;
    ctx_last.epochs = 1;
    ctx_last.round = 1;
    let last = local_update(&model, &long.weights, &mut dev, &ctx_last).unwrap();
    assert!(
        last.mean_loss < first.mean_loss,
        "loss {} -> {}",
        first.mean_loss,
        last.mean_loss
    );
}

#[test]
fn reconstruction_loss_falls_on_eight_images() {
    let (mut cfg, model, w, mut data, _) = setup(Task::Reconstruct);
    cfg.lr_start = 1e-3;
    data.train[0].samples.truncate(8);
    let mut dev = DeviceState::new(data.train[0].clone(), None).unwrap();
    let mut ctx = context(&cfg, 1);
    let first = local_update(&model, &w, &mut dev, &ctx).unwrap();
    ctx.epochs = 30;
    let trained = local_update(&model, &first.weights, &mut dev, &ctx).unwrap();
    ctx.epochs = 1;
    ctx.round = 1;
    let last = local_update(&model, &trained.weights, &mut dev, &ctx).unwrap();
    assert!(last.mean_loss < 0.8 * first.mean_loss, "{} -> {}", first.mean_loss, last.mean_loss);
}

#[test]
fn classification_federation_requires_teacher() {
    let cfg = tiny(Task::Classify);
    let data = build_data(&cfg).unwrap();
    assert!(matches!(
        Federation::new(cfg, data, None, None),
        Err(CoreError::MissingPrerequisite(_))
    ));
}

#[test]
fn teacher_is_deterministic_and_round_trips() {
    let cfg = tiny(Task::Classify);
    let data = build_data(&cfg).unwrap();
    let a = lenient_teacher(&data, 2);
    let b = lenient_teacher(&data, 2);
    for (name, t) in a.weights.iter() {
        assert_eq!(b.weights.require(name).unwrap().data(), t.data());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.flsc");
    a.weights.save(&path).unwrap();
    let back = Teacher::from_weights(ModelWeights::load(&path).unwrap(), 1, 2).unwrap();
    let images: Vec<_> = data.test[0].samples.iter().map(|s| &s.image).collect();
    assert_eq!(a.logits(&images).unwrap(), back.logits(&images).unwrap());
}

#[test]
fn undertrained_teacher_is_rejected() {
    let cfg = tiny(Task::Classify);
    let data = build_data(&cfg).unwrap();
    let images: Vec<_> = data.train[0].samples.iter().map(|x| &x.image).collect();
    // labels unrelated to content cannot be fit to 100% in one epoch
    let labels: Vec<usize> = (0..images.len()).map(|i| (i * 7 / 3) % 2).collect();
    let strict = TeacherConfig {
        max_epochs: 1,
        required_accuracy: 1.0,
        ..TeacherConfig::default()
    };
    assert!(matches!(
        train_teacher(&images, &labels, 2, &strict, 0),
        Err(CoreError::TeacherUndertrained { .. })
    ));
}

fn model_from(values: &[f64], buffer: f64) -> ModelWeights {
    let mut w = ModelWeights::new();
    w.insert("p.weight", Tensor::from_vec(values.to_vec()).trainable());
    w.insert("bn.running_mean", Tensor::scalar(buffer));
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fedavg_is_permutation_invariant_and_convex(
        rows in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 3), -1.0f64..1.0, 1usize..40), 1..6),
        rot in 0usize..6,
    ) {
        let models: Vec<ModelWeights> = rows.iter().map(|(v, b, _)| model_from(v, *b)).collect();
        let pairs: Vec<(&ModelWeights, usize)> = models.iter().zip(rows.iter().map(|r| r.2)).collect();
        let agg = fedavg_aggregate(&pairs).unwrap();
        let mut rotated = pairs.clone();
        rotated.rotate_left(rot % pairs.len());
        let again = fedavg_aggregate(&rotated).unwrap();
        for (name, t) in agg.iter() {
            let u = again.require(name).unwrap();
            for (j, (x, y)) in t.data().iter().zip(u.data()).enumerate() {
                prop_assert!((x - y).abs() <= 1e-12);
                let vals: Vec<f64> = models.iter().map(|m| m.require(name).unwrap().data()[j]).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*x >= lo - 1e-12 && *x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn fedavg_is_linear(
        a in prop::collection::vec(-5.0f64..5.0, 3),
        b in prop::collection::vec(-5.0f64..5.0, 3),
        na in 1usize..30,
        nb in 1usize..30,
        shift in -3.0f64..3.0,
    ) {
        let plain = fedavg_aggregate(&[(&model_from(&a, 0.0), na), (&model_from(&b, 0.0), nb)]).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let sb: Vec<f64> = b.iter().map(|v| v + shift).collect();
        let shifted = fedavg_aggregate(&[(&model_from(&sa, 0.0), na), (&model_from(&sb, 0.0), nb)]).unwrap();
        let p = plain.require("p.weight").unwrap().data();
        let s = shifted.require("p.weight").unwrap().data();
        for (x, y) in p.iter().zip(s) {
            prop_assert!((x + shift - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn classification_vote_ignores_device_order(
        logits in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 4), 1..6),
        rot in 0usize..6,
    ) {
        let scores: Vec<Vec<f64>> = logits.iter().map(|l| softmax_row(l)).collect();
        let mut rotated = scores.clone();
        rotated.rotate_left(rot % scores.len());
        prop_assert_eq!(
            aggregate_results_classification(&scores).unwrap(),
            aggregate_results_classification(&rotated).unwrap()
        );
    }
}

#[test]
fn fedavg_rejects_bad_participants() {
    let a = model_from(&[1.0, 2.0], 0.0);
    let b = model_from(&[1.0], 0.0);
    assert!(fedavg_aggregate(&[]).is_err());
    assert!(fedavg_aggregate(&[(&a, 0)]).is_err());
    assert!(fedavg_aggregate(&[(&a, 1), (&b, 1)]).is_err());
}

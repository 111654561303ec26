use dynsplat_core::dataio::{encode_checkpoint, make_toy_scene, Checkpoint, Frame, Profile, ToyConfig};
use dynsplat_core::hashenc::HashGridConfig;
use dynsplat_core::mask::{prune_masked, MASK_EPSILON};
use dynsplat_core::model::Model;
use dynsplat_core::trainer::{TrainConfig, Trainer};

fn small_scene() -> Vec<Frame> {
    let cfg = ToyConfig {
        width: 24,
        height: 24,
        cameras: 6,
        timestamps: 3,
        held_out_every: 0,
        ..ToyConfig::default()
    };
    make_toy_scene(2, &cfg).unwrap().train_frames()
}

/// Short schedule with every structural update firing within 60 steps.
fn quick_config() -> TrainConfig {
    TrainConfig {
        total_iters: 60,
        warmup_iters: 10,
        deform_depth: 3,
        deform_width: 32,
        deform_skip: 1,
        hash: HashGridConfig {
            log2_table_size: 12,
            levels: 8,
            max_resolution: 256,
            ..HashGridConfig::DESK
        },
        loss: dynsplat_core::losses::LossWeights {
            constraints_from: 20,
            denoise_from: 30,
            ..Default::default()
        },
        mask_prune_from: 30,
        mask_prune_interval: 10,
        densify_from: 5,
        densify_until: 50,
        densify_interval: 10,
        densify_grad_threshold: 1e-5,
        opacity_reset_interval: 40,
        max_points: 400,
        init_points: 60,
        window_capacity: 5,
        window_stride: 2,
        ..TrainConfig::desk()
    }
}

fn checkpoint(t: &Trainer) -> Vec<u8> {
    let ck = Checkpoint {
        model: t.model.clone(),
        config: t.config.clone(),
        iteration: t.iteration as u64,
        extent: t.extent,
        optimizer: Some(t.optimizer.clone()),
    };
    encode_checkpoint(&ck, Profile::Training)
}

fn consistent(t: &Trainer) {
    let n = t.model.cloud.len();
    for f in t.model.cloud.fields() {
        assert_eq!(f.rows(), n);
    }
    let widths = [3, 4, 3, 1, 1];
    for (g, w) in t.optimizer.groups.iter().zip(widths) {
        assert_eq!(g.tensors[0].m.len(), n * w, "{}", g.name);
    }
    assert_eq!(t.densify.count.len(), n);
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let frames = small_scene();
    let run = |seed| {
        let cfg = TrainConfig { seed, ..quick_config() };
        let mut t = Trainer::from_frames(cfg, &frames, None, None).unwrap();
        t.train(&frames, 60, |t, r| {
            assert!(r.is_finite());
            consistent(t);
        })
        .unwrap();
        checkpoint(&t)
    };
    let a = run(7);
    assert_eq!(a, run(7));
    assert_ne!(a, run(8));
}

#[test]
fn warm_up_matches_the_static_model() {
    let frames = small_scene();
    let cfg = quick_config();
    let mut dynamic = Trainer::from_frames(cfg.clone(), &frames, None, None).unwrap();
    let mut ablated = Trainer::from_frames(TrainConfig { deform: false, ..cfg.clone() }, &frames, None, None).unwrap();
    for _ in 0..cfg.warmup_iters {
        let a = dynamic.step(&frames).unwrap();
        let b = ablated.step(&frames).unwrap();
        assert_eq!(a, b);
        assert_eq!(dynamic.model.cloud, ablated.model.cloud);
        assert_eq!(dynamic.model.field, ablated.model.field);
    }
    // Deformation starts right after warm-up.
    let a = dynamic.step(&frames).unwrap();
    let b = ablated.step(&frames).unwrap();
    assert_eq!(a.total, b.total, "zero-initialized heads give identical first deformed render");
    dynamic.step(&frames).unwrap();
    ablated.step(&frames).unwrap();
    assert_ne!(dynamic.model.cloud, ablated.model.cloud);
}

fn render_all(model: &Model, t: &Trainer, frames: &[Frame]) -> Vec<Vec<f64>> {
    frames.iter().map(|f| model.render(&f.camera, &t.forward_options()).unwrap().rgb).collect()
}

#[test]
fn pruning_masked_points_leaves_renders_unchanged() {
    let frames = small_scene();
    let mut t = Trainer::from_frames(quick_config(), &frames, None, None).unwrap();
    t.train(&frames, 15, |_, _| {}).unwrap();
    let n = t.model.cloud.len();
    for (i, v) in t.model.cloud.mask_logit.data_mut().iter_mut().enumerate() {
        if i % 3 == 0 {
            *v = -8.0;
        }
    }
    let before = render_all(&t.model, &t, &frames);
    let (pruned, remap) = prune_masked(&t.model.cloud, MASK_EPSILON).unwrap();
    assert_eq!(pruned.len(), n - n.div_ceil(3));
    assert!(remap.source.iter().all(|i| i % 3 != 0));
    let mut after_model = t.model.clone();
    after_model.cloud = pruned.clone();
    assert_eq!(before, render_all(&after_model, &t, &frames));

    let removed = t.prune_masked().unwrap();
    assert_eq!(removed, n.div_ceil(3));
    assert_eq!(t.model.cloud, pruned);
    consistent(&t);
    t.train(&frames, 5, |_, _| {}).unwrap();
}

#[test]
fn opacity_reset_caps_opacity_and_clears_moments() {
    let frames = small_scene();
    let mut t = Trainer::from_frames(quick_config(), &frames, None, None).unwrap();
    t.train(&frames, 5, |_, _| {}).unwrap();
    t.reset_opacity();
    assert!((0..t.model.cloud.len()).all(|i| t.model.cloud.opacity(i) <= 0.01 + 1e-12));
    assert!(t.optimizer.groups[3].tensors[0].m.iter().all(|&v| v == 0.0));
}

#[test]
fn densification_respects_the_point_cap() {
    let frames = small_scene();
    let cfg = TrainConfig {
        max_points: 61,
        ..quick_config()
    };
    let mut t = Trainer::from_frames(cfg, &frames, None, None).unwrap();
    t.train(&frames, 30, |t, _| assert!(t.model.cloud.len() <= 61)).unwrap();
    assert!(t.events.iter().any(|e| e.contains("cap")), "{:?}", t.events);
}

#[test]
fn point_ids_follow_structural_updates() {
    let frames = small_scene();
    let mut t = Trainer::from_frames(quick_config(), &frames, None, None).unwrap();
    t.train(&frames, 12, |_, _| {}).unwrap();
    let extra = t.model.cloud.select(&[0, 1, 2]);
    let before = t.point_ids.clone();
    let ids = t.insert_points(&extra).unwrap();
    assert_eq!(ids.len(), 3);
    assert!(ids.iter().all(|id| !before.contains(id)));
    assert_eq!(&t.point_ids[before.len()..], &ids[..]);
    consistent(&t);
    t.train(&frames, 48, |t, _| {
        let mut sorted = t.point_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), t.model.cloud.len());
    })
    .unwrap();
}

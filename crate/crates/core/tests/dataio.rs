use std::path::Path;

use dynsplat_core::dataio::{
    decode_checkpoint, decode_ppm, encode_checkpoint, encode_ppm, load_frames, load_manifest, make_toy_scene,
    parse_manifest, read_image, storage_report, write_image, write_toy_scene, Checkpoint, Intrinsics, Profile, Split,
    StorageReport, ToyConfig, HEADER_BYTES,
};
use dynsplat_core::gaussians::GaussianCloud;
use dynsplat_core::hashenc::{Aabb, HashGridConfig};
use dynsplat_core::trainer::{OptimizerState, TrainConfig, Trainer};
use dynsplat_core::{Error, Image};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TINY_HASH: HashGridConfig = HashGridConfig {
    levels: 2,
    log2_table_size: 6,
    feat_dim: 2,
    min_resolution: 2,
    max_resolution: 4,
    decoder_width: 4,
};

fn small_checkpoint(seed: u64, n: usize) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::empty();
    for _ in 0..n {
        cloud.push(
            [rng.random(), rng.random(), rng.random()],
            [1.0, rng.random(), rng.random(), rng.random()],
            [rng.random_range(-3.0..0.0); 3],
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
        );
    }
    let config = TrainConfig {
        seed,
        deform_depth: 2,
        deform_width: 8,
        deform_skip: 0,
        hash: TINY_HASH,
        ..TrainConfig::desk()
    };
    let t = Trainer::new(config, cloud, Aabb { min: [0.0; 3], max: [1.0; 3] }, 2.5).unwrap();
    let mut optimizer = OptimizerState::new(&t.model);
    for g in &mut optimizer.groups {
        g.step = rng.random_range(0..1000);
        for m in &mut g.tensors {
            m.m.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            m.v.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        }
    }
    Checkpoint {
        model: t.model,
        config: t.config,
        iteration: rng.random_range(0..5000),
        extent: 2.5,
        optimizer: Some(optimizer),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn training_profile_round_trips_bit_exactly(seed in 0u64..10_000, n in 0usize..40) {
        let ck = small_checkpoint(seed, n);
        let bytes = encode_checkpoint(&ck, Profile::Training);
        let (back, profile) = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(profile, Profile::Training);
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(encode_checkpoint(&back, Profile::Training), bytes);
    }

    #[test]
    fn export_profile_round_trips_at_f32(seed in 0u64..10_000, n in 1usize..40) {
        let ck = small_checkpoint(seed, n);
        let bytes = encode_checkpoint(&ck, Profile::Export);
        let (back, profile) = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(profile, Profile::Export);
        prop_assert!(back.optimizer.is_none());
        for (a, b) in back.model.cloud.mu.data().iter().zip(ck.model.cloud.mu.data()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
        prop_assert_eq!(back.model.field.aabb, ck.model.field.aabb);
        // f32 values survive a second pass unchanged.
        prop_assert_eq!(encode_checkpoint(&back, Profile::Export), bytes);
    }

    #[test]
    fn any_flipped_payload_byte_is_detected(seed in 0u64..1000, pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let ck = small_checkpoint(seed, 5);
        let mut bytes = encode_checkpoint(&ck, Profile::Training);
        let i = HEADER_BYTES + pos.index(bytes.len() - HEADER_BYTES);
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_checkpoint(&bytes).is_err());
    }
}

#[test]
fn header_errors_are_specific() {
    let ck = small_checkpoint(1, 3);
    let bytes = encode_checkpoint(&ck, Profile::Training);
    let mut v = bytes.clone();
    v[4] = 2;
    assert!(matches!(decode_checkpoint(&v), Err(Error::Version { found: 2, expected: 1 })));
    let mut m = bytes.clone();
    m[0] = b'X';
    assert!(matches!(decode_checkpoint(&m), Err(Error::Checkpoint(_))));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    let mut c = bytes.clone();
    let last = c.len() - 20;
    c[last] ^= 0xff;
    assert!(matches!(decode_checkpoint(&c), Err(Error::Checksum { .. })));
}

#[test]
fn storage_report_counts_the_export_file() {
    let ck = small_checkpoint(3, 25);
    let r = storage_report(&ck);
    assert_eq!(r.total_bytes, encode_checkpoint(&ck, Profile::Export).len());
    assert_eq!(r.point_bytes, 25 * 14 * 4);
    assert_eq!(r.deform_bytes, ck.model.deform.parameter_count() * 4);
    assert_eq!(r.hash_table_bytes, ck.model.field.table.len() * 4);
}

#[test]
fn storage_arithmetic_at_63k_points() {
    let r = StorageReport::from_parts(63_000, 0, 0, 0, 0);
    assert_eq!(r.point_bytes, 3_528_000);
    assert!((r.point_mb - 3.528).abs() < 1e-12);
    assert!((r.point_ratio_vs_sh - 14.0 / 59.0).abs() < 1e-15);
    assert!(r.point_ratio_vs_sh <= 0.24);
    assert_eq!(r.sh_baseline_bytes, 63_000 * 59 * 4);
}

#[test]
fn dnerf_manifest_is_read_with_aliases() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/dnerf/transforms_train.json");
    let text = std::fs::read_to_string(&fixture).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = parse_manifest(&text, dir.path()).unwrap();
    assert_eq!(m.frames.len(), 3);
    assert_eq!(m.frames[0].image, dir.path().join("./train/r_000.png"));
    assert_eq!(m.frames[1].time, 0.5);
    assert_eq!(m.frames[2].split, Split::Test);
    assert!(matches!(m.frames[0].intrinsics, Intrinsics::FovX(f) if (f - 0.6911112070083618).abs() < 1e-15));
    // Blender cameras look down -z; the identity pose at z = 4 looks back at the origin.
    let c2w = m.frames[1].camera_to_world;
    assert_eq!([c2w[0][0], c2w[1][1], c2w[2][2]], [1.0, -1.0, -1.0]);

    std::fs::create_dir_all(dir.path().join("train")).unwrap();
    for k in 0..3 {
        write_image(&dir.path().join(format!("train/r_00{k}.png")), &Image::filled(6, 4, [0.5, 0.25, 1.0])).unwrap();
    }
    let frames = load_frames(&m).unwrap();
    let cam = &frames[1].camera;
    assert_eq!((cam.width, cam.height), (6, 4));
    assert!(cam.to_camera([0.0; 3])[2] > 3.99);
    assert!((cam.fx - 3.0 / (0.6911112070083618f64 / 2.0).tan()).abs() < 1e-9);
}

#[test]
fn manifest_errors_name_frame_and_field() {
    let bad = r#"{"frames": [{"image": "a.png", "camera_to_world": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]], "fov_x": 0.5, "time": 0.0},
                             {"image": "b.png", "camera_to_world": [[2,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]], "fov_x": 0.5, "time": 0.0}]}"#;
    let e = parse_manifest(bad, Path::new(".")).unwrap_err();
    assert!(matches!(e, Error::Manifest { frame: 1, field: "camera_to_world", .. }), "{e}");
    let no_time = r#"{"frames": [{"image": "a", "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]], "fl_x": 20}]}"#;
    let e = parse_manifest(no_time, Path::new(".")).unwrap_err();
    assert!(matches!(e, Error::Manifest { frame: 0, field: "time", .. }), "{e}");
    assert!(load_manifest(Path::new("/definitely/missing.json")).is_err());
}

#[test]
fn images_round_trip_through_png_and_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f64> = (0..5 * 3 * 3).map(|i| (i * 7 % 256) as f64 / 255.0).collect();
    let img = Image::new(5, 3, data).unwrap();
    for name in ["a.png", "a.ppm"] {
        let p = dir.path().join(name);
        write_image(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back, img, "{name}");
    }
    assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    assert!(write_image(&dir.path().join("a.bmp"), &img).is_err());
}

#[test]
fn toy_scenes_are_deterministic_and_written_completely() {
    let cfg = ToyConfig {
        width: 16,
        height: 16,
        cameras: 5,
        timestamps: 3,
        ..ToyConfig::default()
    };
    let a = make_toy_scene(5, &cfg).unwrap();
    let b = make_toy_scene(5, &cfg).unwrap();
    let c = make_toy_scene(6, &cfg).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_ne!(a.frames, c.frames);
    assert_eq!(a.frames.len(), 15);
    assert_eq!(a.test_frames().len(), 3);
    for (blob, traj) in a.blobs.iter().zip(&a.trajectories).take(cfg.static_blobs) {
        assert!(traj.iter().all(|p| *p == blob.center));
    }

    let dir = tempfile::tempdir().unwrap();
    write_toy_scene(&a, dir.path()).unwrap();
    let m = load_manifest(&dir.path().join("manifest.json")).unwrap();
    let frames = load_frames(&m).unwrap();
    assert_eq!(frames.len(), 15);
    for (f, g) in frames.iter().zip(&a.frames) {
        assert_eq!(f.split, g.split);
        assert!((f.camera.time - g.camera.time).abs() < 1e-12);
        assert!((f.camera.fx - g.camera.fx).abs() < 1e-9);
        // PNG stores 8 bits per channel.
        assert!(f.image.data.iter().zip(&g.image.data).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
    }
    assert!(dir.path().join("trajectories.json").exists());
}

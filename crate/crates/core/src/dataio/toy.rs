use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::gaussians::{covariance_3d, project, Camera};
use crate::image::Image;
use crate::rasterizer::{render_reference, RenderSettings, RenderablePointSet};
use crate::trainer::stream_rng;

use super::imageio::write_image;
use super::manifest::{manifest_to_json, Frame, FrameSpec, Intrinsics, SceneManifest, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub blobs: usize,
    pub static_blobs: usize,
    pub cameras: usize,
    pub timestamps: usize,
    pub width: usize,
    pub height: usize,
    /// Camera distance from the origin.
    pub radius: f64,
    pub fov_x: f64,
    /// Every `held_out_every`-th camera is a test view (0 disables).
    pub held_out_every: usize,
    pub opacity: f64,
    pub scale_range: [f64; 2],
    /// Blob centers lie in `[-spread, spread]^3`.
    pub spread: f64,
    pub amplitude_range: [f64; 2],
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            blobs: 12,
            static_blobs: 4,
            cameras: 20,
            timestamps: 8,
            width: 64,
            height: 64,
            radius: 4.0,
            fov_x: 0.8,
            held_out_every: 5,
            opacity: 0.95,
            scale_range: [0.12, 0.25],
            spread: 0.9,
            amplitude_range: [0.1, 0.3],
        }
    }
}

/// One ground-truth blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyBlob {
    pub center: [f64; 3],
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
    pub is_static: bool,
    /// Per-axis sinusoid amplitude, frequency (cycles over `t in [0, 1]`) and phase.
    pub amplitude: [f64; 3],
    pub frequency: [f64; 3],
    pub phase: [f64; 3],
}

impl ToyBlob {
    pub fn position(&self, t: f64) -> [f64; 3] {
        [0, 1, 2].map(|k| {
            self.center[k]
                + self.amplitude[k] * (std::f64::consts::TAU * self.frequency[k] * t + self.phase[k]).sin()
                - self.amplitude[k] * self.phase[k].sin()
        })
    }
}

#[derive(Clone, Debug)]
pub struct ToyScene {
    pub config: ToyConfig,
    pub seed: u64,
    pub blobs: Vec<ToyBlob>,
    pub times: Vec<f64>,
    pub cameras: Vec<Camera>,
    pub frames: Vec<Frame>,
    /// `trajectories[b][k]` is blob `b` at `times[k]`.
    pub trajectories: Vec<Vec<[f64; 3]>>,
}

/// Ground-truth render of the blobs at `cam.time`.
pub fn render_blobs(blobs: &[ToyBlob], cam: &Camera, background: [f64; 3]) -> Result<Image> {
    let mut set = RenderablePointSet::default();
    for b in blobs {
        let cov = covariance_3d(b.rotation, b.scale)?;
        if let Some(p) = project(b.position(cam.time), &cov, cam) {
            set.push(p.mu2d, p.sigma2d, b.opacity, b.color, p.depth);
        }
    }
    let out = render_reference(&set, cam, &RenderSettings { background, ..RenderSettings::default() });
    Ok(Image::from(&out))
}

/// Camera positions on a golden-angle spiral over the band of elevations
/// between -50 and 60 degrees.
pub fn toy_cameras(cfg: &ToyConfig) -> Vec<Camera> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..cfg.cameras)
        .map(|i| {
            let u = (i as f64 + 0.5) / cfg.cameras as f64;
            let elev = (-50.0 + 110.0 * u).to_radians();
            let az = golden * i as f64;
            let eye = [
                cfg.radius * elev.cos() * az.cos(),
                cfg.radius * elev.cos() * az.sin(),
                cfg.radius * elev.sin(),
            ];
            Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], cfg.fov_x, cfg.width, cfg.height)
        })
        .collect()
}

pub fn make_toy_scene(seed: u64, cfg: &ToyConfig) -> Result<ToyScene> {
    if cfg.static_blobs > cfg.blobs || cfg.timestamps == 0 || cfg.cameras == 0 {
        return Err(Error::Config("toy scene needs static_blobs <= blobs and at least one camera and timestamp".into()));
    }
    let mut rng = stream_rng(seed, 7, 0);
    let mut blobs = Vec::with_capacity(cfg.blobs);
    for b in 0..cfg.blobs {
        let is_static = b < cfg.static_blobs;
        let center = [0; 3].map(|_| rng.random_range(-cfg.spread..=cfg.spread));
        let mut q: [f64; 4] = [0; 4].map(|_| rng.random_range(-1.0..1.0));
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        q.iter_mut().for_each(|v| *v /= qn);
        let scale = [0; 3].map(|_| rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]));
        let color = [0; 3].map(|_| rng.random_range(0.15..=0.95));
        let (amplitude, frequency, phase) = if is_static {
            ([0.0; 3], [0.0; 3], [0.0; 3])
        } else {
            (
                [0; 3].map(|_| rng.random_range(cfg.amplitude_range[0]..=cfg.amplitude_range[1])),
                [0; 3].map(|_| rng.random_range(0.5..=1.0)),
                [0; 3].map(|_| rng.random_range(0.0..std::f64::consts::TAU)),
            )
        };
        blobs.push(ToyBlob {
            center,
            rotation: q,
            scale,
            color,
            opacity: cfg.opacity,
            is_static,
            amplitude,
            frequency,
            phase,
        });
    }
    let times: Vec<f64> = if cfg.timestamps == 1 {
        vec![0.0]
    } else {
        (0..cfg.timestamps).map(|k| k as f64 / (cfg.timestamps - 1) as f64).collect()
    };
    let cameras = toy_cameras(cfg);
    let mut frames = Vec::with_capacity(cameras.len() * times.len());
    for (c, cam) in cameras.iter().enumerate() {
        let split = if cfg.held_out_every > 0 && (c + 1) % cfg.held_out_every == 0 {
            Split::Test
        } else {
            Split::Train
        };
        for (k, &t) in times.iter().enumerate() {
            let cam = cam.clone().with_time(t);
            let image = render_blobs(&blobs, &cam, [0.0; 3])?;
            frames.push(Frame {
                name: format!("c{c:02}_t{k:02}"),
                camera: cam,
                image,
                split,
            });
        }
    }
    let trajectories = blobs.iter().map(|b| times.iter().map(|&t| b.position(t)).collect()).collect();
    Ok(ToyScene {
        config: cfg.clone(),
        seed,
        blobs,
        times,
        cameras,
        frames,
        trajectories,
    })
}

impl ToyScene {
    pub fn train_frames(&self) -> Vec<Frame> {
        self.frames.iter().filter(|f| f.split == Split::Train).cloned().collect()
    }

    pub fn test_frames(&self) -> Vec<Frame> {
        self.frames.iter().filter(|f| f.split == Split::Test).cloned().collect()
    }

    /// Manifest describing the frames as written by [`write_toy_scene`].
    pub fn manifest(&self, root: &Path) -> SceneManifest {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let w = &f.camera.world_to_cam;
                let mut c2w = [[0.0; 4]; 4];
                for i in 0..3 {
                    for j in 0..3 {
                        c2w[i][j] = w[j][i];
                    }
                }
                let c = f.camera.center();
                for i in 0..3 {
                    c2w[i][3] = c[i];
                }
                c2w[3][3] = 1.0;
                FrameSpec {
                    image: root.join("images").join(format!("{}.png", f.name)),
                    camera_to_world: c2w,
                    intrinsics: Intrinsics::Focal(f.camera.fx),
                    time: f.camera.time,
                    split: f.split,
                }
            })
            .collect();
        SceneManifest {
            root: root.to_path_buf(),
            frames,
            seed_points: None,
            aabb: None,
            near: 0.01,
            far: 100.0,
            background: [0.0; 3],
        }
    }
}

/// Writes `manifest.json`, `images/*.png` and `trajectories.json` into `dir`.
pub fn write_toy_scene(scene: &ToyScene, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for f in &scene.frames {
        write_image(&images.join(format!("{}.png", f.name)), &f.image)?;
    }
    let manifest = manifest_to_json(&scene.manifest(dir));
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("json")).map_err(|e| Error::io(&path, e))?;
    let traj = json!({
        "seed": scene.seed,
        "config": scene.config,
        "times": scene.times,
        "blobs": scene.blobs,
        "trajectories": scene.trajectories,
    });
    let path = dir.join("trajectories.json");
    std::fs::write(&path, serde_json::to_string_pretty(&traj).expect("json")).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::diffkernel::Array;
use crate::error::{Error, Result};
use crate::gaussians::{is_rotation, Camera, Mat3};
use crate::hashenc::Aabb;
use crate::image::Image;

use super::imageio::read_image_over;

/// Camera axis convention of `camera_to_world`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Convention {
    /// x right, y down, looking down +z.
    OpenCv,
    /// x right, y up, looking down -z (Blender / D-NeRF).
    OpenGl,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Intrinsics {
    /// Horizontal field of view in radians.
    FovX(f64),
    /// Focal length in pixels (square pixels, centered principal point).
    Focal(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSpec {
    /// Resolved against the manifest directory.
    pub image: PathBuf,
    /// OpenCV convention after loading.
    pub camera_to_world: [[f64; 4]; 4],
    pub intrinsics: Intrinsics,
    pub time: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneManifest {
    pub root: PathBuf,
    pub frames: Vec<FrameSpec>,
    pub seed_points: Option<PathBuf>,
    pub aabb: Option<Aabb>,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
}

/// A loaded training or evaluation view.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub name: String,
    pub camera: Camera,
    pub image: Image,
    pub split: Split,
}

fn field_err(frame: usize, field: &'static str, reason: impl Into<String>) -> Error {
    Error::Manifest {
        frame,
        field,
        reason: reason.into(),
    }
}

fn get<'a>(obj: &'a Map<String, Value>, names: &[&str]) -> Option<&'a Value> {
    names.iter().find_map(|n| obj.get(*n))
}

fn as_matrix(v: &Value, frame: usize, field: &'static str) -> Result<[[f64; 4]; 4]> {
    let rows = v.as_array().ok_or_else(|| field_err(frame, field, "expected a 4x4 array"))?;
    if rows.len() != 4 && rows.len() != 3 {
        return Err(field_err(frame, field, format!("expected 4 rows, got {}", rows.len())));
    }
    let mut m = [[0.0, 0.0, 0.0, 0.0], [0.0; 4], [0.0; 4], [0.0, 0.0, 0.0, 1.0]];
    for (i, row) in rows.iter().enumerate() {
        let row = row.as_array().ok_or_else(|| field_err(frame, field, "rows must be arrays"))?;
        if row.len() != 4 {
            return Err(field_err(frame, field, format!("row {i} has {} entries", row.len())));
        }
        for (j, x) in row.iter().enumerate() {
            m[i][j] = x
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| field_err(frame, field, format!("entry ({i}, {j}) is not a finite number")))?;
        }
    }
    if (m[3][0], m[3][1], m[3][2], m[3][3]) != (0.0, 0.0, 0.0, 1.0) {
        return Err(field_err(frame, field, "last row must be (0, 0, 0, 1)"));
    }
    let r: Mat3 = [[m[0][0], m[0][1], m[0][2]], [m[1][0], m[1][1], m[1][2]], [m[2][0], m[2][1], m[2][2]]];
    if !is_rotation(&r, 1e-6) {
        return Err(field_err(frame, field, "rotation block is not orthonormal"));
    }
    Ok(m)
}

fn as_vec3(v: &Value) -> Option<[f64; 3]> {
    let a = v.as_array()?;
    if a.len() != 3 {
        return None;
    }
    Some([a[0].as_f64()?, a[1].as_f64()?, a[2].as_f64()?])
}

/// Parses a manifest document. See `docs/formats.md` for the schema and the
/// accepted D-NeRF aliases.
pub fn parse_manifest(text: &str, root: &Path) -> Result<SceneManifest> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: root.to_path_buf(),
        message: e.to_string(),
    })?;
    let top = doc.as_object().ok_or_else(|| Error::Parse {
        path: root.to_path_buf(),
        message: "manifest must be a JSON object".into(),
    })?;
    let dnerf = top.contains_key("camera_angle_x");
    let convention = match top.get("convention").and_then(Value::as_str) {
        Some("opencv") => Convention::OpenCv,
        Some("opengl") | Some("blender") => Convention::OpenGl,
        Some(other) => return Err(Error::Config(format!("unknown camera convention `{other}`"))),
        None if dnerf => Convention::OpenGl,
        None => Convention::OpenCv,
    };
    let shared_fov = top.get("camera_angle_x").and_then(Value::as_f64);
    let shared_focal = top.get("focal").and_then(Value::as_f64);
    let default_split = match top.get("split").and_then(Value::as_str) {
        Some("test") | Some("val") => Split::Test,
        _ => Split::Train,
    };
    let frames_v = top
        .get("frames")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse {
            path: root.to_path_buf(),
            message: "missing `frames` array".into(),
        })?;

    let mut frames = Vec::with_capacity(frames_v.len());
    let mut raw_times = Vec::with_capacity(frames_v.len());
    for (i, f) in frames_v.iter().enumerate() {
        let f = f.as_object().ok_or_else(|| field_err(i, "frame", "expected an object"))?;
        let image = get(f, &["image", "file_path"])
            .and_then(Value::as_str)
            .ok_or_else(|| field_err(i, "image", "missing image path"))?;
        let mut image = root.join(image);
        if image.extension().is_none() {
            image.set_extension("png");
        }
        let m = get(f, &["camera_to_world", "transform_matrix"])
            .ok_or_else(|| field_err(i, "camera_to_world", "missing"))?;
        let mut c2w = as_matrix(m, i, "camera_to_world")?;
        if convention == Convention::OpenGl {
            for row in c2w.iter_mut().take(3) {
                row[1] = -row[1];
                row[2] = -row[2];
            }
        }
        let intrinsics = match (
            get(f, &["fov_x", "camera_angle_x"]).and_then(Value::as_f64).or(shared_fov),
            get(f, &["focal", "fl_x"]).and_then(Value::as_f64).or(shared_focal),
        ) {
            (_, Some(fl)) if fl > 0.0 => Intrinsics::Focal(fl),
            (Some(fov), _) if fov > 0.0 && fov < std::f64::consts::PI => Intrinsics::FovX(fov),
            _ => return Err(field_err(i, "fov_x", "need a field of view in (0, pi) or a positive focal length")),
        };
        let t = get(f, &["time", "timestamp", "t"])
            .and_then(Value::as_f64)
            .ok_or_else(|| field_err(i, "time", "missing timestamp"))?;
        if !t.is_finite() || t < 0.0 {
            return Err(field_err(i, "time", format!("{t} is not a valid timestamp")));
        }
        raw_times.push(t);
        let split = match f.get("split").and_then(Value::as_str) {
            None => default_split,
            Some("train") => Split::Train,
            Some("test") | Some("val") => Split::Test,
            Some(other) => return Err(field_err(i, "split", format!("unknown split `{other}`"))),
        };
        frames.push(FrameSpec {
            image,
            camera_to_world: c2w,
            intrinsics,
            time: t,
            split,
        });
    }

    // Integer frame indices are normalized to [0, 1].
    let max_t = raw_times.iter().cloned().fold(0.0, f64::max);
    if max_t > 1.0 {
        if raw_times.iter().all(|t| t.fract() == 0.0) {
            for f in &mut frames {
                f.time /= max_t;
            }
        } else {
            let i = raw_times.iter().position(|&t| t > 1.0).unwrap_or(0);
            return Err(field_err(i, "time", "timestamps must lie in [0, 1] or be integer frame indices"));
        }
    }

    let seed_points = top
        .get("seed_points")
        .and_then(Value::as_str)
        .map(|p| root.join(p));
    let aabb = match top.get("aabb") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let min = v.get("min").and_then(as_vec3);
            let max = v.get("max").and_then(as_vec3);
            match (min, max) {
                (Some(min), Some(max)) if (0..3).all(|k| min[k] < max[k]) => Some(Aabb { min, max }),
                _ => return Err(Error::Config("aabb needs `min` < `max` as 3-vectors".into())),
            }
        }
    };
    let near = top.get("near").and_then(Value::as_f64).unwrap_or(0.01);
    let far = top.get("far").and_then(Value::as_f64).unwrap_or(100.0);
    let background = top.get("background").and_then(as_vec3).unwrap_or([0.0; 3]);
    Ok(SceneManifest {
        root: root.to_path_buf(),
        frames,
        seed_points,
        aabb,
        near,
        far,
        background,
    })
}

pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, root)
}

/// Canonical JSON form of a manifest; image paths relative to `root`.
pub fn manifest_to_json(m: &SceneManifest) -> Value {
    let frames: Vec<Value> = m
        .frames
        .iter()
        .map(|f| {
            let image = f.image.strip_prefix(&m.root).unwrap_or(&f.image);
            let mut o = json!({
                "image": image.to_string_lossy(),
                "camera_to_world": f.camera_to_world,
                "time": f.time,
                "split": match f.split { Split::Train => "train", Split::Test => "test" },
            });
            match f.intrinsics {
                Intrinsics::FovX(v) => o["fov_x"] = json!(v),
                Intrinsics::Focal(v) => o["focal"] = json!(v),
            }
            o
        })
        .collect();
    let mut doc = json!({
        "convention": "opencv",
        "near": m.near,
        "far": m.far,
        "background": m.background,
        "frames": frames,
    });
    if let Some(p) = &m.seed_points {
        doc["seed_points"] = json!(p.strip_prefix(&m.root).unwrap_or(p).to_string_lossy());
    }
    if let Some(b) = &m.aabb {
        doc["aabb"] = json!({ "min": b.min, "max": b.max });
    }
    doc
}

/// Camera for a frame of size `width x height`.
pub fn frame_camera(spec: &FrameSpec, width: usize, height: usize, near: f64, far: f64) -> Camera {
    let c2w = &spec.camera_to_world;
    // world_to_cam = [R^T, -R^T t]
    let mut w2c = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            w2c[i][j] = c2w[j][i];
        }
        w2c[i][3] = -(0..3).map(|k| c2w[k][i] * c2w[k][3]).sum::<f64>();
    }
    w2c[3][3] = 1.0;
    let fx = match spec.intrinsics {
        Intrinsics::Focal(f) => f,
        Intrinsics::FovX(fov) => 0.5 * width as f64 / (0.5 * fov).tan(),
    };
    Camera {
        world_to_cam: w2c,
        fx,
        fy: fx,
        cx: 0.5 * width as f64,
        cy: 0.5 * height as f64,
        width,
        height,
        near,
        far,
        time: spec.time,
    }
}

/// Reads every image of the manifest and builds the cameras.
pub fn load_frames(m: &SceneManifest) -> Result<Vec<Frame>> {
    m.frames
        .iter()
        .map(|spec| {
            let image = read_image_over(&spec.image, m.background)?;
            let camera = frame_camera(spec, image.width, image.height, m.near, m.far);
            Ok(Frame {
                name: spec
                    .image
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                camera,
                image,
                split: spec.split,
            })
        })
        .collect()
}

/// Reads `x y z [r g b]` rows; blank lines and `#` comments are skipped.
pub fn parse_seed_points(text: &str, path: &Path) -> Result<Array> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split([' ', '\t', ',']).filter(|s| !s.is_empty()).map(str::parse).collect();
        let vals = vals.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?;
        if vals.len() != 3 && vals.len() != 6 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: expected 3 or 6 values, got {}", n + 1, vals.len()),
            });
        }
        rows.push([vals[0], vals[1], vals[2]]);
    }
    Ok(Array::from_rows(&rows))
}

pub fn load_seed_points(path: &Path) -> Result<Array> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_seed_points(&text, path)
}

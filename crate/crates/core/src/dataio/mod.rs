//! Datasets, toy scenes, images and checkpoints.

mod checkpoint;
mod imageio;
mod manifest;
mod toy;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, storage_report, Checkpoint, Profile,
    StorageReport, HEADER_BYTES, MAGIC, POINT_FLOATS, SECTION_OVERHEAD, SH_BASELINE_FLOATS, VERSION,
};
pub use imageio::{decode_ppm, depth_to_image, encode_ppm, read_image, read_image_over, write_image};
pub use manifest::{
    frame_camera, load_frames, load_manifest, load_seed_points, manifest_to_json, parse_manifest, parse_seed_points,
    Convention, Frame, FrameSpec, Intrinsics, SceneManifest, Split,
};
pub use toy::{make_toy_scene, render_blobs, toy_cameras, write_toy_scene, ToyBlob, ToyConfig, ToyScene};

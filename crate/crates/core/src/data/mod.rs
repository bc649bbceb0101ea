//! Procedural ground truth: scenes, an analytic oracle renderer and datasets.

mod dataset;
mod oracle;
mod scene;

pub use dataset::{
    input_rig, load_view, make_dataset, read_depth, read_xyz, scene_dir, scene_seed, viewpoints, write_depth, Manifest,
    Protocol, Rig, SceneBundle, View, INPUT_RIG_AZIMUTHS, SURFACE_POINTS,
};
pub use oracle::{cast, intersect, oracle_render, sample_surface, OracleView};
pub use scene::{generate_scene, Primitive, SceneSpec, Texture, EXTENT};

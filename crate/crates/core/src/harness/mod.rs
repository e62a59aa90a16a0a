//! Scenes, configuration, experiment orchestration and persistence.
pub mod calib;
pub mod config;
pub mod experiment;
pub mod render;
pub mod synthetic;

pub use calib::{load_kitti_calibration, parse_kitti_calibration, parse_kitti_calibration_with, serialize_kitti_calibration, CalibKeys, KITTI_DEFAULT_SIZE};
pub use config::{apply_override, ExperimentConfig, ModelConfig, SceneSource, SweepConfig, OUTPUT_ENV};
pub use experiment::{
    build_model, build_model_with, default_sweep_texture, evaluate_scenes, load_any_patch, load_kitti_disparity, load_scenes, run_attack, run_eval, run_render,
    run_sweep, write_panels, RunReport, SweepKind, SweepRow,
};
pub use render::{colorize_disparity, save_disparity_panel, save_line_plot, Series};
pub use synthetic::{constant_shift_pair, generate_synthetic_scene, PlaneLayer, SyntheticSceneSpec, TextureKind};

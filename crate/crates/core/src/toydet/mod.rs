//! A small synthetic multi-dataset detection task and a linear detector
//! trained on it, used to compare weighting strategies end to end.

mod model;
mod passes;
mod scene;
mod train;

pub use model::{HeadOutput, ToyModel};
pub use passes::{
    detect, evaluate_detections, evaluate_model, mc_passes, mine_detections, ScenarioEval, EVAL_MIN_SCORE,
    MAX_DETECTIONS,
};
pub use scene::{dataset_name, gen_scenario, mix_seed, scene_features, Scenario, ScenarioSpec, SyntheticScene};
pub use train::{
    image_objective, image_targets, prepare_images, retrain, train, ImageObjective, LossRecord, TrainConfig,
    TrainImage, TrainOutcome,
};

//! Synthetic moving-target selection datasets: scene kinematics, vehicle
//! motion, endpoint sampling, splits and JSONL IO.

mod dataset;
mod motion;
mod record;
mod scene;
mod split;
pub mod truth;

pub use dataset::{
    build_dataset, gen_trial, generate_users, trial_seed, Dataset, DatasetConfig, DatasetHeader,
    ScenarioConfig, DATASET_SCHEMA_VERSION, DEFAULT_RATE_HZ, MAX_TRIALS, SIZES_2D, SIZES_3D,
    SPEEDS_2D, SPEEDS_3D,
};
pub use motion::{simulate_motion_window, simulate_with_impulses, vibration_channels, Impulse, VibrationProfile};
pub use record::{TargetRecord, TrialRecord, UserRecord};
pub use scene::{reflect, Scene};
pub use split::{few_shot_subset, split_dataset, Split, SplitConfig};

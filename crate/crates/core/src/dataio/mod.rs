//! Synthetic phantoms, pair construction, preprocessing and file formats.

mod config;
mod files;
mod pair;
pub mod phantom;
mod preprocess;
mod synth;
mod workflow;

pub use config::{RunConfig, RUN_CONFIG_SCHEMA};
pub use files::{
    dataset_pairs, loss_history_csv, read_dataset, read_deformation, read_pair, read_velocity,
    read_volume, write_dataset, write_dataset_index, write_deformation, write_loss_history,
    write_pair, write_velocity, write_volume, VolumeHeader, DATASET_FORMAT, LOSS_CSV_VERSION,
    PAIR_FORMAT, VOLUME_FORMAT, VOLUME_MAGIC, VOLUME_VERSION,
};
pub use pair::RegistrationPair;
pub use phantom::{generate_phantom, rasterize, Phantom, PhantomSpec, Tumor};
pub use preprocess::{
    body_box, normalize_hu, plan, preprocess, preprocess_pair, PreprocessConfig, ResampleTransform,
};
pub use synth::{
    synth_dataset, synth_pair, synthetic_dose, wave_velocity, PairSpec, TumorScenario,
};
pub use workflow::{
    ablation_csv, ablation_row, pair_name, prepare_pair, read_registration_maps, register_prepared,
    run_ablation, write_registration, AblationRow, PreparedPair, ABLATION_CSV_VERSION,
    ABLATION_ORDER, REGISTRATION_FORMAT, REGISTRATION_VERSION,
};

//! Seeded randomness, on-disk formats and the synthetic data generator.

pub mod pnm;
pub mod seed;
pub mod synthetic;
pub mod tensor_file;
pub mod update;

pub use pnm::export_image_grid;
pub use seed::SeedStream;
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use tensor_file::{
    load_dataset, load_labels, load_params, load_tensor, save_dataset, save_labels, save_params,
    save_tensor,
};
pub use update::{load_update, save_update, UpdateHeader};

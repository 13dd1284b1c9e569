//! Dataset ingestion, artifact export, positional-embedding analysis and
//! the configuration file used by the command-line tool.

pub mod config;
pub mod dataset;
pub mod export;
pub mod spectrum;
pub mod synth;

pub use config::{metrics_csv, sig6, DataConfig, RunConfig, METRICS_HEADER};
pub use dataset::{load_dataset, load_image, save_png, Dataset, DatasetSpec};
pub use export::{export_pairs, export_stego, residual_visual, RESIDUAL_GAIN};
pub use spectrum::{pe_spectrum, SpectrumReport};
pub use synth::{synthetic_image, write_synthetic_dataset};

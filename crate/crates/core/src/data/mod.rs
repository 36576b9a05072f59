//! Synthetic geography and radio maps, normalization, PGM images and the
//! on-disk dataset layout.

mod channel;
mod dataset;
mod geo;
mod pgm;

pub use channel::{denormalize_dbm, normalize_dbm, shadow_fading_field, synth_radio_map, RadioMap, SynthChannelParams, MAX_LOSS_DB};
pub use dataset::{load_dataset, split_indices, write_dataset, Dataset, DatasetManifest, GenerateOptions, Sample, SampleEntry, DATASET_FORMAT_VERSION};
pub use geo::{assemble_input, assemble_batch, generate_layout, los_wall_count, Cell, GeoMap, LayoutParams};
pub use pgm::{decode_pgm, decode_pgm16, encode_pgm, encode_pgm16, PgmImage};

//! Transmit-side grid construction and the frequency-domain link `y = h·x + n`.

mod constellation;
mod dataset;
mod grid;

pub use constellation::Constellation;
pub use dataset::write_dataset_csv;
pub use grid::{
    apply_channel, apply_channel_noiseless, build_grid, extract_data, snr_to_n0, LinkConfig,
    PilotPattern, ResourceGrid, Span,
};

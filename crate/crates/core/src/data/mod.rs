//! File formats and the synthetic phantom dataset.

pub mod manifest;
pub mod pgm;
pub mod phantom;
pub mod softmap;

pub use manifest::{DatasetManifest, ManifestRecord, Sample, Split};
pub use pgm::{read_image, read_labels, write_image, write_labels};
pub use phantom::{generate_phantom_dataset, generate_slices, perturb_boundaries, PhantomConfig, PhantomSlice};
pub use softmap::{read_softmap, write_softmap};

//! Synthetic shapes dataset, folder ingestion, manifests and the tensor
//! archive format.

mod ingest;
mod manifest;
mod synth;
mod tensor_io;

pub use ingest::{image_to_tensor, ingest_folder, IngestOptions};
pub use manifest::{
    load_manifest, sha256_hex, ClassEntry, Dataset, DatasetManifest, ImageEntry, Split,
    MANIFEST_FILE,
};
pub use synth::{
    assign_splits, split_counts, synth_generate, ClassStyle, ShapeFamily, SynthSpec,
};
pub use tensor_io::{load_tensor, read_tensor, save_tensor, write_tensor};

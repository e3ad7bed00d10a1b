//! Manifests, curation, stratified splits and the synthetic corpus.

pub mod curate;
pub mod manifest;
pub mod split;
pub mod synth;

pub use curate::{curate_manifest, pixel_hash, CurationReport, DropReason, DroppedRecord, DEFAULT_MIN_SIDE};
pub use manifest::{build_manifest, DatasetManifest, Label, ManifestRecord, Split};
pub use split::{apportion, split_manifest};
pub use synth::{make_synthetic_dataset, synth_image, Artifact, SynthSpec};

//! Feature records, the GADF file format and dataset manifests.

pub mod gadf;
pub mod manifest;
pub mod record;

pub use gadf::{decode_record, encode_record, read_record, write_record, FormatError};
pub use manifest::{
    load_manifest, save_manifest, DatasetManifest, LoadedManifest, LoadedRecord, ManifestEntry,
    ManifestError, ManifestWarning, Split,
};
pub use record::{FeatureRecord, Label, RecordError};

//! Frozen-embedding extraction and linear/MLP probe classifiers.

mod embed;
mod labels;
mod store;
mod train;

pub use embed::{embed_corpus, embed_image_file, embed_region, tile_offsets};
pub use labels::{coarsen_labels, LabelMapping};
pub use store::{
    export_embeddings_csv, read_embeddings, write_embeddings, EmbeddingRecord, EMBED_MAGIC,
    EMBED_VERSION,
};
pub use train::{predict, train_probe, Probe, ProbeConfig, ProbeKind, SelectionMetric};

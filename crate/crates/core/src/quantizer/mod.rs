//! Discrete pre-training targets: a frozen convolutional stem turns each
//! stride-8 patch into a feature vector, a K-Means codebook maps features to
//! cluster ids, and [`trigram_report`] groups patches whose three consecutive
//! labels coincide.

mod features;
mod kmeans;
mod labels;
mod trigram;

pub use features::{ExtractorSpec, FeatureExtractor};
pub use kmeans::{fit_kmeans, Codebook, CodebookMeta, KMeansConfig, CODEBOOK_MAGIC, CODEBOOK_VERSION};
pub use labels::{
    assign_labels, fit_codebook, label_corpus, label_samples, labels_for, read_label_store,
    write_label_store, LabelRecord,
};
pub use trigram::{trigram_report, TrigramCrop, TrigramGroup, MAX_CROPS};

#[cfg(test)]
mod tests;

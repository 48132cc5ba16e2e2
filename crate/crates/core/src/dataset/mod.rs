//! Synthetic text-line corpora: rendering, storage, augmentation and batching.
//!
//! The pre-training path uses [`batch_images`], which has no augmentation
//! parameter at all; only [`batch`] can augment.

mod alphabet;
mod augment;
mod batch;
mod corpus;
mod image;
mod render;

pub use alphabet::{Alphabet, BOS, EOS, FIRST_CHAR, PAD};
pub use augment::{augment, AugmentationConfig};
pub use batch::{batch, batch_images, frame_targets, Batch, ImageBatch};
pub use corpus::{
    file_hash, generate_corpus, make_corpus, write_corpus, write_manifest, Corpus, CorpusSpec,
    LineSample, ManifestRecord, Split, IMAGE_DIR, MANIFEST_FILE,
};
pub use image::{normalize_height, LineImage, LINE_HEIGHT, PATCH_WIDTH};
pub use render::{render_line, render_line_with_layout, FontSpec, GlyphAtlas, GlyphSpan, Jitter};

pub(crate) use corpus::read_json_lines;

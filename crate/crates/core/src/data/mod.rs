//! Synthetic tri-modal corpus: prompt captions, tokenization, sample
//! synthesis, augmentation and storage.

pub mod augment;
pub mod prompt;
pub mod store;
pub mod synth;
pub mod vocab;

pub use augment::{augment, AugmentKind, AugmentPolicy, Augmentation};
pub use prompt::{build_prompt_caption, PromptBank};
pub use store::{generate_dataset, CorpusConfig, Dataset, DatasetManifest, SampleEntry, Split};
pub use synth::{synthesize_triplet, CategorySpec, SynthConfig, Triplet};
pub use vocab::{Vocab, BEGIN, PAD};

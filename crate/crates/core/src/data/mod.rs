pub mod augment;
pub mod dataset;
pub mod synthetic;

pub use augment::{augment, AugmentConfig};
pub use dataset::{export_dataset, load_dataset, load_image, save_png};
pub use synthetic::{gen_synthetic, grammar_tokenizer, CaptionSample, DatasetKind, SyntheticSpec};

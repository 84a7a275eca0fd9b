//! Procedural shape images and linked pairs annotated with the attributes
//! they share and the attributes that differ.

mod io;
mod names;
mod oracle;
mod pair;
mod render;
mod scene;

pub use io::{dataset_pair, generate, read_dataset, read_ppm, write_dataset, write_ppm, ANNOTATIONS_FILE};
pub use names::{AttributeName, SYNONYMS};
pub use oracle::{classify_all, decode_exact, oracle_classify, Classification, CONFIDENCE_RATIO};
pub use pair::{sample_pair, Annotation, PairRecord};
pub use render::{from_level, mask, render, to_level, Image, MIN_SIDE};
pub use scene::{AttrId, AttrScene, BgColor, Brightness, FgColor, Position, ShapeKind, Size};

//! Instruction templates and serialization of task episodes into
//! source/target pairs.

mod episode;
mod pretrain;
mod serialize;
mod template;

pub use episode::{load_manifest, parse_manifest, Episode, ImageSource, ManifestRecord, ObjectLabel, Pretraining, TaskKind};
pub use pretrain::{instruct_rounds, make_mim, make_mlm, make_od};
pub use serialize::{serialize, target_ids, Limits, RenderedPair, DEFAULT_MAX_PATCHES};
pub use template::{render_instruction, template_for, template_text, Segment, Template, IMAGE_PLACEHOLDER};

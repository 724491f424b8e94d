//! Sequential models, their parameters and checkpoint files.

mod checkpoint;
mod model;
mod spec;

pub use checkpoint::{Checkpoint, Selection, FORMAT_VERSION};
pub use model::{build_model, BoundModel, ParameterSet, Role};
pub use spec::{Layer, ModelSpec, TeacherSize};

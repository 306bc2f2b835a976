//! Neuro-symbolic concept learning over synthetic scenes.
//!
//! Object features are judged against concept embeddings living in one
//! 64-dim subspace per attribute ("superordinate"). Programs are executed
//! softly over per-object attention masks so that answer likelihoods train
//! the mappings, embeddings and concept-to-subspace priors.

pub mod bias;
pub mod cluster;
pub mod concept;
pub mod dataset;
pub mod eval;
pub mod executor;
pub mod probe;
pub mod program;
pub mod scene;
pub mod tensor;
pub mod trainer;

pub use program::{Answer, Program, ProgramStep, QASample, QType, StepKind};
pub use scene::{AttrId, AttributeSchema, BiasCondition, ConceptId, Scene, Universe};

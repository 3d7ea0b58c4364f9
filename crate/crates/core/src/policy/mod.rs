//! Token policy over drug-name vocabularies, the per-drug classifier head,
//! embedding fusion, and supervised fine-tuning.
//!
//! One parameter set serves both roles. The classifier scores a patient-drug
//! pair as `u . fused(d) + b`, where `u` comes from a single tanh hidden layer
//! over the patient context. The list editor reuses the same trunk: at each
//! position, a name symbol's logit adds the log-mean-exp of the scores of the
//! candidate drugs whose names continue the current run with that symbol.
//! Scores in edit mode also see whether the drug is already listed and how
//! many listed drugs it interacts with. Gradients are closed-form.

mod model;
mod params;
mod sft;

pub use model::{decide, fuse_embeddings, sigmoid, Policy, Prompt};
pub use params::{PolicyConfig, PolicyDims, PolicyParams, Tensor, TensorRole};
pub use sft::{
    classifier_loss_and_grad, sft_loss_and_grad, sft_update, train_classifier, train_list,
    SftConfig, SftExample,
};

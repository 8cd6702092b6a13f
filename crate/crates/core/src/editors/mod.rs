//! Editing methods: full finetuning, LoRA, and Backpack sense finetuning,
//! all under a KL-regularized objective with ball-constrained epoch choice.

mod config;
mod full;
mod lora;
mod objective;
mod senses;
mod trace;
mod trainer;

pub use config::{EditConfig, Method, MAX_EPOCHS, REG_SAMPLE};
pub use full::full_finetune;
pub use lora::{centred_layers, lora_finetune, AdaptedModel, LoraAdapters, LoraFactor};
pub use objective::{kl_regularized_objective, kl_rows, log_softmax_rows, mean_kl, RegSample};
pub use senses::{
    analytic_nll_sense_gradient, regularization_mass, select_senses, sense_edit, sense_finetune, sense_importance,
    SenseDelta, SenseEditedModel, SenseSelection,
};
pub use trace::{select_epoch_index, EpochRecord, EpochSummary, EpochTrace};

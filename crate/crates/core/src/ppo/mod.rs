//! Policy optimization with a clipped surrogate objective.

mod adam;
mod gae;
mod head;
mod loss;
mod mlp;
mod train;
mod weights;

pub use adam::AdamState;
pub use gae::gae_advantages;
pub use head::{ActionHead, HeadKind};
pub use loss::{clipped_objective, clipped_surrogate_loss, normalize, value_loss, LossOutput, PpoBatch, PpoSample};
pub use mlp::{stack_rows, ForwardCache, Mlp};
pub use train::{
    train, write_diagnostics_header, write_diagnostics_row, IterationStats, PpoConfig, Trainer, TrainerCheckpoint,
    DIAGNOSTIC_COLUMNS,
};
pub use weights::{decode, encode, load_weights, load_weights_expecting, save_weights, FORMAT_VERSION, MAGIC};

//! Gradients of the classification loss and the finetuning loop.

mod backward;
mod train;

pub use backward::{backward_sample, batch_loss, cross_entropy, loss_and_grads};
pub use train::{
    accuracy, cosine_lr, finetune, sgd_momentum_step, validation_split, write_train_log,
    Checkpoint, FinetuneResult, LogRow, RunResult, TrainConfig,
};

//! Linear probes: multinomial logistic regression fitted with L-BFGS.

mod lbfgs;
mod logistic;

pub use lbfgs::{lbfgs_minimize, LbfgsConfig, LbfgsResult, Termination};
pub use logistic::{
    argmax, evaluate_accuracy, fit_probe, fit_probe_from, softmax_xent, softmax_xent_loss_grad,
    FeatureMatrix, FeatureSet, FitConfig, FitMeta, ProbeModel, Standardizer, STD_FLOOR,
};

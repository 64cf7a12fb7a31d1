//! Behavior recognition: Gaussian HMMs, the layered DHMM recognizer and
//! baseline probabilistic classifiers.

mod bic;
mod classifiers;
mod dhmm;
mod hmm;

pub use bic::select_hidden_states_bic;
pub use classifiers::{classifier_fit, classifier_predict, ClassifierConfig, ClassifierKind, ClassifierModel};
pub use dhmm::{
    dhmm_meta_features, dhmm_recognize, dhmm_train, Calibration, CalibrationMode, DhmmLayer, DhmmStack,
    DhmmStream, DhmmTrainingConfig, LabeledSequence, MetaFeature,
};
pub use hmm::{
    hmm_fit_baum_welch, hmm_fit_baum_welch_traced, hmm_forward_loglik, softmax, BaumWelchConfig,
    BaumWelchFit, GaussianHmm, VARIANCE_FLOOR,
};

//! Supervised training of the toy models and the purifier training loop
//! with its pixel, feature and adversarial losses.

mod losses;
mod nrp;
mod supervised;

pub use losses::{
    critic_loss_from_scores, critic_loss_on_tape, loss_adv_from_scores, loss_adv_on_tape, loss_feat, loss_feat_on_tape,
    loss_img, loss_img_on_tape, loss_total, GanForm, LossWeights, REFERENCE_CROP,
};
pub use nrp::{
    make_training_adversary, train_nrp, train_nrp_with_hook, Ablation, AdversaryMode, TrainConfig, TrainLog,
    TrainModels, TrainRecord,
};
pub use supervised::{train_supervised, SupervisedConfig};

//! The learned pairwise similarity network and its training procedures.

mod end_to_end;
mod loss;
mod model;
mod train;
mod warmup;

pub use end_to_end::{build_encoder, encode_dataset, train_end_to_end, EndToEndConfig, EndToEndModel};
pub use loss::{pair_loss, pair_loss_grad, pair_target, PairLabel};
pub use model::{build_model, score_pair, ArchConfig, ArchPreset, InputNorm, SimNetModel};
pub(crate) use train::train_pair_network;
pub use train::{
    is_difficult, mean_pair_loss, mine_difficult_pairs, mine_difficult_pairs_with, mining_pool, train,
    train_with_refinement, Convergence, EpochRecord, Phase, TrainConfig, TrainingLog,
};
pub use warmup::{pearson, random_unit_vector, warmup, LrSchedule, WarmupConfig, WarmupReport};

//! Training objectives and the teacher-side pipeline.

pub mod loss;
pub mod objective;
pub mod teacher;

pub use loss::{flops_reg_loss, infonce_loss, kld_loss, l1_reg_loss, mse_dense, mse_rep_loss};
pub use objective::{
    disco_batch_loss, prepare_examples, BatchContext, CandidateSet, DocStore, LossWeights,
    PreparedExample, StepLoss,
};
pub use teacher::{
    mine_hard_negatives, teacher_scores, Aggregation, MinedNegatives, ScoreRecord, Teacher,
    TeacherEnsemble, TrainingExample,
};

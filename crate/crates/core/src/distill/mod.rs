//! Distilling demonstration-conditioned teacher behavior into steering adapters.

pub mod cache;
pub mod loss;
pub mod train;

pub use cache::{cache_teacher, teacher_record, CacheOutcome, TeacherCache, TeacherCacheRecord};
pub use loss::{topk_kl, topk_kl_node, weighted_ce};
pub use train::{
    case_gradients, check_cache, evaluate_objective, prepare, supervision_mass, train_adapters, DistillConfig, DistillReport, EpochLog,
    LossBreakdown, PreparedCase, StepLog, SupervisionMass,
};

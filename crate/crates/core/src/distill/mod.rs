//! Second-stage distillation: a three-expert retrieval index, softmax kNN
//! voting with a majority ensemble, the dual confidence gate, and the
//! low-alignment and boundary escalation queues.

mod index;
mod uncertainty;
mod vote;

pub use index::{build_index, expert_query, extend_index, ExpertId, ExpertQuery, ExpertStores, SubIndex, VectorIndex};
pub use uncertainty::{
    boundary_candidates, boundary_strength, low_fas_pool_size, sample_low_fas, EscalationItem, EscalationReason,
    EscalationStatus, LowFasCandidate,
};
pub use vote::{
    decide, ensemble_vote, expert_predict, fas, fas_all, gate, label_confidence, predict, softmax_vote, Decision,
    ExpertVerdict, Neighbor, Outcome, Prediction, Thresholds, VoteParams,
};

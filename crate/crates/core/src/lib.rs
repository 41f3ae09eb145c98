//! Peer-review simulation driven by language-model agents.
//!
//! Reviewers, authors and area chairs are rendered as prompts from a
//! template set ([`personas`]), executed through a chat provider
//! ([`provider`]) across five phases ([`pipeline`]), and every artifact is
//! persisted in a resumable, content-hashed run directory ([`store`]).
//! [`experiments`] enumerates and schedules settings with baseline reuse,
//! and [`analysis`] turns finished runs into rating and agreement reports.

pub mod analysis;
pub mod corpus;
pub mod documents;
pub mod experiments;
pub mod hashing;
pub mod personas;
pub mod pipeline;
pub mod provider;
pub mod store;

pub use analysis::{AgreementReport, Histogram, RatingStats, ReasonDistribution};
pub use corpus::{Corpus, DecisionCategory, PaperRecord};
pub use documents::{
    DiscussionTurn, MetaReview, PaperDecision, RebuttalDocument, ReviewDocument, Speaker,
    UpdatedReview,
};
pub use experiments::{ExperimentSetting, ReusePlan, RunOptions};
pub use personas::{
    AcStyle, Commitment, Intention, Knowledgeability, PhaseId, PromptTemplateSet, ReviewerProfile,
};
pub use pipeline::{MechanismFlags, PaperSimState, SimulationConfig};
pub use provider::{
    ChatProvider, ChatRequest, ChatResponse, EmbeddingVector, MockProvider, ProviderConfig,
    ProviderError, RemoteProvider,
};
pub use store::{ArtifactKind, RunHandle, RunManifest, Store};

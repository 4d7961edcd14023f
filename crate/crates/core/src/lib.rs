//! Evaluation harness for the moral beliefs of chat-completion models.
//!
//! The pipeline has three stages that share one corpus and one provider
//! gateway:
//!
//! * **choice elicitation** ([`elicitation`]): word-level judgments and
//!   scenario-level binary choices with self-reported firmness,
//! * **principle ranking** ([`rank`]): choices become directed principle
//!   pairs which are aggregated with iterative Luce spectral ranking,
//! * **debate** ([`debate`]): a fixed two-round exchange against an opponent
//!   that always argues the other option.
//!
//! Responses are cached and transcripts are appended through [`runstore`], so
//! every experiment can be replayed without touching the network. Every
//! reported number is computed by [`metrics`].

pub mod cli;
pub mod corpus;
pub mod debate;
pub mod elicitation;
pub mod exec;
pub mod gateway;
pub mod metrics;
pub mod parsing;
pub mod prompts;
pub mod rank;
pub mod runstore;

pub use corpus::{Corpus, MoralPrinciple, MoralScenario, MoralWord, OptionLabel, Variant};
pub use gateway::{ChatMessage, ChatRequest, ChatResponse, ProviderConfig};
pub use rank::{ComparisonPair, RankingResult};

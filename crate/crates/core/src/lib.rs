//! Core of a self-hosted service for running chat conversations between
//! study participants and an LLM: interface configuration, the chat relay,
//! persistence, the survey integration snippet and transcript export/merge.

pub mod engine;
pub mod export;
pub mod gateway;
pub mod model;
pub mod snippet;
pub mod store;

pub use engine::{ChatEngine, EngineError, EngineSettings, Reply, CAP_REACHED_MESSAGE};
pub use model::{
    apply_defaults, AccessMode, InterfaceConfig, InterfaceId, InterfaceSettings, MessageExchange,
    ParticipantSession, PartialSettings, ResearcherAccount, ResearcherId, SessionId, Temperature,
};
pub use store::{Store, StoreError};

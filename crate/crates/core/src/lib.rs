//! Graph-structured agentic retrieval memory.
//!
//! The crate is organised around the reasoning loop of a multimodal retrieval
//! agent:
//!
//! - [`graph`]: the memory graph, a DAG whose nodes are retrieval steps and
//!   whose edges are logical dependencies between them.
//! - [`energy`]: scores every retained visual item by relevance, structural
//!   centrality, age and downstream feedback, then splits a fixed token budget
//!   across the top-ranked items.
//! - [`protocol`]: the `<thinking>`/`<tool_call>` wire format spoken by the
//!   policy, plus prompt and observation rendering.
//! - [`retrieval`]: a deterministic in-memory multimodal corpus and search
//!   engine.
//! - [`runtime`]: the episode driver tying the pieces together.
//! - [`ggpo`]: trainer-side trajectory segmentation, pruning masks, group
//!   advantages and the masked clipped objective.
//! - [`stats`]: per-episode diagnostics over exported trajectories.

pub mod canonical;
pub mod energy;
pub mod ggpo;
pub mod graph;
pub mod protocol;
pub mod retrieval;
pub mod runtime;
pub mod stats;

pub use energy::{
    allocate_budget, budget_to_resolution, intrinsic_energy, normalize_priority, recursive_energy,
    select_top_k, shape_memory, BudgetAssignment, EnergyError, EnergyParams, EnergyReport,
    ItemEnergy, Modality, VisualItem, VisualItemSeed,
};
pub use ggpo::{
    detect_valuable_retrieval, export_training_batch, group_advantage, masked_objective,
    pruning_mask, segment_trajectory, GgpoError, MaskEntry, MaskTag, ObjectiveInputs,
    PreparedGroup, PreparedRollout, PruningMask, TrajectorySegment,
};
pub use graph::{GraphError, LinearizedContext, MemoryGraph, MemoryNode, NodeKind, PersistError};
pub use protocol::{
    format_timestamp, parse_response, render_context, render_observation, serialize_action,
    Action, MemorizeDecision, ParsedResponse, PromptBundle, ProtocolError,
};
pub use retrieval::{
    build_corpus, embed, sample_frames, search, Corpus, CorpusItem, Embedding, Observation,
    RetrievalError,
};
pub use runtime::{
    judge, run_episode, EpisodeConfig, JudgeMode, Policy, RemotePolicy, RuntimeError,
    ScriptedPolicy, SessionState, Trajectory,
};

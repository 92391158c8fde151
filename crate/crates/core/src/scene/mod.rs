//! Synthetic driving scenarios, ego-centric contexts and normalization.

mod context;
mod corpus;
mod generate;
pub mod geometry;
mod normalize;
pub mod route;
pub mod vehicle;

pub use context::{
    extract_context, SceneCaps, SceneContext, AGENT_FEATURES, EGO_HISTORY_FEATURES, EGO_STATE_FEATURES,
    LANE_FEATURES, NAVI_FEATURES, OBSTACLE_FEATURES,
};
pub use corpus::{load_corpus, save_corpus, write_corpus, CorpusReader};
pub use generate::{
    expert_control, generate_corpus, generate_scenario, AgentCategory, AgentSpec, GeneratorConfig, LaneFamily,
    ScenarioParams, ScenarioRecord, DT, HISTORY_STEPS, HORIZON_STEPS, LANE_OFFSET, LOG_FUTURE_STEPS,
};
pub use normalize::{FeatureStats, NormalizationStats};

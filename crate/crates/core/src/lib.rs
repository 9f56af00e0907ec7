//! Neuro-symbolic reinforcement learning: multi-hop reasoning over
//! predicate matrices with learned attention, trained on symbolic
//! environments, with chain-rule extraction from the learned weights.

pub mod attention;
pub mod envs;
pub mod numerics;
pub mod policy;
pub mod reasoning;
pub mod rules;
pub mod symbolic;

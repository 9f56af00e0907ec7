//! Symbolic environments and an exact value-iteration oracle.

pub mod blocks;
pub mod keydoor;
pub mod mdp;

use std::hash::Hash;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::symbolic::{syntax::SyntaxError, GroundAtom, SymbolicState, Vocabulary, VocabularyError};

pub use blocks::{BlocksConfig, BlocksWorld, Task};
pub use keydoor::{KeyDoor, KeyDoorConfig};
pub use mdp::{enumerate, value_iteration, EnumeratedMdp, OptimalPolicy, RewardKind, ValueTable};

/// Default cap on enumerated state spaces.
pub const STATE_CAP: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("`{0}` is not an action of this environment")]
    BadAction(String),
    #[error("state space exceeds {cap} states")]
    Capacity { cap: usize },
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error(transparent)]
    Vocabulary(#[from] VocabularyError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: SymbolicState,
    /// Reward used for training.
    pub reward: f64,
    /// Contribution to the evaluation return.
    pub score: f64,
    /// The episode ended by reaching a goal.
    pub terminal: bool,
    /// The episode ended by hitting the horizon.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

/// One stochastic successor of a state-action pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome<S> {
    pub probability: f64,
    pub next: S,
    pub reward: f64,
    pub score: f64,
    pub terminal: bool,
}

/// Pure transition model over a compact state type.
pub trait Dynamics {
    type State: Clone + Eq + Hash;

    fn vocabulary(&self) -> &Vocabulary;
    fn initial(&self) -> Self::State;
    /// A complete state list, when the space is known in closed form.
    fn all_states(&self) -> Option<Vec<Self::State>> {
        None
    }
    /// The instance's action list; identical in every state.
    fn actions(&self, state: &Self::State) -> Vec<GroundAtom>;
    fn outcomes(&self, state: &Self::State, action: &GroundAtom) -> Result<Vec<Outcome<Self::State>>, EnvError>;
    fn encode(&self, state: &Self::State) -> SymbolicState;
    fn horizon(&self) -> usize;
}

/// An episodic environment with an internal clock.
pub trait Environment {
    fn vocabulary(&self) -> &Vocabulary;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> SymbolicState;
    fn observation(&self) -> SymbolicState;
    /// Candidate action atoms for the current state, sorted.
    fn actions(&self) -> &[GroundAtom];
    /// Validity of each entry of [`Environment::actions`], when masking is enabled.
    fn action_mask(&self) -> Option<Vec<bool>>;
    fn step(&mut self, action: &GroundAtom, rng: &mut ChaCha8Rng) -> Result<StepOutcome, EnvError>;
    fn horizon(&self) -> usize;
}

//! Symbolic abstraction of the first room of Montezuma's Revenge: walk
//! between six locations, fetch the key, then reach the door.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dynamics, EnvError, Environment, Outcome, StepOutcome};
use crate::symbolic::{EntityId, GroundAtom, PredicateId, SymbolicState, Vocabulary};

pub const ENTITIES: [&str; 8] = [
    "man",
    "key",
    "middle_ladder",
    "door",
    "left_of_skulls",
    "lower_left_ladder",
    "lower_right_ladder",
    "key_spot",
];
pub const LOCATIONS: std::ops::Range<usize> = 2..8;

const MAN: usize = 0;
const KEY: usize = 1;
const DOOR: usize = 3;
const KEY_SPOT: usize = 7;

const AT_SPOT: PredicateId = PredicateId(0);
const WITH_OBJECT: PredicateId = PredicateId(1);
const WITHOUT_OBJECT: PredicateId = PredicateId(2);
const PATH_EXIST: PredicateId = PredicateId(3);
const KEY_TO_DOOR: PredicateId = PredicateId(4);
const MOVE: PredicateId = PredicateId(5);

pub fn vocabulary() -> Vocabulary {
    Vocabulary::new(
        ENTITIES,
        ["AtSpot", "WithObject", "WithoutObject", "PathExist", "KeyToDoor"],
        ["Move"],
    )
    .expect("static vocabulary")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyDoorConfig {
    /// Undirected edges between location names.
    pub adjacency: Vec<(String, String)>,
    pub start: String,
    pub decision_penalty: f64,
    pub key_reward: f64,
    pub door_reward: f64,
    /// Include the key and door rewards in the training reward.
    pub extrinsic_training: bool,
    pub success_probability: f64,
    pub horizon: usize,
}

impl Default for KeyDoorConfig {
    fn default() -> Self {
        let edges = [
            ("middle_ladder", "left_of_skulls"),
            ("left_of_skulls", "lower_left_ladder"),
            ("lower_left_ladder", "lower_right_ladder"),
            ("lower_right_ladder", "key_spot"),
            ("middle_ladder", "door"),
        ];
        Self {
            adjacency: edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            start: "middle_ladder".into(),
            decision_penalty: -0.5,
            key_reward: 100.0,
            door_reward: 300.0,
            extrinsic_training: true,
            success_probability: 1.0,
            horizon: 20,
        }
    }
}

/// Parses `a-b, c-d` edge lists.
pub fn parse_adjacency(text: &str) -> Result<Vec<(String, String)>, EnvError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|edge| {
            let (a, b) = edge
                .split_once('-')
                .ok_or_else(|| EnvError::Config(format!("edge `{edge}` is not `from-to`")))?;
            Ok((a.trim().to_string(), b.trim().to_string()))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyDoorState {
    pub at: usize,
    pub has_key: bool,
}

#[derive(Clone, Debug)]
pub struct KeyDoor {
    config: KeyDoorConfig,
    vocab: Vocabulary,
    adjacent: [[bool; 8]; 8],
    start: usize,
    actions: Vec<GroundAtom>,
    state: KeyDoorState,
    steps: usize,
}

fn location(vocab: &Vocabulary, name: &str) -> Result<usize, EnvError> {
    let id = vocab.entity(name)?.0;
    if LOCATIONS.contains(&id) {
        Ok(id)
    } else {
        Err(EnvError::Config(format!("`{name}` is not a location")))
    }
}

impl KeyDoor {
    pub fn new(config: KeyDoorConfig) -> Result<Self, EnvError> {
        let vocab = vocabulary();
        let mut adjacent = [[false; 8]; 8];
        for (a, b) in &config.adjacency {
            let (a, b) = (location(&vocab, a)?, location(&vocab, b)?);
            if a == b {
                return Err(EnvError::Config("a location cannot be adjacent to itself".into()));
            }
            adjacent[a][b] = true;
            adjacent[b][a] = true;
        }
        let start = location(&vocab, &config.start)?;
        if !(0.0..=1.0).contains(&config.success_probability) || config.success_probability == 0.0 {
            return Err(EnvError::Config("success probability must be in (0, 1]".into()));
        }
        if config.horizon == 0 {
            return Err(EnvError::Config("horizon must be positive".into()));
        }
        let actions = LOCATIONS
            .map(|l| GroundAtom::new(MOVE, EntityId(MAN), EntityId(l)))
            .collect();
        Ok(Self {
            config,
            vocab,
            adjacent,
            start,
            actions,
            state: KeyDoorState {
                at: start,
                has_key: false,
            },
            steps: 0,
        })
    }

    pub fn config(&self) -> &KeyDoorConfig {
        &self.config
    }

    pub fn state(&self) -> KeyDoorState {
        self.state
    }

    fn target(&self, action: &GroundAtom) -> Result<usize, EnvError> {
        if action.predicate != MOVE || action.subject.0 != MAN || !LOCATIONS.contains(&action.object.0) {
            return Err(EnvError::BadAction(format!("{action:?}")));
        }
        Ok(action.object.0)
    }

    /// Arrival at `to` from `state`: `(next, score, terminal)`.
    fn arrive(&self, state: KeyDoorState, to: usize) -> (KeyDoorState, f64, bool) {
        let mut next = KeyDoorState { at: to, ..state };
        let mut score = 0.0;
        if to == KEY_SPOT && !state.has_key {
            next.has_key = true;
            score += self.config.key_reward;
        }
        let terminal = to == DOOR && next.has_key;
        if terminal {
            score += self.config.door_reward;
        }
        (next, score, terminal)
    }

    fn reward(&self, score: f64) -> f64 {
        self.config.decision_penalty + if self.config.extrinsic_training { score } else { 0.0 }
    }

    pub fn encode_state(&self, s: &KeyDoorState) -> SymbolicState {
        let mut m = SymbolicState::empty(&self.vocab);
        let set = |m: &mut SymbolicState, p, a: usize, b: usize| m.set(&GroundAtom::new(p, EntityId(a), EntityId(b)), true);
        set(&mut m, AT_SPOT, MAN, s.at);
        set(&mut m, if s.has_key { WITH_OBJECT } else { WITHOUT_OBJECT }, MAN, KEY);
        if !s.has_key {
            set(&mut m, AT_SPOT, KEY, KEY_SPOT);
        }
        set(&mut m, KEY_TO_DOOR, KEY, DOOR);
        for a in LOCATIONS {
            for b in LOCATIONS {
                if self.adjacent[a][b] {
                    set(&mut m, PATH_EXIST, a, b);
                }
            }
        }
        m
    }

    /// Every (location, key flag) pair.
    pub fn all_states() -> Vec<KeyDoorState> {
        LOCATIONS
            .flat_map(|at| [false, true].map(|has_key| KeyDoorState { at, has_key }))
            .collect()
    }
}

impl Environment for KeyDoor {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) -> SymbolicState {
        self.state = KeyDoorState {
            at: self.start,
            has_key: false,
        };
        self.steps = 0;
        self.observation()
    }

    fn observation(&self) -> SymbolicState {
        self.encode_state(&self.state)
    }

    fn actions(&self) -> &[GroundAtom] {
        &self.actions
    }

    fn action_mask(&self) -> Option<Vec<bool>> {
        None
    }

    fn step(&mut self, action: &GroundAtom, rng: &mut ChaCha8Rng) -> Result<StepOutcome, EnvError> {
        let to = self.target(action)?;
        let p = self.config.success_probability;
        let moved = self.adjacent[self.state.at][to] && (p >= 1.0 || rng.gen_bool(p));
        let (next, score, terminal) = if moved {
            self.arrive(self.state, to)
        } else {
            (self.state, 0.0, false)
        };
        self.state = next;
        self.steps += 1;
        Ok(StepOutcome {
            state: self.observation(),
            reward: self.reward(score),
            score,
            terminal,
            truncated: !terminal && self.steps >= self.config.horizon,
        })
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }
}

impl Dynamics for KeyDoor {
    type State = KeyDoorState;

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn initial(&self) -> KeyDoorState {
        KeyDoorState {
            at: self.start,
            has_key: false,
        }
    }

    fn all_states(&self) -> Option<Vec<KeyDoorState>> {
        Some(Self::all_states())
    }

    fn actions(&self, _state: &KeyDoorState) -> Vec<GroundAtom> {
        self.actions.clone()
    }

    fn outcomes(&self, state: &KeyDoorState, action: &GroundAtom) -> Result<Vec<Outcome<KeyDoorState>>, EnvError> {
        let to = self.target(action)?;
        let stay = Outcome {
            probability: 1.0,
            next: *state,
            reward: self.reward(0.0),
            score: 0.0,
            terminal: false,
        };
        if !self.adjacent[state.at][to] {
            return Ok(vec![stay]);
        }
        let p = self.config.success_probability;
        let (next, score, terminal) = self.arrive(*state, to);
        let go = Outcome {
            probability: p,
            next,
            reward: self.reward(score),
            score,
            terminal,
        };
        Ok(if p >= 1.0 {
            vec![go]
        } else {
            vec![go, Outcome { probability: 1.0 - p, ..stay }]
        })
    }

    fn encode(&self, state: &KeyDoorState) -> SymbolicState {
        self.encode_state(state)
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }
}

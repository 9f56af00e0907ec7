//! Blocks World with UNSTACK, STACK and ON tasks.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dynamics, EnvError, Environment, Outcome, StepOutcome};
use crate::symbolic::syntax::{Cursor, SyntaxError};
use crate::symbolic::{EntityId, GroundAtom, PredicateId, SymbolicState, Vocabulary};

pub const BLOCK_NAMES: [&str; 7] = ["a", "b", "c", "d", "e", "f", "g"];
pub const MAX_BLOCKS: usize = 7;
/// Entity index of the floor.
pub const FLOOR: usize = 7;
pub const CAPACITY: usize = 8;

const INACTIVE: u8 = u8::MAX;
const ON: PredicateId = PredicateId(0);
const TOP: PredicateId = PredicateId(1);
const GOAL_ON: PredicateId = PredicateId(2);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Unstack,
    Stack,
    On,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Unstack, Task::Stack, Task::On];

    pub fn name(self) -> &'static str {
        match self {
            Task::Unstack => "unstack",
            Task::Stack => "stack",
            Task::On => "on",
        }
    }

    /// Named evaluation variants: `(name, initial piles)`.
    pub fn variants(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Task::Unstack => &[
                ("training", "((a,b,c,d))"),
                ("swap_top_2", "((a,b,d,c))"),
                ("2_columns", "((a,b),(c,d))"),
                ("5_blocks", "((a,b,c,d,e))"),
                ("6_blocks", "((a,b,c,d,e,f))"),
                ("7_blocks", "((a,b,c,d,e,f,g))"),
            ],
            Task::Stack => &[
                ("training", "((a),(b),(c),(d))"),
                ("swap_right_2", "((a),(b),(d),(c))"),
                ("2_columns", "((a,b),(d,c))"),
                ("5_blocks", "((a),(b),(c),(d),(e))"),
                ("6_blocks", "((a),(b),(c),(d),(e),(f))"),
                ("7_blocks", "((a),(b),(c),(d),(e),(f),(g))"),
            ],
            Task::On => &[
                ("training", "((a,b,c,d))"),
                ("swap_top_2", "((a,b,d,c))"),
                ("swap_mid_2", "((a,c,b,d))"),
                ("5_blocks", "((a,b,c,d,e))"),
                ("6_blocks", "((a,b,c,d,e,f))"),
                ("7_blocks", "((a,b,c,d,e,f,g))"),
            ],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "unstack" => Ok(Task::Unstack),
            "stack" => Ok(Task::Stack),
            "on" => Ok(Task::On),
            other => Err(EnvError::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Parses the tuple notation `((a,b,c),(d))`; piles are listed bottom-first.
pub fn parse_piles(text: &str) -> Result<Vec<Vec<String>>, SyntaxError> {
    let mut c = Cursor::new(text);
    c.expect("(")?;
    let mut piles = Vec::new();
    if !c.eat(")") {
        loop {
            c.expect("(")?;
            let mut pile = vec![c.identifier()?.to_string()];
            while c.eat(",") {
                pile.push(c.identifier()?.to_string());
            }
            c.expect(")")?;
            piles.push(pile);
            if c.eat(")") {
                break;
            }
            c.expect(",")?;
        }
    }
    c.finish()?;
    Ok(piles)
}

pub fn render_piles<S: AsRef<str>>(piles: &[Vec<S>]) -> String {
    let inner: Vec<String> = piles
        .iter()
        .map(|p| format!("({})", p.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(",")))
        .collect();
    format!("({})", inner.join(","))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlocksConfig {
    pub task: Task,
    /// Block ids, bottom-first.
    pub piles: Vec<Vec<usize>>,
    /// ON task goal `GoalOn(x, y)`; `y` may be the floor.
    pub goal: Option<(usize, usize)>,
    pub step_reward: f64,
    pub success_reward: f64,
    pub horizon: usize,
    /// Replace the pile blocks with a random ordered sample from all blocks
    /// at every reset.
    pub relabel: bool,
    pub masking: bool,
}

impl BlocksConfig {
    pub fn new(task: Task, piles: &str) -> Result<Self, EnvError> {
        let names = parse_piles(piles)?;
        let mut ids = Vec::with_capacity(names.len());
        for pile in names {
            let mut p = Vec::with_capacity(pile.len());
            for name in pile {
                let id = BLOCK_NAMES
                    .iter()
                    .position(|b| *b == name)
                    .ok_or_else(|| EnvError::Config(format!("`{name}` is not a block")))?;
                p.push(id);
            }
            ids.push(p);
        }
        let config = Self {
            task,
            piles: ids,
            goal: (task == Task::On).then_some((0, 1)),
            step_reward: -0.02,
            success_reward: 1.0,
            horizon: 50,
            relabel: false,
            masking: false,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn variant(task: Task, name: &str) -> Result<Self, EnvError> {
        let (_, piles) = task
            .variants()
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| EnvError::Config(format!("unknown {task} variant `{name}`")))?;
        Self::new(task, piles)
    }

    pub fn block_count(&self) -> usize {
        self.piles.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let mut seen = [false; MAX_BLOCKS];
        for &b in self.piles.iter().flatten() {
            if b >= MAX_BLOCKS {
                return Err(EnvError::Config(format!("block id {b} out of range")));
            }
            if std::mem::replace(&mut seen[b], true) {
                return Err(EnvError::Config(format!("block `{}` appears twice", BLOCK_NAMES[b])));
            }
        }
        if self.piles.iter().any(Vec::is_empty) || self.piles.is_empty() {
            return Err(EnvError::Config("piles must be non-empty".into()));
        }
        if self.horizon == 0 {
            return Err(EnvError::Config("horizon must be positive".into()));
        }
        match (self.task, self.goal) {
            (Task::On, Some((x, y))) => {
                if x >= MAX_BLOCKS || !seen[x] || x == y || (y != FLOOR && (y >= MAX_BLOCKS || !seen[y])) {
                    return Err(EnvError::Config("ON goal must name an active block and another active entity".into()));
                }
            }
            (Task::On, None) => return Err(EnvError::Config("ON task needs a goal".into())),
            (_, Some(_)) => return Err(EnvError::Config(format!("{} task takes no goal", self.task))),
            _ => {}
        }
        if self.relabel && self.block_count() > MAX_BLOCKS {
            return Err(EnvError::Config("too many blocks to relabel".into()));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        vocabulary(self.task)
    }
}

pub fn vocabulary(task: Task) -> Vocabulary {
    let mut entities: Vec<&str> = BLOCK_NAMES.to_vec();
    entities.push("floor");
    let state: &[&str] = if task == Task::On {
        &["On", "Top/1", "GoalOn"]
    } else {
        &["On", "Top/1"]
    };
    Vocabulary::new(entities, state, ["Move"]).expect("static vocabulary")
}

/// `below[x]` is the entity block `x` rests on, for active blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Blocks {
    below: [u8; MAX_BLOCKS],
}

impl Blocks {
    pub fn from_piles(piles: &[Vec<usize>]) -> Self {
        let mut below = [INACTIVE; MAX_BLOCKS];
        for pile in piles {
            let mut under = FLOOR as u8;
            for &b in pile {
                below[b] = under;
                under = b as u8;
            }
        }
        Self { below }
    }

    pub fn is_active(&self, x: usize) -> bool {
        x < MAX_BLOCKS && self.below[x] != INACTIVE
    }

    pub fn below(&self, x: usize) -> Option<usize> {
        self.is_active(x).then(|| usize::from(self.below[x]))
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        (0..MAX_BLOCKS).filter(|&x| self.is_active(x))
    }

    pub fn is_clear(&self, x: usize) -> bool {
        self.is_active(x) && !self.below.iter().any(|&b| usize::from(b) == x)
    }

    /// Piles bottom-first, ordered by their bottom block.
    pub fn piles(&self) -> Vec<Vec<usize>> {
        let mut piles = Vec::new();
        for x in self.active().filter(|&x| self.below[x] == FLOOR as u8) {
            let mut pile = vec![x];
            let mut top = x;
            while let Some(next) = self.active().find(|&y| usize::from(self.below[y]) == top) {
                pile.push(next);
                top = next;
            }
            piles.push(pile);
        }
        piles
    }

    fn valid_move(&self, x: usize, y: usize) -> bool {
        self.is_clear(x) && y != x && (y == FLOOR || self.is_clear(y))
    }

    /// The state after `Move(x, y)`, or `None` when the move is invalid.
    pub fn apply(&self, x: usize, y: usize) -> Option<Self> {
        self.valid_move(x, y).then(|| {
            let mut next = *self;
            next.below[x] = y as u8;
            next
        })
    }

    pub fn goal_holds(&self, task: Task, goal: Option<(usize, usize)>) -> bool {
        match task {
            Task::Unstack => self.active().all(|x| self.below[x] == FLOOR as u8),
            Task::Stack => self.active().filter(|&x| self.below[x] == FLOOR as u8).count() == 1,
            Task::On => goal.is_some_and(|(x, y)| self.below(x) == Some(y)),
        }
    }

    pub fn encode(&self, task: Task, goal: Option<(usize, usize)>, vocab: &Vocabulary) -> SymbolicState {
        let mut s = SymbolicState::empty(vocab);
        for x in self.active() {
            s.set(&GroundAtom::new(ON, EntityId(x), EntityId(usize::from(self.below[x]))), true);
            if self.is_clear(x) {
                s.set(&GroundAtom::new(TOP, EntityId(x), EntityId(x)), true);
            }
        }
        if task == Task::On {
            if let Some((x, y)) = goal {
                s.set(&GroundAtom::new(GOAL_ON, EntityId(x), EntityId(y)), true);
            }
        }
        s
    }

    pub fn render(&self) -> String {
        let named: Vec<Vec<&str>> = self
            .piles()
            .iter()
            .map(|p| p.iter().map(|&b| BLOCK_NAMES[b]).collect())
            .collect();
        render_piles(&named)
    }
}

fn move_actions(vocab: &Vocabulary, blocks: &Blocks) -> Vec<GroundAtom> {
    let mv = vocab.predicate("Move").expect("Move predicate");
    let entities: Vec<usize> = blocks.active().chain([FLOOR]).collect();
    let mut out = Vec::with_capacity(entities.len() * entities.len());
    for &x in &entities {
        for &y in &entities {
            out.push(GroundAtom::new(mv, EntityId(x), EntityId(y)));
        }
    }
    out
}

/// Episode instance: the live configuration after any relabeling.
#[derive(Clone, Debug)]
struct Episode {
    blocks: Blocks,
    goal: Option<(usize, usize)>,
    actions: Vec<GroundAtom>,
    steps: usize,
}

#[derive(Clone, Debug)]
pub struct BlocksWorld {
    config: BlocksConfig,
    vocab: Vocabulary,
    episode: Episode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlocksStep {
    pub next: Blocks,
    pub reward: f64,
    pub terminal: bool,
}

impl BlocksWorld {
    pub fn new(config: BlocksConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let vocab = config.vocabulary();
        let blocks = Blocks::from_piles(&config.piles);
        let episode = Episode {
            blocks,
            goal: config.goal,
            actions: move_actions(&vocab, &blocks),
            steps: 0,
        };
        Ok(Self {
            config,
            vocab,
            episode,
        })
    }

    pub fn config(&self) -> &BlocksConfig {
        &self.config
    }

    pub fn blocks(&self) -> &Blocks {
        &self.episode.blocks
    }

    pub fn goal(&self) -> Option<(usize, usize)> {
        self.episode.goal
    }

    fn decode_move(&self, action: &GroundAtom) -> Result<(usize, usize), EnvError> {
        match self.vocab.check_atom(action) {
            Ok(()) if self.vocab.predicate_info(action.predicate).name == "Move" => {
                Ok((action.subject.0, action.object.0))
            }
            _ => Err(EnvError::BadAction(format!("{action:?}"))),
        }
    }

    /// Pure transition from `blocks` under the given goal.
    pub fn transition(&self, blocks: &Blocks, goal: Option<(usize, usize)>, action: &GroundAtom) -> Result<BlocksStep, EnvError> {
        let (x, y) = self.decode_move(action)?;
        let next = blocks.apply(x, y).unwrap_or(*blocks);
        let terminal = next.goal_holds(self.config.task, goal);
        let reward = self.config.step_reward + if terminal { self.config.success_reward } else { 0.0 };
        Ok(BlocksStep { next, reward, terminal })
    }
}

impl Environment for BlocksWorld {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> SymbolicState {
        let (piles, goal) = if self.config.relabel {
            let relabel: Vec<usize> = sample(rng, MAX_BLOCKS, self.config.block_count()).into_vec();
            // Blocks in the configured piles are mapped by their rank.
            let mut order: Vec<usize> = self.config.piles.iter().flatten().copied().collect();
            order.sort_unstable();
            let map = |b: usize| relabel[order.binary_search(&b).expect("pile block")];
            let piles: Vec<Vec<usize>> = self.config.piles.iter().map(|p| p.iter().map(|&b| map(b)).collect()).collect();
            let goal = self.config.goal.map(|(x, y)| (map(x), if y == FLOOR { FLOOR } else { map(y) }));
            (piles, goal)
        } else {
            (self.config.piles.clone(), self.config.goal)
        };
        let blocks = Blocks::from_piles(&piles);
        self.episode = Episode {
            blocks,
            goal,
            actions: move_actions(&self.vocab, &blocks),
            steps: 0,
        };
        self.observation()
    }

    fn observation(&self) -> SymbolicState {
        self.episode.blocks.encode(self.config.task, self.episode.goal, &self.vocab)
    }

    fn actions(&self) -> &[GroundAtom] {
        &self.episode.actions
    }

    fn action_mask(&self) -> Option<Vec<bool>> {
        self.config.masking.then(|| {
            self.episode
                .actions
                .iter()
                .map(|a| self.episode.blocks.valid_move(a.subject.0, a.object.0))
                .collect()
        })
    }

    fn step(&mut self, action: &GroundAtom, _rng: &mut ChaCha8Rng) -> Result<StepOutcome, EnvError> {
        let step = self.transition(&self.episode.blocks, self.episode.goal, action)?;
        self.episode.blocks = step.next;
        self.episode.steps += 1;
        Ok(StepOutcome {
            state: self.observation(),
            reward: step.reward,
            score: step.reward,
            terminal: step.terminal,
            truncated: !step.terminal && self.episode.steps >= self.config.horizon,
        })
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }
}

impl Dynamics for BlocksWorld {
    type State = Blocks;

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn initial(&self) -> Blocks {
        Blocks::from_piles(&self.config.piles)
    }

    fn actions(&self, state: &Blocks) -> Vec<GroundAtom> {
        move_actions(&self.vocab, state)
    }

    fn outcomes(&self, state: &Blocks, action: &GroundAtom) -> Result<Vec<Outcome<Blocks>>, EnvError> {
        let step = self.transition(state, self.config.goal, action)?;
        Ok(vec![Outcome {
            probability: 1.0,
            next: step.next,
            reward: step.reward,
            score: step.reward,
            terminal: step.terminal,
        }])
    }

    fn encode(&self, state: &Blocks) -> SymbolicState {
        state.encode(self.config.task, self.config.goal, &self.vocab)
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::decode;
    use rand::SeedableRng;

    fn atoms(world: &BlocksWorld) -> Vec<String> {
        let v = Environment::vocabulary(world);
        decode(&world.observation()).iter().map(|a| v.render(a)).collect()
    }

    #[test]
    fn parses_pile_notation() {
        assert_eq!(parse_piles("((a,b,c),(d))").unwrap(), vec![vec!["a", "b", "c"], vec!["d"]]);
        assert_eq!(parse_piles(" ( ( a ) ) ").unwrap(), vec![vec!["a"]]);
        assert_eq!(parse_piles("()").unwrap(), Vec::<Vec<String>>::new());
        for bad in ["", "(a)", "((a)", "((a),)", "((a,))", "((a)(b))", "((a)) x"] {
            assert!(parse_piles(bad).is_err(), "{bad}");
        }
        assert_eq!(render_piles(&parse_piles("((a,b),(c))").unwrap()), "((a,b),(c))");
    }

    #[test]
    fn config_validation() {
        assert!(BlocksConfig::new(Task::Unstack, "((a,b),(a))").is_err());
        assert!(BlocksConfig::new(Task::Unstack, "((a,floor))").is_err());
        assert!(BlocksConfig::new(Task::Unstack, "((a,h))").is_err());
        assert!(BlocksConfig::new(Task::Unstack, "()").is_err());
        assert!(BlocksConfig::variant(Task::Stack, "swap_top_2").is_err());
        let mut on = BlocksConfig::variant(Task::On, "training").unwrap();
        on.goal = Some((0, 6));
        assert!(on.validate().is_err());
    }

    #[test]
    fn single_column_encoding() {
        let w = BlocksWorld::new(BlocksConfig::variant(Task::Unstack, "training").unwrap()).unwrap();
        let mut got = atoms(&w);
        got.sort();
        assert_eq!(got, ["On(a,floor)", "On(b,a)", "On(c,b)", "On(d,c)", "Top(d,d)"]);
        assert_eq!(w.blocks().render(), "((a,b,c,d))");
    }

    #[test]
    fn singleton_encoding_and_goal_atom() {
        let w = BlocksWorld::new(BlocksConfig::variant(Task::Stack, "training").unwrap()).unwrap();
        let got = atoms(&w);
        assert_eq!(got.iter().filter(|a| a.ends_with(",floor)")).count(), 4);
        assert_eq!(got.iter().filter(|a| a.starts_with("Top")).count(), 4);
        let w = BlocksWorld::new(BlocksConfig::variant(Task::On, "training").unwrap()).unwrap();
        assert!(atoms(&w).contains(&"GoalOn(a,b)".to_string()));
    }

    #[test]
    fn mixed_piles_encode_every_block() {
        let w = BlocksWorld::new(BlocksConfig::new(Task::Unstack, "((a,b,c),(d))").unwrap()).unwrap();
        let mut got = atoms(&w);
        got.sort();
        assert_eq!(got, ["On(a,floor)", "On(b,a)", "On(c,b)", "On(d,floor)", "Top(c,c)", "Top(d,d)"]);
    }

    #[test]
    fn unstack_solution_returns_094() {
        let mut w = BlocksWorld::new(BlocksConfig::variant(Task::Unstack, "training").unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        w.reset(&mut rng);
        let v = Environment::vocabulary(&w).clone();
        let mut total = 0.0;
        let mut last = None;
        for a in ["Move(d,floor)", "Move(c,floor)", "Move(b,floor)"] {
            let out = w.step(&v.parse_atom(a).unwrap(), &mut rng).unwrap();
            total += out.reward;
            last = Some(out);
        }
        assert!(last.unwrap().terminal);
        assert!((total - 0.94).abs() < 1e-12);
    }

    #[test]
    fn invalid_move_is_a_no_op() {
        let mut w = BlocksWorld::new(BlocksConfig::variant(Task::Unstack, "training").unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = w.reset(&mut rng);
        let v = Environment::vocabulary(&w).clone();
        for a in ["Move(floor,a)", "Move(a,floor)", "Move(d,d)", "Move(c,floor)", "Move(d,e)"] {
            let out = w.step(&v.parse_atom(a).unwrap(), &mut rng).unwrap();
            assert_eq!(out.state, before, "{a}");
            assert_eq!(out.reward, -0.02);
            assert!(!out.terminal);
        }
        let not_move = GroundAtom::new(PredicateId(0), EntityId(0), EntityId(7));
        assert!(w.step(&not_move, &mut rng).is_err());
    }

    #[test]
    fn horizon_truncates() {
        let mut w = BlocksWorld::new(BlocksConfig::variant(Task::Unstack, "training").unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        w.reset(&mut rng);
        let noop = Environment::vocabulary(&w).parse_atom("Move(floor,a)").unwrap();
        for i in 1..=50 {
            let out = w.step(&noop, &mut rng).unwrap();
            assert_eq!(out.truncated, i == 50);
        }
    }

    #[test]
    fn action_list_and_mask() {
        let mut config = BlocksConfig::variant(Task::Unstack, "training").unwrap();
        config.masking = true;
        let w = BlocksWorld::new(config).unwrap();
        assert_eq!(Environment::actions(&w).len(), 25);
        assert!(Environment::actions(&w).windows(2).all(|p| p[0] < p[1]));
        let mask = w.action_mask().unwrap();
        let valid: Vec<String> = Environment::actions(&w)
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(a, _)| Environment::vocabulary(&w).render(a))
            .collect();
        assert_eq!(valid, ["Move(d,floor)"]);
    }
}

//! Chain-rule extraction from attention weights and a textual clause syntax.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::reasoning::AttentionWeights;
use crate::symbolic::syntax::{Cursor, SyntaxError};
use crate::symbolic::{EntityId, PredicateId, PredicateKind, Vocabulary, VocabularyError};

/// Chains are enumerated exhaustively up to this many of the longest length.
pub const EXHAUSTIVE_LIMIT: usize = 100_000;
pub const BEAM_WIDTH: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleError {
    #[error("no states to aggregate")]
    NoStates,
    #[error("rule body is empty")]
    EmptyBody,
    #[error("`{0}` is not an action predicate")]
    NotAction(String),
    #[error("clause is not a chain: {0}")]
    NotChain(String),
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error(transparent)]
    Vocabulary(#[from] VocabularyError),
}

/// A body and its confidence `ψ_len · Π_t φ_t[body[t]]`.
pub type Chain = (Vec<PredicateId>, f64);

fn rank(chains: &mut [Chain]) {
    chains.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.len().cmp(&b.0.len()))
            .then_with(|| a.0.cmp(&b.0))
    });
}

/// Every chain of length `1..=T`, ranked.
pub fn chain_confidences_exhaustive(w: &AttentionWeights) -> Vec<Chain> {
    let n = w.predicates();
    let mut out = Vec::new();
    let mut layer: Vec<Chain> = vec![(Vec::new(), 1.0)];
    for t in 0..w.steps() {
        let mut next = Vec::with_capacity(layer.len() * n);
        for (body, p) in &layer {
            for k in 0..n {
                let mut b = body.clone();
                b.push(PredicateId(k));
                next.push((b, p * w.phi[t][k]));
            }
        }
        out.extend(next.iter().map(|(b, p)| (b.clone(), p * w.psi[t])));
        layer = next;
    }
    rank(&mut out);
    out
}

/// The `width` highest-weight prefixes of each length, ranked. Because
/// weights are non-negative this contains the exact top `width` chains of
/// every length.
pub fn chain_confidences_beam(w: &AttentionWeights, width: usize) -> Vec<Chain> {
    let n = w.predicates();
    let mut out = Vec::new();
    let mut layer: Vec<Chain> = vec![(Vec::new(), 1.0)];
    for t in 0..w.steps() {
        let mut next = Vec::with_capacity(layer.len() * n);
        for (body, p) in &layer {
            for k in 0..n {
                let mut b = body.clone();
                b.push(PredicateId(k));
                next.push((b, p * w.phi[t][k]));
            }
        }
        rank(&mut next);
        next.truncate(width);
        out.extend(next.iter().map(|(b, p)| (b.clone(), p * w.psi[t])));
        layer = next;
    }
    rank(&mut out);
    out
}

/// Exhaustive when `N^T` is at most [`EXHAUSTIVE_LIMIT`], beam search
/// otherwise.
pub fn chain_confidences(w: &AttentionWeights) -> Vec<Chain> {
    let n = w.predicates() as f64;
    if n.powi(w.steps() as i32) <= EXHAUSTIVE_LIMIT as f64 {
        chain_confidences_exhaustive(w)
    } else {
        chain_confidences_beam(w, BEAM_WIDTH)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRule {
    pub body: Vec<PredicateId>,
    pub head: PredicateId,
    pub confidence: f64,
    /// Number of states the confidence was averaged over.
    pub support: usize,
}

/// Mean confidence per chain over per-state lists; chains absent from a
/// list count as 0 there.
pub fn aggregate(per_state: &[Vec<Chain>], head: PredicateId) -> Result<Vec<ChainRule>, RuleError> {
    if per_state.is_empty() {
        return Err(RuleError::NoStates);
    }
    let mut sums: HashMap<&[PredicateId], f64> = HashMap::new();
    for list in per_state {
        for (body, c) in list {
            *sums.entry(body.as_slice()).or_insert(0.0) += c;
        }
    }
    let n = per_state.len();
    let mut chains: Vec<Chain> = sums.into_iter().map(|(b, s)| (b.to_vec(), s / n as f64)).collect();
    rank(&mut chains);
    Ok(chains
        .into_iter()
        .map(|(body, confidence)| ChainRule {
            body,
            head,
            confidence,
            support: n,
        })
        .collect())
}

/// Argument of a clause literal.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    Var(String),
    Const(EntityId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Literal {
    pub predicate: PredicateId,
    pub args: [Term; 2],
}

/// `head ← body₁ ∧ … ∧ bodyₙ`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clause {
    pub head: Literal,
    pub body: Vec<Literal>,
}

fn var(k: usize) -> Term {
    if k == 0 {
        Term::Var("X".into())
    } else {
        Term::Var(format!("Z{k}"))
    }
}

impl ChainRule {
    /// The chain as a clause: `Act(X,Zn) ← P₁(X,Z₁) ∧ … ∧ Pₙ(Zₙ₋₁,Zₙ)`,
    /// with diagonal predicates repeating their variable.
    pub fn clause(&self, vocab: &Vocabulary) -> Result<Clause, RuleError> {
        if self.body.is_empty() {
            return Err(RuleError::EmptyBody);
        }
        let head_info = vocab.predicate_info(self.head);
        if head_info.kind != PredicateKind::Action {
            return Err(RuleError::NotAction(head_info.name.clone()));
        }
        let mut k = 0;
        let mut body = Vec::with_capacity(self.body.len());
        for &p in &self.body {
            if p.0 >= vocab.predicate_count() {
                return Err(VocabularyError::PredicateOutOfRange {
                    id: p.0,
                    len: vocab.predicate_count(),
                }
                .into());
            }
            let from = var(k);
            if !vocab.predicate_info(p).diagonal {
                k += 1;
            }
            body.push(Literal {
                predicate: p,
                args: [from, var(k)],
            });
        }
        Ok(Clause {
            head: Literal {
                predicate: self.head,
                args: [var(0), var(k)],
            },
            body,
        })
    }

    /// The clause with `X` bound to `subject` and the chain's end bound to
    /// `object`.
    pub fn grounded(&self, vocab: &Vocabulary, subject: EntityId, object: EntityId) -> Result<Clause, RuleError> {
        let mut clause = self.clause(vocab)?;
        let first = var(0);
        let last = clause.head.args[1].clone();
        let bind = |t: &mut Term| {
            if *t == last && last != first {
                *t = Term::Const(object);
            } else if *t == first {
                *t = Term::Const(subject);
            }
        };
        bind(&mut clause.head.args[0]);
        bind(&mut clause.head.args[1]);
        for l in &mut clause.body {
            let [a, b] = &mut l.args;
            bind(a);
            bind(b);
        }
        Ok(clause)
    }

    pub fn render(&self, vocab: &Vocabulary) -> Result<String, RuleError> {
        Ok(self.clause(vocab)?.render(vocab))
    }
}

fn render_term(t: &Term, vocab: &Vocabulary) -> String {
    match t {
        Term::Var(v) => v.clone(),
        Term::Const(e) => vocab.entity_name(*e).to_string(),
    }
}

impl Literal {
    pub fn render(&self, vocab: &Vocabulary) -> String {
        format!(
            "{}({},{})",
            vocab.predicate_info(self.predicate).name,
            render_term(&self.args[0], vocab),
            render_term(&self.args[1], vocab)
        )
    }
}

impl Clause {
    pub fn render(&self, vocab: &Vocabulary) -> String {
        let mut s = self.head.render(vocab);
        s.push_str(" ← ");
        for (i, l) in self.body.iter().enumerate() {
            if i > 0 {
                s.push_str(" ∧ ");
            }
            s.push_str(&l.render(vocab));
        }
        s
    }

    /// Parses `Head(a,b) ← P(a,c) ∧ …`; also accepts `<-` and `&`.
    /// Arguments starting with an upper-case letter are variables, others
    /// must name entities.
    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self, RuleError> {
        let mut c = Cursor::new(text);
        let head = literal(&mut c, vocab)?;
        if !(c.eat("←") || c.eat("<-")) {
            return Err(c.error("expected `←`").into());
        }
        let mut body = vec![literal(&mut c, vocab)?];
        while c.eat("∧") || c.eat("&") {
            body.push(literal(&mut c, vocab)?);
        }
        c.finish()?;
        Ok(Self { head, body })
    }

    /// Recovers the chain rule a clause was rendered from.
    pub fn chain(&self, vocab: &Vocabulary) -> Result<ChainRule, RuleError> {
        let rule = ChainRule {
            body: self.body.iter().map(|l| l.predicate).collect(),
            head: self.head.predicate,
            confidence: 0.0,
            support: 0,
        };
        if rule.clause(vocab)? == *self {
            Ok(rule)
        } else {
            Err(RuleError::NotChain(self.render(vocab)))
        }
    }
}

fn literal(c: &mut Cursor<'_>, vocab: &Vocabulary) -> Result<Literal, RuleError> {
    let at = c.offset();
    let atom = c.atom()?;
    let predicate = vocab.predicate(&atom.predicate)?;
    let term = |s: &str| -> Result<Term, RuleError> {
        if s.starts_with(|ch: char| ch.is_ascii_uppercase()) {
            Ok(Term::Var(s.to_string()))
        } else {
            vocab.entity(s).map(Term::Const).map_err(|_| {
                SyntaxError {
                    offset: at,
                    message: format!("`{s}` is neither a variable nor an entity"),
                }
                .into()
            })
        }
    };
    Ok(Literal {
        predicate,
        args: [term(&atom.args[0])?, term(&atom.args[1])?],
    })
}

/// One report line: confidence to four decimals, then the clause.
pub fn report_line(rule: &ChainRule, vocab: &Vocabulary) -> Result<String, RuleError> {
    let mut s = String::new();
    write!(s, "{:.4} {}", rule.confidence, rule.render(vocab)?).expect("write to string");
    Ok(s)
}

/// Parses a [`report_line`] back into its confidence and clause.
pub fn parse_report_line(line: &str, vocab: &Vocabulary) -> Result<(f64, Clause), RuleError> {
    let line = line.trim();
    let split = line.find(char::is_whitespace).ok_or_else(|| SyntaxError {
        offset: 0,
        message: "expected a confidence and a clause".into(),
    })?;
    let confidence = line[..split].parse::<f64>().map_err(|e| SyntaxError {
        offset: 0,
        message: e.to_string(),
    })?;
    Ok((confidence, Clause::parse(&line[split..], vocab)?))
}

/// The entity pair with the largest κ entry among `candidates`; ties go to
/// the first listed.
pub fn best_pair(kappa: &Tensor, candidates: &[(EntityId, EntityId)]) -> Option<(EntityId, EntityId)> {
    let mut best: Option<((EntityId, EntityId), f64)> = None;
    for &(x, y) in candidates {
        let v = kappa.get(x.0, y.0);
        if best.map_or(true, |(_, b)| v > b) {
            best = Some(((x, y), v));
        }
    }
    best.map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks() -> Vocabulary {
        Vocabulary::new(["a", "b", "floor"], ["On", "Top/1", "GoalOn"], ["Move"]).unwrap()
    }

    fn rule(v: &Vocabulary, body: &[&str]) -> ChainRule {
        ChainRule {
            body: body.iter().map(|b| v.predicate(b).unwrap()).collect(),
            head: v.predicate("Move").unwrap(),
            confidence: 0.5,
            support: 1,
        }
    }

    #[test]
    fn renders_chains() {
        let v = blocks();
        assert_eq!(rule(&v, &["On", "On"]).render(&v).unwrap(), "Move(X,Z2) ← On(X,Z1) ∧ On(Z1,Z2)");
        assert_eq!(rule(&v, &["GoalOn"]).render(&v).unwrap(), "Move(X,Z1) ← GoalOn(X,Z1)");
        assert_eq!(
            rule(&v, &["Top", "GoalOn", "Top"]).render(&v).unwrap(),
            "Move(X,Z1) ← Top(X,X) ∧ GoalOn(X,Z1) ∧ Top(Z1,Z1)"
        );
    }

    #[test]
    fn parses_ascii_forms() {
        let v = blocks();
        let a = Clause::parse("Move(X,Z1) <- GoalOn(X,Z1) & Top(Z1,Z1)", &v).unwrap();
        let b = Clause::parse("Move(X,Z1) ← GoalOn(X,Z1) ∧ Top(Z1,Z1)", &v).unwrap();
        assert_eq!(a, b);
        assert!(Clause::parse("Move(X,Z1) ← ", &v).is_err());
        assert!(Clause::parse("Move(X,q) ← On(X,q)", &v).is_err());
        assert!(Clause::parse("Move(X,Z1) ← On(X,Z1) extra", &v).is_err());
    }

    #[test]
    fn grounding_binds_ends() {
        let v = blocks();
        let r = rule(&v, &["On", "On"]);
        let c = r.grounded(&v, EntityId(0), EntityId(2)).unwrap();
        assert_eq!(c.render(&v), "Move(a,floor) ← On(a,Z1) ∧ On(Z1,floor)");
        assert!(c.chain(&v).is_err());
        assert_eq!(Clause::parse(&c.render(&v), &v).unwrap(), c);
    }

    #[test]
    fn non_action_head_is_rejected() {
        let v = blocks();
        let mut r = rule(&v, &["On"]);
        r.head = v.predicate("On").unwrap();
        assert!(matches!(r.render(&v), Err(RuleError::NotAction(_))));
        r.body.clear();
        assert!(matches!(r.clause(&v), Err(RuleError::EmptyBody)));
    }

    #[test]
    fn report_lines_round_trip() {
        let v = blocks();
        let mut r = rule(&v, &["On", "Top"]);
        r.confidence = 0.123456;
        let line = report_line(&r, &v).unwrap();
        assert_eq!(line, "0.1235 Move(X,Z1) ← On(X,Z1) ∧ Top(Z1,Z1)");
        let (c, clause) = parse_report_line(&line, &v).unwrap();
        assert_eq!(c, 0.1235);
        assert_eq!(clause.chain(&v).unwrap().body, r.body);
    }

    #[test]
    fn uniform_weights() {
        let w = AttentionWeights {
            phi: vec![vec![0.5, 0.5]; 2],
            psi: vec![0.5, 0.5],
        };
        let chains = chain_confidences(&w);
        assert_eq!(chains.len(), 6);
        for (b, c) in &chains {
            let want = if b.len() == 1 { 0.25 } else { 0.125 };
            assert!((c - want).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_weights_give_one_chain() {
        let forced = [PredicateId(2), PredicateId(0)];
        let w = AttentionWeights::one_hot(&forced, 4, 3);
        let w = AttentionWeights {
            psi: vec![0.0, 1.0, 0.0],
            ..w
        };
        let chains = chain_confidences(&w);
        assert_eq!(chains[0], (forced.to_vec(), 1.0));
        assert!(chains[1..].iter().all(|(_, c)| *c == 0.0));
    }

    #[test]
    fn aggregate_needs_states() {
        assert_eq!(aggregate(&[], PredicateId(0)), Err(RuleError::NoStates));
    }
}

//! First-order vocabulary, grounded atoms, and their encoding as binary
//! predicate matrices.

mod state;
pub mod syntax;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use state::{decode, encode, one_hot, FlatState, SymbolicState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PredicateId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredicateKind {
    State,
    Action,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub name: String,
    pub kind: PredicateKind,
    /// Unary relation stored on the diagonal as `P(x,x)`.
    pub diagonal: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabularyError {
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("entity id {id} out of range ({len} entities)")]
    EntityOutOfRange { id: usize, len: usize },
    #[error("predicate id {id} out of range ({len} predicates)")]
    PredicateOutOfRange { id: usize, len: usize },
    #[error("duplicate name `{0}`")]
    Duplicate(String),
    #[error("a vocabulary needs at least one entity and one predicate")]
    Empty,
    #[error("`{name}` is diagonal-encoded but applied to ({subject}, {object})")]
    OffDiagonal {
        name: String,
        subject: String,
        object: String,
    },
    #[error(transparent)]
    Syntax(#[from] syntax::SyntaxError),
}

/// Entities `X` plus state predicates `P_s` and action predicates `P_a`.
///
/// Predicates are indexed with all state predicates first, in declaration
/// order, followed by the action predicates. Entity order is declaration
/// order and is shared by every matrix and one-hot vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    entities: Vec<String>,
    predicates: Vec<Predicate>,
}

/// A predicate applied to two constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroundAtom {
    pub predicate: PredicateId,
    pub subject: EntityId,
    pub object: EntityId,
}

impl GroundAtom {
    pub fn new(predicate: PredicateId, subject: EntityId, object: EntityId) -> Self {
        Self {
            predicate,
            subject,
            object,
        }
    }
}

impl Vocabulary {
    /// `state` and `action` list predicate names; a trailing `/1` on a
    /// state predicate marks it as unary (diagonal-encoded).
    pub fn new<E, S, A>(entities: E, state: S, action: A) -> Result<Self, VocabularyError>
    where
        E: IntoIterator,
        E::Item: Into<String>,
        S: IntoIterator,
        S::Item: AsRef<str>,
        A: IntoIterator,
        A::Item: AsRef<str>,
    {
        let entities: Vec<String> = entities.into_iter().map(Into::into).collect();
        let mut predicates = Vec::new();
        for name in state {
            let name = name.as_ref();
            let (name, diagonal) = match name.strip_suffix("/1") {
                Some(base) => (base, true),
                None => (name, false),
            };
            predicates.push(Predicate {
                name: name.to_string(),
                kind: PredicateKind::State,
                diagonal,
            });
        }
        for name in action {
            predicates.push(Predicate {
                name: name.as_ref().to_string(),
                kind: PredicateKind::Action,
                diagonal: false,
            });
        }
        if entities.is_empty() || predicates.is_empty() {
            return Err(VocabularyError::Empty);
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in entities.iter().chain(predicates.iter().map(|p| &p.name)) {
            syntax::validate_identifier(name)?;
            if !seen.insert(name.as_str()) {
                return Err(VocabularyError::Duplicate(name.clone()));
            }
        }
        Ok(Self {
            entities,
            predicates,
        })
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn predicate_count(&self) -> usize {
        self.predicates.len()
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    pub fn entity(&self, name: &str) -> Result<EntityId, VocabularyError> {
        self.entities
            .iter()
            .position(|e| e == name)
            .map(EntityId)
            .ok_or_else(|| VocabularyError::UnknownEntity(name.to_string()))
    }

    pub fn predicate(&self, name: &str) -> Result<PredicateId, VocabularyError> {
        self.predicates
            .iter()
            .position(|p| p.name == name)
            .map(PredicateId)
            .ok_or_else(|| VocabularyError::UnknownPredicate(name.to_string()))
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[id.0]
    }

    pub fn predicate_info(&self, id: PredicateId) -> &Predicate {
        &self.predicates[id.0]
    }

    pub fn action_predicates(&self) -> Vec<PredicateId> {
        self.predicates
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind == PredicateKind::Action)
            .map(|(i, _)| PredicateId(i))
            .collect()
    }

    pub fn check_entity(&self, id: EntityId) -> Result<(), VocabularyError> {
        if id.0 >= self.entities.len() {
            return Err(VocabularyError::EntityOutOfRange {
                id: id.0,
                len: self.entities.len(),
            });
        }
        Ok(())
    }

    pub fn check_atom(&self, atom: &GroundAtom) -> Result<(), VocabularyError> {
        if atom.predicate.0 >= self.predicates.len() {
            return Err(VocabularyError::PredicateOutOfRange {
                id: atom.predicate.0,
                len: self.predicates.len(),
            });
        }
        self.check_entity(atom.subject)?;
        self.check_entity(atom.object)?;
        let p = &self.predicates[atom.predicate.0];
        if p.diagonal && atom.subject != atom.object {
            return Err(VocabularyError::OffDiagonal {
                name: p.name.clone(),
                subject: self.entities[atom.subject.0].clone(),
                object: self.entities[atom.object.0].clone(),
            });
        }
        Ok(())
    }

    pub fn atom(&self, predicate: &str, subject: &str, object: &str) -> Result<GroundAtom, VocabularyError> {
        let atom = GroundAtom::new(self.predicate(predicate)?, self.entity(subject)?, self.entity(object)?);
        self.check_atom(&atom)?;
        Ok(atom)
    }

    /// Parses `Pred(a,b)` and resolves the names.
    pub fn parse_atom(&self, text: &str) -> Result<GroundAtom, VocabularyError> {
        let parsed = syntax::parse_atom(text)?;
        self.atom(&parsed.predicate, &parsed.args[0], &parsed.args[1])
    }

    pub fn render(&self, atom: &GroundAtom) -> String {
        format!(
            "{}({},{})",
            self.predicates[atom.predicate.0].name,
            self.entities[atom.subject.0],
            self.entities[atom.object.0]
        )
    }
}

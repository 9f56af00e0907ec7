use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{EntityId, GroundAtom, PredicateId, Vocabulary, VocabularyError};
use crate::numerics::Tensor;

/// Per-predicate binary matrices `M_k[i][j] = 1` iff `P_k(x_i, x_j)` holds.
///
/// Stored as one contiguous `N × |X|²` buffer, which is also the row-major
/// layout of the flattened attention input.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SymbolicState {
    entities: usize,
    predicates: usize,
    bits: Vec<u8>,
}

impl SymbolicState {
    pub fn empty(vocab: &Vocabulary) -> Self {
        Self::zeros(vocab.entity_count(), vocab.predicate_count())
    }

    pub fn zeros(entities: usize, predicates: usize) -> Self {
        Self {
            entities,
            predicates,
            bits: vec![0; predicates * entities * entities],
        }
    }

    pub fn entity_count(&self) -> usize {
        self.entities
    }

    pub fn predicate_count(&self) -> usize {
        self.predicates
    }

    fn index(&self, p: PredicateId, i: EntityId, j: EntityId) -> usize {
        (p.0 * self.entities + i.0) * self.entities + j.0
    }

    pub fn holds(&self, atom: &GroundAtom) -> bool {
        self.bits[self.index(atom.predicate, atom.subject, atom.object)] == 1
    }

    pub fn get(&self, p: PredicateId, i: EntityId, j: EntityId) -> bool {
        self.bits[self.index(p, i, j)] == 1
    }

    pub fn set(&mut self, atom: &GroundAtom, value: bool) {
        let ix = self.index(atom.predicate, atom.subject, atom.object);
        self.bits[ix] = u8::from(value);
    }

    /// `M_k` as an `|X| × |X|` tensor.
    pub fn matrix(&self, p: PredicateId) -> Tensor {
        let n2 = self.entities * self.entities;
        let data = self.bits[p.0 * n2..(p.0 + 1) * n2].iter().map(|&b| f64::from(b)).collect();
        Tensor::matrix(self.entities, self.entities, data).expect("sized buffer")
    }

    /// All entries as `0.0`/`1.0` in the `N × |X|²` layout.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.bits.iter().map(|&b| f64::from(b))
    }

    pub fn atom_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// `M_f`: row `k` is the row-major flattening of `M_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatState(Tensor);

impl FlatState {
    pub fn from_state(state: &SymbolicState) -> Self {
        let n2 = state.entities * state.entities;
        let t = Tensor::matrix(state.predicates, n2, state.values().collect()).expect("sized buffer");
        Self(t)
    }

    /// Wraps an `N × |X|²` matrix; `None` if the row width is not square.
    pub fn from_tensor(t: Tensor) -> Option<Self> {
        let cols = t.cols();
        let n = (cols as f64).sqrt().round() as usize;
        (t.shape().len() == 2 && n * n == cols).then_some(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Inverse of [`FlatState::from_state`]; `None` if any entry is not 0 or 1
    /// or the row width is not a perfect square.
    pub fn unflatten(&self) -> Option<SymbolicState> {
        let (rows, cols) = self.0.dims();
        let n = (cols as f64).sqrt().round() as usize;
        if n * n != cols {
            return None;
        }
        let mut bits = Vec::with_capacity(rows * cols);
        for &v in self.0.data() {
            bits.push(match v {
                x if x == 0.0 => 0,
                x if x == 1.0 => 1,
                _ => return None,
            });
        }
        Some(SymbolicState {
            entities: n,
            predicates: rows,
            bits,
        })
    }
}

pub fn encode<'a, I>(atoms: I, vocab: &Vocabulary) -> Result<SymbolicState, VocabularyError>
where
    I: IntoIterator<Item = &'a GroundAtom>,
{
    let mut state = SymbolicState::empty(vocab);
    for atom in atoms {
        vocab.check_atom(atom)?;
        state.set(atom, true);
    }
    Ok(state)
}

pub fn decode(state: &SymbolicState) -> BTreeSet<GroundAtom> {
    let n = state.entities;
    state
        .bits
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == 1)
        .map(|(ix, _)| {
            GroundAtom::new(PredicateId(ix / (n * n)), EntityId(ix / n % n), EntityId(ix % n))
        })
        .collect()
}

pub fn one_hot(id: EntityId, vocab: &Vocabulary) -> Result<Vec<f64>, VocabularyError> {
    vocab.check_entity(id)?;
    let mut v = vec![0.0; vocab.entity_count()];
    v[id.0] = 1.0;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["x1", "x2"], ["P", "R"], ["Act"]).unwrap()
    }

    #[test]
    fn empty_set_encodes_to_zeros() {
        let v = vocab();
        let s = encode(&[], &v).unwrap();
        assert_eq!(s.atom_count(), 0);
        assert!(FlatState::from_state(&s).tensor().data().iter().all(|&x| x == 0.0));
        assert!(decode(&s).is_empty());
    }

    #[test]
    fn single_atom_matrix_and_flat_position() {
        let v = vocab();
        let atom = v.atom("P", "x1", "x2").unwrap();
        let s = encode(&[atom], &v).unwrap();
        assert_eq!(s.matrix(PredicateId(0)).data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.matrix(PredicateId(1)).data(), &[0.0; 4]);
        let flat = FlatState::from_state(&s);
        // row k = 0, column i·|X| + j = 0·2 + 1
        assert_eq!(flat.tensor().get(0, 1), 1.0);
        assert_eq!(flat.tensor().sum(), 1.0);
        assert_eq!(decode(&s).into_iter().collect::<Vec<_>>(), vec![atom]);
    }

    #[test]
    fn out_of_range_atoms_are_rejected() {
        let v = vocab();
        let bad = GroundAtom::new(PredicateId(0), EntityId(0), EntityId(5));
        assert!(matches!(encode(&[bad], &v), Err(VocabularyError::EntityOutOfRange { .. })));
        assert!(one_hot(EntityId(2), &v).is_err());
    }

    #[test]
    fn one_hot_lookup_reads_matrix_entries() {
        let v = Vocabulary::new(["a", "b", "c"], ["P"], ["Act"]).unwrap();
        assert_eq!(one_hot(EntityId(0), &v).unwrap(), vec![1.0, 0.0, 0.0]);
        let total: Vec<f64> = (0..3)
            .map(|i| one_hot(EntityId(i), &v).unwrap())
            .fold(vec![0.0; 3], |acc, x| acc.iter().zip(&x).map(|(a, b)| a + b).collect());
        assert_eq!(total, vec![1.0; 3]);

        let atoms = [v.atom("P", "a", "c").unwrap(), v.atom("P", "b", "b").unwrap()];
        let s = encode(&atoms, &v).unwrap();
        let m = s.matrix(PredicateId(0));
        for x in 0..3 {
            for y in 0..3 {
                let vx = one_hot(EntityId(x), &v).unwrap();
                let vy = one_hot(EntityId(y), &v).unwrap();
                let mut score = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        score += vx[i] * m.get(i, j) * vy[j];
                    }
                }
                let expected = atoms.contains(&GroundAtom::new(PredicateId(0), EntityId(x), EntityId(y)));
                assert_eq!(score == 1.0, expected);
            }
        }
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(mask in prop::collection::vec(any::<bool>(), 3 * 4 * 4)) {
            let v = Vocabulary::new(["a", "b", "c", "d"], ["P", "R"], ["Act"]).unwrap();
            let atoms: BTreeSet<GroundAtom> = mask
                .iter()
                .enumerate()
                .filter(|(_, &on)| on)
                .map(|(ix, _)| GroundAtom::new(PredicateId(ix / 16), EntityId(ix / 4 % 4), EntityId(ix % 4)))
                .collect();
            let s = encode(&atoms, &v).unwrap();
            prop_assert_eq!(decode(&s), atoms);
            let flat = FlatState::from_state(&s);
            prop_assert_eq!(flat.tensor().rows(), v.predicate_count());
            prop_assert_eq!(flat.unflatten().unwrap(), s);
        }
    }
}

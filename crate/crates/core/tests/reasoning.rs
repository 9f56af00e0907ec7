use nsrl::numerics::{grad_check, init_rng, ParamSet, Tape, Tensor};
use nsrl::reasoning::{kappa, kappa_from_matrices, kappa_on_tape, score, AttentionWeights};
use nsrl::symbolic::{encode, EntityId, GroundAtom, PredicateId, SymbolicState, Vocabulary};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vocab(entities: usize, predicates: usize) -> Vocabulary {
    let e: Vec<String> = (0..entities).map(|i| format!("x{i}")).collect();
    let p: Vec<String> = (0..predicates).map(|i| format!("P{i}")).collect();
    Vocabulary::new(e, p, Vec::<String>::new()).unwrap()
}

fn random_state(rng: &mut ChaCha8Rng, v: &Vocabulary, density: f64) -> SymbolicState {
    let x = v.entity_count();
    let mut atoms = Vec::new();
    for p in 0..v.predicate_count() {
        for i in 0..x {
            for j in 0..x {
                if rng.gen_bool(density) {
                    atoms.push(GroundAtom::new(PredicateId(p), EntityId(i), EntityId(j)));
                }
            }
        }
    }
    encode(&atoms, v).unwrap()
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / s).collect()
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize, t: usize) -> AttentionWeights {
    AttentionWeights {
        phi: (0..t).map(|_| random_distribution(rng, n)).collect(),
        psi: random_distribution(rng, t),
    }
}

/// Counts node sequences `i = v0 → v1 → … → vL = j` with each edge present
/// in the chain's predicate.
fn count_paths(state: &SymbolicState, chain: &[usize], i: usize, j: usize) -> f64 {
    fn walk(state: &SymbolicState, chain: &[usize], at: usize, j: usize) -> u64 {
        match chain.split_first() {
            None => u64::from(at == j),
            Some((&p, rest)) => (0..state.entity_count())
                .filter(|&next| state.get(PredicateId(p), EntityId(at), EntityId(next)))
                .map(|next| walk(state, rest, next, j))
                .sum(),
        }
    }
    walk(state, chain, i, j) as f64
}

fn all_chains(n: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|c| {
                (0..n).map(move |p| {
                    let mut c = c.clone();
                    c.push(p);
                    c
                })
            })
            .collect();
    }
    out
}

#[test]
fn one_hot_kappa_counts_ordered_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    for x in 1..=4 {
        for n in 1..=3 {
            let v = vocab(x, n);
            let states: Vec<SymbolicState> = (0..3).map(|_| random_state(&mut rng, &v, 0.45)).collect();
            for steps in 1..=3 {
                for len in 1..=steps {
                    for chain in all_chains(n, len) {
                        let ids: Vec<PredicateId> = chain.iter().map(|&p| PredicateId(p)).collect();
                        let w = AttentionWeights::one_hot(&ids, n, steps);
                        for s in &states {
                            let k = kappa(&w, s).unwrap();
                            for i in 0..x {
                                for j in 0..x {
                                    assert_eq!(
                                        k.get(i, j),
                                        count_paths(s, &chain, i, j),
                                        "chain {chain:?} entry ({i},{j})"
                                    );
                                }
                            }
                            cases += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(cases > 500);
}

#[test]
fn two_hop_chain_counts_paths_and_scores() {
    let v = Vocabulary::new(["x1", "x2", "x3", "x4"], ["A", "B"], Vec::<String>::new()).unwrap();
    let atoms: Vec<GroundAtom> = [("A", "x1", "x2"), ("A", "x1", "x4"), ("B", "x2", "x3"), ("B", "x4", "x3")]
        .iter()
        .map(|(p, a, b)| v.atom(p, a, b).unwrap())
        .collect();
    let s = encode(&atoms, &v).unwrap();
    let w = AttentionWeights::one_hot(&[PredicateId(0), PredicateId(1)], 2, 2);
    let k = kappa(&w, &s).unwrap();
    let ab = s.matrix(PredicateId(0)).matmul(&s.matrix(PredicateId(1))).unwrap();
    assert_eq!(k, ab);
    assert_eq!(score(EntityId(0), EntityId(2), &k).unwrap(), 2.0);
    assert_eq!(score(EntityId(0), EntityId(1), &k).unwrap(), 0.0);
}

/// Sum over every chain of every length, weighted by the product of its
/// attention entries, of the naive product of its matrices.
fn chain_expansion(w: &AttentionWeights, mats: &[Tensor]) -> Tensor {
    let x = mats[0].rows();
    let n = mats.len();
    let mut out = Tensor::zeros(x, x);
    for len in 1..=w.steps() {
        for chain in all_chains(n, len) {
            let mut coef = w.psi[len - 1];
            for (t, &p) in chain.iter().enumerate() {
                coef *= w.phi[t][p];
            }
            let mut prod = Tensor::eye(x);
            for &p in &chain {
                let mut next = Tensor::zeros(x, x);
                for i in 0..x {
                    for j in 0..x {
                        let mut acc = 0.0;
                        for m in 0..x {
                            acc += prod.get(i, m) * mats[p].get(m, j);
                        }
                        next.set(i, j, acc);
                    }
                }
                prod = next;
            }
            for i in 0..x {
                for j in 0..x {
                    out.set(i, j, out.get(i, j) + coef * prod.get(i, j));
                }
            }
        }
    }
    out
}

#[test]
fn soft_kappa_matches_chain_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = vocab(3, 3);
    for _ in 0..50 {
        let s = random_state(&mut rng, &v, 0.5);
        let w = random_weights(&mut rng, 3, 3);
        let mats: Vec<Tensor> = (0..3).map(|k| s.matrix(PredicateId(k))).collect();
        let k = kappa(&w, &s).unwrap();
        assert!(k.max_abs_diff(&chain_expansion(&w, &mats)) < 1e-9);
    }
}

#[test]
fn kappa_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = vocab(4, 3);
    for _ in 0..50 {
        let s = random_state(&mut rng, &v, 0.6);
        let w = random_weights(&mut rng, 3, 3);
        let k = kappa(&w, &s).unwrap();
        let max_row = (0..3)
            .map(|p| {
                let m = s.matrix(PredicateId(p));
                (0..4).map(|i| m.row_slice(i).iter().sum::<f64>()).fold(0.0, f64::max)
            })
            .fold(1.0, f64::max);
        for &e in k.data() {
            assert!(e >= 0.0 && e <= max_row.powi(3) + 1e-12);
        }
    }
}

#[test]
fn stochastic_matrices_conserve_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let mats: Vec<Tensor> = (0..3)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..4).map(|_| random_distribution(&mut rng, 4)).collect();
                Tensor::from_rows(&rows).unwrap()
            })
            .collect();
        let w = random_weights(&mut rng, 3, 3);
        let k = kappa_from_matrices(&w, &mats).unwrap();
        for i in 0..4 {
            let row: f64 = k.row_slice(i).iter().sum();
            assert!((row - 1.0).abs() < 1e-12, "row {i} sums to {row}");
        }
    }
}

fn stacked(states: &[SymbolicState]) -> Tensor {
    let n = states[0].predicate_count();
    let x2 = states[0].entity_count().pow(2);
    let data: Vec<f64> = states.iter().flat_map(|s| s.values().collect::<Vec<_>>()).collect();
    Tensor::matrix(states.len() * n, x2, data).unwrap()
}

#[test]
fn tape_kappa_matches_plain_kappa() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let v = vocab(4, 3);
    let states: Vec<SymbolicState> = (0..5).map(|_| random_state(&mut rng, &v, 0.4)).collect();
    let weights: Vec<AttentionWeights> = (0..5).map(|_| random_weights(&mut rng, 3, 3)).collect();
    let mut tape = Tape::detached();
    let mats = tape.constant(stacked(&states));
    let phi: Vec<_> = (0..3)
        .map(|t| {
            let rows: Vec<Vec<f64>> = weights.iter().map(|w| w.phi[t].clone()).collect();
            tape.constant(Tensor::from_rows(&rows).unwrap())
        })
        .collect();
    let psi_rows: Vec<Vec<f64>> = weights.iter().map(|w| w.psi.clone()).collect();
    let psi = tape.constant(Tensor::from_rows(&psi_rows).unwrap());
    let k = kappa_on_tape(&mut tape, mats, &phi, psi, 4).unwrap();
    let out = tape.value(k);
    for (b, (s, w)) in states.iter().zip(&weights).enumerate() {
        let plain = kappa(w, s).unwrap();
        for (a, e) in out.row_slice(b).iter().zip(plain.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn kappa_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = vocab(3, 3);
    let states: Vec<SymbolicState> = (0..2).map(|_| random_state(&mut rng, &v, 0.5)).collect();
    let mut prng = init_rng(3);
    let mut params = ParamSet::new();
    let phi_logits: Vec<_> = (0..3)
        .map(|t| params.add_uniform(format!("phi{t}"), 2, 3, 1, &mut prng))
        .collect();
    let psi_logits = params.add_uniform("psi", 2, 3, 1, &mut prng);
    let probe = Tensor::matrix(2, 9, (0..18).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let mats_t = stacked(&states);
    let report = grad_check(&params, 1e-5, usize::MAX, |tape| {
        let mats = tape.constant(mats_t.clone());
        let phi: Vec<_> = phi_logits
            .iter()
            .map(|&id| {
                let l = tape.param(id);
                tape.softmax_rows(l)
            })
            .collect();
        let l = tape.param(psi_logits);
        let psi = tape.softmax_rows(l);
        let k = kappa_on_tape(tape, mats, &phi, psi, 3).unwrap();
        let p = tape.constant(probe.clone());
        let weighted = tape.mul(k, p)?;
        let s = tape.sum(weighted);
        Ok(tape.square(s))
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{report:?}");
    assert!(report.max_abs_gradient > 0.0);
}

proptest! {
    #[test]
    fn one_hot_reduction_equals_matrix_product(
        seed in 0u64..1000,
        chain in prop::collection::vec(0usize..3, 1..=3),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vocab(4, 3);
        let s = random_state(&mut rng, &v, 0.5);
        let ids: Vec<PredicateId> = chain.iter().map(|&p| PredicateId(p)).collect();
        let k = kappa(&AttentionWeights::one_hot(&ids, 3, 3), &s).unwrap();
        let mut prod = Tensor::eye(4);
        for p in &ids {
            prod = prod.matmul(&s.matrix(*p)).unwrap();
        }
        prop_assert_eq!(k, prod);
    }
}

use nsrl::numerics::{init_rng, Tensor};
use nsrl::reasoning::{kappa, AttentionWeights};
use nsrl::rules::{
    aggregate, best_pair, chain_confidences, chain_confidences_beam, chain_confidences_exhaustive, parse_report_line,
    report_line, ChainRule, Clause,
};
use nsrl::symbolic::{encode, EntityId, GroundAtom, PredicateId, SymbolicState, Vocabulary};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize, t: usize) -> AttentionWeights {
    AttentionWeights {
        phi: (0..t).map(|_| random_simplex(rng, n)).collect(),
        psi: random_simplex(rng, t),
    }
}

/// Confidence of every chain by counting in base `n`.
fn oracle(w: &AttentionWeights) -> Vec<(Vec<usize>, f64)> {
    let n = w.phi[0].len();
    let mut out = Vec::new();
    for len in 1..=w.psi.len() {
        for code in 0..n.pow(len as u32) {
            let mut c = code;
            let mut body = vec![0; len];
            for slot in body.iter_mut().rev() {
                *slot = c % n;
                c /= n;
            }
            let p: f64 = body.iter().enumerate().map(|(t, &k)| w.phi[t][k]).product();
            out.push((body, w.psi[len - 1] * p));
        }
    }
    out
}

#[test]
fn exhaustive_matches_counting_oracle() {
    let mut rng = init_rng(3);
    for _ in 0..20 {
        let w = random_weights(&mut rng, 3, 3);
        let got = chain_confidences_exhaustive(&w);
        let want = oracle(&w);
        assert_eq!(got.len(), want.len());
        for (body, c) in want {
            let ids: Vec<PredicateId> = body.into_iter().map(PredicateId).collect();
            let g = got.iter().find(|(b, _)| *b == ids).unwrap().1;
            assert!((g - c).abs() < 1e-15);
        }
        assert!(got.windows(2).all(|p| p[0].1 >= p[1].1));
    }
}

#[test]
fn confidences_sum_to_one() {
    let mut rng = init_rng(5);
    for _ in 0..100 {
        let n = rng.gen_range(1..6);
        let t = rng.gen_range(1..5);
        let w = random_weights(&mut rng, n, t);
        let s: f64 = chain_confidences(&w).iter().map(|c| c.1).sum();
        assert!((s - 1.0).abs() < 1e-9, "{s}");
    }
}

#[test]
fn beam_is_exact_top_of_each_length() {
    let mut rng = init_rng(8);
    for _ in 0..10 {
        let w = random_weights(&mut rng, 6, 4);
        let full = chain_confidences_exhaustive(&w);
        let beam = chain_confidences_beam(&w, 16);
        for len in 1..=4 {
            let f: Vec<_> = full.iter().filter(|c| c.0.len() == len).take(16).collect();
            let b: Vec<_> = beam.iter().filter(|c| c.0.len() == len).collect();
            assert_eq!(f, b);
        }
        for c in &beam {
            assert!(full.contains(c));
        }
    }
}

#[test]
fn large_spaces_use_the_beam() {
    let mut rng = init_rng(9);
    let w = random_weights(&mut rng, 20, 4);
    let chains = chain_confidences(&w);
    assert_eq!(chains.len(), 20 + 256 * 3);
}

fn world() -> (Vocabulary, SymbolicState) {
    let v = Vocabulary::new(["a", "b", "c", "floor"], ["On", "Top/1", "GoalOn"], ["Move"]).unwrap();
    let atoms = [
        ("On", "a", "b"),
        ("On", "b", "floor"),
        ("On", "c", "floor"),
        ("Top", "a", "a"),
        ("Top", "c", "c"),
        ("GoalOn", "a", "c"),
    ];
    let atoms: Vec<GroundAtom> = atoms.iter().map(|(p, x, y)| v.atom(p, x, y).unwrap()).collect();
    let s = encode(&atoms, &v).unwrap();
    (v, s)
}

#[test]
fn chains_expand_kappa() {
    let (v, s) = world();
    let mut rng = init_rng(11);
    let w = random_weights(&mut rng, v.predicate_count(), 3);
    let k = kappa(&w, &s).unwrap();
    let x = v.entity_count();
    let mut sum = Tensor::zeros(x, x);
    for (body, c) in chain_confidences(&w) {
        let mut m = Tensor::eye(x);
        for p in body {
            m = m.matmul(&s.matrix(p)).unwrap();
        }
        for (acc, v) in sum.data_mut().iter_mut().zip(m.data()) {
            *acc += c * v;
        }
    }
    for i in 0..x {
        for j in 0..x {
            assert!((sum.get(i, j) - k.get(i, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn aggregation_averages_with_support() {
    let head = PredicateId(3);
    let a = vec![(vec![PredicateId(0)], 0.6), (vec![PredicateId(1)], 0.4)];
    let b = vec![(vec![PredicateId(0)], 0.2)];
    let rules = aggregate(&[a, b], head).unwrap();
    assert_eq!(rules.len(), 2);
    assert_eq!(rules[0].body, vec![PredicateId(0)]);
    assert!((rules[0].confidence - 0.4).abs() < 1e-15);
    assert!((rules[1].confidence - 0.2).abs() < 1e-15);
    assert!(rules.iter().all(|r| r.support == 2 && r.head == head));
}

#[test]
fn grounding_picks_the_best_pair() {
    let (v, s) = world();
    let w = AttentionWeights {
        psi: vec![1.0, 0.0],
        ..AttentionWeights::one_hot(&[v.predicate("GoalOn").unwrap()], v.predicate_count(), 2)
    };
    let k = kappa(&w, &s).unwrap();
    let e = |n| v.entity(n).unwrap();
    let candidates = [(e("a"), e("b")), (e("a"), e("c")), (e("c"), e("a"))];
    assert_eq!(best_pair(&k, &candidates), Some((e("a"), e("c"))));
    assert_eq!(best_pair(&k, &[]), None);
    let rule = ChainRule {
        body: vec![v.predicate("GoalOn").unwrap()],
        head: v.predicate("Move").unwrap(),
        confidence: 1.0,
        support: 1,
    };
    let (x, y) = best_pair(&k, &candidates).unwrap();
    assert_eq!(rule.grounded(&v, x, y).unwrap().render(&v), "Move(a,c) ← GoalOn(a,c)");
}

#[test]
fn keydoor_style_rules_render() {
    let v = Vocabulary::new(["man", "key", "door"], ["At", "Has/1", "Locked/1"], ["Goto", "Pick"]).unwrap();
    let p = |n| v.predicate(n).unwrap();
    let rule = ChainRule {
        body: vec![p("Has"), p("At"), p("Locked")],
        head: p("Goto"),
        confidence: 0.87654,
        support: 12,
    };
    assert_eq!(
        report_line(&rule, &v).unwrap(),
        "0.8765 Goto(X,Z1) ← Has(X,X) ∧ At(X,Z1) ∧ Locked(Z1,Z1)"
    );
    let g = rule.grounded(&v, EntityId(0), EntityId(2)).unwrap();
    assert_eq!(g.render(&v), "Goto(man,door) ← Has(man,man) ∧ At(man,door) ∧ Locked(door,door)");
}

fn vocab() -> Vocabulary {
    Vocabulary::new(["a", "b", "floor"], ["On", "Top/1", "GoalOn", "Below"], ["Move", "Pick"]).unwrap()
}

proptest! {
    #[test]
    fn clauses_round_trip(body in prop::collection::vec(0usize..4, 1..6), head in 4usize..6, conf in 0.0f64..1.0) {
        let v = vocab();
        let rule = ChainRule {
            body: body.into_iter().map(PredicateId).collect(),
            head: PredicateId(head),
            confidence: conf,
            support: 1,
        };
        let text = rule.render(&v).unwrap();
        let clause = Clause::parse(&text, &v).unwrap();
        prop_assert_eq!(clause.render(&v), text.clone());
        let back = clause.chain(&v).unwrap();
        prop_assert_eq!(&back.body, &rule.body);
        prop_assert_eq!(back.head, rule.head);
        let (c, again) = parse_report_line(&report_line(&rule, &v).unwrap(), &v).unwrap();
        prop_assert!((c - conf).abs() <= 5e-5);
        prop_assert_eq!(again, clause);
    }

    #[test]
    fn parser_never_panics(s in "\\PC{0,40}") {
        let _ = Clause::parse(&s, &vocab());
    }
}

use avsr_core::rnnt::{
    count_paths, greedy_decode, rnnt_loss, rnnt_loss_bruteforce, rnnt_loss_value, Joint, JointConfig, LabelSequence,
    PredictionConfig, PredictionNet, RnntLattice, DEFAULT_MAX_SYMBOLS,
};
use avsr_core::tensor::{logsumexp_slice, GradCheck, ParamStore, Tape, Tensor};
use avsr_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_logits(rng: &mut ChaCha8Rng, t: usize, u1: usize, k: usize) -> Tensor {
    Tensor::new([t, u1, k], (0..t * u1 * k).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
}

fn normalize(logits: &Tensor) -> RnntLattice {
    let k = *logits.shape().last().unwrap();
    let mut data = logits.data().to_vec();
    for row in data.chunks_exact_mut(k) {
        let z = logsumexp_slice(row);
        row.iter_mut().for_each(|x| *x -= z);
    }
    RnntLattice::new(Tensor::new(logits.shape(), data).unwrap()).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, u: usize, v: usize) -> LabelSequence {
    LabelSequence::new((0..u).map(|_| rng.gen_range(1..=v)).collect(), v).unwrap()
}

#[test]
fn dp_matches_bruteforce_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..200 {
        let (t, u, v) = (rng.gen_range(1..=4), rng.gen_range(0..=3), rng.gen_range(1..=3));
        let lat = normalize(&random_logits(&mut rng, t, u + 1, v + 1));
        let labels = random_labels(&mut rng, u, v);
        let dp = rnnt_loss_value(&lat, &labels).unwrap();
        let brute = rnnt_loss_bruteforce(&lat, &labels).unwrap();
        assert!((dp - brute).abs() < 1e-9, "T={t} U={u} V={v}: {dp} vs {brute}");
    }
}

#[test]
fn hand_values() {
    let one = LabelSequence::new(vec![1], 2).unwrap();
    let none = LabelSequence::new(vec![], 2).unwrap();
    assert_eq!(rnnt_loss_value(&RnntLattice::uniform(1, 0, 3), &none).unwrap(), 3f64.ln());
    assert!((rnnt_loss_value(&RnntLattice::uniform(1, 1, 3), &one).unwrap() - 2.0 * 3f64.ln()).abs() < 1e-15);
    assert!((rnnt_loss_value(&RnntLattice::uniform(2, 1, 3), &one).unwrap() - 13.5f64.ln()).abs() < 1e-15);
    assert_eq!(
        rnnt_loss_bruteforce(&RnntLattice::uniform(1, 0, 3), &none).unwrap(),
        rnnt_loss_value(&RnntLattice::uniform(1, 0, 3), &none).unwrap()
    );
}

#[test]
fn uniform_bruteforce_counts_paths() {
    // Every path has T + U events of probability 1/K each.
    for (t, u) in [(2, 2), (3, 1), (4, 3), (1, 3)] {
        let k = 4;
        let labels = LabelSequence::new(vec![1; u], 3).unwrap();
        let loss = rnnt_loss_bruteforce(&RnntLattice::uniform(t, u, k), &labels).unwrap();
        let expect = (t + u) as f64 * (k as f64).ln() - (count_paths(t, u) as f64).ln();
        assert!((loss - expect).abs() < 1e-12);
    }
    assert_eq!(count_paths(2, 2), 3);
}

#[test]
fn lattice_rejects_unnormalized_slices() {
    let bad = Tensor::zeros([1, 1, 3]);
    assert!(matches!(RnntLattice::new(bad), Err(Error::Domain { .. })));
}

#[test]
fn mismatched_label_axis_rejected() {
    let lat = RnntLattice::uniform(2, 2, 3);
    let labels = LabelSequence::new(vec![1], 2).unwrap();
    assert!(rnnt_loss_value(&lat, &labels).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let (t, u, v) = (rng.gen_range(1..=4), rng.gen_range(0..=3), 3);
        let logits = random_logits(&mut rng, t, u + 1, v + 1);
        let labels = random_labels(&mut rng, u, v);
        let report = GradCheck::new(1e-5)
            .run(|_, x| rnnt_loss(&x[0].log_softmax()?, &labels), &[logits])
            .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

#[test]
fn relabeling_unused_symbols_is_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let (t, u, v) = (rng.gen_range(1..=4), rng.gen_range(0..=2), 5);
        let lat = normalize(&random_logits(&mut rng, t, u + 1, v + 1));
        let labels = LabelSequence::new((0..u).map(|_| rng.gen_range(1..=2)).collect(), v).unwrap();
        // Permute the slices of symbols 3, 4, 5, which never occur in the labels.
        let perm = [0, 1, 2, 4, 5, 3];
        let k = v + 1;
        let mut data = lat.log_probs.data().to_vec();
        for (chunk, orig) in data.chunks_exact_mut(k).zip(lat.log_probs.data().chunks_exact(k)) {
            for (s, &p) in perm.iter().enumerate() {
                chunk[s] = orig[p];
            }
        }
        let moved = RnntLattice::new(Tensor::new(lat.log_probs.shape(), data).unwrap()).unwrap();
        let a = rnnt_loss_value(&lat, &labels).unwrap();
        let b = rnnt_loss_value(&moved, &labels).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn loss_is_nonnegative(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, u, v) = (rng.gen_range(1..=6), rng.gen_range(0..=5), rng.gen_range(1..=4));
        let lat = normalize(&random_logits(&mut rng, t, u + 1, v + 1));
        let labels = random_labels(&mut rng, u, v);
        prop_assert!(rnnt_loss_value(&lat, &labels).unwrap() >= -1e-9);
    }
}

fn small_nets(store: &mut ParamStore, vocab: usize) -> (PredictionNet, Joint) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let pcfg = PredictionConfig {
        vocab,
        embed_dim: 4,
        hidden: 5,
        layers: 2,
        out_dim: 6,
    };
    let pred = PredictionNet::new(store, "pred", pcfg, &mut rng).unwrap();
    let jcfg = JointConfig {
        enc_dim: 3,
        pred_dim: 6,
        hidden: 7,
        symbols: vocab + 1,
    };
    let joint = Joint::new(store, "joint", jcfg, &mut rng);
    (pred, joint)
}

#[test]
fn prediction_gradient_on_three_tokens() {
    let mut store = ParamStore::new();
    let (pred, _) = small_nets(&mut store, 4);
    let labels = LabelSequence::new(vec![2, 4, 1], 4).unwrap();
    let target = Tensor::new([4, 6], (0..24).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
    let report = GradCheck::new(1e-5)
        .run(
            |tape, p| {
                let g = pred.forward(tape, p, &labels)?;
                Ok(g.mul(&tape.constant(target.clone()))?.sum())
            },
            &store.tensors(),
        )
        .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn prediction_joint_loss_gradient() {
    let mut store = ParamStore::new();
    let (pred, joint) = small_nets(&mut store, 4);
    let labels = LabelSequence::new(vec![3, 1], 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let h = Tensor::new([3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut inputs = vec![h];
    inputs.extend(store.tensors());
    let report = GradCheck::new(1e-5)
        .run(
            |tape, v| {
                let p = &v[1..];
                let g = pred.forward(tape, p, &labels)?;
                rnnt_loss(&joint.forward(p, &v[0], &g)?, &labels)
            },
            &inputs,
        )
        .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn joint_lattice_is_normalized() {
    let mut store = ParamStore::new();
    let (pred, joint) = small_nets(&mut store, 3);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let labels = LabelSequence::new(vec![1], 3).unwrap();
    let g = pred.forward(&tape, &p, &labels).unwrap();
    let h = tape.constant(Tensor::full([2, 3], 0.3));
    let lat = joint.forward(&p, &h, &g).unwrap().value();
    assert_eq!(lat.shape(), &[2, 2, 4]);
    RnntLattice::new((*lat).clone()).unwrap();
}

#[test]
fn greedy_decode_respects_cap_and_vocabulary() {
    let mut store = ParamStore::new();
    let (pred, joint) = small_nets(&mut store, 4);
    let h = Tensor::new([5, 3], (0..15).map(|i| (i as f64).sin()).collect()).unwrap();
    let out = greedy_decode(&store, &pred, &joint, &h, DEFAULT_MAX_SYMBOLS).unwrap();
    assert!(out.len() <= 5 * DEFAULT_MAX_SYMBOLS);
    assert!(out.tokens().iter().all(|&t| (1..=4).contains(&t)));
    let again = greedy_decode(&store, &pred, &joint, &h, DEFAULT_MAX_SYMBOLS).unwrap();
    assert_eq!(out, again);
}

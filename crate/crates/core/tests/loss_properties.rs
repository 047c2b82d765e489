use proptest::prelude::*;

use imbda::kernel::{euclidean, Tape, Tensor};
use imbda::losses::{
    centroid_alignment_loss, centroid_ratio, cross_entropy, discriminative_alignment_loss, domain_adversarial_loss,
    CentroidBank, WeightedBatch,
};
use imbda::synth::Domain;

const DIM: usize = 3;
const CLASSES: usize = 3;

#[derive(Debug, Clone)]
struct Side {
    feats: Vec<f64>,
    labels: Vec<usize>,
    weights: Vec<f64>,
}

fn side(min: usize, max: usize) -> impl Strategy<Value = Side> {
    (min..=max).prop_flat_map(|n| {
        (
            prop::collection::vec(-4.0f64..4.0, n * DIM),
            prop::collection::vec(0..CLASSES, n),
            prop::collection::vec(0.05f64..1.0, n),
        )
            .prop_map(|(feats, labels, weights)| Side { feats, labels, weights })
    })
}

fn spread_side() -> impl Strategy<Value = Side> {
    (2..=6usize).prop_flat_map(|n| {
        (
            prop::collection::vec(-200.0f64..200.0, n * DIM),
            prop::collection::vec(0..CLASSES, n),
            prop::collection::vec(0.25f64..0.5, n),
        )
            .prop_map(|(feats, labels, weights)| Side { feats, labels, weights })
    })
}

/// Random orthogonal 3×3 matrix from three angles.
fn rotation(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    let rz = [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rx = [[1.0, 0.0, 0.0], [0.0, c.cos(), -c.sin()], [0.0, c.sin(), c.cos()]];
    let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
            }
        }
        r
    };
    mul(mul(rz, ry), rx)
}

fn rotate(feats: &[f64], r: &[[f64; 3]; 3]) -> Vec<f64> {
    feats
        .chunks(DIM)
        .flat_map(|x| (0..3).map(move |i| (0..3).map(|k| r[i][k] * x[k]).sum::<f64>()))
        .collect()
}

fn batch(tape: &mut Tape, s: &Side, feats: &[f64], weight_scale: f64) -> WeightedBatch {
    let f = tape.leaf(Tensor::new(s.labels.len(), DIM, feats.to_vec()).unwrap());
    let w = s.weights.iter().map(|w| w * weight_scale).collect();
    WeightedBatch::new(tape, f, s.labels.clone(), w, CLASSES).unwrap()
}

fn dfa(src: &Side, tgt: &Side, rot: Option<&[[f64; 3]; 3]>, weight_scale: f64) -> Option<f64> {
    let mut tape = Tape::new();
    let (fs, ft) = match rot {
        Some(r) => (rotate(&src.feats, r), rotate(&tgt.feats, r)),
        None => (src.feats.clone(), tgt.feats.clone()),
    };
    let bs = batch(&mut tape, src, &fs, weight_scale);
    let bt = batch(&mut tape, tgt, &ft, weight_scale);
    discriminative_alignment_loss(&mut tape, &bs, &bt)
        .unwrap()
        .map(|l| tape.value(l).unwrap().item())
}

/// Two consecutive bank updates so stored centroids are part of the value.
fn dsm(history: &(Side, Side), current: &(Side, Side), rot: Option<&[[f64; 3]; 3]>) -> Option<f64> {
    let mut bank = CentroidBank::new(CLASSES, DIM, 0.7).unwrap();
    let mut value = None;
    for (src, tgt) in [history, current] {
        let mut tape = Tape::new();
        let (fs, ft) = match rot {
            Some(r) => (rotate(&src.feats, r), rotate(&tgt.feats, r)),
            None => (src.feats.clone(), tgt.feats.clone()),
        };
        let bs = batch(&mut tape, src, &fs, 1.0);
        let bt = batch(&mut tape, tgt, &ft, 1.0);
        value = centroid_alignment_loss(&mut tape, &mut bank, &bs, &bt)
            .unwrap()
            .map(|l| tape.value(l).unwrap().item());
    }
    value
}

proptest! {
    #[test]
    fn alignment_losses_are_rotation_invariant(
        src in side(2, 8), tgt in side(2, 8), old_src in side(2, 8), old_tgt in side(2, 8),
        a in 0.0f64..6.3, b in 0.0f64..6.3, c in 0.0f64..6.3,
    ) {
        let r = rotation(a, b, c);
        match (dfa(&src, &tgt, None, 1.0), dfa(&src, &tgt, Some(&r), 1.0)) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}"),
            (x, y) => prop_assert_eq!(x.is_none(), y.is_none()),
        }
        let history = (old_src, old_tgt);
        let current = (src, tgt);
        match (dsm(&history, &current, None), dsm(&history, &current, Some(&r))) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}"),
            (x, y) => prop_assert_eq!(x.is_none(), y.is_none()),
        }
    }

    /// The 1e-8 denominator guard is not scale free, so the check keeps every
    /// cross distance at 80 or more, bounding its relative effect by 5e-10.
    #[test]
    fn discriminative_loss_ignores_common_weight_scale(
        src in spread_side(), tgt in spread_side(), k in 0.5f64..2.0,
    ) {
        let far = src.feats.chunks(DIM).all(|a| tgt.feats.chunks(DIM).all(|b| euclidean(a, b) >= 80.0));
        prop_assume!(far);
        if let (Some(x), Some(y)) = (dfa(&src, &tgt, None, 1.0), dfa(&src, &tgt, None, k)) {
            prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn losses_are_non_negative(
        src in side(2, 8), tgt in side(2, 8),
        logits in prop::collection::vec(-10.0f64..10.0, 8 * CLASSES),
        ds in prop::collection::vec(0.0f64..=1.0, 1..6),
        dt in prop::collection::vec(0.0f64..=1.0, 1..6),
    ) {
        if let Some(v) = dfa(&src, &tgt, None, 1.0) {
            prop_assert!(v >= 0.0);
        }
        if let Some(v) = dsm(&(src.clone(), tgt.clone()), &(src.clone(), tgt.clone()), None) {
            prop_assert!(v >= 0.0);
        }
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::new(8, CLASSES, logits).unwrap());
        let p = tape.softmax(l).unwrap();
        let labels: Vec<usize> = (0..8).map(|i| i % CLASSES).collect();
        let ce = cross_entropy(&mut tape, p, &labels).unwrap();
        prop_assert!(tape.value(ce).unwrap().item() >= 0.0);
        let s = tape.leaf(Tensor::new(ds.len(), 1, ds.clone()).unwrap());
        let t = tape.leaf(Tensor::new(dt.len(), 1, dt.clone()).unwrap());
        let dc = domain_adversarial_loss(&mut tape, s, t).unwrap();
        prop_assert!(tape.value(dc).unwrap().item() >= 0.0);
    }
}

#[test]
fn pair_loss_worked_example() {
    let mut tape = Tape::new();
    let fs = tape.leaf(Tensor::new(1, 2, vec![0.0, 0.0]).unwrap());
    let ft = tape.leaf(Tensor::new(2, 2, vec![0.0, 1.0, 3.0, 0.0]).unwrap());
    let bs = WeightedBatch::new(&tape, fs, vec![0], vec![1.0], 2).unwrap();
    let bt = WeightedBatch::new(&tape, ft, vec![0, 1], vec![1.0, 0.25], 2).unwrap();
    let l = discriminative_alignment_loss(&mut tape, &bs, &bt).unwrap().unwrap();
    assert!((tape.value(l).unwrap().item() - 1.0 / (1.5 + 1e-8)).abs() < 1e-12);

    // all pairs disagree: no numerator, no loss
    let bt = WeightedBatch::new(&tape, ft, vec![1, 1], vec![1.0, 1.0], 2).unwrap();
    assert!(discriminative_alignment_loss(&mut tape, &bs, &bt).unwrap().is_none());

    // coincident same-class features
    let same = tape.leaf(Tensor::new(2, 2, vec![0.0, 0.0, 5.0, 5.0]).unwrap());
    let bs2 = WeightedBatch::new(&tape, same, vec![0, 1], vec![1.0, 1.0], 2).unwrap();
    let bt2 = WeightedBatch::new(&tape, same, vec![0, 1], vec![1.0, 1.0], 2).unwrap();
    let l = discriminative_alignment_loss(&mut tape, &bs2, &bt2).unwrap().unwrap();
    assert_eq!(tape.value(l).unwrap().item(), 0.0);
}

#[test]
fn centroid_ratio_worked_example() {
    // same-class distances 1 and 1, cross-class distances 3 and 3
    let mut tape = Tape::new();
    let mut bank = CentroidBank::new(2, 1, 0.7).unwrap();
    let src = tape.leaf(Tensor::new(2, 1, vec![0.0, 2.0]).unwrap());
    let tgt = tape.leaf(Tensor::new(2, 1, vec![-1.0, 3.0]).unwrap());
    let bs = WeightedBatch::new(&tape, src, vec![0, 1], vec![1.0, 1.0], 2).unwrap();
    let bt = WeightedBatch::new(&tape, tgt, vec![0, 1], vec![1.0, 1.0], 2).unwrap();
    let s = bank.update(&mut tape, &bs, Domain::Source).unwrap();
    let t = bank.update(&mut tape, &bt, Domain::Target).unwrap();
    let l = centroid_ratio(&mut tape, &s, &t).unwrap().unwrap();
    assert!((tape.value(l).unwrap().item() - 1.0 / (3.0 + 1e-8)).abs() < 1e-12);
}

#[test]
fn stored_centroids_carry_no_gradient() {
    let mut bank = CentroidBank::new(2, 2, 0.5).unwrap();
    let mut tape = Tape::new();
    let first = tape.leaf(Tensor::new(2, 2, vec![1.0, 1.0, -1.0, -1.0]).unwrap());
    let b = WeightedBatch::new(&tape, first, vec![0, 1], vec![1.0, 1.0], 2).unwrap();
    bank.update(&mut tape, &b, Domain::Source).unwrap();

    // class 1 is absent now, so its centroid is entirely historical
    let mut tape = Tape::new();
    let now = tape.leaf(Tensor::new(1, 2, vec![3.0, 0.0]).unwrap());
    let b = WeightedBatch::new(&tape, now, vec![0], vec![1.0], 2).unwrap();
    let set = bank.update(&mut tape, &b, Domain::Source).unwrap();
    let total = tape.sum(set.matrix).unwrap();
    let g = tape.backward(total).unwrap().wrt(&tape, now).unwrap();
    // only the (1 − θ) share of class 0 depends on the current batch
    assert_eq!(g.values(), &[0.5, 0.5]);
    assert_eq!(bank.centroid(Domain::Source, 0).unwrap(), &[2.0, 0.5]);
    assert_eq!(bank.centroid(Domain::Source, 1).unwrap(), &[-1.0, -1.0]);
}

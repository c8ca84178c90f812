use proptest::prelude::*;

use smpq::analysis::{interaction_probe, kendall_tau, Edit};
use smpq::data::{encode_idx, gen_synthetic, parse_idx, split, Dataset, SyntheticKind};
use smpq::nn::{build_network, mlp_spec, OptimizerKind, TrainConfig};
use smpq::quant::{quantize_activations, quantize_weights, BitWidth, QuantizerState};
use smpq::search::finetune;
use smpq::supernet::{EdgeId, EdgeKind, QuantPolicy, SearchSpace, Supernet};
use smpq::{Result, Tensor};

fn distinct(v: &[f64]) -> bool {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).all(|w| w[0] != w[1])
}

proptest! {
    #[test]
    fn weight_quantizer_stays_in_range_and_is_idempotent(
        w in prop::collection::vec(-100.0f64..100.0, 1..64),
        b in 1u32..=16,
    ) {
        let t = Tensor::from_vec(w);
        let bw = BitWidth::new(b).unwrap();
        let q = quantize_weights(&t, bw);
        let s = t.max_abs();
        prop_assert!(q.data().iter().all(|v| v.abs() <= s * (1.0 + 1e-12)));
        prop_assert_eq!(quantize_weights(&q, bw), q);
    }

    #[test]
    fn activation_quantizer_error_is_at_most_half_a_step(
        x in prop::collection::vec(0.0f64..3.0, 1..64),
        clip in 0.1f64..3.0,
        b in 1u32..=12,
    ) {
        let st = QuantizerState::new(clip).unwrap();
        let bw = BitWidth::new(b).unwrap();
        let q = quantize_activations(&Tensor::from_vec(x.clone()), bw, &st);
        let step = clip / ((1u64 << b) - 1) as f64;
        for (xi, qi) in x.iter().zip(q.data()) {
            prop_assert!((xi.clamp(0.0, clip) - qi).abs() <= step / 2.0 + 1e-12);
        }
    }

    #[test]
    fn kendall_reversal_flips_sign(x in prop::collection::vec(-1e3f64..1e3, 2..30), seed in any::<u64>()) {
        prop_assume!(distinct(&x));
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v.sin() + (seed % 97) as f64 * i as f64 * 1e-3).collect();
        prop_assume!(distinct(&y));
        let rev: Vec<f64> = y.iter().map(|v| -v).collect();
        let t = kendall_tau(&x, &y).unwrap();
        prop_assert!((kendall_tau(&x, &rev).unwrap() + t).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&t));
    }

    #[test]
    fn kendall_ignores_monotone_transforms(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..30),
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let t = kendall_tau(&x, &y).unwrap();
        let fx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let fy: Vec<f64> = y.iter().map(|v| v * v * v + 2.0 * v).collect();
        prop_assert!((kendall_tau(&fx, &fy).unwrap() - t).abs() < 1e-12);
    }

    #[test]
    fn split_partitions_and_stratifies(
        n in 20usize..200,
        classes in 2usize..5,
        frac in 0.1f64..0.9,
        seed in any::<u64>(),
    ) {
        let d = gen_synthetic(SyntheticKind::Gaussians, n, classes, 0.3, seed).unwrap();
        let (tr, va) = split(&d, frac, seed ^ 1).unwrap();
        prop_assert_eq!(tr.len() + va.len(), d.len());
        for ((c, a), b) in d.class_counts().iter().zip(tr.class_counts()).zip(va.class_counts()) {
            prop_assert_eq!(a + b, *c);
            prop_assert_eq!(b, (*c as f64 * frac).round() as usize);
        }
        let again = split(&d, frac, seed ^ 1).unwrap();
        prop_assert_eq!(again.0.labels, tr.labels);
    }

    #[test]
    fn idx_round_trip(
        n in 1usize..12,
        rows in 1usize..6,
        cols in 1usize..6,
        seed in any::<u64>(),
    ) {
        let pixels: Vec<u8> = (0..n * rows * cols).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let (img, lab) = encode_idx(&pixels, &labels, rows, cols);
        let d = parse_idx(&img, &lab).unwrap();
        prop_assert_eq!(d.inputs.shape(), &[n, 1, rows, cols][..]);
        for (p, v) in pixels.iter().zip(d.inputs.data()) {
            prop_assert_eq!(*p as f64 / 255.0, *v);
        }
        prop_assert_eq!(d.labels, labels.iter().map(|&l| l as usize).collect::<Vec<_>>());
        let mut truncated = img.clone();
        truncated.pop();
        prop_assert!(parse_idx(&truncated, &lab).is_err());
    }
}

/// Two one-layer networks trained separately; the score averages their
/// accuracies, so each policy layer only ever touches its own network.
struct Parallel {
    nets: [Supernet; 2],
    data: [(Dataset, Dataset); 2],
    tc: TrainConfig,
}

impl Parallel {
    fn new() -> Self {
        let space = SearchSpace::s2();
        let make = |seed| {
            let d = gen_synthetic(SyntheticKind::Gaussians, 200, 3, 0.6, seed).unwrap();
            let net = Supernet::build(build_network(&[2], &mlp_spec(&[2, 3]), seed).unwrap(), space.clone()).unwrap();
            (net, split(&d, 0.3, seed).unwrap())
        };
        let (a, da) = make(1);
        let (b, db) = make(2);
        Self {
            nets: [a, b],
            data: [da, db],
            tc: TrainConfig { learning_rate: 0.05, batch_size: 16, epochs: 3, optimizer: OptimizerKind::Adam, seed: 4 },
        }
    }

    fn score(&self, p: &QuantPolicy) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..2 {
            let sub = QuantPolicy { layers: vec![p.layers[i]] };
            let (tr, va) = &self.data[i];
            total += finetune(&self.nets[i], &sub, tr, va, &self.tc)?.1.val_accuracy;
        }
        Ok(total / 2.0)
    }
}

#[test]
fn independent_sub_networks_have_no_interaction() {
    let par = Parallel::new();
    let bits = |b| BitWidth::new(b).unwrap();
    let base = QuantPolicy::uniform(2, bits(4), bits(4));
    let eval = |p: &QuantPolicy| par.score(p);
    for (b0, b1) in [(1, 2), (2, 3), (1, 4)] {
        let edits = [
            Edit { edge: EdgeId { layer: 0, kind: EdgeKind::Weight }, bit: bits(b0) },
            Edit { edge: EdgeId { layer: 1, kind: EdgeKind::Activation }, bit: bits(b1) },
        ];
        let r = interaction_probe(&base, edits, &eval).unwrap();
        assert!(r.gap.abs() < 1e-12, "gap {} for edits {b0}/{b1}", r.gap);
    }
}

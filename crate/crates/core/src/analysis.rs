//! Diagnostic experiments: rank correlation between a bit-width predictor
//! and fine-tuned accuracy, the per-edge alpha probe, and the two-edit
//! interaction probe.

use std::collections::HashSet;
use std::io::Write;

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::TrainConfig;
use crate::quant::BitWidth;
use crate::search::finetune;
use crate::supernet::{EdgeId, QuantPolicy, Supernet};

/// Large-scale reference value of the Shapley predictor's rank correlation.
/// Stored as metadata only.
pub const REFERENCE_TAU: f64 = 0.494;

/// Predictor used for both methods: mean raw alpha of the chosen candidates.
pub const PREDICTOR: &str = "mean raw alpha of the selected candidates";

/// Kendall tau-a: `(concordant - discordant) / (n (n - 1) / 2)`, tied pairs
/// count as neither.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "kendall_tau: lengths differ ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("kendall_tau needs at least 2 points, got {n}")));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("kendall_tau: non-finite input".into()));
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let p = (xs[i] - xs[j]).signum() * (ys[i] - ys[j]).signum();
            if xs[i] != xs[j] && ys[i] != ys[j] {
                s += p as i64;
            }
        }
    }
    Ok(s as f64 / (n * (n - 1) / 2) as f64)
}

/// Measures a policy, typically by fine-tuning and reading validation
/// accuracy.
pub trait PolicyEvaluator {
    fn evaluate(&self, policy: &QuantPolicy) -> Result<f64>;
}

impl<F: Fn(&QuantPolicy) -> Result<f64>> PolicyEvaluator for F {
    fn evaluate(&self, policy: &QuantPolicy) -> Result<f64> {
        self(policy)
    }
}

/// Fine-tunes the policy from a supernet's weights and reports validation
/// accuracy.
pub struct FinetuneEvaluator<'a> {
    pub supernet: &'a Supernet,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub cfg: TrainConfig,
}

impl PolicyEvaluator for FinetuneEvaluator<'_> {
    fn evaluate(&self, policy: &QuantPolicy) -> Result<f64> {
        Ok(finetune(self.supernet, policy, self.train, self.val, &self.cfg)?.1.val_accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPolicySample {
    pub policy: String,
    pub score: f64,
    pub accuracy: f64,
}

/// `k` distinct policies drawn uniformly from the supernet's search space.
pub fn sample_policies(supernet: &Supernet, k: usize, seed: u64) -> Result<Vec<QuantPolicy>> {
    let edges = supernet.edges();
    let total = edges
        .iter()
        .fold(BigUint::from(1u32), |acc, &e| acc * supernet.edge(e).candidates.len());
    if total < BigUint::from(k) {
        return Err(Error::InvalidArgument(format!(
            "search space holds {total} policies, fewer than the {k} requested"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let mut p = supernet.discretize();
        for &e in &edges {
            let c = &supernet.edge(e).candidates;
            p = p.with_bit(e, c[rng.gen_range(0..c.len())]);
        }
        if seen.insert(p.clone()) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Mean alpha of the candidates `policy` selects, over every edge.
pub fn policy_score(supernet: &Supernet, policy: &QuantPolicy) -> Result<f64> {
    supernet.validate_policy(policy)?;
    let edges = supernet.edges();
    let sum: f64 = edges
        .iter()
        .map(|&e| {
            let edge = supernet.edge(e);
            let i = edge
                .candidates
                .iter()
                .position(|&b| b == policy.bit(e))
                .expect("validated policy");
            edge.alpha[i]
        })
        .sum();
    Ok(sum / edges.len() as f64)
}

fn ranked(supernet: &Supernet, policies: &[QuantPolicy], eval: &dyn PolicyEvaluator) -> Result<(f64, Vec<RankedPolicySample>)> {
    let mut samples = Vec::with_capacity(policies.len());
    for p in policies {
        let score = policy_score(supernet, p)?;
        let accuracy = eval.evaluate(p)?;
        if !accuracy.is_finite() {
            return Err(Error::Numerical(format!("non-finite accuracy for policy {}", p.describe())));
        }
        samples.push(RankedPolicySample {
            policy: p.describe(),
            score,
            accuracy,
        });
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.accuracy).collect();
    Ok((kendall_tau(&xs, &ys)?, samples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub seed: u64,
    pub k: usize,
    pub tau_smpq: f64,
    pub tau_dmpq: f64,
    pub smpq: Vec<RankedPolicySample>,
    pub dmpq: Vec<RankedPolicySample>,
}

/// Draws the same `k` policies for both supernets (both share one search
/// space), scores each with its supernet's alpha and measures it with the
/// matching evaluator.
pub fn correlation_experiment(
    smpq: (&Supernet, &dyn PolicyEvaluator),
    dmpq: (&Supernet, &dyn PolicyEvaluator),
    k: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    if k < 5 {
        return Err(Error::InvalidArgument(format!("correlation needs k >= 5, got {k}")));
    }
    if smpq.0.space() != dmpq.0.space() || smpq.0.layers() != dmpq.0.layers() {
        return Err(Error::InvalidArgument("supernets differ in search space or depth".into()));
    }
    let policies = sample_policies(smpq.0, k, seed)?;
    let (tau_smpq, s) = ranked(smpq.0, &policies, smpq.1)?;
    let (tau_dmpq, d) = ranked(dmpq.0, &policies, dmpq.1)?;
    Ok(CorrelationReport {
        seed,
        k,
        tau_smpq,
        tau_dmpq,
        smpq: s,
        dmpq: d,
    })
}

impl CorrelationReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["seed", "method", "policy", "score", "accuracy"])?;
        for (method, rows) in [("smpq", &self.smpq), ("dmpq", &self.dmpq)] {
            for r in rows {
                csv.write_record([
                    self.seed.to_string(),
                    method.to_string(),
                    r.policy.clone(),
                    r.score.to_string(),
                    r.accuracy.to_string(),
                ])?;
            }
        }
        csv.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitfallRow {
    pub bit: u32,
    pub alpha: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitfallReport {
    pub edge: EdgeId,
    pub rows: Vec<PitfallRow>,
    /// Tau between alpha and accuracy; absent for a single candidate.
    pub tau: Option<f64>,
    /// Highest-alpha candidate is also the most accurate one.
    pub argmax_agrees: bool,
    /// Alpha order and accuracy order agree on every pair.
    pub rank_consistent: bool,
}

fn first_max(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Fixes each candidate of `edge` in turn, the rest at the supernet's
/// winner-take-all policy, and measures it.
pub fn pitfall_probe(supernet: &Supernet, edge: EdgeId, eval: &dyn PolicyEvaluator) -> Result<PitfallReport> {
    if !supernet.edges().contains(&edge) {
        return Err(Error::InvalidArgument(format!(
            "edge {edge:?} out of range for {} layers",
            supernet.layers()
        )));
    }
    let base = supernet.discretize();
    let e = supernet.edge(edge);
    let mut rows = Vec::with_capacity(e.candidates.len());
    for (i, &bit) in e.candidates.iter().enumerate() {
        rows.push(PitfallRow {
            bit: bit.bits(),
            alpha: e.alpha[i],
            accuracy: eval.evaluate(&base.with_bit(edge, bit))?,
        });
    }
    let alpha: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let tau = if rows.len() >= 2 { Some(kendall_tau(&alpha, &acc)?) } else { None };
    Ok(PitfallReport {
        edge,
        argmax_agrees: first_max(&alpha) == first_max(&acc),
        rank_consistent: tau.is_none_or(|t| t == 1.0),
        tau,
        rows,
    })
}

impl PitfallReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        for r in &self.rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub edge: EdgeId,
    pub bit: BitWidth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionReport {
    pub base: String,
    pub edits: [Edit; 2],
    pub acc_b0: f64,
    pub acc_b1: f64,
    pub acc_b2: f64,
    pub acc_b3: f64,
    pub delta_b1: f64,
    pub delta_b2: f64,
    pub delta_b3: f64,
    /// `delta_b3 - (delta_b1 + delta_b2)`.
    pub gap: f64,
}

/// Measures the base policy, each single edit, and both edits together.
pub fn interaction_probe(base: &QuantPolicy, edits: [Edit; 2], eval: &dyn PolicyEvaluator) -> Result<InteractionReport> {
    if edits[0].edge == edits[1].edge {
        return Err(Error::InvalidArgument(format!("both edits touch edge {:?}", edits[0].edge)));
    }
    for e in &edits {
        if e.edge.layer >= base.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "edit on layer {} but the policy has {} layers",
                e.edge.layer,
                base.layers.len()
            )));
        }
    }
    let b1 = base.with_bit(edits[0].edge, edits[0].bit);
    let b2 = base.with_bit(edits[1].edge, edits[1].bit);
    let b3 = b1.with_bit(edits[1].edge, edits[1].bit);
    let acc_b0 = eval.evaluate(base)?;
    let acc_b1 = eval.evaluate(&b1)?;
    let acc_b2 = eval.evaluate(&b2)?;
    let acc_b3 = eval.evaluate(&b3)?;
    let (d1, d2, d3) = (acc_b1 - acc_b0, acc_b2 - acc_b0, acc_b3 - acc_b0);
    Ok(InteractionReport {
        base: base.describe(),
        edits,
        acc_b0,
        acc_b1,
        acc_b2,
        acc_b3,
        delta_b1: d1,
        delta_b2: d2,
        delta_b3: d3,
        gap: d3 - (d1 + d2),
    })
}

impl InteractionReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["variant", "policy_edits", "accuracy", "delta"])?;
        let rows = [
            ("B0", "none".to_string(), self.acc_b0, 0.0),
            ("B1", edit_label(&self.edits[0]), self.acc_b1, self.delta_b1),
            ("B2", edit_label(&self.edits[1]), self.acc_b2, self.delta_b2),
            (
                "B3",
                format!("{};{}", edit_label(&self.edits[0]), edit_label(&self.edits[1])),
                self.acc_b3,
                self.delta_b3,
            ),
        ];
        for (v, e, a, d) in rows {
            csv.write_record([v.to_string(), e, a.to_string(), d.to_string()])?;
        }
        csv.flush()?;
        Ok(())
    }
}

fn edit_label(e: &Edit) -> String {
    format!("layer{}.{}={}", e.edge.layer, e.edge.kind, e.bit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_network, mlp_spec};
    use crate::supernet::{EdgeKind, SearchSpace};
    use rand::seq::SliceRandom;

    fn bw(b: u32) -> BitWidth {
        BitWidth::new(b).unwrap()
    }

    fn s2_net() -> Supernet {
        Supernet::build(build_network(&[2], &mlp_spec(&[2, 6, 2]), 0).unwrap(), SearchSpace::s2()).unwrap()
    }

    #[test]
    fn tau_examples() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[6.0, 5.0, 4.0]).unwrap(), -1.0);
        let t = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((t - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn tau_ties_and_errors() {
        assert_eq!(kendall_tau(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(kendall_tau(&[1.0], &[1.0]).is_err());
        assert!(kendall_tau(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn tau_null_distribution_centres_on_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let trials = 2000;
        let mut sum = 0.0;
        for _ in 0..trials {
            let mut ys = xs.clone();
            ys.shuffle(&mut rng);
            sum += kendall_tau(&xs, &ys).unwrap();
        }
        // sd of tau under the null for n = 10 is about 0.25
        let se = 0.25 / (trials as f64).sqrt();
        assert!((sum / trials as f64).abs() < 4.0 * se);
    }

    #[test]
    fn sampled_policies_are_distinct_and_valid() {
        let s = s2_net();
        let p = sample_policies(&s, 30, 1).unwrap();
        let set: HashSet<_> = p.iter().cloned().collect();
        assert_eq!(set.len(), 30);
        for q in &p {
            s.validate_policy(q).unwrap();
        }
        assert_eq!(p, sample_policies(&s, 30, 1).unwrap());
        // 4 * 3 * 4 * 3 = 144 policies
        assert!(sample_policies(&s, 145, 1).is_err());
        assert_eq!(sample_policies(&s, 144, 1).unwrap().len(), 144);
    }

    #[test]
    fn score_is_mean_selected_alpha() {
        let mut s = s2_net();
        s.set_alpha_flat(&(0..14).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        // weight0 bit 1 -> 0, act0 bit 4 -> 6, weight1 bit 2 -> 8, act1 bit 2 -> 11
        let p = QuantPolicy::uniform(2, bw(1), bw(2))
            .with_bit(EdgeId { layer: 0, kind: EdgeKind::Activation }, bw(4))
            .with_bit(EdgeId { layer: 1, kind: EdgeKind::Weight }, bw(2));
        assert_eq!(policy_score(&s, &p).unwrap(), (0.0 + 6.0 + 8.0 + 11.0) / 4.0);
    }

    #[test]
    fn injected_predictor_gives_unit_tau() {
        let mut s = s2_net();
        // powers of two keep every policy's score distinct
        let alpha: Vec<f64> = (0..14).map(|i| (1u32 << i) as f64).collect();
        s.set_alpha_flat(&alpha).unwrap();
        let probe = s.clone();
        let acc = move |p: &QuantPolicy| policy_score(&probe, p);
        let r = correlation_experiment((&s, &acc), (&s, &acc), 10, 0).unwrap();
        assert_eq!(r.tau_smpq, 1.0);
        assert_eq!(r.tau_dmpq, 1.0);
        assert!(correlation_experiment((&s, &acc), (&s, &acc), 4, 0).is_err());
    }

    #[test]
    fn pitfall_rows_and_disagreement() {
        let mut s = s2_net();
        let edge = EdgeId { layer: 0, kind: EdgeKind::Weight };
        // highest alpha on the lowest bit while accuracy grows with the bit
        s.edge_mut(edge).alpha = vec![3.0, 2.0, 1.0, 0.0];
        s.sync_mixture();
        let acc = |p: &QuantPolicy| -> Result<f64> { Ok(p.bit(edge).bits() as f64 / 10.0) };
        let r = pitfall_probe(&s, edge, &acc).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.rows.iter().map(|r| r.bit).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(r.tau, Some(-1.0));
        assert!(!r.argmax_agrees && !r.rank_consistent);
        assert!(pitfall_probe(&s, EdgeId { layer: 2, kind: EdgeKind::Weight }, &acc).is_err());
    }

    #[test]
    fn pitfall_single_candidate_is_consistent() {
        let space = SearchSpace::new("one", vec![bw(4)], vec![bw(4)]).unwrap();
        let s = Supernet::build(build_network(&[2], &mlp_spec(&[2, 2]), 0).unwrap(), space).unwrap();
        let acc = |_: &QuantPolicy| -> Result<f64> { Ok(0.5) };
        let r = pitfall_probe(&s, EdgeId { layer: 0, kind: EdgeKind::Activation }, &acc).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(r.rank_consistent && r.tau.is_none());
    }

    #[test]
    fn interaction_noop_and_same_edge() {
        let base = QuantPolicy::uniform(2, bw(4), bw(4));
        let w0 = EdgeId { layer: 0, kind: EdgeKind::Weight };
        let a1 = EdgeId { layer: 1, kind: EdgeKind::Activation };
        let acc = |p: &QuantPolicy| -> Result<f64> { Ok(p.bit(w0).bits() as f64 * p.bit(a1).bits() as f64) };
        let r = interaction_probe(&base, [Edit { edge: w0, bit: bw(4) }, Edit { edge: a1, bit: bw(4) }], &acc).unwrap();
        assert_eq!((r.delta_b1, r.delta_b2, r.delta_b3, r.gap), (0.0, 0.0, 0.0, 0.0));
        let r = interaction_probe(&base, [Edit { edge: w0, bit: bw(2) }, Edit { edge: a1, bit: bw(2) }], &acc).unwrap();
        // 16 -> 8, 8, 4: gap = -12 - (-16) = 4
        assert_eq!(r.gap, 4.0);
        assert!(interaction_probe(&base, [Edit { edge: w0, bit: bw(2) }, Edit { edge: w0, bit: bw(3) }], &acc).is_err());
    }
}

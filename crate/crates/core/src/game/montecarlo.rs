use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Coalition, ShapleyEstimate, ValueFunction};
use crate::error::{Error, Result};
use crate::seed::sub_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    /// Number of sampled permutations, `M`.
    pub permutations: usize,
    /// A permutation is cut off once its running coalition's value falls
    /// below `truncation * V(N)`; 0 disables truncation.
    pub truncation: f64,
    pub seed: u64,
    /// Worker threads for permutation evaluation; 1 runs inline.
    pub threads: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            permutations: 10,
            truncation: 0.5,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub estimates: Vec<ShapleyEstimate>,
    pub empty_value: f64,
    pub full_value: f64,
    /// Value-function calls made inside permutations (excludes the two
    /// cached endpoint evaluations).
    pub evaluations: usize,
    pub truncated_permutations: usize,
}

impl McResult {
    pub fn evaluations_per_permutation(&self) -> f64 {
        self.evaluations as f64 / self.estimates.first().map_or(1, |e| e.samples.max(1)) as f64
    }
}

struct PermutationOutcome {
    marginals: Vec<f64>,
    evaluations: usize,
    truncated: bool,
}

fn run_permutation(
    vf: &dyn ValueFunction,
    n: usize,
    empty_value: f64,
    full_value: f64,
    truncation: f64,
    seed: u64,
) -> Result<PermutationOutcome> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cutoff = truncation * full_value;
    let mut marginals = vec![0.0; n];
    let mut coalition = Coalition::empty(n);
    let mut prev = empty_value;
    let mut evaluations = 0;
    let mut truncated = false;
    for (pos, &player) in order.iter().enumerate() {
        coalition.insert(player);
        let v = if pos + 1 == n {
            full_value
        } else {
            evaluations += 1;
            vf.value(&coalition)?
        };
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "value function returned {v} for a coalition of {} players",
                coalition.len()
            )));
        }
        marginals[player] = v - prev;
        prev = v;
        if truncation > 0.0 && pos + 1 < n && v < cutoff {
            truncated = true;
            break;
        }
    }
    Ok(PermutationOutcome {
        marginals,
        evaluations,
        truncated,
    })
}

/// Monte-Carlo permutation estimate of every player's Shapley value.
///
/// Permutation `k` is drawn from `sub_seed(seed, k)`, so the estimate does
/// not depend on `threads`. Players after a truncation point receive a zero
/// marginal for that permutation.
pub fn mc_shapley(vf: &dyn ValueFunction, cfg: &McConfig) -> Result<McResult> {
    if cfg.permutations == 0 {
        return Err(Error::InvalidArgument("M must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.truncation) {
        return Err(Error::InvalidArgument(format!(
            "truncation threshold must lie in [0, 1], got {}",
            cfg.truncation
        )));
    }
    let n = vf.players();
    let empty_value = vf.value(&Coalition::empty(n))?;
    let full_value = vf.value(&Coalition::full(n))?;
    let one = |k: usize| {
        run_permutation(
            vf,
            n,
            empty_value,
            full_value,
            cfg.truncation,
            sub_seed(cfg.seed, k as u64),
        )
    };
    let outcomes: Vec<PermutationOutcome> = if cfg.threads <= 1 {
        (0..cfg.permutations).map(one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| {
            (0..cfg.permutations)
                .into_par_iter()
                .map(one)
                .collect::<Result<_>>()
        })?
    };
    let mut estimates = vec![ShapleyEstimate::default(); n];
    let mut evaluations = 0;
    let mut truncated_permutations = 0;
    for o in &outcomes {
        for (e, &m) in estimates.iter_mut().zip(&o.marginals) {
            e.push(m);
        }
        evaluations += o.evaluations;
        truncated_permutations += o.truncated as usize;
    }
    Ok(McResult {
        estimates,
        empty_value,
        full_value,
        evaluations,
        truncated_permutations,
    })
}

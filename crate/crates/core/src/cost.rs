//! Bit-operation (BOPs) cost model and the budget constraint.

use crate::error::{Error, Result};
use crate::quant::BitWidth;
use crate::supernet::{EdgeId, QuantPolicy, Supernet};

/// `MACs * b_w * b_a`.
pub fn layer_bops(macs: u64, weight_bits: BitWidth, act_bits: BitWidth) -> f64 {
    macs as f64 * weight_bits.bits() as f64 * act_bits.bits() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostBudget {
    pub omega0: f64,
    /// Soft-penalty weight used by the value function.
    pub mu: f64,
    pub macs: Vec<u64>,
}

impl CostBudget {
    pub fn new(omega0: f64, mu: f64, macs: Vec<u64>) -> Result<Self> {
        if !(omega0 > 0.0 && omega0.is_finite()) {
            return Err(Error::InvalidBudget(format!("omega0 must be positive, got {omega0}")));
        }
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::InvalidBudget(format!("mu must be non-negative, got {mu}")));
        }
        if macs.is_empty() || macs.contains(&0) {
            return Err(Error::InvalidBudget("MAC counts must be positive".into()));
        }
        Ok(Self { omega0, mu, macs })
    }

    /// Budget expressed as a target compression ratio over the 32/32 network.
    pub fn from_ratio(ratio: f64, mu: f64, macs: Vec<u64>) -> Result<Self> {
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(Error::InvalidBudget(format!("ratio must be positive, got {ratio}")));
        }
        let baseline = baseline_bops(&macs);
        Self::new(baseline / ratio, mu, macs)
    }

    pub fn baseline(&self) -> f64 {
        baseline_bops(&self.macs)
    }
}

/// BOPs of the all-32-bit network.
pub fn baseline_bops(macs: &[u64]) -> f64 {
    macs.iter()
        .map(|&m| layer_bops(m, BitWidth::FULL, BitWidth::FULL))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyCost {
    pub bops: f64,
    /// Baseline BOPs divided by the policy's BOPs.
    pub compression_ratio: f64,
}

pub fn policy_bops(policy: &QuantPolicy, budget: &CostBudget) -> Result<PolicyCost> {
    policy_cost(policy, &budget.macs)
}

/// Total BOPs and compression ratio of `policy` over per-layer MAC counts.
pub fn policy_cost(policy: &QuantPolicy, macs: &[u64]) -> Result<PolicyCost> {
    if policy.layers.len() > macs.len() {
        return Err(Error::InvalidBudget(format!(
            "policy has {} layers but only {} MAC counts are known",
            policy.layers.len(),
            macs.len()
        )));
    }
    if policy.layers.len() < macs.len() {
        return Err(Error::InvalidPolicy(format!(
            "policy covers {} of {} layers",
            policy.layers.len(),
            macs.len()
        )));
    }
    let bops: f64 = policy
        .layers
        .iter()
        .zip(macs)
        .map(|(l, &m)| layer_bops(m, l.weight_bits, l.act_bits))
        .sum();
    Ok(PolicyCost {
        bops,
        compression_ratio: baseline_bops(macs) / bops,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetOutcome {
    pub policy: QuantPolicy,
    pub cost: PolicyCost,
    pub feasible: bool,
    /// Edges demoted by one candidate step, in order.
    pub demotions: Vec<EdgeId>,
}

/// Winner-take-all policy repaired to fit `omega0`: while over budget,
/// demote the edge whose alpha gap to its next-lower candidate is smallest
/// (ties to the earliest edge). Reports infeasibility once every edge sits
/// at its minimum candidate.
pub fn enforce_budget(supernet: &Supernet, budget: &CostBudget) -> Result<BudgetOutcome> {
    let edges = supernet.edges();
    let mut chosen: Vec<usize> = edges.iter().map(|&e| supernet.edge(e).argmax()).collect();
    let to_policy = |chosen: &[usize]| {
        let mut p = supernet.discretize();
        for (&e, &c) in edges.iter().zip(chosen) {
            p = p.with_bit(e, supernet.edge(e).candidates[c]);
        }
        p
    };
    let mut policy = to_policy(&chosen);
    let mut cost = policy_bops(&policy, budget)?;
    let mut demotions = Vec::new();
    while cost.bops > budget.omega0 {
        let mut best: Option<(usize, f64)> = None;
        for (i, &e) in edges.iter().enumerate() {
            if chosen[i] == 0 {
                continue;
            }
            let a = &supernet.edge(e).alpha;
            let gap = a[chosen[i]] - a[chosen[i] - 1];
            if best.is_none_or(|(_, g)| gap < g) {
                best = Some((i, gap));
            }
        }
        let Some((i, _)) = best else {
            return Ok(BudgetOutcome {
                policy,
                cost,
                feasible: false,
                demotions,
            });
        };
        chosen[i] -= 1;
        demotions.push(edges[i]);
        policy = to_policy(&chosen);
        cost = policy_bops(&policy, budget)?;
    }
    Ok(BudgetOutcome {
        policy,
        cost,
        feasible: true,
        demotions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_network, mlp_spec};
    use crate::supernet::{LayerBits, SearchSpace};

    fn bw(b: u32) -> BitWidth {
        BitWidth::new(b).unwrap()
    }

    #[test]
    fn layer_bops_examples() {
        assert_eq!(layer_bops(1_000_000, bw(4), bw(4)), 1.6e7);
        let ratio = layer_bops(10, BitWidth::FULL, BitWidth::FULL) / layer_bops(10, bw(4), bw(4));
        assert_eq!(ratio, 64.0);
        assert_eq!(layer_bops(123, bw(1), bw(1)), 123.0);
    }

    #[test]
    fn policy_ratios() {
        let b = CostBudget::new(1e9, 1.0, vec![100, 50, 10]).unwrap();
        let full = policy_bops(&QuantPolicy::uniform(3, BitWidth::FULL, BitWidth::FULL), &b).unwrap();
        assert_eq!(full.compression_ratio, 1.0);
        let four = policy_bops(&QuantPolicy::uniform(3, bw(4), bw(4)), &b).unwrap();
        assert_eq!(four.compression_ratio, 64.0);
        let mixed = QuantPolicy {
            layers: vec![
                LayerBits { weight_bits: bw(2), act_bits: bw(4) },
                LayerBits { weight_bits: bw(8), act_bits: bw(3) },
                LayerBits { weight_bits: bw(1), act_bits: bw(2) },
            ],
        };
        // 100*2*4 + 50*8*3 + 10*1*2 = 800 + 1200 + 20
        assert_eq!(policy_bops(&mixed, &b).unwrap().bops, 2020.0);
    }

    #[test]
    fn missing_mac_count_rejected() {
        let b = CostBudget::new(1e9, 1.0, vec![100]).unwrap();
        assert!(policy_bops(&QuantPolicy::uniform(2, bw(4), bw(4)), &b).is_err());
    }

    #[test]
    fn invalid_budgets_rejected() {
        assert!(CostBudget::new(0.0, 1.0, vec![1]).is_err());
        assert!(CostBudget::new(1.0, -1.0, vec![1]).is_err());
        assert!(CostBudget::new(1.0, 1.0, vec![0]).is_err());
    }

    fn toy() -> Supernet {
        let g = build_network(&[2], &mlp_spec(&[2, 4, 3]), 0).unwrap();
        Supernet::build(g, SearchSpace::s2()).unwrap()
    }

    #[test]
    fn generous_budget_keeps_discretization() {
        let mut s = toy();
        let alpha: Vec<f64> = (0..s.player_count()).map(|i| (i as f64 * 0.37).sin()).collect();
        s.set_alpha_flat(&alpha).unwrap();
        let b = CostBudget::new(1e12, 1.0, s.graph().macs().to_vec()).unwrap();
        let out = enforce_budget(&s, &b).unwrap();
        assert!(out.feasible);
        assert!(out.demotions.is_empty());
        assert_eq!(out.policy, s.discretize());
    }

    #[test]
    fn impossible_budget_returns_minimum_policy() {
        let s = toy();
        let b = CostBudget::new(1.0, 1.0, s.graph().macs().to_vec()).unwrap();
        let out = enforce_budget(&s, &b).unwrap();
        assert!(!out.feasible);
        assert_eq!(out.policy, QuantPolicy::uniform(2, bw(1), bw(2)));
    }
}

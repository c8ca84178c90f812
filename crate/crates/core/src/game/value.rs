use super::{Coalition, ValueFunction};
use crate::cost::CostBudget;
use crate::error::{Error, Result};
use crate::quant::BitWidth;
use crate::supernet::{EdgeId, EdgeKind, Supernet};
use crate::tensor::Tensor;

/// Accuracy-complexity payoff of a coalition on a frozen supernet:
/// `V(S) = acc_val(S) - mu * max(0, E[BOPs | S] / omega0 - 1)`, where the
/// expected BOPs average the present candidates on each edge and an edge
/// with none present counts as 32 bits.
pub struct ValueEval<'a> {
    supernet: &'a Supernet,
    inputs: &'a Tensor,
    labels: &'a [usize],
    budget: &'a CostBudget,
    /// Player index range of each edge, in player order.
    edge_ranges: Vec<(EdgeId, usize, usize)>,
}

impl<'a> ValueEval<'a> {
    pub fn new(
        supernet: &'a Supernet,
        inputs: &'a Tensor,
        labels: &'a [usize],
        budget: &'a CostBudget,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("empty validation set".into()));
        }
        if budget.macs.len() != supernet.layers() {
            return Err(Error::InvalidBudget(format!(
                "budget has {} MAC counts, supernet has {} layers",
                budget.macs.len(),
                supernet.layers()
            )));
        }
        let mut edge_ranges = Vec::new();
        let mut offset = 0;
        for e in supernet.edges() {
            let n = supernet.edge(e).candidates.len();
            edge_ranges.push((e, offset, offset + n));
            offset += n;
        }
        Ok(Self {
            supernet,
            inputs,
            labels,
            budget,
            edge_ranges,
        })
    }

    fn mean_bits(&self, coalition: &Coalition, idx: usize) -> f64 {
        let (edge, lo, hi) = self.edge_ranges[idx];
        let cands = &self.supernet.edge(edge).candidates;
        let present: Vec<f64> = (lo..hi)
            .filter(|&p| coalition.contains(p))
            .map(|p| cands[p - lo].bits() as f64)
            .collect();
        if present.is_empty() {
            BitWidth::FULL.bits() as f64
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn expected_bops(&self, coalition: &Coalition) -> f64 {
        let mut total = 0.0;
        for (i, &(edge, _, _)) in self.edge_ranges.iter().enumerate() {
            if edge.kind == EdgeKind::Weight {
                total += self.budget.macs[edge.layer] as f64
                    * self.mean_bits(coalition, i)
                    * self.mean_bits(coalition, i + 1);
            }
        }
        total
    }

    pub fn penalty(&self, coalition: &Coalition) -> f64 {
        self.budget.mu * (self.expected_bops(coalition) / self.budget.omega0 - 1.0).max(0.0)
    }

    pub fn accuracy(&self, coalition: &Coalition) -> Result<f64> {
        let quant = self.supernet.masked_quant(coalition);
        self.supernet
            .graph()
            .accuracy_with(self.inputs, self.labels, &quant)
    }
}

impl ValueFunction for ValueEval<'_> {
    fn players(&self) -> usize {
        self.supernet.player_count()
    }

    fn value(&self, coalition: &Coalition) -> Result<f64> {
        let v = if self.budget.mu == 0.0 {
            self.accuracy(coalition)?
        } else {
            self.accuracy(coalition)? - self.penalty(coalition)
        };
        Ok(v)
    }
}

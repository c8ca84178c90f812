//! Layer-wise bit-width supernet.
//!
//! Every quantizable layer of a [`ComputeGraph`] gets one weight edge and
//! one activation edge. Each edge holds all candidate bit-widths of the
//! [`SearchSpace`] over the same shared layer weights, together with one
//! contribution parameter `alpha` per candidate. A candidate on an edge is a
//! [`Player`]; players are indexed layer by layer, weight candidates first.

use std::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::Coalition;
use crate::nn::{ComputeGraph, EdgeGrads, LayerQuant};
use crate::quant::{calibrate_clip, BitWidth, Branch, EdgeMix, QuantizerState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub name: String,
    pub weight_bits: Vec<BitWidth>,
    pub act_bits: Vec<BitWidth>,
}

fn bits(v: &[u32]) -> Vec<BitWidth> {
    v.iter().map(|&b| BitWidth::new(b).expect("preset bit")).collect()
}

impl SearchSpace {
    pub fn new(name: impl Into<String>, weight_bits: Vec<BitWidth>, act_bits: Vec<BitWidth>) -> Result<Self> {
        for (kind, set) in [("weight", &weight_bits), ("activation", &act_bits)] {
            if set.is_empty() {
                return Err(Error::InvalidSearchSpace(format!("empty {kind} bit set")));
            }
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidSearchSpace(format!(
                    "{kind} bits must be strictly ascending without duplicates: {set:?}"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            weight_bits,
            act_bits,
        })
    }

    /// Weights {2..8}, activations {4}.
    pub fn s1_table() -> Self {
        Self::new("s1-table", bits(&[2, 3, 4, 5, 6, 7, 8]), bits(&[4])).unwrap()
    }

    /// Weights {2..8}, activations {2}.
    pub fn s1_text() -> Self {
        Self::new("s1-text", bits(&[2, 3, 4, 5, 6, 7, 8]), bits(&[2])).unwrap()
    }

    /// Weights {1, 2, 3, 4}, activations {2, 3, 4}.
    pub fn s2() -> Self {
        Self::new("s2", bits(&[1, 2, 3, 4]), bits(&[2, 3, 4])).unwrap()
    }

    /// Weights and activations both {2..8}.
    pub fn s3() -> Self {
        let r = bits(&[2, 3, 4, 5, 6, 7, 8]);
        Self::new("s3", r.clone(), r).unwrap()
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "s1-table" | "s1" => Ok(Self::s1_table()),
            "s1-text" => Ok(Self::s1_text()),
            "s2" => Ok(Self::s2()),
            "s3" => Ok(Self::s3()),
            other => Err(Error::InvalidSearchSpace(format!(
                "unknown preset {other:?} (expected s1-table, s1-text, s2, s3)"
            ))),
        }
    }

    pub fn players_per_layer(&self) -> usize {
        self.weight_bits.len() + self.act_bits.len()
    }

    /// Number of distinct policies over `layers` layers, `(n_w * n_a)^layers`.
    pub fn configurations(&self, layers: usize) -> BigUint {
        count_configurations(&vec![self.weight_bits.len() * self.act_bits.len(); layers])
    }
}

/// Product of per-layer candidate counts, exactly.
pub fn count_configurations(per_layer: &[usize]) -> BigUint {
    per_layer
        .iter()
        .fold(BigUint::from(1u32), |acc, &c| acc * BigUint::from(c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Weight,
    Activation,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Weight => "weight",
            EdgeKind::Activation => "activation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeId {
    pub layer: usize,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Player {
    pub edge: EdgeId,
    pub bit: BitWidth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedEdge {
    pub candidates: Vec<BitWidth>,
    pub alpha: Vec<f64>,
    /// Candidate index replaced by seeded noise, if any.
    pub noise: Option<(usize, u64)>,
}

impl MixedEdge {
    fn new(candidates: Vec<BitWidth>) -> Self {
        let k = candidates.len();
        Self {
            candidates,
            alpha: vec![0.0; k],
            noise: None,
        }
    }

    fn branch(&self, idx: usize) -> Branch {
        match self.noise {
            Some((i, seed)) if i == idx => Branch::Noise(seed),
            _ => Branch::Quant(self.candidates[idx]),
        }
    }

    pub fn softmax(&self) -> Vec<f64> {
        softmax(&self.alpha)
    }

    /// Winner-take-all; ties go to the lower bit-width.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.alpha.len() {
            if self.alpha[i] > self.alpha[best] {
                best = i;
            }
        }
        best
    }

    fn mixture(&self) -> EdgeMix {
        EdgeMix {
            branches: (0..self.candidates.len()).map(|i| self.branch(i)).collect(),
            weights: self.softmax(),
        }
    }

    fn position(&self, bit: BitWidth) -> Option<usize> {
        self.candidates.iter().position(|&b| b == bit)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerBits {
    pub weight_bits: BitWidth,
    pub act_bits: BitWidth,
}

/// One (weight, activation) bit pair per quantizable layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuantPolicy {
    pub layers: Vec<LayerBits>,
}

impl QuantPolicy {
    pub fn uniform(layers: usize, weight_bits: BitWidth, act_bits: BitWidth) -> Self {
        Self {
            layers: vec![LayerBits { weight_bits, act_bits }; layers],
        }
    }

    pub fn bit(&self, edge: EdgeId) -> BitWidth {
        let l = &self.layers[edge.layer];
        match edge.kind {
            EdgeKind::Weight => l.weight_bits,
            EdgeKind::Activation => l.act_bits,
        }
    }

    pub fn with_bit(&self, edge: EdgeId, bit: BitWidth) -> Self {
        let mut p = self.clone();
        let l = &mut p.layers[edge.layer];
        match edge.kind {
            EdgeKind::Weight => l.weight_bits = bit,
            EdgeKind::Activation => l.act_bits = bit,
        }
        p
    }

    pub fn describe(&self) -> String {
        self.layers
            .iter()
            .map(|l| format!("{}/{}", l.weight_bits, l.act_bits))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// On-disk policy, JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub layers: Vec<PolicyLayer>,
    pub search_space: SearchSpace,
    pub seed: u64,
    pub bops: f64,
    pub compression_ratio: f64,
    pub feasible: bool,
    /// Resolved run configuration that produced the policy.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyLayer {
    pub index: usize,
    pub weight_bits: BitWidth,
    pub act_bits: BitWidth,
}

impl PolicyFile {
    pub fn policy(&self) -> Result<QuantPolicy> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.index != i {
                return Err(Error::InvalidPolicy(format!(
                    "layer entries must be in index order; entry {i} has index {}",
                    l.index
                )));
            }
        }
        Ok(QuantPolicy {
            layers: self
                .layers
                .iter()
                .map(|l| LayerBits {
                    weight_bits: l.weight_bits,
                    act_bits: l.act_bits,
                })
                .collect(),
        })
    }

    pub fn layers_of(policy: &QuantPolicy) -> Vec<PolicyLayer> {
        policy
            .layers
            .iter()
            .enumerate()
            .map(|(index, l)| PolicyLayer {
                index,
                weight_bits: l.weight_bits,
                act_bits: l.act_bits,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Supernet {
    graph: ComputeGraph,
    space: SearchSpace,
    weight_edges: Vec<MixedEdge>,
    act_edges: Vec<MixedEdge>,
    act_states: Vec<QuantizerState>,
}

impl Supernet {
    /// Attaches a weight edge and an activation edge with zero-initialized
    /// alpha to every quantizable layer. All candidates share the layer's
    /// weights.
    pub fn build(graph: ComputeGraph, space: SearchSpace) -> Result<Self> {
        if space.weight_bits.is_empty() || space.act_bits.is_empty() {
            return Err(Error::InvalidSearchSpace("empty candidate set".into()));
        }
        let layers = graph.quantizable_layers();
        let mut net = Self {
            weight_edges: vec![MixedEdge::new(space.weight_bits.clone()); layers],
            act_edges: vec![MixedEdge::new(space.act_bits.clone()); layers],
            act_states: vec![QuantizerState::default(); layers],
            graph,
            space,
        };
        net.sync_mixture();
        Ok(net)
    }

    pub fn graph(&self) -> &ComputeGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut ComputeGraph {
        &mut self.graph
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn layers(&self) -> usize {
        self.weight_edges.len()
    }

    pub fn edge(&self, id: EdgeId) -> &MixedEdge {
        match id.kind {
            EdgeKind::Weight => &self.weight_edges[id.layer],
            EdgeKind::Activation => &self.act_edges[id.layer],
        }
    }

    pub fn edge_mut(&mut self, id: EdgeId) -> &mut MixedEdge {
        match id.kind {
            EdgeKind::Weight => &mut self.weight_edges[id.layer],
            EdgeKind::Activation => &mut self.act_edges[id.layer],
        }
    }

    /// All edges in player order.
    pub fn edges(&self) -> Vec<EdgeId> {
        (0..self.layers())
            .flat_map(|layer| {
                [EdgeKind::Weight, EdgeKind::Activation]
                    .into_iter()
                    .map(move |kind| EdgeId { layer, kind })
            })
            .collect()
    }

    pub fn act_states(&self) -> &[QuantizerState] {
        &self.act_states
    }

    pub fn set_act_states(&mut self, states: Vec<QuantizerState>) -> Result<()> {
        if states.len() != self.layers() {
            return Err(Error::Shape(format!(
                "{} quantizer states for {} layers",
                states.len(),
                self.layers()
            )));
        }
        self.act_states = states;
        self.sync_mixture();
        Ok(())
    }

    /// Replaces one candidate's branch with deterministic noise.
    pub fn plant_noise(&mut self, edge: EdgeId, bit: BitWidth, seed: u64) -> Result<()> {
        let e = self.edge_mut(edge);
        let idx = e
            .position(bit)
            .ok_or_else(|| Error::InvalidPolicy(format!("bit {bit} not a candidate on {edge:?}")))?;
        e.noise = Some((idx, seed));
        self.sync_mixture();
        Ok(())
    }

    pub fn players(&self) -> Vec<Player> {
        self.edges()
            .into_iter()
            .flat_map(|edge| {
                self.edge(edge)
                    .candidates
                    .iter()
                    .map(move |&bit| Player { edge, bit })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn player_count(&self) -> usize {
        self.edges().iter().map(|&e| self.edge(e).candidates.len()).sum()
    }

    /// Flat player index of candidate `idx` on `edge`.
    pub fn player_index(&self, edge: EdgeId, idx: usize) -> usize {
        let mut offset = 0;
        for e in self.edges() {
            if e == edge {
                return offset + idx;
            }
            offset += self.edge(e).candidates.len();
        }
        unreachable!("edge {edge:?} out of range")
    }

    /// Player indices per layer (both edges).
    pub fn layer_players(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.layers());
        let mut offset = 0;
        for l in 0..self.layers() {
            let n = self.weight_edges[l].candidates.len() + self.act_edges[l].candidates.len();
            out.push((offset..offset + n).collect());
            offset += n;
        }
        out
    }

    pub fn alpha_flat(&self) -> Vec<f64> {
        self.edges()
            .into_iter()
            .flat_map(|e| self.edge(e).alpha.clone())
            .collect()
    }

    pub fn set_alpha_flat(&mut self, alpha: &[f64]) -> Result<()> {
        if alpha.len() != self.player_count() {
            return Err(Error::Shape(format!(
                "{} alpha values for {} players",
                alpha.len(),
                self.player_count()
            )));
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numerical("non-finite alpha".into()));
        }
        let mut offset = 0;
        for e in self.edges() {
            let edge = self.edge_mut(e);
            let n = edge.candidates.len();
            edge.alpha.copy_from_slice(&alpha[offset..offset + n]);
            offset += n;
        }
        self.sync_mixture();
        Ok(())
    }

    fn check_alpha(&self) -> Result<()> {
        if self
            .weight_edges
            .iter()
            .chain(&self.act_edges)
            .any(|e| e.alpha.iter().any(|a| !a.is_finite()))
        {
            return Err(Error::Numerical("non-finite alpha".into()));
        }
        Ok(())
    }

    /// Softmax-mixture configuration of every layer.
    pub fn mixture_quant(&self) -> Vec<LayerQuant> {
        (0..self.layers())
            .map(|l| LayerQuant {
                weight: self.weight_edges[l].mixture(),
                act: self.act_edges[l].mixture(),
                act_state: self.act_states[l],
            })
            .collect()
    }

    /// Uniform mixture over the coalition's candidates on each edge; an
    /// edge with no candidate present runs at full precision.
    pub fn masked_quant(&self, coalition: &Coalition) -> Vec<LayerQuant> {
        let mut offset = 0;
        let mut mask_edge = |edge: &MixedEdge| {
            let present: Vec<Branch> = (0..edge.candidates.len())
                .filter(|&i| coalition.contains(offset + i))
                .map(|i| edge.branch(i))
                .collect();
            offset += edge.candidates.len();
            if present.is_empty() {
                EdgeMix::full_precision()
            } else {
                EdgeMix::uniform(present)
            }
        };
        let mut out = Vec::with_capacity(self.layers());
        for l in 0..self.layers() {
            let weight = mask_edge(&self.weight_edges[l]);
            let act = mask_edge(&self.act_edges[l]);
            out.push(LayerQuant {
                weight,
                act,
                act_state: self.act_states[l],
            });
        }
        out
    }

    /// Fixed single-candidate configuration of a policy.
    pub fn policy_quant(&self, policy: &QuantPolicy) -> Result<Vec<LayerQuant>> {
        self.validate_policy(policy)?;
        Ok((0..self.layers())
            .map(|l| {
                let w = &self.weight_edges[l];
                let a = &self.act_edges[l];
                let lb = policy.layers[l];
                LayerQuant {
                    weight: EdgeMix::fixed(w.branch(w.position(lb.weight_bits).unwrap())),
                    act: EdgeMix::fixed(a.branch(a.position(lb.act_bits).unwrap())),
                    act_state: self.act_states[l],
                }
            })
            .collect())
    }

    pub fn validate_policy(&self, policy: &QuantPolicy) -> Result<()> {
        if policy.layers.len() != self.layers() {
            return Err(Error::InvalidPolicy(format!(
                "policy covers {} layers, network has {}",
                policy.layers.len(),
                self.layers()
            )));
        }
        for (l, lb) in policy.layers.iter().enumerate() {
            if self.weight_edges[l].position(lb.weight_bits).is_none() {
                return Err(Error::InvalidPolicy(format!(
                    "layer {l}: weight bit {} not in candidate set",
                    lb.weight_bits
                )));
            }
            if self.act_edges[l].position(lb.act_bits).is_none() {
                return Err(Error::InvalidPolicy(format!(
                    "layer {l}: activation bit {} not in candidate set",
                    lb.act_bits
                )));
            }
        }
        Ok(())
    }

    /// Installs the softmax mixture as the graph's own configuration, which
    /// is what training passes use.
    pub fn sync_mixture(&mut self) {
        let q = self.mixture_quant();
        self.graph.set_quant(q).expect("layer count is fixed");
    }

    pub fn mixture_forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_alpha()?;
        self.graph.infer_with(batch, &self.mixture_quant())
    }

    pub fn masked_forward(&self, batch: &Tensor, coalition: &Coalition) -> Result<Tensor> {
        self.graph.infer_with(batch, &self.masked_quant(coalition))
    }

    /// Winner-take-all policy; ties go to the lower bit-width.
    pub fn discretize(&self) -> QuantPolicy {
        QuantPolicy {
            layers: (0..self.layers())
                .map(|l| LayerBits {
                    weight_bits: self.weight_edges[l].candidates[self.weight_edges[l].argmax()],
                    act_bits: self.act_edges[l].candidates[self.act_edges[l].argmax()],
                })
                .collect(),
        }
    }

    /// Fixed-precision copy of the network with inherited weights.
    pub fn apply_policy(&self, policy: &QuantPolicy) -> Result<ComputeGraph> {
        let quant = self.policy_quant(policy)?;
        let mut g = self.graph.clone();
        g.set_quant(quant)?;
        Ok(g)
    }

    /// Recomputes each activation edge's clip range from the full-precision
    /// inputs the layer sees on `batch`.
    pub fn calibrate(&mut self, batch: &Tensor) -> Result<()> {
        let fp = vec![LayerQuant::default(); self.layers()];
        let inputs = self.graph.layer_inputs(batch, &fp)?;
        let states = inputs
            .iter()
            .map(|t| calibrate_clip([t]))
            .collect::<Result<Vec<_>>>()?;
        self.set_act_states(states)
    }

    /// Gradient of the loss with respect to every alpha, through the
    /// softmax, from the branch-weight gradients of the last backward pass.
    pub fn alpha_grads(&self) -> Vec<f64> {
        let grads: &[EdgeGrads] = self.graph.edge_grads();
        let mut out = Vec::with_capacity(self.player_count());
        for l in 0..self.layers() {
            out.extend(softmax_backward(&self.weight_edges[l].softmax(), &grads[l].weight));
            out.extend(softmax_backward(&self.act_edges[l].softmax(), &grads[l].act));
        }
        out
    }

    /// Parameters, alphas and clip ranges as checkpoint records.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut rec = self.graph.named_tensors();
        for l in 0..self.layers() {
            rec.push((format!("edge{l}.alpha_weight"), Tensor::from_vec(self.weight_edges[l].alpha.clone())));
            rec.push((format!("edge{l}.alpha_act"), Tensor::from_vec(self.act_edges[l].alpha.clone())));
            rec.push((format!("edge{l}.act_clip"), Tensor::from_vec(vec![self.act_states[l].clip_max()])));
        }
        rec
    }

    pub fn load_named(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let extra = self.graph.load_named(records)?;
        let find = |name: String| -> Result<&Tensor> {
            records
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("record {name} missing")))
        };
        let mut states = Vec::with_capacity(self.layers());
        for l in 0..self.layers() {
            let aw = find(format!("edge{l}.alpha_weight"))?.data().to_vec();
            let aa = find(format!("edge{l}.alpha_act"))?.data().to_vec();
            if aw.len() != self.weight_edges[l].candidates.len() || aa.len() != self.act_edges[l].candidates.len() {
                return Err(Error::Checkpoint(format!("edge {l}: alpha length does not match search space")));
            }
            self.weight_edges[l].alpha = aw;
            self.act_edges[l].alpha = aa;
            let clip = find(format!("edge{l}.act_clip"))?.data()[0];
            states.push(QuantizerState::new(clip).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        let known = extra.iter().all(|n| n.starts_with("edge"));
        if !known {
            return Err(Error::Checkpoint(format!("unexpected records {extra:?}")));
        }
        self.set_act_states(states)?;
        self.check_alpha()
    }
}

fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    if dp.is_empty() {
        return vec![0.0; p.len()];
    }
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(&pk, &gk)| pk * (gk - inner)).collect()
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{
    act_branch, act_branch_ste, weight_branch, weight_branch_ste, EdgeMix, QuantizerState,
};
use crate::tensor::Tensor;

/// Layer descriptor used to build a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Stride-1 square-kernel convolution with symmetric zero padding.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Relu,
    Flatten,
}

/// Dense layers of the given widths joined by ReLUs.
pub fn mlp_spec(widths: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        if i > 0 {
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::Dense {
            inputs: pair[0],
            outputs: pair[1],
        });
    }
    specs
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone)]
enum Layer {
    Dense {
        weight: usize,
        bias: usize,
    },
    Conv2d {
        weight: usize,
        bias: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        padding: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },
    Relu,
    Flatten,
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
        }
    }
}

/// Quantization configuration of one quantizable layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerQuant {
    pub weight: EdgeMix,
    pub act: EdgeMix,
    pub act_state: QuantizerState,
}

/// Gradient of the loss with respect to each branch's mixture weight.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeGrads {
    pub weight: Vec<f64>,
    pub act: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    /// Mean softmax cross-entropy, multiplied by `scale`.
    CrossEntropy { scale: f64 },
    /// A label-independent constant; contributes no gradient.
    Constant(f64),
}

impl Default for Loss {
    fn default() -> Self {
        Loss::CrossEntropy { scale: 1.0 }
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Quantized {
        input: Tensor,
        xq: Tensor,
        w_eff: Tensor,
        act_outputs: Vec<Tensor>,
        weight_outputs: Vec<Tensor>,
    },
    Relu {
        input: Tensor,
    },
    Flatten {
        in_shape: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Cache {
    layers: Vec<LayerCache>,
    logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct ComputeGraph {
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    params: Vec<Param>,
    /// Per quantizable layer, in order.
    quant: Vec<LayerQuant>,
    quant_layer_index: Vec<usize>,
    macs: Vec<u64>,
    edge_grads: Vec<EdgeGrads>,
    cache: Option<Cache>,
}

/// Builds a network for per-sample inputs of `input_shape`, initializing
/// every parameter uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn build_network(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<ComputeGraph> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::Shape(format!("invalid input shape {input_shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = input_shape.to_vec();
    let mut layers = Vec::new();
    let mut params: Vec<Param> = Vec::new();
    let mut quant_layer_index = Vec::new();
    let mut macs = Vec::new();

    let mut init = |name: String, dims: Vec<usize>, fan_in: usize, params: &mut Vec<Param>| {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        let value = Tensor::new(dims.clone(), data).expect("param shape");
        params.push(Param {
            name,
            grad: Tensor::zeros(&dims),
            value,
        });
        params.len() - 1
    };

    for (idx, spec) in specs.iter().enumerate() {
        match *spec {
            LayerSpec::Dense { inputs, outputs } => {
                if shape != [inputs] {
                    return Err(Error::DimensionMismatch {
                        layer: idx,
                        expected: vec![inputs],
                        got: shape,
                    });
                }
                if outputs == 0 {
                    return Err(Error::Shape(format!("layer {idx}: zero outputs")));
                }
                let weight = init(format!("layer{idx}.weight"), vec![outputs, inputs], inputs, &mut params);
                let bias = init(format!("layer{idx}.bias"), vec![outputs], inputs, &mut params);
                quant_layer_index.push(layers.len());
                macs.push((inputs * outputs) as u64);
                layers.push(Layer::Dense { weight, bias });
                shape = vec![outputs];
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                if shape.len() != 3 || shape[0] != in_channels {
                    return Err(Error::DimensionMismatch {
                        layer: idx,
                        expected: vec![in_channels, 0, 0],
                        got: shape,
                    });
                }
                let (in_h, in_w) = (shape[1], shape[2]);
                if kernel == 0 || in_h + 2 * padding < kernel || in_w + 2 * padding < kernel {
                    return Err(Error::Shape(format!(
                        "layer {idx}: kernel {kernel} does not fit input {in_h}x{in_w} with padding {padding}"
                    )));
                }
                let out_h = in_h + 2 * padding - kernel + 1;
                let out_w = in_w + 2 * padding - kernel + 1;
                let fan_in = in_channels * kernel * kernel;
                let weight = init(
                    format!("layer{idx}.weight"),
                    vec![out_channels, in_channels, kernel, kernel],
                    fan_in,
                    &mut params,
                );
                let bias = init(format!("layer{idx}.bias"), vec![out_channels], fan_in, &mut params);
                quant_layer_index.push(layers.len());
                macs.push((out_channels * fan_in * out_h * out_w) as u64);
                layers.push(Layer::Conv2d {
                    weight,
                    bias,
                    in_ch: in_channels,
                    out_ch: out_channels,
                    kernel,
                    padding,
                    in_h,
                    in_w,
                    out_h,
                    out_w,
                });
                shape = vec![out_channels, out_h, out_w];
            }
            LayerSpec::Relu => layers.push(Layer::Relu),
            LayerSpec::Flatten => {
                layers.push(Layer::Flatten);
                shape = vec![shape.iter().product()];
            }
        }
    }
    if quant_layer_index.is_empty() {
        return Err(Error::Shape("network has no dense or conv layer".into()));
    }
    if shape.len() != 1 {
        return Err(Error::Shape(format!(
            "network output must be a flat logit vector, got {shape:?}"
        )));
    }
    let n_quant = quant_layer_index.len();
    Ok(ComputeGraph {
        input_shape: input_shape.to_vec(),
        specs: specs.to_vec(),
        layers,
        params,
        quant: vec![LayerQuant::default(); n_quant],
        quant_layer_index,
        macs,
        edge_grads: vec![EdgeGrads::default(); n_quant],
        cache: None,
    })
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = (logits.rows(), logits.row_len());
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Shape(format!("label {label} out of range for {k} classes")));
        }
        let row = &logits.data()[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_z = m + z.ln();
        loss += log_z - row[label];
        for c in 0..k {
            let p = (row[c] - log_z).exp();
            grad[r * k + c] = (p - if c == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(logits.shape().to_vec(), grad)?))
}

fn mix_act(x: &Tensor, mix: &EdgeMix, state: &QuantizerState) -> (Tensor, Vec<Tensor>) {
    if mix.is_full_precision() {
        return (x.clone(), Vec::new());
    }
    let outputs: Vec<Tensor> = mix
        .branches
        .iter()
        .map(|&b| act_branch(x, b, state))
        .collect();
    (blend(&outputs, &mix.weights), outputs)
}

fn mix_weight(w: &Tensor, mix: &EdgeMix) -> (Tensor, Vec<Tensor>) {
    if mix.is_full_precision() {
        return (w.clone(), Vec::new());
    }
    let outputs: Vec<Tensor> = mix.branches.iter().map(|&b| weight_branch(w, b)).collect();
    (blend(&outputs, &mix.weights), outputs)
}

fn blend(outputs: &[Tensor], weights: &[f64]) -> Tensor {
    if outputs.len() == 1 && weights[0] == 1.0 {
        return outputs[0].clone();
    }
    let mut acc = Tensor::zeros(outputs[0].shape());
    for (o, &p) in outputs.iter().zip(weights) {
        acc.add_scaled(o, p);
    }
    acc
}

impl ComputeGraph {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of dense/conv layers.
    pub fn quantizable_layers(&self) -> usize {
        self.quant.len()
    }

    /// Multiply-accumulate count per sample of each quantizable layer.
    pub fn macs(&self) -> &[u64] {
        &self.macs
    }

    pub fn quant(&self) -> &[LayerQuant] {
        &self.quant
    }

    pub fn set_quant(&mut self, quant: Vec<LayerQuant>) -> Result<()> {
        if quant.len() != self.quant.len() {
            return Err(Error::Shape(format!(
                "{} layer quant configs for {} quantizable layers",
                quant.len(),
                self.quant.len()
            )));
        }
        self.quant = quant;
        Ok(())
    }

    /// Branch-weight gradients from the last backward pass.
    pub fn edge_grads(&self) -> &[EdgeGrads] {
        &self.edge_grads
    }

    /// Raw (pre-edge) input of every quantizable layer under `quant`.
    pub fn layer_inputs(&self, batch: &Tensor, quant: &[LayerQuant]) -> Result<Vec<Tensor>> {
        let mut inputs = Vec::with_capacity(self.quant.len());
        self.run(batch, quant, None, Some(&mut inputs))?;
        Ok(inputs)
    }

    /// Forward pass with this graph's own quantization; caches activations
    /// for [`ComputeGraph::backward`].
    pub fn forward(&mut self, batch: &Tensor) -> Result<Tensor> {
        let quant = std::mem::take(&mut self.quant);
        let mut caches = Vec::with_capacity(self.layers.len());
        let out = self.run(batch, &quant, Some(&mut caches), None);
        self.quant = quant;
        let logits = out?;
        self.cache = Some(Cache {
            layers: caches,
            logits: logits.clone(),
        });
        Ok(logits)
    }

    /// Read-only forward pass under an explicit quantization configuration.
    pub fn infer_with(&self, batch: &Tensor, quant: &[LayerQuant]) -> Result<Tensor> {
        if quant.len() != self.quant.len() {
            return Err(Error::Shape(format!(
                "{} layer quant configs for {} quantizable layers",
                quant.len(),
                self.quant.len()
            )));
        }
        self.run(batch, quant, None, None)
    }

    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.run(batch, &self.quant, None, None)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "batch shape {:?} does not match per-sample input {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        batch: &Tensor,
        quant: &[LayerQuant],
        mut caches: Option<&mut Vec<LayerCache>>,
        mut inputs: Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        let mut q_idx = 0;
        for (node, layer) in self.layers.iter().enumerate() {
            let y = match layer {
                Layer::Dense { weight, bias, .. } | Layer::Conv2d { weight, bias, .. } => {
                    let lq = &quant[q_idx];
                    q_idx += 1;
                    if let Some(inputs) = inputs.as_deref_mut() {
                        inputs.push(x.clone());
                    }
                    let (xq, act_outputs) = mix_act(&x, &lq.act, &lq.act_state);
                    let (w_eff, weight_outputs) = mix_weight(&self.params[*weight].value, &lq.weight);
                    let b = &self.params[*bias].value;
                    let y = match layer {
                        Layer::Dense { .. } => dense_forward(&xq, &w_eff, b),
                        _ => self.conv_forward(layer, &xq, &w_eff, b),
                    };
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(LayerCache::Quantized {
                            input: x,
                            xq,
                            w_eff,
                            act_outputs,
                            weight_outputs,
                        });
                    }
                    y
                }
                Layer::Relu => {
                    let y = x.map(|v| v.max(0.0));
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(LayerCache::Relu { input: x });
                    }
                    y
                }
                Layer::Flatten => {
                    let in_shape = x.shape().to_vec();
                    let rows = in_shape[0];
                    let width = x.row_len();
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(LayerCache::Flatten { in_shape });
                    }
                    x.reshape(vec![rows, width])?
                }
            };
            if !y.is_finite() {
                return Err(Error::NonFinite {
                    node,
                    kind: layer.kind(),
                });
            }
            x = y;
        }
        Ok(x)
    }

    fn conv_forward(&self, layer: &Layer, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let Layer::Conv2d {
            in_ch,
            out_ch,
            kernel,
            padding,
            in_h,
            in_w,
            out_h,
            out_w,
            ..
        } = *layer
        else {
            unreachable!()
        };
        let n = x.rows();
        let xd = x.data();
        let wd = w.data();
        let mut out = vec![0.0; n * out_ch * out_h * out_w];
        for s in 0..n {
            for o in 0..out_ch {
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let mut acc = b.data()[o];
                        for c in 0..in_ch {
                            for kh in 0..kernel {
                                let ih = oh + kh;
                                if ih < padding || ih - padding >= in_h {
                                    continue;
                                }
                                let ih = ih - padding;
                                for kw in 0..kernel {
                                    let iw = ow + kw;
                                    if iw < padding || iw - padding >= in_w {
                                        continue;
                                    }
                                    let iw = iw - padding;
                                    acc += xd[((s * in_ch + c) * in_h + ih) * in_w + iw]
                                        * wd[((o * in_ch + c) * kernel + kh) * kernel + kw];
                                }
                            }
                        }
                        out[((s * out_ch + o) * out_h + oh) * out_w + ow] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, out_ch, out_h, out_w], out).expect("conv output shape")
    }

    /// Back-propagates `loss` from the cached forward pass, filling every
    /// parameter gradient and the branch-weight gradients. Returns the loss.
    pub fn backward(&mut self, labels: &[usize], loss: Loss) -> Result<f64> {
        let cache = self.cache.take().ok_or(Error::BackwardBeforeForward)?;
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
        let (value, mut grad) = match loss {
            Loss::CrossEntropy { scale } => {
                let (l, mut g) = softmax_cross_entropy(&cache.logits, labels)?;
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
                (l * scale, g)
            }
            Loss::Constant(c) => (c, Tensor::zeros(cache.logits.shape())),
        };
        let mut q_idx = self.quant.len();
        for (node, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            grad = match (layer, lc) {
                (
                    Layer::Dense { weight, bias, .. } | Layer::Conv2d { weight, bias, .. },
                    LayerCache::Quantized {
                        input,
                        xq,
                        w_eff,
                        act_outputs,
                        weight_outputs,
                    },
                ) => {
                    q_idx -= 1;
                    let lq = &self.quant[q_idx];
                    let (dxq, dw_eff, db) = match layer {
                        Layer::Dense { .. } => dense_backward(&grad, xq, w_eff),
                        _ => conv_backward(layer, &grad, xq, w_eff),
                    };
                    let eg = &mut self.edge_grads[q_idx];
                    // weight edge
                    let dw = if lq.weight.is_full_precision() {
                        eg.weight.clear();
                        dw_eff.clone()
                    } else {
                        eg.weight = weight_outputs.iter().map(|o| o.dot(&dw_eff)).collect();
                        let pass: f64 = lq
                            .weight
                            .branches
                            .iter()
                            .zip(&lq.weight.weights)
                            .map(|(&b, &p)| p * weight_branch_ste(b))
                            .sum();
                        dw_eff.map(|g| g * pass)
                    };
                    self.params[*weight].grad.add_scaled(&dw, 1.0);
                    self.params[*bias].grad.add_scaled(&db, 1.0);
                    // activation edge
                    if lq.act.is_full_precision() {
                        eg.act.clear();
                        dxq
                    } else {
                        eg.act = act_outputs.iter().map(|o| o.dot(&dxq)).collect();
                        let data = dxq
                            .data()
                            .iter()
                            .zip(input.data())
                            .map(|(&g, &x)| {
                                let pass: f64 = lq
                                    .act
                                    .branches
                                    .iter()
                                    .zip(&lq.act.weights)
                                    .map(|(&b, &p)| p * act_branch_ste(x, b, &lq.act_state))
                                    .sum();
                                g * pass
                            })
                            .collect();
                        Tensor::new(dxq.shape().to_vec(), data)?
                    }
                }
                (Layer::Relu, LayerCache::Relu { input }) => {
                    let data = grad
                        .data()
                        .iter()
                        .zip(input.data())
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    Tensor::new(grad.shape().to_vec(), data)?
                }
                (Layer::Flatten, LayerCache::Flatten { in_shape }) => grad.reshape(in_shape.clone())?,
                _ => unreachable!("cache layout follows layer layout"),
            };
            if !grad.is_finite() {
                return Err(Error::NonFinite {
                    node,
                    kind: layer.kind(),
                });
            }
        }
        Ok(value)
    }

    /// Classification accuracy of [`ComputeGraph::infer_with`] over a dataset,
    /// evaluated in chunks.
    pub fn accuracy_with(&self, inputs: &Tensor, labels: &[usize], quant: &[LayerQuant]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::Data("empty evaluation set".into()));
        }
        const CHUNK: usize = 512;
        let n = inputs.rows();
        let mut correct = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let logits = self.infer_with(&inputs.select_rows(&rows), quant)?;
            correct += argmax_rows(&logits)
                .iter()
                .zip(&labels[start..end])
                .filter(|(p, l)| p == l)
                .count();
            start = end;
        }
        Ok(correct as f64 / n as f64)
    }

    pub fn accuracy(&self, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
        self.accuracy_with(inputs, labels, &self.quant)
    }

    /// Every parameter as a `(name, tensor)` record.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites parameters from named records; every parameter must be
    /// present with a matching shape. Unknown names are returned.
    pub fn load_named(&mut self, records: &[(String, Tensor)]) -> Result<Vec<String>> {
        let mut unknown = Vec::new();
        let mut seen = vec![false; self.params.len()];
        for (name, value) in records {
            match self.params.iter().position(|p| &p.name == name) {
                Some(i) => {
                    if self.params[i].value.shape() != value.shape() {
                        return Err(Error::Checkpoint(format!(
                            "parameter {name}: shape {:?} in checkpoint, {:?} in network",
                            value.shape(),
                            self.params[i].value.shape()
                        )));
                    }
                    self.params[i].value = value.clone();
                    seen[i] = true;
                }
                None => unknown.push(name.clone()),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "parameter {} missing from checkpoint",
                self.params[i].name
            )));
        }
        Ok(unknown)
    }

    /// Index of the layer list entry holding quantizable layer `q`.
    pub fn quant_layer_position(&self, q: usize) -> usize {
        self.quant_layer_index[q]
    }
}

pub(crate) fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.row_len();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, inputs) = (x.rows(), x.row_len());
    let outputs = w.rows();
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; n * outputs];
    for s in 0..n {
        let xr = &xd[s * inputs..(s + 1) * inputs];
        for o in 0..outputs {
            let wr = &wd[o * inputs..(o + 1) * inputs];
            out[s * outputs + o] = bd[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Tensor::new(vec![n, outputs], out).expect("dense output shape")
}

fn dense_backward(dy: &Tensor, x: &Tensor, w: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, inputs) = (x.rows(), x.row_len());
    let outputs = w.rows();
    let (dyd, xd, wd) = (dy.data(), x.data(), w.data());
    let mut dx = vec![0.0; n * inputs];
    let mut dw = vec![0.0; outputs * inputs];
    let mut db = vec![0.0; outputs];
    for s in 0..n {
        for o in 0..outputs {
            let g = dyd[s * outputs + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            for i in 0..inputs {
                dw[o * inputs + i] += g * xd[s * inputs + i];
                dx[s * inputs + i] += g * wd[o * inputs + i];
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx"),
        Tensor::new(w.shape().to_vec(), dw).expect("dw"),
        Tensor::new(vec![outputs], db).expect("db"),
    )
}

fn conv_backward(layer: &Layer, dy: &Tensor, x: &Tensor, w: &Tensor) -> (Tensor, Tensor, Tensor) {
    let Layer::Conv2d {
        in_ch,
        out_ch,
        kernel,
        padding,
        in_h,
        in_w,
        out_h,
        out_w,
        ..
    } = *layer
    else {
        unreachable!()
    };
    let n = x.rows();
    let (dyd, xd, wd) = (dy.data(), x.data(), w.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; out_ch];
    for s in 0..n {
        for o in 0..out_ch {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let g = dyd[((s * out_ch + o) * out_h + oh) * out_w + ow];
                    db[o] += g;
                    for c in 0..in_ch {
                        for kh in 0..kernel {
                            let ih = oh + kh;
                            if ih < padding || ih - padding >= in_h {
                                continue;
                            }
                            let ih = ih - padding;
                            for kw in 0..kernel {
                                let iw = ow + kw;
                                if iw < padding || iw - padding >= in_w {
                                    continue;
                                }
                                let iw = iw - padding;
                                let xi = ((s * in_ch + c) * in_h + ih) * in_w + iw;
                                let wi = ((o * in_ch + c) * kernel + kh) * kernel + kw;
                                dw[wi] += g * xd[xi];
                                dx[xi] += g * wd[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx"),
        Tensor::new(w.shape().to_vec(), dw).expect("dw"),
        Tensor::new(vec![out_ch], db).expect("db"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{BitWidth, Branch};

    fn batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_network(&[2], &mlp_spec(&[2, 8, 2]), 7).unwrap();
        let b = build_network(&[2], &mlp_spec(&[2, 8, 2]), 7).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.value.data(), q.value.data());
        }
        let c = build_network(&[2], &mlp_spec(&[2, 8, 2]), 8).unwrap();
        assert_ne!(a.params()[0].value, c.params()[0].value);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut specs = mlp_spec(&[2, 8, 3]);
        specs.push(LayerSpec::Dense { inputs: 4, outputs: 2 });
        let err = build_network(&[2], &specs, 0).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { layer: 3, .. }), "{err}");
    }

    #[test]
    fn parameter_count_of_four_dense_layers() {
        let widths = [3, 5, 7, 4, 2];
        let g = build_network(&[3], &mlp_spec(&widths), 1).unwrap();
        let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        assert_eq!(g.parameter_count(), expected);
        assert_eq!(expected, 15 + 5 + 35 + 7 + 28 + 4 + 8 + 2);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let g = build_network(&[16], &mlp_spec(&[16, 4]), 3).unwrap();
        assert!(g.params()[0].value.max_abs() <= 0.25);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut g = build_network(&[3], &mlp_spec(&[3, 4, 2]), 0).unwrap();
        for p in g.params_mut() {
            p.value.fill(0.0);
        }
        let out = g.forward(&batch(5, 3, 1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut g = build_network(&[3], &mlp_spec(&[3, 3]), 0).unwrap();
        let w = g.param_mut("layer0.weight").unwrap();
        w.value = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        g.param_mut("layer0.bias").unwrap().value.fill(0.0);
        let x = batch(4, 3, 2);
        assert_eq!(g.forward(&x).unwrap(), x);
    }

    #[test]
    fn fixed_two_by_two_matmul() {
        let mut g = build_network(&[2], &mlp_spec(&[2, 2]), 0).unwrap();
        g.param_mut("layer0.weight").unwrap().value =
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        g.param_mut("layer0.bias").unwrap().value.fill(0.0);
        let x = Tensor::new(vec![1, 2], vec![5.0, 6.0]).unwrap();
        // [5, 6] . [[1, 2], [3, 4]]^T = [17, 39]
        assert_eq!(g.forward(&x).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn non_finite_forward_reports_node() {
        let mut g = build_network(&[2], &mlp_spec(&[2, 2]), 0).unwrap();
        g.param_mut("layer0.weight").unwrap().value.data_mut()[0] = f64::INFINITY;
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(g.forward(&x), Err(Error::NonFinite { node: 0, .. })));
    }

    #[test]
    fn backward_requires_forward() {
        let mut g = build_network(&[2], &mlp_spec(&[2, 2]), 0).unwrap();
        assert!(matches!(g.backward(&[0], Loss::default()), Err(Error::BackwardBeforeForward)));
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = build_network(&[3], &mlp_spec(&[3, 4, 2]), 0).unwrap();
        g.forward(&batch(6, 3, 0)).unwrap();
        let l = g.backward(&[0, 1, 0, 1, 1, 0], Loss::Constant(2.5)).unwrap();
        assert_eq!(l, 2.5);
        assert!(g.params().iter().all(|p| p.grad.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn loss_scale_doubles_gradients() {
        let mut g = build_network(&[3], &mlp_spec(&[3, 4, 2]), 0).unwrap();
        let x = batch(6, 3, 0);
        let labels = [0, 1, 0, 1, 1, 0];
        g.forward(&x).unwrap();
        g.backward(&labels, Loss::CrossEntropy { scale: 1.0 }).unwrap();
        let g1: Vec<Vec<f64>> = g.params().iter().map(|p| p.grad.data().to_vec()).collect();
        g.forward(&x).unwrap();
        g.backward(&labels, Loss::CrossEntropy { scale: 2.0 }).unwrap();
        for (p, base) in g.params().iter().zip(&g1) {
            for (a, b) in p.grad.data().iter().zip(base) {
                assert!((a - 2.0 * b).abs() <= 1e-15 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn conv_then_dense_shapes() {
        let specs = vec![
            LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 2 * 4 * 4, outputs: 3 },
        ];
        let mut g = build_network(&[1, 4, 4], &specs, 5).unwrap();
        assert_eq!(g.macs(), &[2 * 9 * 16, 32 * 3]);
        let x = Tensor::filled(&[2, 1, 4, 4], 0.5);
        let y = g.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
    }

    #[test]
    fn single_branch_mixture_equals_direct_quantization() {
        let mut g = build_network(&[2], &mlp_spec(&[2, 3]), 4).unwrap();
        let b = BitWidth::new(3).unwrap();
        let lq = LayerQuant {
            weight: EdgeMix::fixed(Branch::Quant(b)),
            act: EdgeMix::full_precision(),
            act_state: QuantizerState::default(),
        };
        let x = batch(3, 2, 9);
        let mixed = g.infer_with(&x, &[lq]).unwrap();
        let qw = crate::quant::quantize_weights(&g.params()[0].value, b);
        g.params_mut()[0].value = qw;
        assert_eq!(mixed, g.infer(&x).unwrap());
    }
}

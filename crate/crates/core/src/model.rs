//! Hand-differentiated dense models that can be cut at layer boundaries.
//!
//! Every layer is `activation(W x + b)` with `W` stored row-major
//! (`fan_out x fan_in`) followed by `b`. Each layer owns exactly one
//! parameter block, so a submodel owns a contiguous parameter range.
//!
//! Arithmetic order is fixed so that any other implementation following the
//! same loops reproduces results bit for bit:
//!
//! * forward: `z[j] = b[j]`, then `z[j] += W[j][k] * x[k]` for `k` ascending;
//! * weight gradient: `gW[j][k] = 0`, then `+= dz[s][j] * x[s][k]` for samples `s` ascending;
//! * bias gradient: `gb[j] = 0`, then `+= dz[s][j]` for `s` ascending;
//! * input gradient: `dx[s][k] = 0`, then `+= W[j][k] * dz[s][j]` for `j` ascending.
//!
//! Parameters are initialised from `ChaCha8Rng::seed_from_u64(seed)`, drawing
//! every weight and then every bias of each layer in order from
//! `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const F64_BYTES: u64 = 8;

/// Row-major dense matrix, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Copies the given rows into a new matrix, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix { rows: rows.len(), cols: self.cols, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let a = z.tanh();
                1.0 - a * a
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `(1/n) * sum_s sum_j (y - t)^2`
    Mse,
    /// `(1/n) * sum_s -sum_j t_j log softmax(y)_j`
    SoftmaxCrossEntropy,
}

impl Loss {
    /// Returns the loss value and its gradient with respect to `output`.
    pub fn evaluate(self, output: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
        if output.rows != targets.rows || output.cols != targets.cols {
            return Err(Error::Shape(format!(
                "output {}x{} vs targets {}x{}",
                output.rows, output.cols, targets.rows, targets.cols
            )));
        }
        let n = output.rows as f64;
        let mut grad = Matrix::zeros(output.rows, output.cols);
        let mut total = 0.0;
        match self {
            Loss::Mse => {
                for s in 0..output.rows {
                    for j in 0..output.cols {
                        let diff = output.get(s, j) - targets.get(s, j);
                        total += diff * diff;
                        grad.data[s * output.cols + j] = 2.0 * diff / n;
                    }
                }
            }
            Loss::SoftmaxCrossEntropy => {
                for s in 0..output.rows {
                    let row = output.row(s);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for &y in row {
                        denom += (y - max).exp();
                    }
                    let log_denom = denom.ln();
                    for j in 0..output.cols {
                        let log_p = row[j] - max - log_denom;
                        let t = targets.get(s, j);
                        total -= t * log_p;
                        grad.data[s * output.cols + j] = (log_p.exp() - t) / n;
                    }
                }
            }
        }
        Ok((total / n, grad))
    }
}

/// Architecture of a dense model: `arch[0]` inputs, `arch[last]` outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Vec<usize>,
    pub hidden: Activation,
    pub loss: Loss,
}

impl ModelSpec {
    pub fn new(arch: Vec<usize>, hidden: Activation, loss: Loss) -> Self {
        Self { arch, hidden, loss }
    }

    /// Single linear layer trained with MSE.
    pub fn linear(inputs: usize, outputs: usize) -> Self {
        Self::new(vec![inputs, outputs], Activation::Identity, Loss::Mse)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMeta {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
    /// Global range of this layer's parameters (weights then biases).
    pub params: Range<usize>,
}

impl LayerMeta {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Bytes held per sample for the forward pass and its backward mirror:
    /// input and output activations plus their gradients.
    pub fn fwdbwd_bytes_per_sample(&self) -> u64 {
        2 * F64_BYTES * (self.fan_in + self.fan_out) as u64
    }

    pub fn param_bytes(&self) -> u64 {
        F64_BYTES * self.param_count() as u64
    }

    pub fn footprint_bytes(&self, batch_size: usize) -> u64 {
        batch_size as u64 * self.fwdbwd_bytes_per_sample() + self.param_bytes()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<LayerMeta>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.arch.len() < 2 {
            return Err(Error::Config(format!(
                "architecture needs at least 2 layer sizes, got {:?}",
                spec.arch
            )));
        }
        if spec.arch.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("zero-width layer in {:?}", spec.arch)));
        }
        let n_layers = spec.arch.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for (i, pair) in spec.arch.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let len = fan_in * fan_out + fan_out;
            let activation = if i + 1 == n_layers { Activation::Identity } else { spec.hidden };
            layers.push(LayerMeta { fan_in, fan_out, activation, params: offset..offset + len });
            offset += len;
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerMeta] {
        &self.layers
    }

    pub fn loss(&self) -> Loss {
        self.spec.loss
    }

    pub fn param_count(&self) -> usize {
        self.layers.last().map_or(0, |l| l.params.end)
    }

    pub fn input_width(&self) -> usize {
        self.spec.arch[0]
    }

    pub fn output_width(&self) -> usize {
        *self.spec.arch.last().expect("validated arch")
    }

    pub fn param_bytes(&self) -> u64 {
        self.layers.iter().map(LayerMeta::param_bytes).sum()
    }

    /// Submodel spanning every layer.
    pub fn full_submodel(&self) -> SubmodelSpec {
        self.submodel(0..self.layers.len())
    }

    pub fn submodel(&self, layers: Range<usize>) -> SubmodelSpec {
        let first = &self.layers[layers.start];
        let last = &self.layers[layers.end - 1];
        SubmodelSpec {
            layers: layers.clone(),
            blocks: layers.clone().collect(),
            params: first.params.start..last.params.end,
            param_bytes: self.layers[layers.clone()].iter().map(LayerMeta::param_bytes).sum(),
            activation_bytes_per_sample: F64_BYTES * last.fan_out as u64,
        }
    }

    /// Parameter blocks, one per layer.
    pub fn blocks(&self) -> Vec<Block> {
        self.layers
            .iter()
            .enumerate()
            .map(|(id, l)| Block { id, start: l.params.start, len: l.params.len() })
            .collect()
    }

    /// Loss and full gradient over a batch, evaluated on the whole model.
    pub fn loss_and_gradient(&self, params: &[f64], inputs: &Matrix, targets: &Matrix) -> Result<(f64, Vec<f64>)> {
        let sub = self.full_submodel();
        let (out, ctx) = forward(self, &sub, params, inputs)?;
        let (loss, upstream) = self.spec.loss.evaluate(&out, targets)?;
        let (grads, _) = backward(self, &sub, params, &ctx, &upstream)?;
        Ok((loss, grads))
    }

    pub fn loss_value(&self, params: &[f64], inputs: &Matrix, targets: &Matrix) -> Result<f64> {
        let sub = self.full_submodel();
        let (out, _) = forward(self, &sub, params, inputs)?;
        Ok(self.spec.loss.evaluate(&out, targets)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub id: usize,
    pub start: usize,
    pub len: usize,
}

/// Flat fp64 parameters with a block index map.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    blocks: Vec<Block>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, blocks: Vec<Block>) -> Result<Self> {
        let mut expected = 0;
        for b in &blocks {
            if b.start != expected {
                return Err(Error::Layout(format!(
                    "block {} starts at {} but previous block ends at {expected}",
                    b.id, b.start
                )));
            }
            expected += b.len;
        }
        if expected != values.len() {
            return Err(Error::Layout(format!(
                "blocks cover {expected} values but vector has {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite parameter at index {i}")));
        }
        Ok(Self { values, blocks })
    }

    /// A single block covering the whole vector.
    pub fn flat(values: Vec<f64>) -> Self {
        let len = values.len();
        Self { values, blocks: vec![Block { id: 0, start: 0, len }] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, id: usize) -> Option<&[f64]> {
        self.blocks.iter().find(|b| b.id == id).map(|b| &self.values[b.start..b.start + b.len])
    }

    pub fn slice(&self, range: Range<usize>) -> &[f64] {
        &self.values[range]
    }

    pub fn slice_mut(&mut self, range: Range<usize>) -> &mut [f64] {
        &mut self.values[range]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Replaces all values, keeping the block map. Rejects length changes
    /// and non-finite entries.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Layout(format!(
                "replacement has {} values, expected {}",
                values.len(),
                self.values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite parameter at index {i}")));
        }
        self.values = values;
        Ok(())
    }

    /// `values[range] -= eta * grads`, touching nothing outside `range`.
    pub fn apply_update(&mut self, range: Range<usize>, grads: &[f64], eta: f64) -> Result<()> {
        if range.end > self.values.len() {
            return Err(Error::Shape(format!("update range {range:?} exceeds {} parameters", self.values.len())));
        }
        apply_update(&mut self.values[range], grads, eta)
    }
}

/// Initialises a model deterministically from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<(Model, ParameterVector)> {
    let model = Model::new(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(model.param_count());
    for layer in &model.layers {
        let bound = 1.0 / (layer.fan_in as f64).sqrt();
        for _ in 0..layer.param_count() {
            values.push(rng.random_range(-bound..bound));
        }
    }
    let params = ParameterVector::new(values, model.blocks())?;
    Ok((model, params))
}

/// Contiguous layer range assigned to one peer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmodelSpec {
    pub layers: Range<usize>,
    pub blocks: Vec<usize>,
    /// Global parameter index range owned by this submodel.
    pub params: Range<usize>,
    pub param_bytes: u64,
    pub activation_bytes_per_sample: u64,
}

impl SubmodelSpec {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn footprint_bytes(&self, model: &Model, batch_size: usize) -> u64 {
        model.layers[self.layers.clone()].iter().map(|l| l.footprint_bytes(batch_size)).sum()
    }
}

/// Splits `model` into one submodel per peer, cutting only at layer
/// boundaries.
///
/// Cuts are placed so that each peer's share of the footprint tracks its
/// share of total capacity. When rounding to layer boundaries makes that
/// split overflow some peer, the split falls back to giving each peer in
/// turn the largest prefix it can hold.
pub fn partition_model(model: &Model, capacities: &[f64], batch_size: usize) -> Result<Vec<SubmodelSpec>> {
    if capacities.is_empty() {
        return Err(Error::Partition { reason: "no peers".into(), deficit_bytes: 0.0 });
    }
    if let Some(c) = capacities.iter().find(|c| !(**c > 0.0) || !c.is_finite()) {
        return Err(Error::Partition { reason: format!("capacity {c} is not positive"), deficit_bytes: 0.0 });
    }
    let sizes: Vec<f64> = model.layers.iter().map(|l| l.footprint_bytes(batch_size) as f64).collect();
    let n_layers = sizes.len();
    let n_peers = capacities.len();
    if n_peers > n_layers {
        return Err(Error::Partition {
            reason: format!("{n_peers} peers but only {n_layers} layers"),
            deficit_bytes: 0.0,
        });
    }
    let total_size: f64 = sizes.iter().sum();
    let total_cap: f64 = capacities.iter().sum();
    if total_cap < total_size {
        return Err(Error::Partition {
            reason: format!("total capacity {total_cap:.0} below model footprint {total_size:.0}"),
            deficit_bytes: total_size - total_cap,
        });
    }

    let mut prefix = vec![0.0; n_layers + 1];
    for i in 0..n_layers {
        prefix[i + 1] = prefix[i] + sizes[i];
    }
    let fits = |cuts: &[usize]| {
        cuts.windows(2).zip(capacities).all(|(w, &cap)| prefix[w[1]] - prefix[w[0]] <= cap)
    };

    let proportional = {
        let mut cuts = vec![0];
        let mut cap_acc = 0.0;
        for (k, &cap) in capacities.iter().enumerate().take(n_peers - 1) {
            cap_acc += cap;
            let target = total_size * cap_acc / total_cap;
            let start = cuts[k];
            let max_end = n_layers - (n_peers - 1 - k);
            let mut best = start + 1;
            for end in start + 1..=max_end {
                if (prefix[end] - target).abs() < (prefix[best] - target).abs() {
                    best = end;
                }
            }
            cuts.push(best);
        }
        cuts.push(n_layers);
        cuts
    };

    let cuts = if fits(&proportional) {
        proportional
    } else {
        let mut cuts = vec![0];
        for (k, &cap) in capacities.iter().enumerate().take(n_peers - 1) {
            let start = cuts[k];
            let max_end = n_layers - (n_peers - 1 - k);
            let mut end = start + 1;
            while end < max_end && prefix[end + 1] - prefix[start] <= cap {
                end += 1;
            }
            cuts.push(end);
        }
        cuts.push(n_layers);
        if !fits(&cuts) {
            let deficit = cuts
                .windows(2)
                .zip(capacities)
                .map(|(w, &cap)| (prefix[w[1]] - prefix[w[0]] - cap).max(0.0))
                .fold(0.0, f64::max);
            return Err(Error::Partition {
                reason: "no layer-aligned split fits every peer".into(),
                deficit_bytes: deficit,
            });
        }
        cuts
    };

    Ok(cuts.windows(2).map(|w| model.submodel(w[0]..w[1])).collect())
}

/// Per-layer values kept from the forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardContext {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

fn check_params(sub: &SubmodelSpec, params: &[f64]) -> Result<()> {
    if params.len() != sub.param_count() {
        return Err(Error::Shape(format!(
            "submodel over layers {:?} owns {} parameters, got {}",
            sub.layers,
            sub.param_count(),
            params.len()
        )));
    }
    Ok(())
}

/// Runs `sub` on `input`; `params` holds only the submodel's own parameters.
pub fn forward(model: &Model, sub: &SubmodelSpec, params: &[f64], input: &Matrix) -> Result<(Matrix, ForwardContext)> {
    check_params(sub, params)?;
    let mut ctx = ForwardContext { inputs: Vec::new(), pre_activations: Vec::new() };
    let mut x = input.clone();
    for layer in &model.layers[sub.layers.clone()] {
        if x.cols != layer.fan_in {
            return Err(Error::Shape(format!("layer expects {} inputs, got {}", layer.fan_in, x.cols)));
        }
        let local = layer.params.start - sub.params.start;
        let w = &params[local..local + layer.fan_in * layer.fan_out];
        let b = &params[local + layer.fan_in * layer.fan_out..local + layer.param_count()];
        let mut z = Matrix::zeros(x.rows, layer.fan_out);
        let mut a = Matrix::zeros(x.rows, layer.fan_out);
        for s in 0..x.rows {
            let xs = x.row(s);
            for j in 0..layer.fan_out {
                let wj = &w[j * layer.fan_in..(j + 1) * layer.fan_in];
                let mut acc = b[j];
                for (wk, xk) in wj.iter().zip(xs) {
                    acc += wk * xk;
                }
                z.data[s * layer.fan_out + j] = acc;
                a.data[s * layer.fan_out + j] = layer.activation.apply(acc);
            }
        }
        ctx.inputs.push(x);
        ctx.pre_activations.push(z);
        x = a;
    }
    Ok((x, ctx))
}

/// Returns `(parameter gradients, input gradients)` given the gradient of
/// the loss with respect to the submodel's output.
pub fn backward(
    model: &Model,
    sub: &SubmodelSpec,
    params: &[f64],
    ctx: &ForwardContext,
    upstream: &Matrix,
) -> Result<(Vec<f64>, Matrix)> {
    check_params(sub, params)?;
    let layers = &model.layers[sub.layers.clone()];
    if ctx.inputs.len() != layers.len() {
        return Err(Error::Shape(format!(
            "context holds {} layers, submodel has {}",
            ctx.inputs.len(),
            layers.len()
        )));
    }
    let out_layer = layers.last().expect("non-empty submodel");
    let rows = ctx.inputs[0].rows;
    if upstream.rows != rows || upstream.cols != out_layer.fan_out {
        return Err(Error::Shape(format!(
            "upstream gradient {}x{} vs output {}x{}",
            upstream.rows, upstream.cols, rows, out_layer.fan_out
        )));
    }
    let mut grads = vec![0.0; sub.param_count()];
    let mut delta = upstream.clone();
    for (li, layer) in layers.iter().enumerate().rev() {
        let x = &ctx.inputs[li];
        let z = &ctx.pre_activations[li];
        let mut dz = Matrix::zeros(rows, layer.fan_out);
        for s in 0..rows {
            for j in 0..layer.fan_out {
                let idx = s * layer.fan_out + j;
                dz.data[idx] = match layer.activation {
                    Activation::Identity => delta.data[idx],
                    act => delta.data[idx] * act.derivative(z.data[idx]),
                };
            }
        }
        let local = layer.params.start - sub.params.start;
        let n_w = layer.fan_in * layer.fan_out;
        {
            let (gw, gb) = grads[local..local + layer.param_count()].split_at_mut(n_w);
            for j in 0..layer.fan_out {
                for k in 0..layer.fan_in {
                    let mut acc = 0.0;
                    for s in 0..rows {
                        acc += dz.get(s, j) * x.get(s, k);
                    }
                    gw[j * layer.fan_in + k] = acc;
                }
                let mut acc = 0.0;
                for s in 0..rows {
                    acc += dz.get(s, j);
                }
                gb[j] = acc;
            }
        }
        let w = &params[local..local + n_w];
        let mut dx = Matrix::zeros(rows, layer.fan_in);
        for s in 0..rows {
            for k in 0..layer.fan_in {
                let mut acc = 0.0;
                for j in 0..layer.fan_out {
                    acc += w[j * layer.fan_in + k] * dz.get(s, j);
                }
                dx.data[s * layer.fan_in + k] = acc;
            }
        }
        delta = dx;
    }
    Ok((grads, delta))
}

/// `params -= eta * grads`, elementwise.
pub fn apply_update(params: &mut [f64], grads: &[f64], eta: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} parameters vs {} gradients", params.len(), grads.len())));
    }
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {eta}")));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at index {i}: {}", grads[i])));
    }
    if eta == 0.0 {
        return Ok(());
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= eta * g;
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::Numeric(format!("update produced non-finite parameter at index {i}")));
    }
    Ok(())
}

/// Averages every `n_accum` gradients into one update.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    n_accum: usize,
    count: usize,
    sum: Vec<f64>,
}

impl GradAccumulator {
    pub fn new(n_accum: usize, len: usize) -> Self {
        assert!(n_accum >= 1, "n_accum must be >= 1");
        Self { n_accum, count: 0, sum: vec![0.0; len] }
    }

    pub fn n_accum(&self) -> usize {
        self.n_accum
    }

    pub fn pending(&self) -> usize {
        self.count
    }

    /// Adds one gradient; returns the mean once `n_accum` have been pushed.
    pub fn push(&mut self, grads: Vec<f64>) -> Option<Vec<f64>> {
        if self.n_accum == 1 {
            return Some(grads);
        }
        for (s, g) in self.sum.iter_mut().zip(&grads) {
            *s += g;
        }
        self.count += 1;
        if self.count < self.n_accum {
            return None;
        }
        let n = self.n_accum as f64;
        let mean = self.sum.iter().map(|s| s / n).collect();
        self.sum.iter_mut().for_each(|s| *s = 0.0);
        self.count = 0;
        Some(mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> ModelSpec {
        ModelSpec::new(vec![4, 8, 2], Activation::Tanh, Loss::Mse)
    }

    #[test]
    fn smallest_linear_model_has_two_params() {
        let (model, params) = build_model(&ModelSpec::linear(1, 1), 7).unwrap();
        assert_eq!(model.param_count(), 2);
        assert_eq!(params.len(), 2);
        assert!(params.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let (_, a) = build_model(&mlp(), 7).unwrap();
        let (_, b) = build_model(&mlp(), 7).unwrap();
        let (_, c) = build_model(&mlp(), 8).unwrap();
        assert_eq!(a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(a.values().iter().zip(c.values()).any(|(x, y)| x != y));
    }

    #[test]
    fn init_within_fan_in_bound() {
        let (model, params) = build_model(&mlp(), 3).unwrap();
        for layer in model.layers() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            assert!(params.slice(layer.params.clone()).iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn short_arch_rejected() {
        assert!(matches!(build_model(&ModelSpec::new(vec![3], Activation::Tanh, Loss::Mse), 1), Err(Error::Config(_))));
        assert!(matches!(build_model(&ModelSpec::new(vec![], Activation::Tanh, Loss::Mse), 1), Err(Error::Config(_))));
    }

    #[test]
    fn blocks_tile_vector() {
        let (_, params) = build_model(&ModelSpec::new(vec![3, 5, 4, 2], Activation::Relu, Loss::Mse), 1).unwrap();
        let mut end = 0;
        for b in params.blocks() {
            assert_eq!(b.start, end);
            end += b.len;
        }
        assert_eq!(end, params.len());
        assert!(ParameterVector::new(vec![0.0; 3], vec![Block { id: 0, start: 1, len: 2 }]).is_err());
    }

    fn equal_layers() -> Model {
        Model::new(ModelSpec::new(vec![4, 4, 4, 4, 4], Activation::Tanh, Loss::Mse)).unwrap()
    }

    #[test]
    fn equal_capacities_split_evenly() {
        let model = equal_layers();
        let x = model.layers()[0].footprint_bytes(1) as f64;
        let parts = partition_model(&model, &[2.0 * x, 2.0 * x], 1).unwrap();
        assert_eq!(parts.iter().map(|p| p.layers.len()).collect::<Vec<_>>(), vec![2, 2]);
    }

    #[test]
    fn proportional_split_three_to_one() {
        let model = equal_layers();
        let x = model.layers()[0].footprint_bytes(1) as f64;
        let parts = partition_model(&model, &[3.0 * x, x], 1).unwrap();
        assert_eq!(parts[0].layers, 0..3);
        assert_eq!(parts[1].layers, 3..4);
    }

    #[test]
    fn insufficient_capacity_reports_deficit() {
        let model = equal_layers();
        let x = model.layers()[0].footprint_bytes(1) as f64;
        match partition_model(&model, &[x, x], 1) {
            Err(Error::Partition { deficit_bytes, .. }) => assert_eq!(deficit_bytes, 2.0 * x),
            other => panic!("expected partition error, got {other:?}"),
        }
    }

    #[test]
    fn partition_is_complete_and_ordered() {
        let model = Model::new(ModelSpec::new(vec![3, 7, 5, 9, 2, 4], Activation::Tanh, Loss::Mse)).unwrap();
        let total: u64 = model.layers().iter().map(|l| l.footprint_bytes(4)).sum();
        let parts = partition_model(&model, &[total as f64 * 0.4, total as f64 * 0.6, total as f64 * 0.5], 4).unwrap();
        assert_eq!(parts.first().unwrap().layers.start, 0);
        assert_eq!(parts.last().unwrap().layers.end, 5);
        for w in parts.windows(2) {
            assert_eq!(w[0].layers.end, w[1].layers.start);
            assert_eq!(w[0].params.end, w[1].params.start);
        }
        assert!(parts.iter().all(|p| p.param_bytes > 0 && p.activation_bytes_per_sample > 0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (model, params) = build_model(&mlp(), 5).unwrap();
        let sub = model.full_submodel();
        let x = Matrix::from_vec(2, 4, vec![0.1, -0.4, 0.3, 0.9, -1.0, 0.2, 0.5, 0.0]).unwrap();
        let (_, ctx) = forward(&model, &sub, params.values(), &x).unwrap();
        let (g, dx) = backward(&model, &sub, params.values(), &ctx, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(dx.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_mse_gradient_closed_form() {
        let model = Model::new(ModelSpec::linear(1, 1)).unwrap();
        let (w, b, x, t) = (0.7, -0.2, 1.5, 0.4);
        let params = [w, b];
        let (loss, g) = model
            .loss_and_gradient(&params, &Matrix::from_vec(1, 1, vec![x]).unwrap(), &Matrix::from_vec(1, 1, vec![t]).unwrap())
            .unwrap();
        let r = w * x + b - t;
        assert!((loss - r * r).abs() < 1e-15);
        assert!((g[0] - 2.0 * r * x).abs() < 1e-15);
        assert!((g[1] - 2.0 * r).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (model, params) = build_model(&mlp(), 5).unwrap();
        let sub = model.full_submodel();
        let bad = Matrix::zeros(1, 3);
        assert!(matches!(forward(&model, &sub, params.values(), &bad), Err(Error::Shape(_))));
        assert!(matches!(forward(&model, &sub, &params.values()[1..], &Matrix::zeros(1, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn update_arithmetic() {
        let mut p = vec![1.0, 2.0];
        apply_update(&mut p, &[1.0, 1.0], 0.5).unwrap();
        assert_eq!(p, vec![0.5, 1.5]);
        let before = vec![0.3, -0.0, 7.25];
        let mut q = before.clone();
        apply_update(&mut q, &[5.0, -2.0, 1e10], 0.0).unwrap();
        assert_eq!(before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), q.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(matches!(apply_update(&mut q, &[f64::NAN, 0.0, 0.0], 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn block_update_touches_only_its_range() {
        let (_, mut params) = build_model(&mlp(), 2).unwrap();
        let before = params.clone();
        let range = params.blocks()[1].start..params.len();
        let grads = vec![1.0; range.len()];
        params.apply_update(range.clone(), &grads, 0.1).unwrap();
        assert_eq!(params.slice(0..range.start), before.slice(0..range.start));
        assert!(params.slice(range.clone()).iter().zip(before.slice(range)).all(|(a, b)| *a == b - 0.1));
    }

    #[test]
    fn accumulator_means() {
        let mut acc = GradAccumulator::new(2, 2);
        assert!(acc.push(vec![1.0, 4.0]).is_none());
        assert_eq!(acc.push(vec![3.0, 0.0]), Some(vec![2.0, 2.0]));
        let mut one = GradAccumulator::new(1, 1);
        assert_eq!(one.push(vec![5.0]), Some(vec![5.0]));
    }

    #[test]
    fn softmax_cross_entropy_gradient_rows_sum_to_zero() {
        let (out, t) = (
            Matrix::from_vec(2, 3, vec![0.2, -1.0, 3.0, 0.0, 0.0, 0.0]).unwrap(),
            Matrix::from_vec(2, 3, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap(),
        );
        let (loss, g) = Loss::SoftmaxCrossEntropy.evaluate(&out, &t).unwrap();
        assert!(loss > 0.0);
        for s in 0..2 {
            assert!(g.row(s).iter().sum::<f64>().abs() < 1e-15);
        }
        assert!(((loss * 2.0 - 3f64.ln()) - (-(3.0f64 - (0.2f64.exp() + (-1.0f64).exp() + 3f64.exp()).ln()))).abs() < 1e-12);
    }
}

//! Operational layers and networks: forward pass, exact backward pass,
//! loss, parameter bookkeeping, and checkpoints.
//!
//! A neuron with operator set `(psi, phi, f)` and kernel `w` computes
//! `f(bias + sum over input maps of phi(psi(im2col(y), broadcast(w))))`,
//! spatial shape preserved. With `(mul, sum)` this is exactly a
//! convolutional neuron, which the equivalence tests pin down.
//!
//! The backward pass chains activation, pool, and nodal derivatives as
//! dense elementwise kernels over the patch matrix and scatters patch
//! gradients to input pixels through the im2col index map. Weight
//! gradients reduce patch columns grouped by kernel position. The
//! sparse Jacobians this realizes are never materialized; the
//! finite-difference suite asserts the equivalence.

use crate::operators::{ActivationOp, NodalOp, OperatorSet, PoolOp};
use crate::tensor::{PatchPlan, Tensor, PAD};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// One neuron: its operator triple and kernel extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronSpec {
    #[serde(flatten)]
    pub operator_set: OperatorSet,
    pub kernel: (usize, usize),
}

/// One layer: neuron specs plus the expected number of incoming maps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub neurons: Vec<NeuronSpec>,
    pub input_count: usize,
}

/// Whole-network architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub input_shape: (usize, usize),
}

impl NetworkSpec {
    /// Uniform architecture: `hidden` neurons per hidden layer, all with
    /// the same kernel, one `(mul, sum, identity)` output neuron.
    pub fn uniform(
        input_shape: (usize, usize),
        hidden: &[usize],
        kernel: (usize, usize),
        hidden_set: OperatorSet,
    ) -> Self {
        let mut layers = Vec::new();
        let mut fan_in = 1;
        for &count in hidden {
            layers.push(LayerSpec {
                neurons: vec![NeuronSpec { operator_set: hidden_set, kernel }; count],
                input_count: fan_in,
            });
            fan_in = count;
        }
        layers.push(LayerSpec {
            neurons: vec![NeuronSpec {
                operator_set: OperatorSet::convolutional(ActivationOp::Identity),
                kernel,
            }],
            input_count: fan_in,
        });
        NetworkSpec { layers, input_shape }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::EmptyInput("network layers"));
        }
        if self.input_shape.0 == 0 || self.input_shape.1 == 0 {
            return Err(Error::EmptyInput("network input shape"));
        }
        let mut fan_in = 1;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.neurons.is_empty() {
                return Err(Error::EmptyInput("layer neurons"));
            }
            if layer.input_count != fan_in {
                return Err(Error::ShapeMismatch {
                    expected: format!("layer {l} input_count {fan_in}"),
                    got: format!("{}", layer.input_count),
                });
            }
            for neuron in &layer.neurons {
                let (m, n) = neuron.kernel;
                if m == 0 || n == 0 || m % 2 == 0 || n % 2 == 0 {
                    return Err(Error::InvalidKernel { rows: m, cols: n });
                }
            }
            fan_in = layer.neurons.len();
        }
        Ok(())
    }

    /// Neuron count of each hidden layer (all but the output layer).
    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len().saturating_sub(1)]
            .iter()
            .map(|l| l.neurons.len())
            .collect()
    }

    /// Exact count of trainable weights plus biases.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|layer| {
                layer
                    .neurons
                    .iter()
                    .map(|n| layer.input_count * n.kernel.0 * n.kernel.1 + 1)
                    .sum::<usize>()
            })
            .sum()
    }
}

/// Hidden-layer geometry shared by all models in an experiment; the
/// output layer is always one `(mul, sum, identity)` neuron so the
/// regression target range stays unbounded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: (usize, usize),
    pub hidden: Vec<usize>,
    pub kernel: (usize, usize),
}

impl Architecture {
    /// The equivalent CNN: every hidden neuron `(mul, sum, tanh)`.
    pub fn cnn_spec(&self) -> NetworkSpec {
        NetworkSpec::uniform(
            self.input_shape,
            &self.hidden,
            self.kernel,
            OperatorSet::new(NodalOp::Mul, PoolOp::Sum, ActivationOp::Tanh),
        )
    }
}

/// Flat-parameter layout derived from a spec.
///
/// Order per layer: kernels for (input a, neuron b) pairs a-major, each
/// row-major, then the layer's biases. Checkpoints serialize in this
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
struct StateLayout {
    /// per layer: offset of kernel (a, b) at `kernel_offsets[l][a * B + b]`
    kernel_offsets: Vec<Vec<usize>>,
    /// per layer: offset of the first bias
    bias_offsets: Vec<usize>,
    total: usize,
}

impl StateLayout {
    fn from_spec(spec: &NetworkSpec) -> Self {
        let mut kernel_offsets = Vec::with_capacity(spec.layers.len());
        let mut bias_offsets = Vec::with_capacity(spec.layers.len());
        let mut cursor = 0;
        for layer in &spec.layers {
            let b_count = layer.neurons.len();
            let mut offsets = Vec::with_capacity(layer.input_count * b_count);
            for _a in 0..layer.input_count {
                for neuron in &layer.neurons {
                    offsets.push(cursor);
                    cursor += neuron.kernel.0 * neuron.kernel.1;
                }
            }
            kernel_offsets.push(offsets);
            bias_offsets.push(cursor);
            cursor += b_count;
        }
        StateLayout { kernel_offsets, bias_offsets, total: cursor }
    }
}

/// Trainable parameters of a network, stored flat.
#[derive(Debug, Clone)]
pub struct NetworkState {
    spec: NetworkSpec,
    layout: StateLayout,
    params: Vec<f64>,
    version: u64,
}

impl NetworkState {
    /// Zero-initialized parameters (weights and biases all 0).
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layout = StateLayout::from_spec(spec);
        Ok(NetworkState {
            spec: spec.clone(),
            params: vec![0.0; layout.total],
            layout,
            version: 0,
        })
    }

    /// Bounded uniform init: weights in `[-s, s]` with
    /// `s = sqrt(1 / (fan_in * m * n))`, biases 0.
    pub fn init(spec: &NetworkSpec, rng: &mut impl rand::Rng) -> Result<Self> {
        let mut state = Self::zeros(spec)?;
        for (l, layer) in spec.layers.iter().enumerate() {
            let b_count = layer.neurons.len();
            for a in 0..layer.input_count {
                for (b, neuron) in layer.neurons.iter().enumerate() {
                    let (m, n) = neuron.kernel;
                    let s = (1.0 / (layer.input_count * m * n) as f64).sqrt();
                    let off = state.layout.kernel_offsets[l][a * b_count + b];
                    for v in &mut state.params[off..off + m * n] {
                        *v = rng.gen_range(-s..=s);
                    }
                }
            }
        }
        state.version = 1;
        Ok(state)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; bumps the version so stale traces are
    /// rejected by the backward pass.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} params", self.params.len()),
                got: format!("{}", params.len()),
            });
        }
        self.params.copy_from_slice(params);
        self.version += 1;
        Ok(())
    }

    /// Kernel slice for (layer, input map a, neuron b), row-major.
    pub fn kernel(&self, layer: usize, a: usize, b: usize) -> &[f64] {
        let b_count = self.spec.layers[layer].neurons.len();
        let (m, n) = self.spec.layers[layer].neurons[b].kernel;
        let off = self.layout.kernel_offsets[layer][a * b_count + b];
        &self.params[off..off + m * n]
    }

    pub fn bias(&self, layer: usize, b: usize) -> f64 {
        self.params[self.layout.bias_offsets[layer] + b]
    }

    fn kernel_offset(&self, layer: usize, a: usize, b: usize) -> usize {
        let b_count = self.spec.layers[layer].neurons.len();
        self.layout.kernel_offsets[layer][a * b_count + b]
    }
}

/// Flat gradient buffer matching a state's parameter layout.
#[derive(Debug, Clone)]
pub struct Gradients {
    values: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(state: &NetworkState) -> Self {
        Gradients { values: vec![0.0; state.param_count()] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn reset(&mut self) {
        self.values.fill(0.0);
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Gradient of kernel (layer, a, b) as a slice.
    pub fn kernel<'s>(&'s self, state: &NetworkState, layer: usize, a: usize, b: usize) -> &'s [f64] {
        let (m, n) = state.spec.layers[layer].neurons[b].kernel;
        let off = state.kernel_offset(layer, a, b);
        &self.values[off..off + m * n]
    }

    pub fn bias(&self, state: &NetworkState, layer: usize, b: usize) -> f64 {
        self.values[state.layout.bias_offsets[layer] + b]
    }
}

/// Per-layer forward record with buffers that survive across steps, so a
/// training loop does no large allocations after the first iteration.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    /// one plan per distinct kernel shape in the layer
    plans: Vec<PatchPlan>,
    /// plan index per neuron
    plan_of: Vec<usize>,
    /// gathered patch values, indexed [plan][input map]
    patches: Vec<Vec<Vec<f64>>>,
    /// cached backward factors, indexed [a][b]; empty when the op or pool
    /// does not use one
    factor: Vec<Vec<Vec<f64>>>,
    /// selected pool column per row, indexed [a][b]; empty for sum pools
    selected: Vec<Vec<Vec<u32>>>,
    /// pre-activation per neuron
    pre: Vec<Vec<f64>>,
    input_shape: (usize, usize),
    ready: bool,
}

impl LayerTrace {
    /// (Re)build the buffer structure for this layer geometry if needed.
    fn ensure(&mut self, layer: &LayerSpec, shape: (usize, usize)) -> Result<()> {
        if self.ready
            && self.input_shape == shape
            && self.pre.len() == layer.neurons.len()
            && self.factor.len() == layer.input_count
        {
            return Ok(());
        }
        self.plans.clear();
        self.plan_of.clear();
        for neuron in &layer.neurons {
            let idx = match self.plans.iter().position(|p| p.kernel == neuron.kernel) {
                Some(i) => i,
                None => {
                    self.plans.push(PatchPlan::new(shape, neuron.kernel)?);
                    self.plans.len() - 1
                }
            };
            self.plan_of.push(idx);
        }
        let pixels = shape.0 * shape.1;
        self.patches = self
            .plans
            .iter()
            .map(|p| vec![vec![0.0; p.rows * p.cols]; layer.input_count])
            .collect();
        self.factor = vec![vec![Vec::new(); layer.neurons.len()]; layer.input_count];
        self.selected = vec![vec![Vec::new(); layer.neurons.len()]; layer.input_count];
        self.pre = vec![vec![0.0; pixels]; layer.neurons.len()];
        self.input_shape = shape;
        self.ready = true;
        Ok(())
    }
}

/// Forward record for a whole network, consumed by the backward pass.
/// Reusable: keep one per training loop and pass it to
/// [`network_forward_into`] every step.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    layers: Vec<LayerTrace>,
    /// downstream/upstream gradient maps reused by the backward sweep
    grad_maps: Vec<Vec<f64>>,
    state_version: u64,
}

impl ForwardTrace {
    pub fn new() -> Self {
        ForwardTrace::default()
    }
}

/// Forward one layer into a reusable trace. Returns one output map per
/// neuron, spatial shape preserved.
pub fn layer_forward_into(
    inputs: &[Tensor],
    layer: &LayerSpec,
    state: &NetworkState,
    layer_idx: usize,
    trace: &mut LayerTrace,
) -> Result<Vec<Tensor>> {
    if inputs.len() != layer.input_count {
        return Err(Error::ShapeMismatch {
            expected: format!("{} input maps", layer.input_count),
            got: format!("{}", inputs.len()),
        });
    }
    let shape = (inputs[0].rows(), inputs[0].cols());
    for t in inputs {
        if (t.rows(), t.cols()) != shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape:?}"),
                got: format!("({}, {})", t.rows(), t.cols()),
            });
        }
    }
    trace.ensure(layer, shape)?;

    for (p, plan) in trace.plans.iter().enumerate() {
        for (a, input) in inputs.iter().enumerate() {
            plan.gather(input.data(), &mut trace.patches[p][a]);
        }
    }

    for b in 0..layer.neurons.len() {
        let bias = state.bias(layer_idx, b);
        trace.pre[b].fill(bias);
    }

    for a in 0..layer.input_count {
        for (b, neuron) in layer.neurons.iter().enumerate() {
            let patch = &trace.patches[trace.plan_of[b]][a];
            let weight = state.kernel(layer_idx, a, b);
            forward_connection(
                neuron.operator_set.nodal,
                neuron.operator_set.pool,
                patch,
                weight,
                &mut trace.pre[b],
                &mut trace.factor[a][b],
                &mut trace.selected[a][b],
            );
        }
    }

    layer
        .neurons
        .iter()
        .enumerate()
        .map(|(b, neuron)| {
            let act = neuron.operator_set.activation;
            let data = trace.pre[b].iter().map(|&v| act.eval(v)).collect();
            Tensor::new(vec![shape.0, shape.1], data)
        })
        .collect()
}

/// One-shot layer forward; allocates a fresh trace.
pub fn layer_forward(
    inputs: &[Tensor],
    layer: &LayerSpec,
    state: &NetworkState,
    layer_idx: usize,
) -> Result<(Vec<Tensor>, LayerTrace)> {
    let mut trace = LayerTrace::default();
    let outputs = layer_forward_into(inputs, layer, state, layer_idx, &mut trace)?;
    Ok((outputs, trace))
}

/// Fused nodal + pool forward over one connection, adding pooled values
/// into the neuron's pre-activation. Sum pools cache the per-element
/// backward factor; order-statistic pools record the selected column.
fn forward_connection(
    nodal: NodalOp,
    pool: PoolOp,
    patch: &[f64],
    weight: &[f64],
    pre: &mut [f64],
    factor: &mut Vec<f64>,
    selected: &mut Vec<u32>,
) {
    let cols = weight.len();
    match pool {
        PoolOp::Sum => {
            selected.clear();
            if nodal.needs_factor() {
                factor.clear();
                factor.resize(patch.len(), 0.0);
                for ((row, acc), f_row) in patch
                    .chunks_exact(cols)
                    .zip(pre.iter_mut())
                    .zip(factor.chunks_exact_mut(cols))
                {
                    let mut sum = 0.0;
                    for ((&y, &w), f) in row.iter().zip(weight).zip(f_row.iter_mut()) {
                        let (z, fac) = nodal.eval_and_factor(y, w);
                        sum += z;
                        *f = fac;
                    }
                    *acc += sum;
                }
            } else {
                factor.clear();
                for (row, acc) in patch.chunks_exact(cols).zip(pre.iter_mut()) {
                    let mut sum = 0.0;
                    for (&y, &w) in row.iter().zip(weight) {
                        sum += nodal.eval(y, w);
                    }
                    *acc += sum;
                }
            }
        }
        PoolOp::Median => {
            factor.clear();
            selected.clear();
            let mut z_row = vec![0.0; cols];
            let mut scratch = Vec::with_capacity(cols);
            for (row, acc) in patch.chunks_exact(cols).zip(pre.iter_mut()) {
                for ((&y, &w), z) in row.iter().zip(weight).zip(z_row.iter_mut()) {
                    *z = nodal.eval(y, w);
                }
                let (v, idx) = crate::operators::median_row(&z_row, &mut scratch);
                *acc += v;
                selected.push(idx as u32);
            }
        }
        PoolOp::Max => {
            factor.clear();
            selected.clear();
            let mut z_row = vec![0.0; cols];
            for (row, acc) in patch.chunks_exact(cols).zip(pre.iter_mut()) {
                for ((&y, &w), z) in row.iter().zip(weight).zip(z_row.iter_mut()) {
                    *z = nodal.eval(y, w);
                }
                let (v, idx) = crate::operators::max_row(&z_row);
                *acc += v;
                selected.push(idx as u32);
            }
        }
    }
}

/// Backward one layer. `upstream` holds dE/d(output map) per neuron as
/// flat pixel slices; results land in `grads` and `input_grads`.
fn layer_backward_into(
    layer: &LayerSpec,
    state: &NetworkState,
    layer_idx: usize,
    trace: &LayerTrace,
    upstream: &[&[f64]],
    grads: &mut Gradients,
    input_grads: &mut [Vec<f64>],
) -> Result<()> {
    let b_count = layer.neurons.len();
    if upstream.len() != b_count {
        return Err(Error::ShapeMismatch {
            expected: format!("{b_count} upstream maps"),
            got: format!("{}", upstream.len()),
        });
    }
    if !trace.ready || trace.pre.len() != b_count {
        return Err(Error::Numerical("missing forward trace for layer backward".into()));
    }
    let (rows_img, cols_img) = trace.input_shape;
    let pixels = rows_img * cols_img;

    // activation backward + bias gradients, per neuron
    let mut dv: Vec<Vec<f64>> = Vec::with_capacity(b_count);
    for (b, neuron) in layer.neurons.iter().enumerate() {
        let act = neuron.operator_set.activation;
        let g = upstream[b];
        if g.len() != pixels {
            return Err(Error::ShapeMismatch {
                expected: format!("{pixels} upstream pixels"),
                got: format!("{}", g.len()),
            });
        }
        let pre = &trace.pre[b];
        let mut d = vec![0.0; pixels];
        let mut bias_grad = 0.0;
        for i in 0..pixels {
            let v = g[i] * act.deriv(pre[i]);
            d[i] = v;
            bias_grad += v;
        }
        grads.values[state.layout.bias_offsets[layer_idx] + b] += bias_grad;
        dv.push(d);
    }

    for acc in input_grads.iter_mut() {
        acc.clear();
        acc.resize(pixels, 0.0);
    }

    for a in 0..layer.input_count {
        for (b, neuron) in layer.neurons.iter().enumerate() {
            let plan = &trace.plans[trace.plan_of[b]];
            let patch = &trace.patches[trace.plan_of[b]][a];
            let cols = neuron.kernel.0 * neuron.kernel.1;
            let w_off = state.kernel_offset(layer_idx, a, b);
            let weight = &state.params[w_off..w_off + cols];
            let nodal = neuron.operator_set.nodal;

            // split borrows: weight grads and input grads live in
            // different buffers
            let wgrad = &mut grads.values[w_off..w_off + cols];
            let input_acc = &mut input_grads[a];
            let index_map = &plan.index_map;
            let dvb = &dv[b];

            match neuron.operator_set.pool {
                PoolOp::Sum => {
                    let factor = &trace.factor[a][b];
                    if nodal.needs_factor() {
                        backward_dense(
                            dvb,
                            patch,
                            weight,
                            index_map,
                            input_acc,
                            wgrad,
                            |j, y, f| nodal.partials_from_factor(y, weight_at(weight, j), f),
                            Some(factor.as_slice()),
                        );
                    } else {
                        backward_dense(
                            dvb,
                            patch,
                            weight,
                            index_map,
                            input_acc,
                            wgrad,
                            |j, y, _| nodal.partials_from_factor(y, weight_at(weight, j), 0.0),
                            None,
                        );
                    }
                }
                PoolOp::Median | PoolOp::Max => {
                    let selected = &trace.selected[a][b];
                    if selected.len() != pixels {
                        return Err(Error::Numerical(
                            "missing pool selection record for layer backward".into(),
                        ));
                    }
                    for i in 0..pixels {
                        let g = dvb[i];
                        if g == 0.0 {
                            continue;
                        }
                        let j = selected[i] as usize;
                        let y = patch[i * cols + j];
                        let (dy, dw) = nodal.partials(y, weight[j]);
                        let idx = index_map[i * cols + j];
                        if idx != PAD {
                            input_acc[idx as usize] += g * dy;
                        }
                        wgrad[j] += g * dw;
                    }
                }
            }
        }
    }
    Ok(())
}

#[inline(always)]
fn weight_at(weight: &[f64], j: usize) -> f64 {
    weight[j]
}

/// Dense (sum-pool) backward kernel: scatter input gradients through the
/// index map and reduce weight gradients by column.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn backward_dense<F>(
    dv: &[f64],
    patch: &[f64],
    weight: &[f64],
    index_map: &[u32],
    input_acc: &mut [f64],
    wgrad: &mut [f64],
    partials: F,
    factor: Option<&[f64]>,
) where
    F: Fn(usize, f64, f64) -> (f64, f64),
{
    let cols = weight.len();
    match factor {
        Some(factor) => {
            for (i, &g) in dv.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let base = i * cols;
                let row = &patch[base..base + cols];
                let f_row = &factor[base..base + cols];
                let idx_row = &index_map[base..base + cols];
                for j in 0..cols {
                    let (dy, dw) = partials(j, row[j], f_row[j]);
                    let idx = idx_row[j];
                    if idx != PAD {
                        input_acc[idx as usize] += g * dy;
                    }
                    wgrad[j] += g * dw;
                }
            }
        }
        None => {
            for (i, &g) in dv.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let base = i * cols;
                let row = &patch[base..base + cols];
                let idx_row = &index_map[base..base + cols];
                for j in 0..cols {
                    let (dy, dw) = partials(j, row[j], 0.0);
                    let idx = idx_row[j];
                    if idx != PAD {
                        input_acc[idx as usize] += g * dy;
                    }
                    wgrad[j] += g * dw;
                }
            }
        }
    }
}

/// Public single-layer backward; see [`network_backward`] for whole nets.
pub fn layer_backward(
    layer: &LayerSpec,
    state: &NetworkState,
    layer_idx: usize,
    trace: &LayerTrace,
    upstream: &[Tensor],
) -> Result<(Vec<Tensor>, Gradients)> {
    let mut grads = Gradients::zeros_like(state);
    let mut input_grads = vec![Vec::new(); layer.input_count];
    let upstream_slices: Vec<&[f64]> = upstream.iter().map(|t| t.data()).collect();
    layer_backward_into(
        layer,
        state,
        layer_idx,
        trace,
        &upstream_slices,
        &mut grads,
        &mut input_grads,
    )?;
    let (rows, cols) = trace.input_shape;
    let maps = input_grads
        .into_iter()
        .map(|data| Tensor::new(vec![rows, cols], data))
        .collect::<Result<Vec<_>>>()?;
    Ok((maps, grads))
}

/// Forward the whole network into a reusable trace.
pub fn network_forward_into(
    spec: &NetworkSpec,
    state: &NetworkState,
    input: &Tensor,
    trace: &mut ForwardTrace,
) -> Result<Tensor> {
    if (input.rows(), input.cols()) != spec.input_shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", spec.input_shape),
            got: format!("({}, {})", input.rows(), input.cols()),
        });
    }
    trace.layers.resize_with(spec.layers.len(), LayerTrace::default);
    trace.state_version = state.version;
    let mut maps = vec![input.clone()];
    for (l, layer) in spec.layers.iter().enumerate() {
        maps = layer_forward_into(&maps, layer, state, l, &mut trace.layers[l])?;
    }
    maps.into_iter().next().ok_or(Error::EmptyInput("network output"))
}

/// Forward the whole network. Output spatial shape equals input shape.
pub fn network_forward(
    spec: &NetworkSpec,
    state: &NetworkState,
    input: &Tensor,
) -> Result<(Tensor, ForwardTrace)> {
    let mut trace = ForwardTrace::default();
    let output = network_forward_into(spec, state, input, &mut trace)?;
    Ok((output, trace))
}

/// Backward the whole network from dE/d(output), accumulating into a
/// caller-owned gradient buffer. Fails on a trace that does not match
/// the current parameters.
pub fn network_backward_into(
    spec: &NetworkSpec,
    state: &NetworkState,
    trace: &mut ForwardTrace,
    output_grad: &Tensor,
    grads: &mut Gradients,
) -> Result<()> {
    if trace.state_version != state.version {
        return Err(Error::Numerical(
            "stale forward trace: parameters changed since forward".into(),
        ));
    }
    if trace.layers.len() != spec.layers.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} layer traces", spec.layers.len()),
            got: format!("{}", trace.layers.len()),
        });
    }
    // grad_maps holds upstream maps [0..b_count] and downstream maps
    // [b_count..b_count + input_count] while a layer runs
    let slots = spec
        .layers
        .iter()
        .map(|l| l.neurons.len() + l.input_count)
        .max()
        .unwrap_or(2);
    trace.grad_maps.resize_with(slots, Vec::new);

    // seed upstream with the output gradient
    trace.grad_maps[0].clear();
    trace.grad_maps[0].extend_from_slice(output_grad.data());
    let mut upstream_count = 1;

    for l in (0..spec.layers.len()).rev() {
        let layer = &spec.layers[l];
        if upstream_count != layer.neurons.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} upstream maps", layer.neurons.len()),
                got: format!("{upstream_count}"),
            });
        }
        let (up_slot, down_slot) = trace.grad_maps.split_at_mut(upstream_count);
        let upstream: Vec<&[f64]> = up_slot.iter().map(|v| v.as_slice()).collect();
        let input_grads = &mut down_slot[..layer.input_count];
        let layer_trace = &trace.layers[l];
        layer_backward_into(layer, state, l, layer_trace, &upstream, grads, input_grads)?;
        // rotate: downstream becomes next upstream
        for a in 0..layer.input_count {
            trace.grad_maps.swap(a, upstream_count + a);
        }
        upstream_count = layer.input_count;
    }
    Ok(())
}

/// Backward the whole network; fresh gradient buffer.
pub fn network_backward(
    spec: &NetworkSpec,
    state: &NetworkState,
    trace: &ForwardTrace,
    output_grad: &Tensor,
) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(state);
    let mut trace = trace.clone();
    network_backward_into(spec, state, &mut trace, output_grad, &mut grads)?;
    Ok(grads)
}

/// Mean-squared loss and its gradient with respect to the prediction.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", pred.shape()),
            got: format!("{:?}", target.shape()),
        });
    }
    let count = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        loss += d * d;
        grad.push(2.0 * d / count);
    }
    Ok((loss / count, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Loss plus parameter gradients for one (input, target) pair.
pub fn loss_and_gradients(
    spec: &NetworkSpec,
    state: &NetworkState,
    input: &Tensor,
    target: &Tensor,
) -> Result<(f64, Tensor, Gradients)> {
    let (pred, mut trace) = network_forward(spec, state, input)?;
    let (loss, grad) = mse_loss(&pred, target)?;
    let mut grads = Gradients::zeros_like(state);
    network_backward_into(spec, state, &mut trace, &grad, &mut grads)?;
    Ok((loss, pred, grads))
}

// ---------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    spec: NetworkSpec,
    /// base64 little-endian f64, flat parameter layout (per layer:
    /// kernels a-major then biases)
    params: String,
}

/// Serialize a state to the self-describing checkpoint document.
pub fn save_checkpoint(state: &NetworkState, writer: &mut impl Write) -> Result<()> {
    use base64::Engine;
    let mut bytes = Vec::with_capacity(state.params.len() * 8);
    for v in &state.params {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let doc = CheckpointDoc {
        format_version: CHECKPOINT_VERSION,
        spec: state.spec.clone(),
        params: base64::engine::general_purpose::STANDARD.encode(bytes),
    };
    serde_json::to_writer_pretty(&mut *writer, &doc)
        .map_err(|e| Error::Data(format!("checkpoint encode: {e}")))?;
    writer.write_all(b"\n")?;
    Ok(())
}

/// Load a checkpoint document back into a state.
pub fn load_checkpoint(reader: &mut impl Read) -> Result<NetworkState> {
    use base64::Engine;
    let doc: CheckpointDoc =
        serde_json::from_reader(reader).map_err(|e| Error::Data(format!("checkpoint decode: {e}")))?;
    if doc.format_version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {}",
            doc.format_version
        )));
    }
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(doc.params.as_bytes())
        .map_err(|e| Error::Data(format!("checkpoint base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Data("checkpoint parameter bytes not 8-aligned".into()));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut state = NetworkState::zeros(&doc.spec)?;
    state.set_params(&params)?;
    Ok(state)
}

pub fn save_checkpoint_file(state: &NetworkState, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    save_checkpoint(state, &mut file)
}

pub fn load_checkpoint_file(path: &Path) -> Result<NetworkState> {
    let mut file = std::fs::File::open(path)?;
    load_checkpoint(&mut file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{ActivationOp, NodalOp, OperatorSet, PoolOp};
    use rand::Rng;

    fn random_image(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Scalar-loop oracle: applies psi, phi, f window by window with no
    /// shared machinery with the engine.
    fn scalar_layer_forward(
        inputs: &[Tensor],
        layer: &LayerSpec,
        state: &NetworkState,
        layer_idx: usize,
    ) -> Vec<Tensor> {
        let (rows, cols) = (inputs[0].rows(), inputs[0].cols());
        let mut outs = Vec::new();
        for (b, neuron) in layer.neurons.iter().enumerate() {
            let set = neuron.operator_set;
            let (m, n) = neuron.kernel;
            let mut out = Tensor::zeros(vec![rows, cols]);
            for i in 0..rows as isize {
                for j in 0..cols as isize {
                    let mut acc = state.bias(layer_idx, b);
                    for (a, input) in inputs.iter().enumerate() {
                        let w = state.kernel(layer_idx, a, b);
                        let mut window = Vec::new();
                        for u in 0..m as isize {
                            for v in 0..n as isize {
                                let si = i + u - (m as isize - 1) / 2;
                                let sj = j + v - (n as isize - 1) / 2;
                                let y = if si < 0
                                    || sj < 0
                                    || si >= rows as isize
                                    || sj >= cols as isize
                                {
                                    0.0
                                } else {
                                    input.at(si as usize, sj as usize)
                                };
                                window.push(set.nodal.eval(y, w[(u * n as isize + v) as usize]));
                            }
                        }
                        let pooled = match set.pool {
                            PoolOp::Sum => window.iter().sum::<f64>(),
                            PoolOp::Median => {
                                let mut s = Vec::new();
                                crate::operators::median_row(&window, &mut s).0
                            }
                            PoolOp::Max => crate::operators::max_row(&window).0,
                        };
                        acc += pooled;
                    }
                    out.set(i as usize, j as usize, set.activation.eval(acc));
                }
            }
            outs.push(out);
        }
        outs
    }

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        let scale = a.abs().max(b.abs()).max(1e-30);
        assert!(((a - b) / scale).abs() < tol, "{what}: {a} vs {b}");
    }

    #[test]
    fn mul_sum_layer_is_exact_convolution() {
        let mut rng = crate::rng::stream(301, &[1]);
        let spec = NetworkSpec {
            layers: vec![LayerSpec {
                neurons: vec![NeuronSpec {
                    operator_set: OperatorSet::convolutional(ActivationOp::Identity),
                    kernel: (3, 3),
                }],
                input_count: 1,
            }],
            input_shape: (6, 6),
        };
        let state = NetworkState::init(&spec, &mut rng).unwrap();
        let input = random_image(6, 6, &mut rng);
        let (out, _) = network_forward(&spec, &state, &input).unwrap();
        let oracle = scalar_layer_forward(&[input], &spec.layers[0], &state, 0);
        for (a, b) in out.data().iter().zip(oracle[0].data()) {
            assert_close(*a, *b, 1e-12, "conv layer");
        }
    }

    #[test]
    fn zero_input_sin_sum_tanh_gives_zero() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec {
                neurons: vec![NeuronSpec {
                    operator_set: OperatorSet::new(NodalOp::Sin, PoolOp::Sum, ActivationOp::Tanh),
                    kernel: (3, 3),
                }],
                input_count: 1,
            }],
            input_shape: (4, 4),
        };
        let mut rng = crate::rng::stream(302, &[2]);
        let state = NetworkState::init(&spec, &mut rng).unwrap();
        let input = Tensor::zeros(vec![4, 4]);
        let (out, _) = network_forward(&spec, &state, &input).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_matches_scalar_loop_oracle() {
        let mut rng = crate::rng::stream(303, &[3]);
        for set in [
            OperatorSet::new(NodalOp::Cubic, PoolOp::Median, ActivationOp::Tanh),
            OperatorSet::new(NodalOp::Sinh, PoolOp::Sum, ActivationOp::Tanh),
            OperatorSet::new(NodalOp::SignedLog, PoolOp::Max, ActivationOp::LinCut),
            OperatorSet::new(NodalOp::Chirp, PoolOp::Median, ActivationOp::Identity),
        ] {
            let spec = NetworkSpec {
                layers: vec![
                    LayerSpec {
                        neurons: vec![NeuronSpec { operator_set: set, kernel: (3, 3) }; 3],
                        input_count: 1,
                    },
                    LayerSpec {
                        neurons: vec![NeuronSpec { operator_set: set, kernel: (3, 3) }; 2],
                        input_count: 3,
                    },
                ],
                input_shape: (5, 5),
            };
            let state = NetworkState::init(&spec, &mut rng).unwrap();
            let input = random_image(5, 5, &mut rng);

            let (l1, _) = layer_forward(&[input.clone()], &spec.layers[0], &state, 0).unwrap();
            let l1_oracle = scalar_layer_forward(&[input], &spec.layers[0], &state, 0);
            for (a, b) in l1.iter().zip(&l1_oracle) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert_close(*x, *y, 1e-12, &format!("{set} layer 1"));
                }
            }

            let (l2, _) = layer_forward(&l1, &spec.layers[1], &state, 1).unwrap();
            let l2_oracle = scalar_layer_forward(&l1_oracle, &spec.layers[1], &state, 1);
            for (a, b) in l2.iter().zip(&l2_oracle) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert_close(*x, *y, 1e-12, &format!("{set} layer 2"));
                }
            }
        }
    }

    #[test]
    fn identity_network_reproduces_input() {
        // single (mul, sum, identity) neuron with centered delta kernel
        let spec = NetworkSpec {
            layers: vec![LayerSpec {
                neurons: vec![NeuronSpec {
                    operator_set: OperatorSet::convolutional(ActivationOp::Identity),
                    kernel: (3, 3),
                }],
                input_count: 1,
            }],
            input_shape: (5, 5),
        };
        let mut state = NetworkState::zeros(&spec).unwrap();
        state.params_mut()[4] = 1.0; // center of the 3x3 kernel
        let mut rng = crate::rng::stream(304, &[4]);
        let input = random_image(5, 5, &mut rng);
        let (out, _) = network_forward(&spec, &state, &input).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = crate::rng::stream(305, &[5]);
        let spec = NetworkSpec::uniform(
            (4, 4),
            &[2],
            (3, 3),
            OperatorSet::new(NodalOp::Sin, PoolOp::Sum, ActivationOp::Tanh),
        );
        let state = NetworkState::init(&spec, &mut rng).unwrap();
        let input = random_image(4, 4, &mut rng);
        let (_, trace) = network_forward(&spec, &state, &input).unwrap();
        let grads =
            network_backward(&spec, &state, &trace, &Tensor::zeros(vec![4, 4])).unwrap();
        assert!(grads.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut rng = crate::rng::stream(306, &[6]);
        let spec = NetworkSpec::uniform(
            (4, 4),
            &[2],
            (3, 3),
            OperatorSet::new(NodalOp::Mul, PoolOp::Sum, ActivationOp::Tanh),
        );
        let mut state = NetworkState::init(&spec, &mut rng).unwrap();
        let input = random_image(4, 4, &mut rng);
        let (_, trace) = network_forward(&spec, &state, &input).unwrap();
        state.params_mut()[0] += 0.1;
        let err = network_backward(&spec, &state, &trace, &Tensor::zeros(vec![4, 4]));
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn mse_examples() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (loss, grad) = mse_loss(&a, &a).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&v| v == 0.0));

        let b = a.map(|v| v - 1.0);
        let (loss, grad) = mse_loss(&a, &b).unwrap();
        assert_eq!(loss, 1.0);
        assert!(grad.data().iter().all(|&v| v == 0.5));

        let mut rng = crate::rng::stream(307, &[7]);
        let p = random_image(3, 3, &mut rng);
        let t = random_image(3, 3, &mut rng);
        let (loss, _) = mse_loss(&p, &t).unwrap();
        let direct: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 9.0;
        assert_close(loss, direct, 1e-15, "mse");

        let c = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(mse_loss(&a, &c).is_err());
    }

    #[test]
    fn parameter_count_examples() {
        let one = NetworkSpec {
            layers: vec![LayerSpec {
                neurons: vec![NeuronSpec {
                    operator_set: OperatorSet::convolutional(ActivationOp::Identity),
                    kernel: (3, 3),
                }],
                input_count: 1,
            }],
            input_shape: (5, 5),
        };
        assert_eq!(one.parameter_count(), 10);

        let tiny = NetworkSpec {
            layers: vec![LayerSpec {
                neurons: vec![NeuronSpec {
                    operator_set: OperatorSet::convolutional(ActivationOp::Identity),
                    kernel: (1, 1),
                }],
                input_count: 1,
            }],
            input_shape: (5, 5),
        };
        assert_eq!(tiny.parameter_count(), 2);

        // 2 hidden layers of 12 plus the single-output head
        let denoiser = NetworkSpec::uniform(
            (60, 60),
            &[12, 12],
            (3, 3),
            OperatorSet::new(NodalOp::Mul, PoolOp::Sum, ActivationOp::Tanh),
        );
        let count = denoiser.parameter_count();
        assert_eq!(count, 120 + 1308 + 109);
        assert!(count < 9000, "2x12 parameter count {count} must stay under 9000");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = crate::rng::stream(308, &[8]);
        let spec = NetworkSpec::uniform(
            (6, 6),
            &[3, 2],
            (3, 3),
            OperatorSet::new(NodalOp::Sinh, PoolOp::Median, ActivationOp::Tanh),
        );
        let state = NetworkState::init(&spec, &mut rng).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&state, &mut buf).unwrap();
        let loaded = load_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.spec(), state.spec());
        assert_eq!(loaded.params(), state.params());

        let input = random_image(6, 6, &mut rng);
        let (a, _) = network_forward(&spec, &state, &input).unwrap();
        let (b, _) = network_forward(&spec, &loaded, &input).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng_a = crate::rng::stream(309, &[9]);
        let mut rng_b = crate::rng::stream(309, &[9]);
        let spec = NetworkSpec::uniform(
            (5, 5),
            &[3],
            (3, 3),
            OperatorSet::new(NodalOp::Chirp, PoolOp::Median, ActivationOp::Tanh),
        );
        let sa = NetworkState::init(&spec, &mut rng_a).unwrap();
        let sb = NetworkState::init(&spec, &mut rng_b).unwrap();
        assert_eq!(sa.params(), sb.params());
        let input = random_image(5, 5, &mut rng_a);
        let (oa, ta) = network_forward(&spec, &sa, &input).unwrap();
        let (ob, tb) = network_forward(&spec, &sb, &input).unwrap();
        assert_eq!(oa.data(), ob.data());
        let (la, _) = mse_loss(&oa, &Tensor::zeros(vec![5, 5])).unwrap();
        let (lb, _) = mse_loss(&ob, &Tensor::zeros(vec![5, 5])).unwrap();
        assert_eq!(la, lb);
        let ga = network_backward(&spec, &sa, &ta, &oa).unwrap();
        let gb = network_backward(&spec, &sb, &tb, &ob).unwrap();
        assert_eq!(ga.values(), gb.values());
    }

    #[test]
    fn spec_validation_catches_fanin_mismatch() {
        let bad = NetworkSpec {
            layers: vec![
                LayerSpec {
                    neurons: vec![NeuronSpec {
                        operator_set: OperatorSet::convolutional(ActivationOp::Tanh),
                        kernel: (3, 3),
                    }],
                    input_count: 1,
                },
                LayerSpec {
                    neurons: vec![NeuronSpec {
                        operator_set: OperatorSet::convolutional(ActivationOp::Identity),
                        kernel: (3, 3),
                    }],
                    input_count: 5,
                },
            ],
            input_shape: (4, 4),
        };
        assert!(bad.validate().is_err());
        assert!(NetworkState::zeros(&bad).is_err());
    }
}

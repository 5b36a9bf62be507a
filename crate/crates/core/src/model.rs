//! The multi-input operator network.
//!
//! Two branch MLPs encode the rod heat-flux profile and the inlet scalars
//! into `N`-vectors, a trunk MLP maps every center-plane node to a scalar,
//! and the three are fused by element-wise product:
//!
//! ```text
//! h = Branch1(p_rod) ⊙ Branch2([T_in, v_in]) ⊙ [Trunk(x_i, y_i)]_i
//! T̂ = W_T h + b_T,   v̂ = W_v h + b_v,   k̂ = W_k h + b_k
//! ```
//!
//! Hidden layers use ReLU followed by inverted dropout (training only);
//! the last layer of every MLP and the three heads are affine. The trunk
//! is evaluated for all nodes at once as an `N x width` batch.
//!
//! Gradients are computed analytically by [`backward`] from the
//! [`ForwardTrace`] recorded in training mode.

use serde::{Deserialize, Serialize};

use crate::domain::{CenterPlaneMesh, FieldSnapshot, InputRanges, InputSample, Quantity};
use crate::error::{Error, Result};
use crate::numerics::{dot, dropout_mask, gemm, init_dense, DenseMatrix, Layout, RandomStream};
use crate::oracle::sensor_shape;

/// Network shape. The default is the published architecture with `N = 1733`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Heat-flux sensor points feeding branch 1.
    pub n1: usize,
    /// Width of the branch-2 input (inlet temperature and velocity).
    pub n_scalar: usize,
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    /// Center-plane node count `N`.
    pub n_nodes: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n1: 100,
            n_scalar: 2,
            branch_hidden: vec![512, 512, 512],
            trunk_hidden: vec![300, 300, 300],
            n_nodes: 1733,
            dropout_rate: 0.2,
        }
    }
}

/// Trunk input width: node `(x, y)`.
pub const TRUNK_INPUT: usize = 2;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.n1, self.n_scalar, self.n_nodes]
            .into_iter()
            .chain(self.branch_hidden.iter().copied())
            .chain(self.trunk_hidden.iter().copied());
        if counts.into_iter().any(|c| c == 0) {
            return Err(Error::invalid(format!("all layer widths must be >= 1: {self:?}")));
        }
        if self.n_scalar != 2 {
            return Err(Error::invalid(format!(
                "branch 2 takes (T_in, v_in); n_scalar must be 2, got {}",
                self.n_scalar
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn branch1_widths(&self) -> Vec<usize> {
        chain(self.n1, &self.branch_hidden, self.n_nodes)
    }

    pub fn branch2_widths(&self) -> Vec<usize> {
        chain(self.n_scalar, &self.branch_hidden, self.n_nodes)
    }

    pub fn trunk_widths(&self) -> Vec<usize> {
        chain(TRUNK_INPUT, &self.trunk_hidden, 1)
    }
}

fn chain(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

fn chain_param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Exact trainable-parameter count implied by `config`.
pub fn count_params(config: &ModelConfig) -> usize {
    chain_param_count(&config.branch1_widths())
        + chain_param_count(&config.branch2_widths())
        + chain_param_count(&config.trunk_widths())
        + 3 * (config.n_nodes * config.n_nodes + config.n_nodes)
}

/// Affine layer `y = W x + b` with `W` stored `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(out: usize, input: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(out, input),
            bias: vec![0.0; out],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    /// `Y = X Wᵀ + 1 bᵀ` for a `batch x in` block `X`.
    fn forward_batch(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let (out, input) = self.weight.shape();
        if batch == 1 {
            // A single row is bandwidth-bound; skip GEMM's packing copy of W.
            return self.weight.as_slice().chunks_exact(input).zip(&self.bias).map(|(row, b)| dot(row, x) + b).collect();
        }
        let mut y = vec![0.0; batch * out];
        gemm(batch, input, out, x, Layout::Normal, self.weight.as_slice(), Layout::Transposed, &mut y, false);
        for row in y.chunks_exact_mut(out) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }
}

/// All weights and biases, in the fixed order
/// branch 1, branch 2, trunk, head T, head v, head k.
///
/// Also used for gradients and optimizer moments, which share the shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub branch1: Vec<Layer>,
    pub branch2: Vec<Layer>,
    pub trunk: Vec<Layer>,
    pub heads: [Layer; 3],
}

pub type Gradients = Network;

impl Network {
    pub fn zeros(config: &ModelConfig) -> Self {
        let mlp = |widths: Vec<usize>| widths.windows(2).map(|w| Layer::zeros(w[1], w[0])).collect();
        let n = config.n_nodes;
        Self {
            branch1: mlp(config.branch1_widths()),
            branch2: mlp(config.branch2_widths()),
            trunk: mlp(config.trunk_widths()),
            heads: [Layer::zeros(n, n), Layer::zeros(n, n), Layer::zeros(n, n)],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(config: &ModelConfig, stream: &mut RandomStream) -> Self {
        let mut net = Self::zeros(config);
        for layer in net.layers_mut() {
            let (r, c) = layer.weight.shape();
            layer.weight = init_dense(stream, r, c);
        }
        net
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for layer in z.layers_mut() {
            layer.weight.as_mut_slice().fill(0.0);
            layer.bias.fill(0.0);
        }
        z
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.branch1
            .iter()
            .chain(&self.branch2)
            .chain(&self.trunk)
            .chain(self.heads.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.branch1
            .iter_mut()
            .chain(self.branch2.iter_mut())
            .chain(self.trunk.iter_mut())
            .chain(self.heads.iter_mut())
    }

    /// Human-readable names matching [`Network::layers`] order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (prefix, layers) in [("branch1", &self.branch1), ("branch2", &self.branch2), ("trunk", &self.trunk)] {
            names.extend((0..layers.len()).map(|i| format!("{prefix}.{i}")));
        }
        names.extend(Quantity::ALL.iter().map(|q| format!("head_{}", q.symbol())));
        names
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// Σ w² over weight matrices only (biases excluded).
    pub fn weight_sum_of_squares(&self) -> f64 {
        self.layers().map(|l| l.weight.sum_of_squares()).sum()
    }

    /// Verifies every layer against the shape chain implied by `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Network::zeros(config);
        let mine: Vec<_> = self.layers().collect();
        let theirs: Vec<_> = expected.layers().collect();
        if self.branch1.len() != expected.branch1.len()
            || self.branch2.len() != expected.branch2.len()
            || self.trunk.len() != expected.trunk.len()
        {
            return Err(Error::shape(
                "network depth",
                format!(
                    "{}/{}/{} layers (branch1/branch2/trunk)",
                    expected.branch1.len(),
                    expected.branch2.len(),
                    expected.trunk.len()
                ),
                format!("{}/{}/{}", self.branch1.len(), self.branch2.len(), self.trunk.len()),
            ));
        }
        for ((name, a), b) in expected.layer_names().into_iter().zip(mine).zip(theirs) {
            let (ra, ca) = a.weight.shape();
            let (rb, cb) = b.weight.shape();
            if (ra, ca) != (rb, cb) || a.bias.len() != b.bias.len() {
                return Err(Error::shape(
                    format!("layer {name}"),
                    format!("{rb}x{cb} weight, {} bias", b.bias.len()),
                    format!("{ra}x{ca} weight, {} bias", a.bias.len()),
                ));
            }
        }
        Ok(())
    }
}

/// Scaling applied to inputs and outputs.
///
/// Inputs are min-max scaled per channel from fixed ranges (not data), so
/// inference never depends on the training set. Outputs are z-scored per
/// quantity with statistics from the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    /// `n1` heat-flux channels followed by `T_in` and `v_in`.
    pub input_min: Vec<f64>,
    pub input_max: Vec<f64>,
    /// Indexed by [`Quantity::index`].
    pub output_mean: [f64; 3],
    pub output_std: [f64; 3],
}

impl NormalizationStats {
    /// Input scaling from the operating ranges. Flux sensor `j` spans
    /// `[p_lo·s_j, p_hi·s_j]` with `s_j` the sinusoidal sensor shape.
    pub fn from_ranges(ranges: &InputRanges, n1: usize) -> Self {
        let shape = sensor_shape(n1);
        let mut input_min: Vec<f64> = shape.iter().map(|s| ranges.p_max.0 * s).collect();
        let mut input_max: Vec<f64> = shape.iter().map(|s| ranges.p_max.1 * s).collect();
        input_min.extend([ranges.t_in.0, ranges.v_in.0]);
        input_max.extend([ranges.t_in.1, ranges.v_in.1]);
        Self {
            input_min,
            input_max,
            output_mean: [0.0; 3],
            output_std: [1.0; 3],
        }
    }

    /// Sets output statistics to the pooled mean and population standard
    /// deviation over all nodes of all `snapshots`. A quantity that is
    /// constant across the data keeps unit scale.
    pub fn fit_outputs<'a>(mut self, snapshots: impl IntoIterator<Item = &'a FieldSnapshot>) -> Self {
        let mut sum = [0.0; 3];
        let mut sum_sq = [0.0; 3];
        let mut count = 0usize;
        let snapshots: Vec<_> = snapshots.into_iter().collect();
        for s in &snapshots {
            for q in Quantity::ALL {
                sum[q.index()] += s.get(q).iter().sum::<f64>();
            }
            count += s.len();
        }
        if count == 0 {
            return self;
        }
        let mean = sum.map(|s| s / count as f64);
        for s in &snapshots {
            for q in Quantity::ALL {
                let m = mean[q.index()];
                sum_sq[q.index()] += s.get(q).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        for q in Quantity::ALL {
            let i = q.index();
            let std = (sum_sq[i] / count as f64).sqrt();
            self.output_mean[i] = mean[i];
            self.output_std[i] = if std > 1e-12 * mean[i].abs().max(1.0) { std } else { 1.0 };
        }
        self
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let width = config.n1 + config.n_scalar;
        if self.input_min.len() != width || self.input_max.len() != width {
            return Err(Error::shape(
                "normalization input channels",
                width,
                format!("{} min / {} max", self.input_min.len(), self.input_max.len()),
            ));
        }
        if let Some(i) = (0..width).find(|&i| !(self.input_max[i] > self.input_min[i])) {
            return Err(Error::invalid(format!(
                "input channel {i}: max {} must exceed min {}",
                self.input_max[i], self.input_min[i]
            )));
        }
        if self.output_std.iter().any(|s| !(s.is_finite() && *s > 0.0))
            || self.output_mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::invalid(format!(
                "output statistics must be finite with std > 0: mean {:?}, std {:?}",
                self.output_mean, self.output_std
            )));
        }
        Ok(())
    }

    fn scale_input(&self, channel: usize, value: f64) -> f64 {
        (value - self.input_min[channel]) / (self.input_max[channel] - self.input_min[channel])
    }

    /// Branch-1 and branch-2 inputs in `[0, 1]` (for in-range samples).
    pub fn normalize_inputs(&self, sample: &InputSample) -> (Vec<f64>, Vec<f64>) {
        let n1 = sample.p_rod.len();
        let flux = sample.p_rod.iter().enumerate().map(|(j, &q)| self.scale_input(j, q)).collect();
        let scalars = vec![self.scale_input(n1, sample.t_in), self.scale_input(n1 + 1, sample.v_in)];
        (flux, scalars)
    }

    pub fn normalize(&self, physical: &FieldSnapshot) -> FieldSnapshot {
        let mut out = physical.clone();
        for q in Quantity::ALL {
            let (m, s) = (self.output_mean[q.index()], self.output_std[q.index()]);
            out.get_mut(q).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        out
    }

    pub fn denormalize(&self, normalized: &FieldSnapshot) -> FieldSnapshot {
        let mut out = normalized.clone();
        for q in Quantity::ALL {
            let (m, s) = (self.output_mean[q.index()], self.output_std[q.index()]);
            out.get_mut(q).iter_mut().for_each(|v| *v = *v * s + m);
        }
        out
    }
}

/// Trained or initialized model: shape, weights, and scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub net: Network,
    pub norm: NormalizationStats,
}

impl ModelParams {
    pub fn new(config: ModelConfig, net: Network, norm: NormalizationStats) -> Result<Self> {
        config.validate()?;
        net.check_shapes(&config)?;
        norm.validate(&config)?;
        Ok(Self { config, net, norm })
    }

    pub fn init(config: ModelConfig, norm: NormalizationStats, stream: &mut RandomStream) -> Result<Self> {
        config.validate()?;
        let net = Network::init(&config, stream);
        Self::new(config, net, norm)
    }

    fn check_inputs(&self, sample: &InputSample, mesh: &CenterPlaneMesh) -> Result<()> {
        if sample.p_rod.len() != self.config.n1 {
            return Err(Error::shape("heat-flux profile", format!("{} sensor points", self.config.n1), sample.p_rod.len()));
        }
        if mesh.len() != self.config.n_nodes {
            return Err(Error::shape("center-plane mesh", format!("{} nodes", self.config.n_nodes), format!("{} nodes", mesh.len())));
        }
        Ok(())
    }
}

pub enum Mode<'a> {
    Eval,
    /// Dropout active, masks drawn from the stream.
    Train(&'a mut RandomStream),
}

/// Activations of one MLP for one forward pass.
#[derive(Clone, Debug)]
struct MlpTrace {
    batch: usize,
    /// Input block of every layer (`batch x in`), post-dropout for hidden inputs.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    /// Dropout mask applied after each hidden ReLU.
    masks: Vec<Vec<f64>>,
}

/// Everything the backward pass needs from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    branch1: MlpTrace,
    branch2: MlpTrace,
    trunk: MlpTrace,
    phi1: Vec<f64>,
    phi2: Vec<f64>,
    psi: Vec<f64>,
    fused: Vec<f64>,
}

impl ForwardTrace {
    pub fn phi1(&self) -> &[f64] {
        &self.phi1
    }

    pub fn phi2(&self) -> &[f64] {
        &self.phi2
    }

    /// Per-node trunk outputs.
    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    /// `φ1 ⊙ φ2 ⊙ ψ`.
    pub fn fused(&self) -> &[f64] {
        &self.fused
    }
}

fn check_finite(values: &[f64], layer: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: layer() })
    }
}

fn mlp_forward(
    layers: &[Layer],
    input: Vec<f64>,
    batch: usize,
    mut dropout: Option<(&mut RandomStream, f64)>,
    name: &str,
) -> Result<(Vec<f64>, MlpTrace)> {
    let mut trace = MlpTrace {
        batch,
        inputs: Vec::with_capacity(layers.len()),
        pre: Vec::new(),
        masks: Vec::new(),
    };
    let mut x = input;
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let z = layer.forward_batch(&x, batch);
        check_finite(&z, || format!("{name}.{l}"))?;
        trace.inputs.push(x);
        if l == last {
            return Ok((z, trace));
        }
        let mut a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        if let Some((stream, rate)) = dropout.as_mut() {
            let mask = dropout_mask(stream, a.len(), *rate)?;
            a.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
            trace.masks.push(mask);
        }
        trace.pre.push(z);
        x = a;
    }
    unreachable!("an MLP has at least one layer")
}

/// Accumulates parameter gradients of one MLP into `grads`.
fn mlp_backward(layers: &[Layer], trace: &MlpTrace, grad_out: Vec<f64>, grads: &mut [Layer]) {
    let batch = trace.batch;
    let mut dz = grad_out;
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let (out, input) = layer.weight.shape();
        let x = &trace.inputs[l];
        let g = &mut grads[l];
        // dW += dZᵀ X
        gemm(out, batch, input, &dz, Layout::Transposed, x, Layout::Normal, g.weight.as_mut_slice(), true);
        for row in dz.chunks_exact(out) {
            g.bias.iter_mut().zip(row).for_each(|(b, d)| *b += d);
        }
        if l == 0 {
            break;
        }
        // dX = dZ W, then back through dropout and ReLU of layer l-1.
        let mut dx = vec![0.0; batch * input];
        gemm(batch, out, input, &dz, Layout::Normal, layer.weight.as_slice(), Layout::Normal, &mut dx, false);
        let pre = &trace.pre[l - 1];
        match trace.masks.get(l - 1) {
            Some(mask) => dx
                .iter_mut()
                .zip(pre)
                .zip(mask)
                .for_each(|((d, &z), &m)| *d = if z > 0.0 { *d * m } else { 0.0 }),
            None => dx.iter_mut().zip(pre).for_each(|(d, &z)| {
                if z <= 0.0 {
                    *d = 0.0
                }
            }),
        }
        dz = dx;
    }
}

fn apply_heads(params: &ModelParams, fused: &[f64]) -> Result<FieldSnapshot> {
    let mut out = FieldSnapshot::zeros(0);
    for q in Quantity::ALL {
        let y = params.net.heads[q.index()].forward_batch(fused, 1);
        check_finite(&y, || format!("head_{}", q.symbol()))?;
        *out.get_mut(q) = y;
    }
    Ok(out)
}

fn fuse(phi1: &[f64], phi2: &[f64], psi: &[f64]) -> Vec<f64> {
    phi1.iter().zip(phi2).zip(psi).map(|((a, b), c)| a * b * c).collect()
}

/// Full forward pass, returning normalized-space outputs.
///
/// In [`Mode::Train`] dropout is active and a trace is returned for
/// [`backward`]; [`Mode::Eval`] is deterministic and returns no trace.
pub fn forward(
    params: &ModelParams,
    sample: &InputSample,
    mesh: &CenterPlaneMesh,
    mode: Mode<'_>,
) -> Result<(FieldSnapshot, Option<ForwardTrace>)> {
    params.check_inputs(sample, mesh)?;
    let (flux, scalars) = params.norm.normalize_inputs(sample);
    let rate = params.config.dropout_rate;
    let net = &params.net;
    let n = mesh.len();
    let mut stream = match mode {
        Mode::Eval => None,
        Mode::Train(s) => Some(s),
    };
    let training = stream.is_some();
    let (phi1, t1) = mlp_forward(&net.branch1, flux, 1, stream.as_deref_mut().map(|s| (s, rate)), "branch1")?;
    let (phi2, t2) = mlp_forward(&net.branch2, scalars, 1, stream.as_deref_mut().map(|s| (s, rate)), "branch2")?;
    let (psi, tt) = mlp_forward(
        &net.trunk,
        mesh.normalized_coords(),
        n,
        stream.as_deref_mut().map(|s| (s, rate)),
        "trunk",
    )?;
    let fused = fuse(&phi1, &phi2, &psi);
    check_finite(&fused, || "fusion".to_string())?;
    let out = apply_heads(params, &fused)?;
    let trace = training.then(|| ForwardTrace {
        branch1: t1,
        branch2: t2,
        trunk: tt,
        phi1,
        phi2,
        psi,
        fused,
    });
    Ok((out, trace))
}

/// Eval-mode trunk outputs for every node. In eval mode these depend only on
/// the parameters and the mesh, so a batch of predictions can share them.
pub fn trunk_outputs(params: &ModelParams, mesh: &CenterPlaneMesh) -> Result<Vec<f64>> {
    if mesh.len() != params.config.n_nodes {
        return Err(Error::shape("center-plane mesh", format!("{} nodes", params.config.n_nodes), format!("{} nodes", mesh.len())));
    }
    Ok(mlp_forward(&params.net.trunk, mesh.normalized_coords(), mesh.len(), None, "trunk")?.0)
}

/// Eval-mode forward with precomputed [`trunk_outputs`]. Bit-identical to
/// [`forward`] in [`Mode::Eval`].
pub fn forward_eval_with_trunk(params: &ModelParams, sample: &InputSample, psi: &[f64]) -> Result<FieldSnapshot> {
    if sample.p_rod.len() != params.config.n1 {
        return Err(Error::shape("heat-flux profile", format!("{} sensor points", params.config.n1), sample.p_rod.len()));
    }
    if psi.len() != params.config.n_nodes {
        return Err(Error::shape("trunk outputs", params.config.n_nodes, psi.len()));
    }
    let (flux, scalars) = params.norm.normalize_inputs(sample);
    let (phi1, _) = mlp_forward(&params.net.branch1, flux, 1, None, "branch1")?;
    let (phi2, _) = mlp_forward(&params.net.branch2, scalars, 1, None, "branch2")?;
    let fused = fuse(&phi1, &phi2, psi);
    check_finite(&fused, || "fusion".to_string())?;
    apply_heads(params, &fused)
}

/// Gradients of a scalar loss with respect to every parameter, given the
/// loss gradient with respect to the three normalized outputs.
pub fn backward(params: &ModelParams, trace: &ForwardTrace, output_grads: &FieldSnapshot) -> Result<Gradients> {
    let mut grads = params.net.zeros_like();
    backward_accumulate(params, trace, output_grads, &mut grads)?;
    Ok(grads)
}

/// As [`backward`], adding into an existing gradient buffer.
pub fn backward_accumulate(
    params: &ModelParams,
    trace: &ForwardTrace,
    output_grads: &FieldSnapshot,
    grads: &mut Gradients,
) -> Result<()> {
    let net = &params.net;
    let n = params.config.n_nodes;
    output_grads.check_len(n, "output gradients")?;
    let trace_ok = trace.fused.len() == n
        && trace.branch1.inputs.len() == net.branch1.len()
        && trace.branch2.inputs.len() == net.branch2.len()
        && trace.trunk.inputs.len() == net.trunk.len()
        && trace.branch1.inputs[0].len() == params.config.n1
        && trace.trunk.batch == n;
    if !trace_ok {
        return Err(Error::shape(
            "forward trace",
            format!("trace of a {n}-node model with {}/{}/{} layers", net.branch1.len(), net.branch2.len(), net.trunk.len()),
            format!(
                "{} nodes, {}/{}/{} layers",
                trace.fused.len(),
                trace.branch1.inputs.len(),
                trace.branch2.inputs.len(),
                trace.trunk.inputs.len()
            ),
        ));
    }
    grads.check_shapes(&params.config)?;

    let mut d_fused = vec![0.0; n];
    for q in Quantity::ALL {
        let g = output_grads.get(q);
        let head = &net.heads[q.index()];
        let gh = &mut grads.heads[q.index()];
        gemm(n, 1, n, g, Layout::Normal, &trace.fused, Layout::Normal, gh.weight.as_mut_slice(), true);
        gh.bias.iter_mut().zip(g).for_each(|(b, d)| *b += d);
        gemm(1, n, n, g, Layout::Normal, head.weight.as_slice(), Layout::Normal, &mut d_fused, true);
    }
    // Product rule through h = φ1 ⊙ φ2 ⊙ ψ.
    let (phi1, phi2, psi) = (&trace.phi1, &trace.phi2, &trace.psi);
    let d_phi1: Vec<f64> = (0..n).map(|i| d_fused[i] * phi2[i] * psi[i]).collect();
    let d_phi2: Vec<f64> = (0..n).map(|i| d_fused[i] * phi1[i] * psi[i]).collect();
    let d_psi: Vec<f64> = (0..n).map(|i| d_fused[i] * phi1[i] * phi2[i]).collect();

    mlp_backward(&net.branch1, &trace.branch1, d_phi1, &mut grads.branch1);
    mlp_backward(&net.branch2, &trace.branch2, d_phi2, &mut grads.branch2);
    mlp_backward(&net.trunk, &trace.trunk, d_psi, &mut grads.trunk);
    Ok(())
}

/// Eval-mode prediction in physical units (K, m/s, m²/s²).
pub fn predict(params: &ModelParams, sample: &InputSample, mesh: &CenterPlaneMesh) -> Result<FieldSnapshot> {
    let (normalized, _) = forward(params, sample, mesh, Mode::Eval)?;
    Ok(params.norm.denormalize(&normalized))
}

//! Operator registry: nodal, pool, and activation functions with the
//! partial derivatives the backward pass consumes.
//!
//! A nodal function maps one input pixel and its synaptic weight to one
//! value; a pool function collapses each patch row to a scalar; the
//! activation is pointwise. `(mul, sum, identity)` reproduces plain
//! convolution, everything else is where the non-linearity comes from.
//!
//! All singular points are patched so evaluation and both partials stay
//! finite for finite inputs: sinc takes its limit value at `w·y = 0`, and
//! exp/sinh saturate at `|w·y| = 20` with zero derivative beyond.

use crate::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Saturation bound on the argument of exp/sinh nodal functions.
pub const EXP_CLAMP: f64 = 20.0;

/// Below this |w·y|, sinc switches to its Taylor expansion.
const SINC_TAYLOR: f64 = 1e-4;

/// Pixel-and-weight transformation applied across each receptive field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodalOp {
    Mul,
    Cubic,
    Sin,
    Exp,
    Sinh,
    Sinc,
    Chirp,
    #[serde(rename = "log")]
    SignedLog,
}

impl NodalOp {
    pub const ALL: [NodalOp; 8] = [
        NodalOp::Mul,
        NodalOp::Cubic,
        NodalOp::Sin,
        NodalOp::Exp,
        NodalOp::Sinh,
        NodalOp::Sinc,
        NodalOp::Chirp,
        NodalOp::SignedLog,
    ];

    pub fn id(self) -> &'static str {
        match self {
            NodalOp::Mul => "mul",
            NodalOp::Cubic => "cubic",
            NodalOp::Sin => "sin",
            NodalOp::Exp => "exp",
            NodalOp::Sinh => "sinh",
            NodalOp::Sinc => "sinc",
            NodalOp::Chirp => "chirp",
            NodalOp::SignedLog => "log",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.id() == s)
            .ok_or_else(|| Error::UnknownOperator(s.to_string()))
    }

    /// `(z, dz/dy, dz/dw)` in one evaluation.
    ///
    /// This is the single source of truth: [`NodalOp::eval`] and
    /// [`NodalOp::partials`] project from it, so every code path sees
    /// bit-identical values. Value and partials share the expensive
    /// subexpression (one `sin_cos`/`exp` per element), which is what the
    /// training inner loop lives on.
    #[inline(always)]
    pub fn eval_with_partials(self, y: f64, w: f64) -> (f64, f64, f64) {
        match self {
            NodalOp::Mul => (w * y, w, y),
            NodalOp::Cubic => {
                let y2 = y * y;
                (w * y2 * y, 3.0 * w * y2, y2 * y)
            }
            NodalOp::Sin => {
                let (s, c) = (w * y).sin_cos();
                (s, w * c, y * c)
            }
            NodalOp::Exp => {
                let u = w * y;
                if u.abs() > EXP_CLAMP {
                    (u.clamp(-EXP_CLAMP, EXP_CLAMP).exp() - 1.0, 0.0, 0.0)
                } else {
                    let e = u.exp();
                    (e - 1.0, w * e, y * e)
                }
            }
            NodalOp::Sinh => {
                let u = w * y;
                if u.abs() > EXP_CLAMP {
                    let e = u.clamp(-EXP_CLAMP, EXP_CLAMP).exp();
                    ((e - 1.0 / e) * 0.5, 0.0, 0.0)
                } else {
                    let e = u.exp();
                    let inv = 1.0 / e;
                    let sh = (e - inv) * 0.5;
                    let ch = (e + inv) * 0.5;
                    (sh, w * ch, y * ch)
                }
            }
            NodalOp::Sinc => {
                let u = w * y;
                if u.abs() < SINC_TAYLOR {
                    let z = 1.0 - u * u / 6.0 + u * u * u * u / 120.0;
                    let ds = -u / 3.0 + u * u * u / 30.0;
                    (z, w * ds, y * ds)
                } else {
                    let (s, c) = u.sin_cos();
                    let z = s / u;
                    let ds = (c - z) / u;
                    (z, w * ds, y * ds)
                }
            }
            NodalOp::Chirp => {
                let t = y * y;
                let (s, c) = (w * t).sin_cos();
                (s, 2.0 * w * y * c, t * c)
            }
            NodalOp::SignedLog => {
                let l = y.abs().ln_1p();
                let sl = y.signum() * l;
                (w * sl, w / (1.0 + y.abs()), sl)
            }
        }
    }

    /// z = psi(y, w).
    #[inline(always)]
    pub fn eval(self, y: f64, w: f64) -> f64 {
        self.eval_with_partials(y, w).0
    }

    /// (dz/dy, dz/dw) at (y, w).
    #[inline(always)]
    pub fn partials(self, y: f64, w: f64) -> (f64, f64) {
        let (_, dy, dw) = self.eval_with_partials(y, w);
        (dy, dw)
    }

    /// Whether this op's partials need a cached transcendental factor.
    /// Mul and cubic rebuild their partials from `(y, w)` with plain
    /// arithmetic; everything else stores one factor per element during
    /// the forward pass so the backward pass avoids re-evaluating the
    /// expensive subexpression.
    #[inline(always)]
    pub fn needs_factor(self) -> bool {
        !matches!(self, NodalOp::Mul | NodalOp::Cubic)
    }

    /// `(z, factor)` where `factor` feeds [`NodalOp::partials_from_factor`].
    /// Must agree bit for bit with [`NodalOp::eval_with_partials`].
    #[inline(always)]
    pub fn eval_and_factor(self, y: f64, w: f64) -> (f64, f64) {
        match self {
            NodalOp::Mul => (w * y, 0.0),
            NodalOp::Cubic => {
                let y2 = y * y;
                (w * y2 * y, 0.0)
            }
            NodalOp::Sin => {
                let (s, c) = (w * y).sin_cos();
                (s, c)
            }
            NodalOp::Exp => {
                let u = w * y;
                if u.abs() > EXP_CLAMP {
                    (u.clamp(-EXP_CLAMP, EXP_CLAMP).exp() - 1.0, 0.0)
                } else {
                    let e = u.exp();
                    (e - 1.0, e)
                }
            }
            NodalOp::Sinh => {
                let u = w * y;
                if u.abs() > EXP_CLAMP {
                    let e = u.clamp(-EXP_CLAMP, EXP_CLAMP).exp();
                    ((e - 1.0 / e) * 0.5, 0.0)
                } else {
                    let e = u.exp();
                    let inv = 1.0 / e;
                    ((e - inv) * 0.5, (e + inv) * 0.5)
                }
            }
            NodalOp::Sinc => {
                let u = w * y;
                if u.abs() < SINC_TAYLOR {
                    let z = 1.0 - u * u / 6.0 + u * u * u * u / 120.0;
                    (z, -u / 3.0 + u * u * u / 30.0)
                } else {
                    let (s, c) = u.sin_cos();
                    let z = s / u;
                    (z, (c - z) / u)
                }
            }
            NodalOp::Chirp => {
                let t = y * y;
                let (s, c) = (w * t).sin_cos();
                (s, c)
            }
            NodalOp::SignedLog => {
                let sl = y.signum() * y.abs().ln_1p();
                (w * sl, sl)
            }
        }
    }

    /// Rebuild `(dz/dy, dz/dw)` from `(y, w)` and the cached factor.
    #[inline(always)]
    pub fn partials_from_factor(self, y: f64, w: f64, factor: f64) -> (f64, f64) {
        match self {
            NodalOp::Mul => (w, y),
            NodalOp::Cubic => {
                let y2 = y * y;
                (3.0 * w * y2, y2 * y)
            }
            NodalOp::Sin | NodalOp::Exp | NodalOp::Sinh | NodalOp::Sinc => {
                (w * factor, y * factor)
            }
            NodalOp::Chirp => {
                let t = y * y;
                (2.0 * w * y * factor, t * factor)
            }
            NodalOp::SignedLog => (w / (1.0 + y.abs()), factor),
        }
    }
}

/// Row-wise aggregation collapsing each receptive field to one value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolOp {
    Sum,
    Median,
    Max,
}

impl PoolOp {
    pub const ALL: [PoolOp; 3] = [PoolOp::Sum, PoolOp::Median, PoolOp::Max];

    pub fn id(self) -> &'static str {
        match self {
            PoolOp::Sum => "sum",
            PoolOp::Median => "median",
            PoolOp::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.id() == s)
            .ok_or_else(|| Error::UnknownOperator(s.to_string()))
    }
}

/// Median as the lower-middle order statistic, ties to the lowest column
/// index, so backward routing has a single well-defined recipient.
///
/// Rows are kernel-sized (9 or 25 elements), where insertion sort beats
/// the general-purpose sort by a wide margin.
#[inline]
pub fn median_row(row: &[f64], scratch: &mut Vec<f64>) -> (f64, usize) {
    scratch.clear();
    scratch.extend_from_slice(row);
    for i in 1..scratch.len() {
        let v = scratch[i];
        let mut j = i;
        while j > 0 && scratch[j - 1] > v {
            scratch[j] = scratch[j - 1];
            j -= 1;
        }
        scratch[j] = v;
    }
    let value = scratch[(row.len() - 1) / 2];
    let idx = row.iter().position(|&v| v == value).expect("median value present");
    (value, idx)
}

/// Maximum with ties to the lowest column index.
#[inline]
pub fn max_row(row: &[f64]) -> (f64, usize) {
    let mut best = row[0];
    let mut idx = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            idx = j;
        }
    }
    (best, idx)
}

/// Pointwise output activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationOp {
    Tanh,
    LinCut,
    Identity,
}

impl ActivationOp {
    pub const ALL: [ActivationOp; 3] =
        [ActivationOp::Tanh, ActivationOp::LinCut, ActivationOp::Identity];

    pub fn id(self) -> &'static str {
        match self {
            ActivationOp::Tanh => "tanh",
            ActivationOp::LinCut => "lincut",
            ActivationOp::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.id() == s)
            .ok_or_else(|| Error::UnknownOperator(s.to_string()))
    }

    #[inline(always)]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ActivationOp::Tanh => x.tanh(),
            ActivationOp::LinCut => x.clamp(-1.0, 1.0),
            ActivationOp::Identity => x,
        }
    }

    #[inline(always)]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            ActivationOp::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationOp::LinCut => {
                if x.abs() <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationOp::Identity => 1.0,
        }
    }
}

/// The operator triple assigned to one neuron.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperatorSet {
    pub nodal: NodalOp,
    pub pool: PoolOp,
    pub activation: ActivationOp,
}

impl OperatorSet {
    pub fn new(nodal: NodalOp, pool: PoolOp, activation: ActivationOp) -> Self {
        OperatorSet { nodal, pool, activation }
    }

    /// The degenerate linear case: a convolutional neuron.
    pub fn convolutional(activation: ActivationOp) -> Self {
        OperatorSet::new(NodalOp::Mul, PoolOp::Sum, activation)
    }

    pub fn id(&self) -> String {
        format!("{}-{}-{}", self.nodal.id(), self.pool.id(), self.activation.id())
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.split('-');
        let (Some(n), Some(p), Some(a), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::UnknownOperator(s.to_string()));
        };
        Ok(OperatorSet::new(NodalOp::parse(n)?, PoolOp::parse(p)?, ActivationOp::parse(a)?))
    }
}

impl std::fmt::Display for OperatorSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.id())
    }
}

// Lexicographic order on serialized ids; used for deterministic tie-breaks.
impl PartialOrd for OperatorSet {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OperatorSet {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.nodal.id(), self.pool.id(), self.activation.id()).cmp(&(
            other.nodal.id(),
            other.pool.id(),
            other.activation.id(),
        ))
    }
}

/// The operator set library the search draws from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorLibrary {
    sets: Vec<OperatorSet>,
}

impl OperatorLibrary {
    /// Full cross product of registered nodal, pool, and activation ops.
    pub fn full() -> Self {
        let mut sets = Vec::new();
        for nodal in NodalOp::ALL {
            for pool in PoolOp::ALL {
                for activation in ActivationOp::ALL {
                    sets.push(OperatorSet::new(nodal, pool, activation));
                }
            }
        }
        OperatorLibrary { sets }
    }

    pub fn from_sets(sets: Vec<OperatorSet>) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::EmptyInput("operator library"));
        }
        Ok(OperatorLibrary { sets })
    }

    pub fn sets(&self) -> &[OperatorSet] {
        &self.sets
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn contains(&self, set: &OperatorSet) -> bool {
        self.sets.contains(set)
    }
}

/// Elementwise nodal map over a patch matrix and a broadcast weight matrix.
pub fn nodal_forward(op: NodalOp, y: &Tensor, w: &Tensor) -> Result<Tensor> {
    check_same_shape(y, w)?;
    let data = y
        .data()
        .iter()
        .zip(w.data())
        .map(|(&yv, &wv)| op.eval(yv, wv))
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

/// Upstream-weighted partials of the nodal map: `(dY, dW)` elementwise.
pub fn nodal_backward(
    op: NodalOp,
    y: &Tensor,
    w: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_same_shape(y, w)?;
    check_same_shape(y, upstream)?;
    let mut dy = Vec::with_capacity(y.len());
    let mut dw = Vec::with_capacity(y.len());
    for ((&yv, &wv), &g) in y.data().iter().zip(w.data()).zip(upstream.data()) {
        let (py, pw) = op.partials(yv, wv);
        dy.push(g * py);
        dw.push(g * pw);
    }
    Ok((
        Tensor::new(y.shape().to_vec(), dy)?,
        Tensor::new(y.shape().to_vec(), dw)?,
    ))
}

/// Forward record a pool backward pass needs: the selected column per row
/// for order-statistic pools, nothing for sum.
#[derive(Debug, Clone)]
pub struct PoolRecord {
    pub op: PoolOp,
    pub selected: Option<Vec<u32>>,
}

/// Row-wise pool over a patch-shaped matrix.
pub fn pool_forward(op: PoolOp, z: &Tensor) -> Result<(Tensor, PoolRecord)> {
    let (rows, cols) = (z.rows(), z.cols());
    if cols == 0 {
        return Err(Error::EmptyInput("pool rows"));
    }
    let mut out = Vec::with_capacity(rows);
    let mut selected = match op {
        PoolOp::Sum => None,
        _ => Some(Vec::with_capacity(rows)),
    };
    let mut scratch = Vec::with_capacity(cols);
    for r in 0..rows {
        let row = &z.data()[r * cols..(r + 1) * cols];
        match op {
            PoolOp::Sum => out.push(row.iter().sum()),
            PoolOp::Median => {
                let (v, idx) = median_row(row, &mut scratch);
                out.push(v);
                selected.as_mut().unwrap().push(idx as u32);
            }
            PoolOp::Max => {
                let (v, idx) = max_row(row);
                out.push(v);
                selected.as_mut().unwrap().push(idx as u32);
            }
        }
    }
    Ok((Tensor::new(vec![rows], out)?, PoolRecord { op, selected }))
}

/// Distribute the per-row upstream gradient back over the pooled matrix.
pub fn pool_backward(
    record: &PoolRecord,
    dims: (usize, usize),
    upstream: &Tensor,
) -> Result<Tensor> {
    let (rows, cols) = dims;
    if upstream.len() != rows {
        return Err(Error::ShapeMismatch {
            expected: format!("{rows} upstream entries"),
            got: format!("{}", upstream.len()),
        });
    }
    let mut out = vec![0.0; rows * cols];
    match record.op {
        PoolOp::Sum => {
            for (r, &g) in upstream.data().iter().enumerate() {
                out[r * cols..(r + 1) * cols].fill(g);
            }
        }
        PoolOp::Median | PoolOp::Max => {
            let selected = record
                .selected
                .as_ref()
                .ok_or(Error::EmptyInput("pool forward record"))?;
            if selected.len() != rows {
                return Err(Error::ShapeMismatch {
                    expected: format!("{rows} selection entries"),
                    got: format!("{}", selected.len()),
                });
            }
            for (r, (&g, &idx)) in upstream.data().iter().zip(selected).enumerate() {
                out[r * cols + idx as usize] = g;
            }
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// Pointwise activation over a tensor.
pub fn activation_forward(op: ActivationOp, x: &Tensor) -> Tensor {
    x.map(|v| op.eval(v))
}

/// Upstream-weighted activation derivative.
pub fn activation_backward(op: ActivationOp, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    check_same_shape(x, upstream)?;
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&xv, &g)| g * op.deriv(xv))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{broadcast_weights, im2col};
    use rand::Rng;

    const FD_STEP: f64 = 1e-6;

    /// Central finite difference of a scalar function.
    fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
    }

    /// Relative-error check with an absolute fallback below the finite
    /// difference noise floor (derivatives much smaller than the function
    /// scale drown in the subtraction's rounding error).
    fn close(analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if scale > 1e-3 {
            diff / scale <= 1e-6
        } else {
            diff <= 1e-9
        }
    }

    #[test]
    fn nodal_examples() {
        assert_eq!(NodalOp::Mul.eval(2.0, 3.0), 6.0);
        assert_eq!(NodalOp::Sin.eval(0.0, 1.7), 0.0);
        assert_eq!(NodalOp::Sinc.eval(0.0, 0.8), 1.0);
        assert_eq!(NodalOp::Sinc.eval(0.5, 0.0), 1.0);
    }

    #[test]
    fn nodal_mul_and_cubic_partials() {
        assert_eq!(NodalOp::Mul.partials(4.0, 7.0), (7.0, 4.0));
        let (dy, dw) = NodalOp::Cubic.partials(1.0, 2.0);
        assert_eq!(dy, 6.0);
        assert_eq!(dw, 1.0);
    }

    #[test]
    fn all_nodal_partials_match_finite_differences() {
        let mut rng = crate::rng::stream(201, &[1]);
        for op in NodalOp::ALL {
            let mut checked = 0;
            while checked < 1000 {
                let y: f64 = rng.gen_range(-2.0..2.0);
                let w: f64 = rng.gen_range(-2.0..2.0);
                // skip isolated non-smooth points
                if op == NodalOp::SignedLog && y.abs() < 1e-4 {
                    continue;
                }
                if op == NodalOp::Sinc && (w * y).abs() < 1e-3 {
                    continue;
                }
                let (ady, adw) = op.partials(y, w);
                let ndy = central_diff(|t| op.eval(t, w), y);
                let ndw = central_diff(|t| op.eval(y, t), w);
                assert!(close(ady, ndy), "{} d/dy at y={y} w={w}: {ady} vs {ndy}", op.id());
                assert!(close(adw, ndw), "{} d/dw at y={y} w={w}: {adw} vs {ndw}", op.id());
                checked += 1;
            }
        }
    }

    #[test]
    fn singular_points_are_patched() {
        for (y, w) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (-3.0, 0.0), (1e6, 1e6)] {
            for op in [NodalOp::Sinc, NodalOp::SignedLog, NodalOp::Exp, NodalOp::Sinh] {
                let z = op.eval(y, w);
                let (dy, dw) = op.partials(y, w);
                assert!(z.is_finite(), "{} eval at ({y},{w})", op.id());
                assert!(dy.is_finite() && dw.is_finite(), "{} partials at ({y},{w})", op.id());
            }
        }
    }

    #[test]
    fn exp_saturates_beyond_clamp() {
        let z = NodalOp::Exp.eval(30.0, 1.0);
        assert_eq!(z, EXP_CLAMP.exp() - 1.0);
        assert_eq!(NodalOp::Exp.partials(30.0, 1.0), (0.0, 0.0));
        assert_eq!(NodalOp::Sinh.partials(-30.0, 1.0), (0.0, 0.0));
    }

    #[test]
    fn pool_examples() {
        let z = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let (x, _) = pool_forward(PoolOp::Sum, &z).unwrap();
        assert_eq!(x.data(), &[6.0]);

        let z = Tensor::matrix(1, 3, vec![1.0, 5.0, 3.0]).unwrap();
        let (x, rec) = pool_forward(PoolOp::Median, &z).unwrap();
        assert_eq!(x.data(), &[3.0]);
        let grad = pool_backward(&rec, (1, 3), &Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
        assert_eq!(grad.data(), &[0.0, 0.0, 2.0]);

        let (x, rec) = pool_forward(PoolOp::Max, &z).unwrap();
        assert_eq!(x.data(), &[5.0]);
        let grad = pool_backward(&rec, (1, 3), &Tensor::new(vec![1], vec![7.0]).unwrap()).unwrap();
        assert_eq!(grad.data(), &[0.0, 7.0, 0.0]);
    }

    #[test]
    fn median_even_count_takes_lower_middle() {
        let mut scratch = Vec::new();
        let (v, idx) = median_row(&[4.0, 1.0, 3.0, 2.0], &mut scratch);
        assert_eq!(v, 2.0);
        assert_eq!(idx, 3);
        // ties resolve to the lowest column index
        let (v, idx) = median_row(&[5.0, 3.0, 3.0], &mut scratch);
        assert_eq!(v, 3.0);
        assert_eq!(idx, 1);
    }

    #[test]
    fn sum_backward_broadcasts() {
        let z = Tensor::matrix(2, 3, vec![1.0; 6]).unwrap();
        let (_, rec) = pool_forward(PoolOp::Sum, &z).unwrap();
        let up = Tensor::new(vec![2], vec![2.0, -1.0]).unwrap();
        let grad = pool_backward(&rec, (2, 3), &up).unwrap();
        assert_eq!(grad.data(), &[2.0, 2.0, 2.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn pool_backward_nonzero_pattern() {
        let mut rng = crate::rng::stream(202, &[2]);
        let data: Vec<f64> = (0..20 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = Tensor::matrix(20, 9, data).unwrap();
        let up = Tensor::new(vec![20], vec![1.0; 20]).unwrap();
        for op in [PoolOp::Median, PoolOp::Max] {
            let (_, rec) = pool_forward(op, &z).unwrap();
            let grad = pool_backward(&rec, (20, 9), &up).unwrap();
            for r in 0..20 {
                let nonzero = grad.data()[r * 9..(r + 1) * 9]
                    .iter()
                    .filter(|&&v| v != 0.0)
                    .count();
                assert_eq!(nonzero, 1, "{} row {r}", op.id());
            }
        }
    }

    #[test]
    fn pool_backward_matches_finite_differences_away_from_ties() {
        let mut rng = crate::rng::stream(203, &[3]);
        for op in PoolOp::ALL {
            for _ in 0..50 {
                let data: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
                // require a strict order statistic so perturbation cannot flip it
                let mut sorted = data.clone();
                sorted.sort_unstable_by(|a, b| a.total_cmp(b));
                if sorted.windows(2).any(|p| (p[1] - p[0]).abs() < 1e-3) {
                    continue;
                }
                let z = Tensor::matrix(1, 9, data.clone()).unwrap();
                let (_, rec) = pool_forward(op, &z).unwrap();
                let up = Tensor::new(vec![1], vec![1.0]).unwrap();
                let grad = pool_backward(&rec, (1, 9), &up).unwrap();
                for j in 0..9 {
                    let numeric = central_diff(
                        |t| {
                            let mut d = data.clone();
                            d[j] = t;
                            let zt = Tensor::matrix(1, 9, d).unwrap();
                            pool_forward(op, &zt).unwrap().0.data()[0]
                        },
                        data[j],
                    );
                    assert!(
                        close(grad.data()[j], numeric),
                        "{} col {j}: {} vs {numeric}",
                        op.id(),
                        grad.data()[j]
                    );
                }
            }
        }
    }

    #[test]
    fn pool_backward_without_record_fails() {
        let rec = PoolRecord { op: PoolOp::Median, selected: None };
        let up = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(pool_backward(&rec, (1, 3), &up).is_err());
    }

    #[test]
    fn activation_examples() {
        assert_eq!(ActivationOp::Tanh.eval(0.0), 0.0);
        assert_eq!(ActivationOp::Tanh.deriv(0.0), 1.0);
        assert_eq!(ActivationOp::LinCut.eval(2.5), 1.0);
        assert_eq!(ActivationOp::LinCut.deriv(2.5), 0.0);
        assert_eq!(ActivationOp::LinCut.eval(-0.3), -0.3);
        assert_eq!(ActivationOp::Identity.eval(4.2), 4.2);
    }

    #[test]
    fn activation_derivs_match_finite_differences() {
        let mut rng = crate::rng::stream(204, &[4]);
        for op in ActivationOp::ALL {
            let mut checked = 0;
            while checked < 1000 {
                let x: f64 = rng.gen_range(-3.0..3.0);
                if op == ActivationOp::LinCut && (x.abs() - 1.0).abs() < 1e-4 {
                    continue;
                }
                let analytic = op.deriv(x);
                let numeric = central_diff(|t| op.eval(t), x);
                assert!(close(analytic, numeric), "{} at {x}", op.id());
                checked += 1;
            }
        }
    }

    #[test]
    fn mul_sum_composition_reproduces_convolution() {
        // independent double-loop convolution over the zero-padded image
        fn conv_oracle(y: &Tensor, w: &Tensor) -> Vec<f64> {
            let (rows, cols) = (y.rows(), y.cols());
            let (m, n) = (w.rows(), w.cols());
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows as isize {
                for j in 0..cols as isize {
                    let mut acc = 0.0;
                    for u in 0..m as isize {
                        for v in 0..n as isize {
                            let si = i + u - (m as isize - 1) / 2;
                            let sj = j + v - (n as isize - 1) / 2;
                            if si >= 0 && sj >= 0 && si < rows as isize && sj < cols as isize {
                                acc += w.at(u as usize, v as usize)
                                    * y.at(si as usize, sj as usize);
                            }
                        }
                    }
                    out[(i * cols as isize + j) as usize] = acc;
                }
            }
            out
        }

        let mut rng = crate::rng::stream(205, &[5]);
        for _ in 0..10 {
            let y = Tensor::matrix(7, 7, (0..49).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let w =
                Tensor::matrix(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let pm = im2col(&y, (3, 3)).unwrap();
            let wb = broadcast_weights(&w, pm.rows()).unwrap();
            let z = nodal_forward(NodalOp::Mul, &pm.values, &wb).unwrap();
            let (x, _) = pool_forward(PoolOp::Sum, &z).unwrap();
            let oracle = conv_oracle(&y, &w);
            for (a, b) in x.data().iter().zip(&oracle) {
                let scale = b.abs().max(1e-30);
                assert!(
                    ((a - b) / scale).abs() < 1e-12,
                    "convolution mismatch: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn operator_ids_round_trip() {
        for nodal in NodalOp::ALL {
            assert_eq!(NodalOp::parse(nodal.id()).unwrap(), nodal);
        }
        for pool in PoolOp::ALL {
            assert_eq!(PoolOp::parse(pool.id()).unwrap(), pool);
        }
        for act in ActivationOp::ALL {
            assert_eq!(ActivationOp::parse(act.id()).unwrap(), act);
        }
        let set = OperatorSet::new(NodalOp::SignedLog, PoolOp::Median, ActivationOp::LinCut);
        assert_eq!(set.id(), "log-median-lincut");
        assert_eq!(OperatorSet::parse("log-median-lincut").unwrap(), set);
        assert!(OperatorSet::parse("log-median").is_err());
        assert!(NodalOp::parse("sineish").is_err());
    }

    #[test]
    fn full_library_is_cross_product() {
        let lib = OperatorLibrary::full();
        assert_eq!(lib.len(), 8 * 3 * 3);
        let mut unique: Vec<_> = lib.sets().to_vec();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), lib.len());
    }

    #[test]
    fn factor_path_is_bit_identical_to_direct_partials() {
        let mut rng = crate::rng::stream(206, &[6]);
        for op in NodalOp::ALL {
            for _ in 0..500 {
                let y: f64 = rng.gen_range(-3.0..3.0);
                let w: f64 = rng.gen_range(-3.0..3.0);
                let (z, dy, dw) = op.eval_with_partials(y, w);
                let (z2, factor) = op.eval_and_factor(y, w);
                let (dy2, dw2) = op.partials_from_factor(y, w, factor);
                assert_eq!(z.to_bits(), z2.to_bits(), "{} eval at ({y},{w})", op.id());
                assert_eq!(dy.to_bits(), dy2.to_bits(), "{} d/dy at ({y},{w})", op.id());
                assert_eq!(dw.to_bits(), dw2.to_bits(), "{} d/dw at ({y},{w})", op.id());
            }
        }
    }

    #[test]
    fn nodal_matrix_ops_check_shapes() {
        let a = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
        let b = Tensor::matrix(2, 3, vec![1.0; 6]).unwrap();
        assert!(nodal_forward(NodalOp::Mul, &a, &b).is_err());
        assert!(nodal_backward(NodalOp::Mul, &a, &b, &a).is_err());
    }
}

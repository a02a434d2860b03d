//! Finite-difference validation of the backward pass.
//!
//! For each operator set, builds small random two-layer networks, takes
//! the analytic gradient of an MSE loss, and compares every parameter
//! against central differences. Configurations where an order-statistic
//! pool has near-tied candidates, a lincut sits near its kink, or a
//! saturating nodal argument sits near its clamp are resampled: the loss
//! is not differentiable there and the comparison would be meaningless.

use crate::network::{loss_and_gradients, network_forward, LayerSpec, NetworkSpec, NetworkState, NeuronSpec};
use crate::operators::{ActivationOp, NodalOp, OperatorSet, PoolOp, EXP_CLAMP};
use crate::tensor::{PatchPlan, Tensor};
use crate::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// central-difference step
    pub step: f64,
    /// relative tolerance on analytic vs numeric gradients
    pub rel_tol: f64,
    /// absolute fallback below the finite-difference noise floor
    pub abs_tol: f64,
    /// random network configurations per operator set
    pub configs_per_set: usize,
    /// safety factor on the sensitivity-scaled tie criterion: a pool
    /// selection is treated as flippable when the gap to a competing
    /// candidate is under `step * factor * (sum of candidate sensitivities)`
    pub tie_safety_factor: f64,
    /// fixed margin around activation kinks and nodal clamp boundaries
    pub kink_margin: f64,
    /// resample attempts before giving up on a set
    pub max_resamples: usize,
    /// test fixture: scale analytic gradients to force a detectable fault
    pub fault_scale: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            rel_tol: 1e-5,
            abs_tol: 1e-8,
            configs_per_set: 20,
            tie_safety_factor: 4.0,
            kink_margin: 1e-4,
            max_resamples: 400,
            fault_scale: None,
        }
    }
}

/// Outcome for one operator set.
#[derive(Debug, Clone)]
pub struct SetReport {
    pub set: OperatorSet,
    pub configs_checked: usize,
    pub params_checked: usize,
    pub max_rel_err: f64,
    pub resamples: usize,
    pub passed: bool,
}

impl std::fmt::Display for SetReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:22} configs={} params={} max_rel_err={:.3e} resamples={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.set.id(),
            self.configs_checked,
            self.params_checked,
            self.max_rel_err,
            self.resamples,
        )
    }
}

fn random_config(set: OperatorSet, rng: &mut impl Rng) -> (NetworkSpec, Tensor, Tensor) {
    let rows = rng.gen_range(4..=8);
    let cols = rng.gen_range(4..=8);
    let hidden = rng.gen_range(1..=3);
    let spec = NetworkSpec {
        layers: vec![
            LayerSpec {
                neurons: vec![NeuronSpec { operator_set: set, kernel: (3, 3) }; hidden],
                input_count: 1,
            },
            LayerSpec {
                neurons: vec![NeuronSpec { operator_set: set, kernel: (3, 3) }],
                input_count: hidden,
            },
        ],
        input_shape: (rows, cols),
    };
    let input = Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let target = Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    (spec, input, target)
}

/// Walk the network the slow way and reject any configuration whose loss
/// is not safely differentiable under a `step`-sized parameter nudge.
///
/// A pool selection can only flip if a competing candidate sits within
/// the distance the two z-values can move, which is bounded by the step
/// times their local sensitivities. Exact duplicates (shared zero-pad
/// outputs) never flip the pooled value and are allowed.
fn config_is_smooth(
    spec: &NetworkSpec,
    state: &NetworkState,
    input: &Tensor,
    cfg: &GradCheckConfig,
) -> Result<bool> {
    let mut maps = vec![input.clone()];
    for (l, layer) in spec.layers.iter().enumerate() {
        let shape = (maps[0].rows(), maps[0].cols());
        let mut next = Vec::with_capacity(layer.neurons.len());
        for (b, neuron) in layer.neurons.iter().enumerate() {
            let set = neuron.operator_set;
            let plan = PatchPlan::new(shape, neuron.kernel)?;
            let cols = neuron.kernel.0 * neuron.kernel.1;
            let mut patch = vec![0.0; plan.rows * plan.cols];
            let mut pre = vec![state.bias(l, b); plan.rows];
            for (a, map) in maps.iter().enumerate() {
                plan.gather(map.data(), &mut patch);
                let weight = state.kernel(l, a, b);
                for (i, row) in patch.chunks_exact(cols).enumerate() {
                    let mut z = Vec::with_capacity(cols);
                    let mut sens = Vec::with_capacity(cols);
                    for (j, (&y, &w)) in row.iter().zip(weight).enumerate() {
                        if matches!(set.nodal, NodalOp::Exp | NodalOp::Sinh)
                            && ((w * y).abs() - EXP_CLAMP).abs() < cfg.kink_margin
                        {
                            return Ok(false);
                        }
                        let (value, dy, dw) = set.nodal.eval_with_partials(y, w);
                        z.push(value);
                        // zero-pad positions are structurally immovable:
                        // y is pinned to 0 and every registered nodal op is
                        // constant in w at y = 0
                        if plan.index_map[i * cols + j] == crate::tensor::PAD {
                            sens.push(0.0);
                        } else {
                            sens.push(dy.abs() + dw.abs());
                        }
                    }
                    let pooled = match set.pool {
                        PoolOp::Sum => z.iter().sum::<f64>(),
                        PoolOp::Median | PoolOp::Max => {
                            let (value, sel) = if set.pool == PoolOp::Median {
                                let mut s = Vec::new();
                                crate::operators::median_row(&z, &mut s)
                            } else {
                                crate::operators::max_row(&z)
                            };
                            for (j, &v) in z.iter().enumerate() {
                                if j == sel {
                                    continue;
                                }
                                let reach =
                                    cfg.step * cfg.tie_safety_factor * (sens[sel] + sens[j]);
                                if reach == 0.0 {
                                    continue; // neither candidate can move
                                }
                                if (v - value).abs() < reach.max(1e-14) {
                                    return Ok(false);
                                }
                            }
                            value
                        }
                    };
                    pre[i] += pooled;
                }
            }
            if set.activation == ActivationOp::LinCut
                && pre.iter().any(|v| (v.abs() - 1.0).abs() < cfg.kink_margin)
            {
                return Ok(false);
            }
            let out = pre.iter().map(|&v| set.activation.eval(v)).collect();
            next.push(Tensor::new(vec![shape.0, shape.1], out)?);
        }
        maps = next;
    }
    Ok(true)
}

fn loss_of(spec: &NetworkSpec, state: &NetworkState, input: &Tensor, target: &Tensor) -> Result<f64> {
    let (pred, _) = network_forward(spec, state, input)?;
    let (loss, _) = crate::network::mse_loss(&pred, target)?;
    Ok(loss)
}

/// Check one operator set over `configs_per_set` random configurations.
pub fn check_set(
    set: OperatorSet,
    cfg: &GradCheckConfig,
    rng: &mut impl Rng,
) -> Result<SetReport> {
    let mut report = SetReport {
        set,
        configs_checked: 0,
        params_checked: 0,
        max_rel_err: 0.0,
        resamples: 0,
        passed: true,
    };
    while report.configs_checked < cfg.configs_per_set {
        let (spec, input, target) = random_config(set, rng);
        let mut state = NetworkState::init(&spec, rng)?;
        // jitter everything, biases included: exact zeros breed exact
        // pool ties with zero-pad outputs
        for p in state.params_mut() {
            *p += rng.gen_range(-0.05..0.05);
        }
        if !config_is_smooth(&spec, &state, &input, cfg)? {
            report.resamples += 1;
            if report.resamples > cfg.max_resamples {
                return Err(Error::Numerical(format!(
                    "could not sample a smooth configuration for {}",
                    set.id()
                )));
            }
            continue;
        }

        let (_, _, grads) = loss_and_gradients(&spec, &state, &input, &target)?;
        let analytic: Vec<f64> = match cfg.fault_scale {
            Some(s) => grads.values().iter().map(|g| g * s).collect(),
            None => grads.values().to_vec(),
        };

        let mut probe = state.clone();
        for (idx, &a) in analytic.iter().enumerate() {
            let original = state.params()[idx];
            probe.params_mut()[idx] = original + cfg.step;
            let up = loss_of(&spec, &probe, &input, &target)?;
            probe.params_mut()[idx] = original - cfg.step;
            let down = loss_of(&spec, &probe, &input, &target)?;
            probe.params_mut()[idx] = original;
            let numeric = (up - down) / (2.0 * cfg.step);

            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            // gradients below the noise floor of the central difference
            // are held to an absolute tolerance instead
            let rel = if scale > 1e-3 { diff / scale } else { 0.0 };
            let ok = if scale > 1e-3 { rel <= cfg.rel_tol } else { diff <= cfg.abs_tol };
            report.max_rel_err = report.max_rel_err.max(rel);
            if !ok {
                report.passed = false;
            }
            report.params_checked += 1;
        }
        report.configs_checked += 1;
    }
    Ok(report)
}

/// Check every set in a library; deterministic given the seed.
pub fn check_library(
    sets: &[OperatorSet],
    cfg: &GradCheckConfig,
    seed: u64,
) -> Result<Vec<SetReport>> {
    if sets.is_empty() {
        return Err(Error::EmptyInput("operator library for gradient check"));
    }
    sets.iter()
        .enumerate()
        .map(|(i, &set)| {
            let mut rng = crate::rng::stream(seed, &[0x67c4, i as u64]);
            check_set(set, cfg, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn representative_sets_pass() {
        let cfg = GradCheckConfig { configs_per_set: 4, ..GradCheckConfig::default() };
        for set in [
            OperatorSet::new(NodalOp::Mul, PoolOp::Sum, ActivationOp::Tanh),
            OperatorSet::new(NodalOp::Cubic, PoolOp::Median, ActivationOp::Tanh),
            OperatorSet::new(NodalOp::Sinh, PoolOp::Sum, ActivationOp::LinCut),
            OperatorSet::new(NodalOp::SignedLog, PoolOp::Max, ActivationOp::Identity),
            OperatorSet::new(NodalOp::Sinc, PoolOp::Median, ActivationOp::Tanh),
        ] {
            let mut rng = crate::rng::stream(501, &[1]);
            let report = check_set(set, &cfg, &mut rng).unwrap();
            assert!(report.passed, "{report}");
        }
    }

    #[test]
    fn injected_fault_is_detected_and_named() {
        let cfg = GradCheckConfig {
            configs_per_set: 2,
            fault_scale: Some(1.01),
            ..GradCheckConfig::default()
        };
        let set = OperatorSet::new(NodalOp::Sin, PoolOp::Sum, ActivationOp::Tanh);
        let mut rng = crate::rng::stream(502, &[2]);
        let report = check_set(set, &cfg, &mut rng).unwrap();
        assert!(!report.passed);
        assert!(report.to_string().contains("sin-sum-tanh"));
        assert!(report.to_string().contains("FAIL"));
    }

    #[test]
    fn empty_library_is_an_error() {
        assert!(check_library(&[], &GradCheckConfig::default(), 1).is_err());
    }
}

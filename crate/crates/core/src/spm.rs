//! Synaptic Plasticity Monitoring: rank operator sets per layer by how
//! much training moves the variance of a neuron's outgoing weights, then
//! configure an elite heterogeneous network from the top-ranked sets.
//!
//! The Hebbian reading: a hidden neuron whose operator set produces
//! useful features sees the synapses on its output strengthen. The health
//! factor of a neuron is the relative change in the power (variance over
//! kernel elements) of its outgoing weights across a monitoring window of
//! `gamma` iterations, powers averaged over the fan-out first. Scores
//! accumulate over `R` short probe trainings under fresh random operator
//! assignments; later runs may be drawn from the accumulated score
//! distribution instead of uniformly.

use crate::network::{Architecture, LayerSpec, NetworkSpec, NetworkState, NeuronSpec};
use crate::operators::{ActivationOp, OperatorLibrary, OperatorSet};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::Tensor;
use crate::train::{train_step, TrainScratch};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

const RUN_SALT: u64 = 0x73706d;

/// Search hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpmConfig {
    /// monitoring interval in iterations
    pub gamma: usize,
    /// number of probe runs R
    pub runs: usize,
    /// heterogeneity factor: top-K sets per layer in the elite net
    pub top_k: usize,
    /// training iterations per probe run
    pub m_iters: usize,
    /// runs after which assignment becomes probability-guided
    pub confinement_threshold: usize,
    /// average the health factor over all full monitoring windows instead
    /// of using only the last one
    pub average_windows: bool,
}

impl Default for SpmConfig {
    fn default() -> Self {
        SpmConfig {
            gamma: 80,
            runs: 4,
            top_k: 3,
            m_iters: 160,
            confinement_threshold: 2,
            average_windows: false,
        }
    }
}

impl SpmConfig {
    pub fn validate(&self, library_size: usize) -> Result<()> {
        if self.gamma == 0 || self.runs == 0 {
            return Err(Error::Config("spm gamma and runs must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > library_size {
            return Err(Error::Config(format!(
                "spm top_k must be in 1..={library_size}"
            )));
        }
        if self.m_iters < self.gamma {
            return Err(Error::Config("spm m_iters must be at least gamma".into()));
        }
        Ok(())
    }
}

/// Per-neuron operator sets for the hidden layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub hidden: Vec<Vec<OperatorSet>>,
}

impl Assignment {
    /// Every hidden neuron gets the same set.
    pub fn homogeneous(hidden_sizes: &[usize], set: OperatorSet) -> Self {
        Assignment {
            hidden: hidden_sizes.iter().map(|&n| vec![set; n]).collect(),
        }
    }
}

/// Materialize a network spec: assigned hidden layers plus the fixed
/// `(mul, sum, identity)` output neuron.
pub fn build_spec(arch: &Architecture, assignment: &Assignment) -> Result<NetworkSpec> {
    if assignment.hidden.len() != arch.hidden.len()
        || assignment
            .hidden
            .iter()
            .zip(&arch.hidden)
            .any(|(sets, &n)| sets.len() != n)
    {
        return Err(Error::ShapeMismatch {
            expected: format!("assignment for hidden sizes {:?}", arch.hidden),
            got: format!(
                "{:?}",
                assignment.hidden.iter().map(Vec::len).collect::<Vec<_>>()
            ),
        });
    }
    let mut layers = Vec::with_capacity(arch.hidden.len() + 1);
    let mut fan_in = 1;
    for sets in &assignment.hidden {
        layers.push(LayerSpec {
            neurons: sets
                .iter()
                .map(|&set| NeuronSpec { operator_set: set, kernel: arch.kernel })
                .collect(),
            input_count: fan_in,
        });
        fan_in = sets.len();
    }
    layers.push(LayerSpec {
        neurons: vec![NeuronSpec {
            operator_set: OperatorSet::convolutional(ActivationOp::Identity),
            kernel: arch.kernel,
        }],
        input_count: fan_in,
    });
    let spec = NetworkSpec { layers, input_shape: arch.input_shape };
    spec.validate()?;
    Ok(spec)
}

/// Independent uniform draws per hidden neuron.
pub fn assign_random(
    arch: &Architecture,
    library: &OperatorLibrary,
    rng: &mut impl Rng,
) -> Assignment {
    Assignment {
        hidden: arch
            .hidden
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| library.sets()[rng.gen_range(0..library.len())])
                    .collect()
            })
            .collect(),
    }
}

/// Draws weighted by accumulated efficacy per layer; layers whose ledger
/// carries no mass fall back to uniform.
pub fn assign_guided(
    arch: &Architecture,
    library: &OperatorLibrary,
    ledger: &HealthLedger,
    rng: &mut impl Rng,
) -> Result<Assignment> {
    if ledger.layer_count() != arch.hidden.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} ledger layers", arch.hidden.len()),
            got: format!("{}", ledger.layer_count()),
        });
    }
    let mut hidden = Vec::with_capacity(arch.hidden.len());
    for (layer, &n) in arch.hidden.iter().enumerate() {
        let dist = ledger.probabilities(layer);
        let total_mass: f64 = dist.iter().map(|(_, p)| p).sum();
        let sets: Vec<OperatorSet> = if dist.is_empty() || total_mass <= 0.0 {
            (0..n)
                .map(|_| library.sets()[rng.gen_range(0..library.len())])
                .collect()
        } else {
            (0..n)
                .map(|_| {
                    let u: f64 = rng.gen_range(0.0..1.0);
                    let mut acc = 0.0;
                    let mut chosen = dist[dist.len() - 1].0;
                    for &(set, p) in &dist {
                        acc += p;
                        if u < acc {
                            chosen = set;
                            break;
                        }
                    }
                    chosen
                })
                .collect()
        };
        hidden.push(sets);
    }
    Ok(Assignment { hidden })
}

/// Population variance over a kernel's elements.
fn power(kernel: &[f64]) -> f64 {
    let n = kernel.len() as f64;
    let mean = kernel.iter().sum::<f64>() / n;
    kernel.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Health factor from averaged powers; degenerate when the baseline
/// carries no power at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HealthOutcome {
    pub rho: f64,
    pub degenerate: bool,
}

const POWER_FLOOR: f64 = 1e-12;

fn power_ratio(before: f64, after: f64) -> HealthOutcome {
    if before == 0.0 {
        HealthOutcome { rho: after.abs() / POWER_FLOOR, degenerate: true }
    } else {
        HealthOutcome { rho: (after - before).abs() / before.abs(), degenerate: false }
    }
}

/// Relative change in the variance of a neuron's outgoing weights over a
/// monitoring window. `before` and `after` hold the kernel values of each
/// outgoing connection at the two timestamps; powers are averaged across
/// the fan-out before the ratio is formed.
pub fn health_factor(before: &[&[f64]], after: &[&[f64]]) -> Result<HealthOutcome> {
    if before.is_empty() || after.is_empty() || before.len() != after.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} matching snapshots", before.len()),
            got: format!("{}", after.len()),
        });
    }
    if before.iter().chain(after.iter()).any(|k| k.is_empty()) {
        return Err(Error::EmptyInput("weight snapshot"));
    }
    let p_before = before.iter().map(|k| power(k)).sum::<f64>() / before.len() as f64;
    let p_after = after.iter().map(|k| power(k)).sum::<f64>() / after.len() as f64;
    Ok(power_ratio(p_before, p_after))
}

/// Accumulated efficacy scores per hidden layer.
#[derive(Debug, Clone, Default)]
pub struct HealthLedger {
    layers: Vec<BTreeMap<OperatorSet, LedgerEntry>>,
    runs_done: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LedgerEntry {
    /// one credited score per run the set appeared in
    pub samples: Vec<f64>,
    /// how many degenerate-baseline neuron measurements contributed
    pub degenerate_hits: usize,
}

impl LedgerEntry {
    /// Sum of samples in sorted order, so accumulation is independent of
    /// the order runs are merged in.
    pub fn total(&self) -> f64 {
        let mut sorted = self.samples.clone();
        sorted.sort_unstable_by(|a, b| a.total_cmp(b));
        sorted.iter().sum()
    }
}

impl HealthLedger {
    pub fn new(hidden_layers: usize) -> Self {
        HealthLedger { layers: vec![BTreeMap::new(); hidden_layers], runs_done: 0 }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn runs_done(&self) -> usize {
        self.runs_done
    }

    pub fn credit(&mut self, layer: usize, set: OperatorSet, rho: f64, degenerate: bool) {
        let entry = self.layers[layer].entry(set).or_default();
        entry.samples.push(rho);
        if degenerate {
            entry.degenerate_hits += 1;
        }
    }

    pub fn finish_run(&mut self) {
        self.runs_done += 1;
    }

    pub fn entries(&self, layer: usize) -> &BTreeMap<OperatorSet, LedgerEntry> {
        &self.layers[layer]
    }

    /// Merge scores from another ledger (associative, order-independent).
    pub fn merge(&mut self, other: &HealthLedger) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            for (set, entry) in theirs {
                let target = mine.entry(*set).or_default();
                target.samples.extend_from_slice(&entry.samples);
                target.degenerate_hits += entry.degenerate_hits;
            }
        }
        self.runs_done += other.runs_done;
    }

    /// Scored sets sorted by total descending, ties in id order.
    pub fn ranked(&self, layer: usize) -> Vec<(OperatorSet, f64)> {
        let mut out: Vec<(OperatorSet, f64)> = self.layers[layer]
            .iter()
            .map(|(set, e)| (*set, e.total()))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    /// Selection distribution over scored sets: normalized totals.
    pub fn probabilities(&self, layer: usize) -> Vec<(OperatorSet, f64)> {
        let ranked = self.ranked(layer);
        let sum: f64 = ranked.iter().map(|(_, t)| t).sum();
        if sum <= 0.0 {
            return Vec::new();
        }
        ranked.into_iter().map(|(set, t)| (set, t / sum)).collect()
    }

    pub fn top_k(&self, layer: usize, k: usize) -> Vec<(OperatorSet, f64)> {
        let mut ranked = self.ranked(layer);
        ranked.truncate(k);
        ranked
    }

    /// CSV rows: the data behind the per-layer operator ranking charts.
    pub fn write_csv(&self, mut writer: impl Write) -> Result<()> {
        writeln!(
            writer,
            "layer,nodal,pool,activation,rho_total,probability,samples,degenerate_hits"
        )?;
        for layer in 0..self.layers.len() {
            let probs: BTreeMap<OperatorSet, f64> =
                self.probabilities(layer).into_iter().collect();
            for (set, total) in self.ranked(layer) {
                let entry = &self.layers[layer][&set];
                writeln!(
                    writer,
                    "{},{},{},{},{},{},{},{}",
                    layer + 1,
                    set.nodal.id(),
                    set.pool.id(),
                    set.activation.id(),
                    total,
                    probs.get(&set).copied().unwrap_or(0.0),
                    entry.samples.len(),
                    entry.degenerate_hits,
                )?;
            }
        }
        Ok(())
    }

    /// Human-readable ranking report.
    pub fn write_report(&self, mut writer: impl Write) -> Result<()> {
        writeln!(writer, "synaptic efficacy ranking ({} runs)", self.runs_done)?;
        for layer in 0..self.layers.len() {
            writeln!(writer, "layer {}:", layer + 1)?;
            let probs: BTreeMap<OperatorSet, f64> =
                self.probabilities(layer).into_iter().collect();
            for (rank, (set, total)) in self.ranked(layer).into_iter().enumerate() {
                writeln!(
                    writer,
                    "  {:2}. {:24} rho={:<12.6} p={:.4}",
                    rank + 1,
                    set.id(),
                    total,
                    probs.get(&set).copied().unwrap_or(0.0),
                )?;
            }
        }
        Ok(())
    }
}

/// Training data and optimizer for the probe runs.
pub struct SpmProblem<'a> {
    pub inputs: &'a [Tensor],
    pub targets: &'a [Tensor],
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, Default)]
pub struct SpmDiagnostics {
    /// runs discarded after diverging (non-finite loss) and redrawn
    pub discarded_runs: usize,
}

/// Averaged outgoing power of each hidden neuron: for neuron `a` of
/// hidden layer `p`, the mean over next-layer neurons `b` of the variance
/// of kernel `(p+1, a, b)`.
fn power_profile(state: &NetworkState) -> Vec<Vec<f64>> {
    let spec = state.spec();
    let hidden = spec.hidden_sizes();
    let mut profile = Vec::with_capacity(hidden.len());
    for (p, &neurons) in hidden.iter().enumerate() {
        let next = &spec.layers[p + 1];
        let mut per_neuron = Vec::with_capacity(neurons);
        for a in 0..neurons {
            let mut sum = 0.0;
            for b in 0..next.neurons.len() {
                sum += power(state.kernel(p + 1, a, b));
            }
            per_neuron.push(sum / next.neurons.len() as f64);
        }
        profile.push(per_neuron);
    }
    profile
}

/// Execute the full monitoring search: `R` probe runs, each training a
/// freshly assigned and initialized network for `m_iters` single-image
/// iterations, crediting every layer's assigned sets with the mean health
/// factor of their neurons. Diverged runs are discarded and redrawn.
pub fn run_spm(
    arch: &Architecture,
    library: &OperatorLibrary,
    config: &SpmConfig,
    problem: &SpmProblem,
    base_seed: u64,
) -> Result<(HealthLedger, SpmDiagnostics)> {
    config.validate(library.len())?;
    if problem.inputs.is_empty() || problem.inputs.len() != problem.targets.len() {
        return Err(Error::EmptyInput("spm probe dataset"));
    }
    let mut ledger = HealthLedger::new(arch.hidden.len());
    let mut diagnostics = SpmDiagnostics::default();
    let mut run = 1;
    let mut attempt: u64 = 0;
    while run <= config.runs {
        if diagnostics.discarded_runs > config.runs * 8 {
            return Err(Error::Numerical(
                "spm probe training keeps diverging; check optimizer settings".into(),
            ));
        }
        let mut rng = crate::rng::stream(base_seed, &[RUN_SALT, run as u64, attempt]);
        let assignment = if run <= config.confinement_threshold {
            assign_random(arch, library, &mut rng)
        } else {
            assign_guided(arch, library, &ledger, &mut rng)?
        };
        match probe_run(arch, &assignment, config, problem, &mut rng)? {
            Some(run_scores) => {
                for (layer, scores) in run_scores.into_iter().enumerate() {
                    for (set, (rho, degenerate)) in scores {
                        ledger.credit(layer, set, rho, degenerate);
                    }
                }
                ledger.finish_run();
                run += 1;
            }
            None => {
                diagnostics.discarded_runs += 1;
                attempt += 1;
            }
        }
    }
    Ok((ledger, diagnostics))
}

type RunScores = Vec<BTreeMap<OperatorSet, (f64, bool)>>;

/// One probe training; `None` when the run diverged.
fn probe_run(
    arch: &Architecture,
    assignment: &Assignment,
    config: &SpmConfig,
    problem: &SpmProblem,
    rng: &mut impl Rng,
) -> Result<Option<RunScores>> {
    let spec = build_spec(arch, assignment)?;
    let mut state = NetworkState::init(&spec, rng)?;
    let mut optimizer = Optimizer::new(problem.optimizer, state.param_count());
    let mut scratch = TrainScratch::new(&state);

    // snapshot the averaged-power profile at every monitoring boundary
    let mut snapshot_times: Vec<usize> = (0..=config.m_iters / config.gamma)
        .map(|k| k * config.gamma)
        .collect();
    for t in [config.m_iters - config.gamma, config.m_iters] {
        if !snapshot_times.contains(&t) {
            snapshot_times.push(t);
        }
    }
    snapshot_times.sort_unstable();
    let mut snapshots: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    snapshots.insert(0, power_profile(&state));

    let n = problem.inputs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for iter in 1..=config.m_iters {
        let img = order[(iter - 1) % n];
        let (loss, _) = train_step(
            &spec,
            &mut state,
            &mut optimizer,
            &problem.inputs[img],
            &problem.targets[img],
            &mut scratch,
        )?;
        if !loss.is_finite() {
            return Ok(None);
        }
        if iter % n == 0 {
            order.shuffle(rng);
        }
        if snapshot_times.contains(&iter) {
            snapshots.insert(iter, power_profile(&state));
        }
    }

    // per-neuron health factors from the monitoring windows
    let windows: Vec<(usize, usize)> = if config.average_windows {
        snapshot_times
            .windows(2)
            .filter(|w| w[1] - w[0] == config.gamma)
            .map(|w| (w[0], w[1]))
            .collect()
    } else {
        vec![(config.m_iters - config.gamma, config.m_iters)]
    };

    let mut scores: RunScores = vec![BTreeMap::new(); arch.hidden.len()];
    for (layer, sets) in assignment.hidden.iter().enumerate() {
        // mean rho per neuron over the windows, then mean per set
        let mut by_set: BTreeMap<OperatorSet, Vec<(f64, bool)>> = BTreeMap::new();
        for (neuron, &set) in sets.iter().enumerate() {
            let mut rho_sum = 0.0;
            let mut degenerate = false;
            for &(t0, t1) in &windows {
                let before = snapshots[&t0][layer][neuron];
                let after = snapshots[&t1][layer][neuron];
                let outcome = power_ratio(before, after);
                rho_sum += outcome.rho;
                degenerate |= outcome.degenerate;
            }
            by_set
                .entry(set)
                .or_default()
                .push((rho_sum / windows.len() as f64, degenerate));
        }
        for (set, neuron_scores) in by_set {
            let mean =
                neuron_scores.iter().map(|(r, _)| r).sum::<f64>() / neuron_scores.len() as f64;
            let degenerate = neuron_scores.iter().any(|&(_, d)| d);
            scores[layer].insert(set, (mean, degenerate));
        }
    }
    Ok(Some(scores))
}

/// Build the elite assignment: per layer, allocate neurons to the top-K
/// sets in proportion to their normalized efficacy (largest-remainder
/// rounding, every top set keeps at least one neuron when it fits).
pub fn configure_elite(
    hidden_sizes: &[usize],
    ledger: &HealthLedger,
    k: usize,
) -> Result<Assignment> {
    if k == 0 {
        return Err(Error::Config("elite top_k must be at least 1".into()));
    }
    if ledger.layer_count() != hidden_sizes.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} ledger layers", hidden_sizes.len()),
            got: format!("{}", ledger.layer_count()),
        });
    }
    let mut hidden = Vec::with_capacity(hidden_sizes.len());
    for (layer, &neurons) in hidden_sizes.iter().enumerate() {
        let top = ledger.top_k(layer, k);
        if top.is_empty() {
            return Err(Error::EmptyInput("ledger layer with no scored operator sets"));
        }
        let counts = proportional_allocation(neurons, &top);
        let mut sets = Vec::with_capacity(neurons);
        for ((set, _), count) in top.iter().zip(&counts) {
            sets.extend(std::iter::repeat(*set).take(*count));
        }
        hidden.push(sets);
    }
    Ok(Assignment { hidden })
}

/// Largest-remainder apportionment of `neurons` over the ranked sets.
fn proportional_allocation(neurons: usize, top: &[(OperatorSet, f64)]) -> Vec<usize> {
    let k = top.len();
    let sum: f64 = top.iter().map(|(_, t)| t).sum();
    let shares: Vec<f64> = if sum > 0.0 {
        top.iter().map(|(_, t)| t / sum).collect()
    } else {
        vec![1.0 / k as f64; k]
    };
    let quotas: Vec<f64> = shares.iter().map(|s| s * neurons as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    // distribute the remainder by largest fractional part, rank breaking ties
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(neurons - assigned) {
        counts[i] += 1;
    }
    // every ranked set keeps at least one neuron when the layer is big enough
    if neurons >= k {
        for i in 0..k {
            while counts[i] == 0 {
                let donor = (0..k)
                    .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                    .expect("nonempty allocation");
                if counts[donor] <= 1 {
                    break;
                }
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

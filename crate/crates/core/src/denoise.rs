//! Noise models, the PSNR metric, dataset ingestion, and the
//! cross-validated denoising protocol.
//!
//! Images live in `[0, 1]`; networks train on the `[-1, 1]` mapping of
//! the same data so tanh-style activations see a symmetric range.
//! Corruption is deterministic per (seed, image index), which makes every
//! number in a report reproducible from one base seed.

use crate::network::{NetworkSpec, NetworkState};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::Tensor;
use crate::train::{train_step, TrainScratch};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use std::path::Path;

const NOISE_SALT: u64 = 0x6e6f69;
const FOLD_SALT: u64 = 0x666c64;
const INIT_SALT: u64 = 0x696e69;
const EPOCH_SALT: u64 = 0x657063;

/// Parameterized corruption process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// Fixed-value impulse noise: each pixel is replaced with probability
    /// `p`, half the replacements darkest (0.0), half brightest (1.0).
    Impulse { p: f64 },
    /// Multiplicative speckle: each pixel is scaled by a Gamma(shape M,
    /// scale 1/M) multiplier (unit mean, variance 1/M).
    Speckle { shape: u32 },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::Impulse { p } => {
                if !(0.0 < p && p < 1.0) {
                    return Err(Error::Config(format!(
                        "impulse probability must be in (0, 1), got {p}"
                    )));
                }
            }
            NoiseModel::Speckle { shape } => {
                if shape < 1 {
                    return Err(Error::Config("speckle shape must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match *self {
            NoiseModel::Impulse { p } => format!("impulse(p={p})"),
            NoiseModel::Speckle { shape } => format!("speckle(M={shape})"),
        }
    }
}

/// Replace each pixel with probability `p` by 0.0 or 1.0 (equal odds).
pub fn corrupt_impulse(img: &Tensor, p: f64, rng: &mut impl Rng) -> Tensor {
    img.map_with(|v| {
        if rng.gen_range(0.0..1.0) < p {
            if rng.gen_range(0.0..1.0) < 0.5 {
                0.0
            } else {
                1.0
            }
        } else {
            v
        }
    })
}

/// Multiply each pixel by a unit-mean Gamma multiplier. The product is
/// not clamped here; clamping to [0, 1] happens only at the storage and
/// metric boundary so the network keeps the full gradient signal.
pub fn corrupt_speckle(img: &Tensor, shape: u32, rng: &mut impl Rng) -> Tensor {
    let gamma = Gamma::new(shape as f64, 1.0 / shape as f64).expect("valid gamma parameters");
    img.map_with(|v| v * gamma.sample(rng))
}

/// Corrupt one image under a model with an explicit stream.
pub fn corrupt(model: &NoiseModel, img: &Tensor, rng: &mut impl Rng) -> Tensor {
    match *model {
        NoiseModel::Impulse { p } => corrupt_impulse(img, p, rng),
        NoiseModel::Speckle { shape } => corrupt_speckle(img, shape, rng),
    }
}

/// Corrupt a whole dataset; image `i` gets its own stream derived from
/// `(seed, i)`, so results do not depend on evaluation order.
pub fn corrupt_dataset(images: &[Tensor], model: &NoiseModel, seed: u64) -> Vec<Tensor> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = crate::rng::stream(seed, &[NOISE_SALT, i as u64]);
            corrupt(model, img, &mut rng)
        })
        .collect()
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the images are
/// identical.
pub fn psnr(pred: &Tensor, target: &Tensor, max_val: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", pred.shape()),
            got: format!("{:?}", target.shape()),
        });
    }
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Grayscale luminance from 8-bit RGB.
fn luminance(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
}

/// Bilinear resample to the target shape; constants are preserved.
fn resize_bilinear(src: &Tensor, rows: usize, cols: usize) -> Tensor {
    let (sr, sc) = (src.rows(), src.cols());
    if (sr, sc) == (rows, cols) {
        return src.clone();
    }
    let mut out = Tensor::zeros(vec![rows, cols]);
    let scale_r = sr as f64 / rows as f64;
    let scale_c = sc as f64 / cols as f64;
    for i in 0..rows {
        let fy = ((i as f64 + 0.5) * scale_r - 0.5).clamp(0.0, (sr - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sr - 1);
        let wy = fy - y0 as f64;
        for j in 0..cols {
            let fx = ((j as f64 + 0.5) * scale_c - 0.5).clamp(0.0, (sc - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sc - 1);
            let wx = fx - x0 as f64;
            let top = src.at(y0, x0) * (1.0 - wx) + src.at(y0, x1) * wx;
            let bottom = src.at(y1, x0) * (1.0 - wx) + src.at(y1, x1) * wx;
            out.set(i, j, top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

/// Target resolution for all experiment imagery.
pub const IMAGE_SIZE: usize = 60;

/// Load a directory of raster images: grayscale conversion
/// (0.299/0.587/0.114), bilinear resize to 60x60, intensities in [0, 1].
/// Unreadable files are skipped with a warning on stderr; fewer than
/// `required` usable images is an error. Files load in sorted name order.
pub fn load_dataset(dir: &Path, required: usize) -> Result<Vec<Tensor>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read dataset dir {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for path in paths {
        match image::open(&path) {
            Ok(img) => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                let mut gray = Tensor::zeros(vec![h as usize, w as usize]);
                for (x, y, pixel) in rgb.enumerate_pixels() {
                    gray.set(y as usize, x as usize, luminance(pixel[0], pixel[1], pixel[2]));
                }
                images.push(resize_bilinear(&gray, IMAGE_SIZE, IMAGE_SIZE));
            }
            Err(e) => {
                eprintln!("warning: skipping unreadable image {}: {e}", path.display());
            }
        }
    }
    if images.len() < required {
        return Err(Error::Data(format!(
            "dataset has {} usable images, {required} required",
            images.len()
        )));
    }
    Ok(images)
}

/// Write a [0, 1] tensor as an 8-bit grayscale PNG (values clamped).
pub fn save_grayscale(img: &Tensor, path: &Path) -> Result<()> {
    let (rows, cols) = (img.rows(), img.cols());
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buffer: image::GrayImage = image::ImageBuffer::from_raw(cols as u32, rows as u32, bytes)
        .ok_or_else(|| Error::Data("grayscale buffer size mismatch".into()))?;
    buffer
        .save(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Disjoint fold assignment covering every image exactly once.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    /// Shuffle image indices with a seed-derived stream and cut into
    /// `fold_count` contiguous chunks (sizes differ by at most one).
    pub fn new(image_count: usize, fold_count: usize, seed: u64) -> Result<Self> {
        if fold_count == 0 || image_count < fold_count {
            return Err(Error::Config(format!(
                "cannot split {image_count} images into {fold_count} folds"
            )));
        }
        let mut indices: Vec<usize> = (0..image_count).collect();
        indices.shuffle(&mut crate::rng::stream(seed, &[FOLD_SALT]));
        let base = image_count / fold_count;
        let extra = image_count % fold_count;
        let mut folds = Vec::with_capacity(fold_count);
        let mut cursor = 0;
        for f in 0..fold_count {
            let size = base + usize::from(f < extra);
            folds.push(indices[cursor..cursor + size].to_vec());
            cursor += size;
        }
        Ok(FoldPlan { folds })
    }

    pub fn fold_count(&self) -> usize {
        self.folds.len()
    }

    /// Training indices of fold `f` (the fold itself).
    pub fn train_indices(&self, f: usize) -> &[usize] {
        &self.folds[f]
    }

    /// Test indices of fold `f` (every other fold).
    pub fn test_indices(&self, f: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != f)
            .flat_map(|(_, fold)| fold.iter().copied())
            .collect()
    }
}

/// One model entry in the protocol: a name, a network spec, and its
/// optimizer settings.
#[derive(Debug, Clone)]
pub struct ModelPlan {
    pub name: String,
    pub spec: NetworkSpec,
    pub optimizer: OptimizerConfig,
}

/// Protocol settings; `folds_to_run` may stop early for desk-scale runs
/// while the fold plan still partitions the whole corpus.
#[derive(Debug, Clone, Copy)]
pub struct ProtocolConfig {
    pub fold_count: usize,
    pub folds_to_run: usize,
    pub restarts: usize,
    pub epochs: usize,
    pub base_seed: u64,
}

/// Per-restart outcome.
#[derive(Debug, Clone)]
pub struct RestartRow {
    pub fold: usize,
    pub model: String,
    pub restart: usize,
    /// running train PSNR of the final epoch (dB)
    pub train_psnr: f64,
    /// mean test PSNR, filled for the selected restart only
    pub test_psnr: Option<f64>,
    pub selected: bool,
    pub diverged: bool,
}

/// Per-epoch training curve point.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub fold: usize,
    pub model: String,
    pub restart: usize,
    pub epoch: usize,
    pub train_psnr: f64,
}

/// Everything a protocol run produces.
#[derive(Debug, Clone)]
pub struct ProtocolReport {
    pub restarts: Vec<RestartRow>,
    pub epochs: Vec<EpochRow>,
    /// final state of the selected restart per (fold, model name)
    pub selected_states: Vec<(usize, String, NetworkState)>,
    /// folds where every restart of a model diverged
    pub failed_folds: Vec<(usize, String)>,
    /// mean noisy-input PSNR over each fold's test set, for reference
    pub noisy_psnr: Vec<(usize, f64)>,
}

impl ProtocolReport {
    /// Mean test PSNR of a model over the executed folds.
    pub fn mean_test_psnr(&self, model: &str) -> Option<f64> {
        let values: Vec<f64> = self
            .restarts
            .iter()
            .filter(|r| r.model == model && r.selected)
            .filter_map(|r| r.test_psnr)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }

    /// Per-fold test PSNR of a model.
    pub fn fold_test_psnr(&self, model: &str) -> Vec<(usize, f64)> {
        self.restarts
            .iter()
            .filter(|r| r.model == model && r.selected)
            .filter_map(|r| r.test_psnr.map(|p| (r.fold, p)))
            .collect()
    }
}

/// Map [0, 1] intensities to the symmetric training range.
pub fn to_internal(img: &Tensor) -> Tensor {
    img.map(|v| 2.0 * v - 1.0)
}

/// Map network output back to [0, 1] without clamping.
pub fn from_internal(img: &Tensor) -> Tensor {
    img.map(|v| (v + 1.0) / 2.0)
}

struct RestartOutcome {
    row: RestartRow,
    curve: Vec<EpochRow>,
    state: NetworkState,
}

fn hash_name(name: &str) -> u64 {
    name.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Train one restart for `epochs` passes, logging the running train PSNR
/// per epoch (each image's prediction as seen during training, before its
/// update).
fn run_restart(
    model: &ModelPlan,
    train_noisy: &[Tensor],
    train_clean: &[Tensor],
    fold: usize,
    restart: usize,
    restart_seed: u64,
    epochs: usize,
) -> Result<RestartOutcome> {
    let mut init_rng = crate::rng::stream(restart_seed, &[INIT_SALT, hash_name(&model.name)]);
    let mut state = NetworkState::init(&model.spec, &mut init_rng)?;
    let mut optimizer = Optimizer::new(model.optimizer, state.param_count());
    let mut scratch = TrainScratch::new(&state);

    let inputs: Vec<Tensor> = train_noisy.iter().map(to_internal).collect();
    let targets: Vec<Tensor> = train_clean.iter().map(to_internal).collect();
    let n = inputs.len();
    let mut order: Vec<usize> = (0..n).collect();

    let mut curve = Vec::with_capacity(epochs);
    let mut diverged = false;
    let mut final_train_psnr = f64::NEG_INFINITY;

    'epochs: for epoch in 0..epochs {
        let mut epoch_rng =
            crate::rng::stream(restart_seed, &[EPOCH_SALT, hash_name(&model.name), epoch as u64]);
        order.shuffle(&mut epoch_rng);
        let mut psnr_sum = 0.0;
        for &img in &order {
            let (loss, pred) = train_step(
                &model.spec,
                &mut state,
                &mut optimizer,
                &inputs[img],
                &targets[img],
                &mut scratch,
            )?;
            if !loss.is_finite() {
                diverged = true;
                break 'epochs;
            }
            let pred_ext = from_internal(&pred).map(|v| v.clamp(0.0, 1.0));
            psnr_sum += psnr(&pred_ext, &train_clean[img], 1.0)?;
        }
        let train_psnr = psnr_sum / n as f64;
        curve.push(EpochRow {
            fold,
            model: model.name.clone(),
            restart,
            epoch: epoch + 1,
            train_psnr,
        });
        final_train_psnr = train_psnr;
    }

    Ok(RestartOutcome {
        row: RestartRow {
            fold,
            model: model.name.clone(),
            restart,
            train_psnr: if diverged { f64::NEG_INFINITY } else { final_train_psnr },
            test_psnr: None,
            selected: false,
            diverged,
        },
        curve,
        state,
    })
}

/// Mean PSNR of a model state over a set of (noisy, clean) pairs.
pub fn evaluate_psnr(
    spec: &NetworkSpec,
    state: &NetworkState,
    noisy: &[Tensor],
    clean: &[Tensor],
) -> Result<f64> {
    let values = noisy
        .par_iter()
        .zip(clean.par_iter())
        .map(|(n, c)| {
            let input = to_internal(n);
            let (pred, _) = crate::network::network_forward(spec, state, &input)?;
            let pred_ext = from_internal(&pred).map(|v| v.clamp(0.0, 1.0));
            psnr(&pred_ext, c, 1.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// The cross-validated experiment: per fold, corrupt the corpus with a
/// fold-derived seed, train every model `restarts` times, keep the
/// restart with the best final training PSNR, and evaluate it on the
/// held-out images. Fold/model/restart units run in parallel; results
/// are deterministic given the base seed.
pub fn run_protocol(
    images: &[Tensor],
    models: &[ModelPlan],
    noise: &NoiseModel,
    config: &ProtocolConfig,
) -> Result<ProtocolReport> {
    noise.validate()?;
    if models.is_empty() {
        return Err(Error::EmptyInput("protocol models"));
    }
    if config.folds_to_run == 0 || config.folds_to_run > config.fold_count {
        return Err(Error::Config(format!(
            "folds_to_run must be in 1..={}",
            config.fold_count
        )));
    }
    let plan = FoldPlan::new(images.len(), config.fold_count, config.base_seed)?;

    // corruption per fold is cheap and sequential; training units fan out
    let fold_data: Vec<Vec<Tensor>> = (0..config.folds_to_run)
        .map(|fold| corrupt_dataset(images, noise, config.base_seed + fold as u64))
        .collect();

    struct Unit {
        fold: usize,
        model_idx: usize,
        restart: usize,
    }
    let mut units = Vec::new();
    for fold in 0..config.folds_to_run {
        for model_idx in 0..models.len() {
            for restart in 0..config.restarts {
                units.push(Unit { fold, model_idx, restart });
            }
        }
    }

    let outcomes: Vec<RestartOutcome> = units
        .par_iter()
        .map(|unit| {
            let model = &models[unit.model_idx];
            let noisy = &fold_data[unit.fold];
            let fold_seed = config.base_seed + unit.fold as u64;
            let restart_seed = fold_seed + unit.restart as u64;
            let train_idx = plan.train_indices(unit.fold);
            let train_noisy: Vec<Tensor> = train_idx.iter().map(|&i| noisy[i].clone()).collect();
            let train_clean: Vec<Tensor> = train_idx.iter().map(|&i| images[i].clone()).collect();
            run_restart(
                model,
                &train_noisy,
                &train_clean,
                unit.fold,
                unit.restart,
                restart_seed,
                config.epochs,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    // select the best restart per (fold, model) and evaluate on the test set
    let mut restarts: Vec<RestartRow> = Vec::new();
    let mut epochs_rows: Vec<EpochRow> = Vec::new();
    let mut selected_states = Vec::new();
    let mut failed_folds = Vec::new();
    let mut noisy_psnr = Vec::new();

    for fold in 0..config.folds_to_run {
        let test_idx = plan.test_indices(fold);
        let noisy = &fold_data[fold];
        let test_noisy: Vec<Tensor> = test_idx.iter().map(|&i| noisy[i].clone()).collect();
        let test_clean: Vec<Tensor> = test_idx.iter().map(|&i| images[i].clone()).collect();

        let base: f64 = test_noisy
            .iter()
            .zip(&test_clean)
            .map(|(n, c)| psnr(&n.map(|v| v.clamp(0.0, 1.0)), c, 1.0))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .sum::<f64>()
            / test_noisy.len() as f64;
        noisy_psnr.push((fold, base));

        for model in models {
            let mut fold_outcomes: Vec<&RestartOutcome> = outcomes
                .iter()
                .filter(|o| o.row.fold == fold && o.row.model == model.name)
                .collect();
            fold_outcomes.sort_by_key(|o| o.row.restart);

            // max train PSNR wins; ties go to the lowest restart index
            let best = fold_outcomes
                .iter()
                .filter(|o| !o.row.diverged)
                .max_by(|a, b| {
                    a.row
                        .train_psnr
                        .total_cmp(&b.row.train_psnr)
                        .then(b.row.restart.cmp(&a.row.restart))
                })
                .map(|o| o.row.restart);

            if best.is_none() {
                failed_folds.push((fold, model.name.clone()));
            }

            for outcome in fold_outcomes {
                let mut row = outcome.row.clone();
                if Some(row.restart) == best {
                    row.selected = true;
                    row.test_psnr = Some(evaluate_psnr(
                        &model.spec,
                        &outcome.state,
                        &test_noisy,
                        &test_clean,
                    )?);
                    selected_states.push((fold, model.name.clone(), outcome.state.clone()));
                }
                restarts.push(row);
                epochs_rows.extend(outcome.curve.iter().cloned());
            }
        }
    }

    Ok(ProtocolReport {
        restarts,
        epochs: epochs_rows,
        selected_states,
        failed_folds,
        noisy_psnr,
    })
}

//! Training convolutional experts networks on synthetic patches.
//!
//! The loss is per-pixel binary cross-entropy between the predicted response
//! map and a Gaussian target centred on the true landmark offset. Parameters
//! are optimised with Adam; when the non-negativity constraint is on, the
//! combiner weights are clamped at zero after every step.

use std::fmt::Write as _;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cen::{znorm_windows, CenArch, CenMeta, CenModel, RoiPlacement, KERNEL_LEN, KERNEL_SIDE};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::pdm::LandmarkSet;
use crate::synth::{stamp, AppearanceModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Std-dev of the target Gaussian, in pixels of the patch.
    pub label_sigma: f64,
    pub seed: u64,
    pub enforce_nonneg: bool,
    /// Side of the square training ROI; responses are `patch_size - 10` wide.
    pub patch_size: usize,
    /// Interocular distance the detector works at.
    pub scale_px: u32,
    /// Largest offset of the true landmark from the patch centre, in pixels.
    pub max_offset: f64,
    pub appearance: AppearanceModel,
    pub background: (f64, f64),
    pub noise_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            epochs: 20,
            batch_size: 64,
            label_sigma: 1.0,
            seed: 0,
            enforce_nonneg: true,
            patch_size: 19,
            scale_px: 30,
            max_offset: 3.0,
            appearance: AppearanceModel::default(),
            background: (90.0, 160.0),
            noise_std: 3.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid("train config", reason.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.label_sigma > 0.0) {
            return bad("label_sigma must be positive");
        }
        if self.patch_size < KERNEL_SIDE {
            return bad("patch_size must be at least 11");
        }
        if self.scale_px == 0 {
            return bad("scale_px must be positive");
        }
        if !(self.max_offset >= 0.0) || !(self.noise_std >= 0.0) {
            return bad("max_offset and noise_std must be non-negative");
        }
        self.appearance.validate()
    }

    pub fn response_side(&self) -> usize {
        self.patch_size + 1 - KERNEL_SIDE
    }

    /// Feature radius in patch pixels.
    pub fn feature_radius(&self) -> f64 {
        self.appearance.radius_iod * self.scale_px as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub roi: GrayImage,
    /// Target response, row-major over the `(n-10)²` grid.
    pub label: Vec<f64>,
    pub prototype: usize,
    /// True landmark position relative to the ROI centre.
    pub offset: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl PatchDataset {
    pub fn new(samples: Vec<Sample>, split: Split) -> Result<Self> {
        if let Some(first) = samples.first() {
            let n = first.roi.width();
            let side = n
                .checked_sub(KERNEL_SIDE - 1)
                .filter(|&s| s > 0)
                .ok_or_else(|| Error::invalid("dataset", format!("roi side {n} smaller than the kernel")))?;
            for (i, s) in samples.iter().enumerate() {
                if s.roi.width() != n || s.roi.height() != n {
                    return Err(Error::invalid("dataset", format!("sample {i}: roi is not {n}×{n}")));
                }
                if s.label.len() != side * side {
                    return Err(Error::invalid(
                        "dataset",
                        format!("sample {i}: label has {} values, expected {}", s.label.len(), side * side),
                    ));
                }
                if s.label.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::invalid("dataset", format!("sample {i}: label outside [0, 1]")));
                }
            }
        }
        Ok(Self { samples, split })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Gaussian target over the response grid of a `patch`-sized ROI whose true
/// landmark sits `offset` pixels from the ROI centre.
pub fn gaussian_label(patch: usize, offset: [f64; 2], sigma: f64) -> Vec<f64> {
    let side = patch + 1 - KERNEL_SIDE;
    let half = (KERNEL_SIDE / 2) as f64;
    let centre = (patch as f64 - 1.0) / 2.0;
    let (cx, cy) = (centre + offset[0], centre + offset[1]);
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let dx = c as f64 + half - cx;
            let dy = r as f64 + half - cy;
            out.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    out
}

fn split_seed(seed: u64, split: Split) -> u64 {
    match split {
        Split::Train => seed,
        Split::Test => seed ^ 0x7e57_5eed_0000_0001,
    }
}

/// Renders isolated landmark appearances at random offsets from the patch
/// centre. The prototype of each sample is drawn from the mixture in
/// `cfg.appearance`.
pub fn gen_synthetic_patches(cfg: &TrainConfig, count: usize, split: Split) -> Result<PatchDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, split));
    let n = cfg.patch_size;
    let centre = (n as f64 - 1.0) / 2.0;
    let radius = cfg.feature_radius();
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let prototype = cfg.appearance.sample_prototype(&mut rng);
        let offset =
            [cfg.max_offset * (2.0 * rng.random::<f64>() - 1.0), cfg.max_offset * (2.0 * rng.random::<f64>() - 1.0)];
        let contrast = cfg.appearance.sample_contrast(&mut rng);
        let (lo, hi) = cfg.background;
        let level = lo + (hi - lo) * rng.random::<f64>();
        let mut roi = GrayImage::new(n, n, level);
        stamp(
            &mut roi,
            cfg.appearance.prototypes[prototype],
            [centre + offset[0], centre + offset[1]],
            radius,
            contrast,
        );
        if cfg.noise_std > 0.0 {
            roi = roi.map(|v| v + noise.sample(&mut rng));
        }
        samples.push(Sample { roi, label: gaussian_label(n, offset, cfg.label_sigma), prototype, offset });
    }
    PatchDataset::new(samples, split)
}

/// Cuts training patches out of annotated images. Each image is resampled so
/// that its interocular distance equals `cfg.scale_px`; every visible
/// landmark yields `per_landmark` patches at random offsets.
pub fn patches_from_images(
    images: &[(GrayImage, LandmarkSet, f64)],
    cfg: &TrainConfig,
    per_landmark: usize,
    split: Split,
) -> Result<PatchDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, split));
    let mut samples = Vec::new();
    for (k, (image, landmarks, iod)) in images.iter().enumerate() {
        if !(*iod > 0.0) {
            return Err(Error::invalid("training image", format!("image {k}: interocular distance {iod}")));
        }
        let step = iod / cfg.scale_px as f64;
        for (p, &vis) in landmarks.points.iter().zip(&landmarks.visibility) {
            if !vis {
                continue;
            }
            for _ in 0..per_landmark {
                let offset = [
                    cfg.max_offset * (2.0 * rng.random::<f64>() - 1.0),
                    cfg.max_offset * (2.0 * rng.random::<f64>() - 1.0),
                ];
                let roi = RoiPlacement {
                    center: [p[0] - offset[0] * step, p[1] - offset[1] * step],
                    size: cfg.patch_size,
                    step,
                }
                .sample(image);
                samples.push(Sample {
                    roi,
                    label: gaussian_label(cfg.patch_size, offset, cfg.label_sigma),
                    prototype: 0,
                    offset,
                });
            }
        }
    }
    PatchDataset::new(samples, split)
}

// --- parameters as a flat vector -------------------------------------------

/// Number of trainable parameters of an architecture.
pub fn param_count(arch: CenArch) -> usize {
    let CenArch { c1, c2, c3 } = arch;
    c1 * KERNEL_LEN + c1 + c2 * c1 + c2 + c3 * c2 + c3 + c3 + 1
}

/// Range of the combiner weights inside the flat parameter vector.
pub fn combiner_range(arch: CenArch) -> std::ops::Range<usize> {
    let end = param_count(arch) - 1;
    end - arch.c3..end
}

/// Flattens the parameters: kernels, bias1, w2, bias2, w3, bias3, combiner
/// weights, combiner bias. Matrices are row-major.
pub fn flatten(model: &CenModel) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_count(model.arch()));
    let rows = |m: &DMatrix<f64>, out: &mut Vec<f64>| {
        for r in m.row_iter() {
            out.extend(r.iter());
        }
    };
    rows(&model.kernels, &mut out);
    out.extend(model.bias1.iter());
    rows(&model.w2, &mut out);
    out.extend(model.bias2.iter());
    rows(&model.w3, &mut out);
    out.extend(model.bias3.iter());
    out.extend(model.combiner.iter());
    out.push(model.combiner_bias);
    out
}

/// Inverse of [`flatten`] for the architecture of `template`.
pub fn unflatten(template: &CenModel, flat: &[f64]) -> Result<CenModel> {
    let CenArch { c1, c2, c3 } = template.arch();
    crate::error::check_dim("flat parameters", param_count(template.arch()), flat.len())?;
    let mut at = 0;
    let mut take = |len: usize| {
        let s = &flat[at..at + len];
        at += len;
        s
    };
    let kernels = DMatrix::from_row_slice(c1, KERNEL_LEN, take(c1 * KERNEL_LEN));
    let bias1 = DVector::from_column_slice(take(c1));
    let w2 = DMatrix::from_row_slice(c2, c1, take(c2 * c1));
    let bias2 = DVector::from_column_slice(take(c2));
    let w3 = DMatrix::from_row_slice(c3, c2, take(c3 * c2));
    let bias3 = DVector::from_column_slice(take(c3));
    let combiner = DVector::from_column_slice(take(c3));
    let combiner_bias = take(1)[0];
    CenModel::new(template.meta, kernels, bias1, w2, bias2, w3, bias3, combiner, combiner_bias)
}

// --- loss and gradient ---------------------------------------------------

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |r, _| m.row(r).sum())
}

/// Summed BCE over the pixels of one sample and its flat gradient.
fn sample_loss_grad(model: &CenModel, windows: &DMatrix<f64>, label: &[f64]) -> (f64, Vec<f64>) {
    let act = model.forward_windows(windows.clone());
    let mut loss = 0.0;
    let g4 = DVector::from_fn(act.z4.len(), |p, _| {
        let z = act.z4[p];
        loss += softplus(z) - label[p] * z;
        sigmoid(z) - label[p]
    });
    let d_comb = &act.a3 * &g4;
    let d_comb_bias = g4.sum();
    // through the expert sigmoids
    let mut dz3 = &model.combiner * g4.transpose();
    dz3.zip_apply(&act.a3, |d, a| *d *= a * (1.0 - a));
    let dw3 = &dz3 * act.a2.transpose();
    let db3 = row_sums(&dz3);
    let mut dz2 = model.w3.tr_mul(&dz3);
    dz2.zip_apply(&act.z2, |d, z| {
        if z <= 0.0 {
            *d = 0.0
        }
    });
    let dw2 = &dz2 * act.a1.transpose();
    let db2 = row_sums(&dz2);
    let da1 = model.w2.tr_mul(&dz2);
    let dk = &da1 * act.windows.transpose();
    let db1 = row_sums(&da1);

    let mut grad = Vec::with_capacity(param_count(model.arch()));
    for m in [&dk] {
        for r in m.row_iter() {
            grad.extend(r.iter());
        }
    }
    grad.extend(db1.iter());
    for r in dw2.row_iter() {
        grad.extend(r.iter());
    }
    grad.extend(db2.iter());
    for r in dw3.row_iter() {
        grad.extend(r.iter());
    }
    grad.extend(db3.iter());
    grad.extend(d_comb.iter());
    grad.push(d_comb_bias);
    (loss, grad)
}

fn prepared_windows(data: &PatchDataset) -> Result<Vec<DMatrix<f64>>> {
    data.samples.par_iter().map(|s| znorm_windows(&s.roi).map(|(w, _)| w)).collect()
}

fn batch_loss_grad(model: &CenModel, windows: &[DMatrix<f64>], labels: &[&[f64]]) -> (f64, Vec<f64>) {
    let per: Vec<(f64, Vec<f64>)> =
        windows.par_iter().zip(labels.par_iter()).map(|(w, l)| sample_loss_grad(model, w, l)).collect();
    let pixels: usize = labels.iter().map(|l| l.len()).sum();
    let scale = 1.0 / pixels as f64;
    let mut grad = vec![0.0; param_count(model.arch())];
    let mut loss = 0.0;
    // fixed-order reduction keeps results independent of the thread count
    for (l, g) in per {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    (loss * scale, grad)
}

/// Mean per-pixel BCE over `data` and its gradient with respect to the
/// flat parameters (see [`flatten`]).
pub fn loss_and_gradient(model: &CenModel, data: &PatchDataset) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::invalid("dataset", "empty"));
    }
    let windows = prepared_windows(data)?;
    let labels: Vec<&[f64]> = data.samples.iter().map(|s| s.label.as_slice()).collect();
    Ok(batch_loss_grad(model, &windows, &labels))
}

pub fn mean_loss(model: &CenModel, data: &PatchDataset) -> Result<f64> {
    Ok(loss_and_gradient(model, data)?.0)
}

// --- optimisation --------------------------------------------------------

#[derive(Debug, Clone)]
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize, lr: f64) -> Self {
        Self { lr, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_r2: Option<f64>,
    pub test_rmse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CenModel,
    /// Entry 0 is the initial model; entry `e` follows epoch `e`.
    pub curve: Vec<EpochStats>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.curve[0].train_loss
    }

    pub fn final_loss(&self) -> f64 {
        self.curve.last().expect("curve has the initial entry").train_loss
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_r2,test_rmse\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.curve {
            let _ = writeln!(out, "{},{},{},{}", s.epoch, s.train_loss, opt(s.test_r2), opt(s.test_rmse));
        }
        out
    }
}

/// Trains a detector from a seeded random initialisation.
pub fn train_cen(
    train: &PatchDataset,
    test: Option<&PatchDataset>,
    cfg: &TrainConfig,
    arch: CenArch,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("dataset", "training split is empty"));
    }
    if train.split != Split::Train {
        return Err(Error::invalid("dataset", "expected the train split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let meta = CenMeta { landmark: 0, view_deg: 0, scale_px: cfg.scale_px };
    let init = CenModel::random(meta, arch, &mut rng);
    train_from(init, train, test, cfg, &mut rng)
}

/// Continues training `model`; `rng` drives the mini-batch order.
pub fn train_from(
    model: CenModel,
    train: &PatchDataset,
    test: Option<&PatchDataset>,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainOutcome> {
    let windows = prepared_windows(train)?;
    let labels: Vec<&[f64]> = train.samples.iter().map(|s| s.label.as_slice()).collect();
    let comb = combiner_range(model.arch());
    let mut params = flatten(&model);
    if cfg.enforce_nonneg {
        params[comb.clone()].iter_mut().for_each(|w| *w = w.max(0.0));
    }
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut current = unflatten(&model, &params)?;

    let evaluate = |m: &CenModel, epoch: usize| -> Result<EpochStats> {
        let (train_loss, _) = batch_loss_grad(m, &windows, &labels);
        if !train_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: train_loss });
        }
        let (test_r2, test_rmse) = match test {
            Some(t) if !t.is_empty() => {
                let r = evaluate_detector(m, t)?;
                (Some(r.r2), Some(r.rmse))
            }
            _ => (None, None),
        };
        Ok(EpochStats { epoch, train_loss, test_r2, test_rmse })
    };

    let mut curve = vec![evaluate(&current, 0)?];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let w: Vec<DMatrix<f64>> = chunk.iter().map(|&i| windows[i].clone()).collect();
            let l: Vec<&[f64]> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grad) = batch_loss_grad(&current, &w, &l);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, loss });
            }
            adam.step(&mut params, &grad);
            if cfg.enforce_nonneg {
                params[comb.clone()].iter_mut().for_each(|w| *w = w.max(0.0));
            }
            current = unflatten(&model, &params).map_err(|_| Error::Divergence { epoch, loss: f64::NAN })?;
        }
        let stats = evaluate(&current, epoch)?;
        debug!("epoch {epoch}: loss {:.6}", stats.train_loss);
        curve.push(stats);
    }
    info!(
        "trained {} for {} epochs: loss {:.5} -> {:.5}",
        current.arch(),
        cfg.epochs,
        curve[0].train_loss,
        curve.last().map_or(f64::NAN, |s| s.train_loss)
    );
    Ok(TrainOutcome { model: current, curve })
}

// --- evaluation ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub r2: f64,
    pub rmse: f64,
}

/// Squared Pearson correlation (0 when either side has no variance) and
/// root-mean-square error.
pub fn regression_metrics(pred: &[f64], target: &[f64]) -> Result<RegressionMetrics> {
    crate::error::check_dim("prediction", target.len(), pred.len())?;
    if pred.is_empty() {
        return Err(Error::invalid("prediction", "empty"));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let (mut spp, mut stt, mut spt, mut sse) = (0.0, 0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let (dp, dt) = (p - mp, t - mt);
        spp += dp * dp;
        stt += dt * dt;
        spt += dp * dt;
        sse += (p - t) * (p - t);
    }
    let r2 = if spp > 0.0 && stt > 0.0 { spt * spt / (spp * stt) } else { 0.0 };
    Ok(RegressionMetrics { r2, rmse: (sse / n).sqrt() })
}

/// Flattens predictions and targets over the whole split.
pub fn evaluate_detector(model: &CenModel, data: &PatchDataset) -> Result<RegressionMetrics> {
    if data.is_empty() {
        return Err(Error::invalid("dataset", "test split is empty"));
    }
    let preds: Vec<Vec<f64>> =
        data.samples.par_iter().map(|s| model.response_values(&s.roi).map(|(_, v)| v)).collect::<Result<_>>()?;
    let pred: Vec<f64> = preds.into_iter().flatten().collect();
    let target: Vec<f64> = data.samples.iter().flat_map(|s| s.label.iter().copied()).collect();
    regression_metrics(&pred, &target)
}

/// Paired test r² of the constrained and unconstrained detectors for one
/// seed; both runs share data and initialisation.
pub fn ablation_pair(cfg: &TrainConfig, arch: CenArch, train_count: usize, test_count: usize) -> Result<(f64, f64)> {
    let train = gen_synthetic_patches(cfg, train_count, Split::Train)?;
    let test = gen_synthetic_patches(cfg, test_count, Split::Test)?;
    let run = |nonneg: bool| -> Result<f64> {
        let c = TrainConfig { enforce_nonneg: nonneg, ..cfg.clone() };
        let out = train_cen(&train, None, &c, arch)?;
        Ok(evaluate_detector(&out.model, &test)?.r2)
    };
    Ok((run(true)?, run(false)?))
}

//! Convolutional experts network: inference from an image ROI to a
//! probabilistic response map.
//!
//! The network is a fixed four-stage chain applied at every 11×11 window of
//! the ROI:
//!
//! 1. Z-score normalization of the window followed by correlation with `c1`
//!    kernels (plus bias).
//! 2. A 1×1 layer of `c2` ReLU units.
//! 3. A 1×1 layer of `c3` sigmoid units, each one an expert's vote on
//!    alignment.
//! 4. A non-negative combination of the expert votes followed by a sigmoid.
//!
//! Internally the windows are gathered into a `121 × P` matrix so each stage
//! is a dense matrix product; the nested-loop definition in the tests is the
//! reference semantics.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{check_dim, Error, Result};
use crate::image::GrayImage;

pub const KERNEL_SIDE: usize = 11;
pub const KERNEL_LEN: usize = KERNEL_SIDE * KERNEL_SIDE;

/// Windows whose standard deviation falls below this are mapped to zero.
pub const ZNORM_EPS: f64 = 1e-8;

/// Channel counts of the three hidden stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CenArch {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
}

impl Default for CenArch {
    fn default() -> Self {
        Self { c1: 500, c2: 200, c3: 100 }
    }
}

impl CenArch {
    pub const fn new(c1: usize, c2: usize, c3: usize) -> Self {
        Self { c1, c2, c3 }
    }
}

impl fmt::Display for CenArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.c1, self.c2, self.c3)
    }
}

/// Parses `"16-8-6"`, `"16,8,6"` or `"16x8x6"`. A trailing output stage of
/// `1` (`"16-8-6-1"`) is accepted.
impl FromStr for CenArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(['-', ',', 'x'])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid("architecture", format!("cannot parse {s:?}")))?;
        let parts = match parts.as_slice() {
            [a, b, c] => [*a, *b, *c],
            [a, b, c, 1] => [*a, *b, *c],
            _ => return Err(Error::invalid("architecture", format!("expected three channel counts, got {s:?}"))),
        };
        if parts.contains(&0) {
            return Err(Error::invalid("architecture", "channel counts must be positive"));
        }
        Ok(CenArch::new(parts[0], parts[1], parts[2]))
    }
}

/// Which detector a network is: landmark, view yaw and scale (interocular
/// distance in pixels the detector was trained at).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CenMeta {
    pub landmark: usize,
    pub view_deg: i32,
    pub scale_px: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenModel {
    pub meta: CenMeta,
    /// `c1 × 121`, each row a kernel in row-major order.
    pub(crate) kernels: DMatrix<f64>,
    pub(crate) bias1: DVector<f64>,
    /// `c2 × c1`
    pub(crate) w2: DMatrix<f64>,
    pub(crate) bias2: DVector<f64>,
    /// `c3 × c2`
    pub(crate) w3: DMatrix<f64>,
    pub(crate) bias3: DVector<f64>,
    pub(crate) combiner: DVector<f64>,
    pub(crate) combiner_bias: f64,
}

/// Probabilistic response map over a square grid of candidate positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    side: usize,
    values: Vec<f64>,
    /// Image coordinates of the centre of cell (0, 0).
    pub origin: [f64; 2],
    /// Image pixels between neighbouring cells.
    pub step: f64,
}

impl ResponseMap {
    pub fn new(side: usize, values: Vec<f64>, origin: [f64; 2], step: f64) -> Result<Self> {
        check_dim("response map values", side * side, values.len())?;
        if side == 0 {
            return Err(Error::invalid("response map", "empty grid"));
        }
        if !(step > 0.0) {
            return Err(Error::invalid("response map", format!("step must be positive, got {step}")));
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("response map", format!("value {} at cell {i} outside [0, 1]", values[i])));
        }
        Ok(Self { side, values, origin, step })
    }

    /// Grid centred on `center` with `side` cells per axis.
    pub fn centered(side: usize, values: Vec<f64>, center: [f64; 2], step: f64) -> Result<Self> {
        let half = (side as f64 - 1.0) / 2.0 * step;
        Self::new(side, values, [center[0] - half, center[1] - half], step)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }

    /// Image coordinates of the centre of cell `(row, col)`.
    #[inline]
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [self.origin[0] + col as f64 * self.step, self.origin[1] + row as f64 * self.step]
    }

    pub fn center(&self) -> [f64; 2] {
        let half = (self.side as f64 - 1.0) / 2.0 * self.step;
        [self.origin[0] + half, self.origin[1] + half]
    }

    /// `(row, col)` of the largest value; the first one in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.side, best % self.side)
    }

    /// Bilinear interpolation at an image coordinate, clamped to the grid.
    pub fn value_at(&self, point: [f64; 2]) -> f64 {
        let last = (self.side - 1) as f64;
        let gx = ((point[0] - self.origin[0]) / self.step).clamp(0.0, last);
        let gy = ((point[1] - self.origin[1]) / self.step).clamp(0.0, last);
        let (c0, r0) = (gx.floor() as usize, gy.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(self.side - 1), (r0 + 1).min(self.side - 1));
        let (fx, fy) = (gx - c0 as f64, gy - r0 as f64);
        let top = self.get(r0, c0) * (1.0 - fx) + self.get(r0, c1) * fx;
        let bottom = self.get(r1, c0) * (1.0 - fx) + self.get(r1, c1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Same geometry with columns reversed.
    pub fn flip_horizontal(&self) -> Self {
        let n = self.side;
        let mut values = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in (0..n).rev() {
                values.push(self.get(r, c));
            }
        }
        Self { side: n, values, origin: self.origin, step: self.step }
    }
}

/// Where a square ROI is sampled from the image: centre, side length in
/// ROI pixels, and image pixels per ROI pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiPlacement {
    pub center: [f64; 2],
    pub size: usize,
    pub step: f64,
}

impl RoiPlacement {
    /// Side of the response grid produced from this ROI.
    pub fn response_side(&self) -> usize {
        self.size.saturating_sub(KERNEL_SIDE - 1)
    }

    /// Image coordinates of ROI pixel `(0, 0)`.
    pub fn roi_origin(&self) -> [f64; 2] {
        let half = (self.size as f64 - 1.0) / 2.0 * self.step;
        [self.center[0] - half, self.center[1] - half]
    }

    /// Image coordinates of response cell `(0, 0)`.
    pub fn response_origin(&self) -> [f64; 2] {
        let half = (self.response_side() as f64 - 1.0) / 2.0 * self.step;
        [self.center[0] - half, self.center[1] - half]
    }

    pub fn sample(&self, image: &GrayImage) -> GrayImage {
        image.sample_patch(self.center, self.size, self.step)
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Z-score normalized 11×11 windows of `roi`, one column per output pixel in
/// row-major order. Returns the matrix and the output side `n - 10`.
pub fn znorm_windows(roi: &GrayImage) -> Result<(DMatrix<f64>, usize)> {
    let n = roi.width();
    if roi.height() != n {
        return Err(Error::invalid("roi", format!("must be square, got {}×{}", n, roi.height())));
    }
    if n < KERNEL_SIDE {
        return Err(Error::invalid("roi", format!("side {n} is smaller than the {KERNEL_SIDE}×{KERNEL_SIDE} kernel")));
    }
    if roi.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("roi", "non-finite pixel"));
    }
    let side = n - KERNEL_SIDE + 1;
    let mut out = DMatrix::zeros(KERNEL_LEN, side * side);
    let mut window = [0.0; KERNEL_LEN];
    for r in 0..side {
        for c in 0..side {
            for dy in 0..KERNEL_SIDE {
                for dx in 0..KERNEL_SIDE {
                    window[dy * KERNEL_SIDE + dx] = roi.get(c + dx, r + dy);
                }
            }
            let mean = window.iter().sum::<f64>() / KERNEL_LEN as f64;
            let var = window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / KERNEL_LEN as f64;
            let std = var.sqrt();
            if std < ZNORM_EPS {
                continue;
            }
            let mut col = out.column_mut(r * side + c);
            for (k, v) in window.iter().enumerate() {
                col[k] = (v - mean) / std;
            }
        }
    }
    Ok((out, side))
}

/// Intermediate activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct Activations {
    pub windows: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    /// pre-ReLU of the second stage
    pub z2: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub a3: DMatrix<f64>,
    /// logits of the final sigmoid
    pub z4: DVector<f64>,
}

fn add_bias(mut m: DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    for mut col in m.column_iter_mut() {
        col += b;
    }
    m
}

impl CenModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        meta: CenMeta,
        kernels: DMatrix<f64>,
        bias1: DVector<f64>,
        w2: DMatrix<f64>,
        bias2: DVector<f64>,
        w3: DMatrix<f64>,
        bias3: DVector<f64>,
        combiner: DVector<f64>,
        combiner_bias: f64,
    ) -> Result<Self> {
        let model = Self { meta, kernels, bias1, w2, bias2, w3, bias3, combiner, combiner_bias };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c1 = self.kernels.nrows();
        let c2 = self.w2.nrows();
        let c3 = self.w3.nrows();
        if c1 == 0 || c2 == 0 || c3 == 0 {
            return Err(Error::invalid("cen", "every stage needs at least one channel"));
        }
        check_dim("cen kernel size", KERNEL_LEN, self.kernels.ncols())?;
        check_dim("cen layer-1 bias", c1, self.bias1.len())?;
        check_dim("cen layer-2 inputs", c1, self.w2.ncols())?;
        check_dim("cen layer-2 bias", c2, self.bias2.len())?;
        check_dim("cen layer-3 inputs", c2, self.w3.ncols())?;
        check_dim("cen layer-3 bias", c3, self.bias3.len())?;
        check_dim("cen combiner weights", c3, self.combiner.len())?;
        let all_finite = self
            .kernels
            .iter()
            .chain(self.bias1.iter())
            .chain(self.w2.iter())
            .chain(self.bias2.iter())
            .chain(self.w3.iter())
            .chain(self.bias3.iter())
            .chain(self.combiner.iter())
            .all(|v| v.is_finite())
            && self.combiner_bias.is_finite();
        if !all_finite {
            return Err(Error::invalid("cen", "non-finite weight"));
        }
        Ok(())
    }

    /// Checks the non-negative combiner constraint.
    pub fn check_nonnegative(&self) -> Result<()> {
        match self.combiner.iter().position(|&w| w < 0.0) {
            None => Ok(()),
            Some(i) => Err(Error::invalid("cen", format!("combiner.w[{i}] = {} is negative", self.combiner[i]))),
        }
    }

    /// Random initialization: scaled Gaussian weights and a non-negative
    /// combiner.
    pub fn random<R: Rng + ?Sized>(meta: CenMeta, arch: CenArch, rng: &mut R) -> Self {
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            DMatrix::from_fn(rows, cols, |_, _| {
                std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            })
        };
        let kernels = gauss(arch.c1, KERNEL_LEN, (1.0 / KERNEL_LEN as f64).sqrt());
        let w2 = gauss(arch.c2, arch.c1, (2.0 / arch.c1 as f64).sqrt());
        let w3 = gauss(arch.c3, arch.c2, (1.0 / arch.c2 as f64).sqrt());
        let unit = Uniform::new(0.0, 1.0).expect("valid range");
        let combiner = DVector::from_fn(arch.c3, |_, _| 2.0 * unit.sample(rng) / arch.c3 as f64);
        Self {
            meta,
            kernels,
            bias1: DVector::zeros(arch.c1),
            w2,
            bias2: DVector::from_element(arch.c2, 0.1),
            w3,
            bias3: DVector::zeros(arch.c3),
            combiner,
            combiner_bias: -2.0,
        }
    }

    pub fn arch(&self) -> CenArch {
        CenArch::new(self.kernels.nrows(), self.w2.nrows(), self.w3.nrows())
    }

    /// Kernel `k` as an 11×11 row-major array.
    pub fn kernel(&self, k: usize) -> Vec<f64> {
        self.kernels.row(k).iter().copied().collect()
    }

    pub fn bias1(&self) -> &DVector<f64> {
        &self.bias1
    }

    pub fn layer2(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.w2, &self.bias2)
    }

    pub fn layer3(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.w3, &self.bias3)
    }

    pub fn combiner(&self) -> (&DVector<f64>, f64) {
        (&self.combiner, self.combiner_bias)
    }

    pub fn combiner_mut(&mut self) -> (&mut DVector<f64>, &mut f64) {
        (&mut self.combiner, &mut self.combiner_bias)
    }

    /// First stage: `c1 × (n-10)²` feature map, one row per kernel, columns
    /// in row-major pixel order.
    pub fn znorm_correlate(&self, roi: &GrayImage) -> Result<DMatrix<f64>> {
        let (windows, _) = znorm_windows(roi)?;
        Ok(add_bias(&self.kernels * windows, &self.bias1))
    }

    pub(crate) fn forward_windows(&self, windows: DMatrix<f64>) -> Activations {
        let a1 = add_bias(&self.kernels * &windows, &self.bias1);
        let z2 = add_bias(&self.w2 * &a1, &self.bias2);
        let a2 = z2.map(|v| v.max(0.0));
        let a3 = add_bias(&self.w3 * &a2, &self.bias3).map(sigmoid);
        let z4 = a3.tr_mul(&self.combiner).add_scalar(self.combiner_bias);
        Activations { windows, a1, z2, a2, a3, z4 }
    }

    /// Per-pixel expert votes (`c3 × P`) and final probabilities.
    pub fn expert_outputs(&self, roi: &GrayImage) -> Result<(DMatrix<f64>, Vec<f64>)> {
        let (windows, _) = znorm_windows(roi)?;
        let act = self.forward_windows(windows);
        let probs = act.z4.iter().map(|&z| sigmoid(z)).collect();
        Ok((act.a3, probs))
    }

    /// Response values over the valid `(n-10)×(n-10)` grid, row-major.
    pub fn response_values(&self, roi: &GrayImage) -> Result<(usize, Vec<f64>)> {
        let (windows, side) = znorm_windows(roi)?;
        let act = self.forward_windows(windows);
        Ok((side, act.z4.iter().map(|&z| sigmoid(z)).collect()))
    }

    /// Response map for a ROI whose pixel `(0, 0)` sits at image coordinate
    /// `roi_origin`, with `step` image pixels per ROI pixel.
    pub fn response_map(&self, roi: &GrayImage, roi_origin: [f64; 2], step: f64) -> Result<ResponseMap> {
        let (side, values) = self.response_values(roi)?;
        let offset = (KERNEL_SIDE / 2) as f64 * step;
        ResponseMap::new(side, values, [roi_origin[0] + offset, roi_origin[1] + offset], step)
    }

    /// Detector for the horizontally mirrored appearance: running it on a ROI
    /// equals flipping the ROI, running `self`, and flipping the output back.
    pub fn mirrored(&self, landmark: usize) -> Self {
        let mut kernels = self.kernels.clone();
        for k in 0..kernels.nrows() {
            for y in 0..KERNEL_SIDE {
                for x in 0..KERNEL_SIDE {
                    kernels[(k, y * KERNEL_SIDE + x)] = self.kernels[(k, y * KERNEL_SIDE + KERNEL_SIDE - 1 - x)];
                }
            }
        }
        Self {
            meta: CenMeta { landmark, view_deg: -self.meta.view_deg, scale_px: self.meta.scale_px },
            kernels,
            ..self.clone()
        }
    }
}

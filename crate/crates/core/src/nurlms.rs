//! Non-uniform regularized landmark mean shift.
//!
//! Each iteration computes a mean-shift vector per landmark from its response
//! map, then solves the regularized, reliability-weighted least-squares
//! problem
//!
//! ```text
//! min_dp  r * ||p + dp||^2_{Lambda^-1}  +  ||J dp - v||^2_W
//! ```
//!
//! in closed form: `dp = (J'WJ + r L)^-1 (J'Wv - r L p)`, where `L` holds the
//! inverse eigenvalues on the non-rigid entries and zeros on the rigid ones.
//! Mean-shift vectors and the Jacobian are expressed in the detector's
//! working scale, so regularization strength does not depend on image size.

use log::{debug, trace};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cen::{ResponseMap, RoiPlacement};
use crate::error::{check_dim, Error, ErrorClass, Result};
use crate::image::GrayImage;
use crate::pdm::{BBox, LandmarkSet, PdmModel, PdmParams, RIGID_PARAMS};
use crate::rotation::yaw_of;

/// Floor applied to response values before taking logs in the MAP score.
const MIN_PROBABILITY: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NurlmsConfig {
    /// Kernel variance of the mean-shift KDE, in working-scale pixels².
    pub rho: f64,
    /// Weight of the shape prior.
    pub r: f64,
    /// Global weight on the mean-shift term.
    pub w_global: f64,
    /// Iteration cap per fitting stage.
    pub max_iters: usize,
    /// A stage ends once `||dp||` drops below this.
    pub convergence_tol: f64,
    /// ROI side per stage; stage `k` uses the `k`-th detector scale (or the
    /// largest available one).
    pub roi_schedule: Vec<usize>,
    /// Stop trying hypotheses once one reaches this per-landmark MAP score.
    /// `None` evaluates every hypothesis.
    pub accept_threshold: Option<f64>,
    /// Discard a hypothesis whose per-landmark MAP score drops below this
    /// between stages.
    pub reject_threshold: Option<f64>,
    /// Adds ±55° and ±90° yaw initializations.
    pub extended_yaw: bool,
    /// Per-landmark score margin a later hypothesis needs to displace an
    /// earlier one.
    pub score_tie_tol: f64,
}

impl Default for NurlmsConfig {
    fn default() -> Self {
        Self {
            rho: 1.85 * 1.85,
            r: 32.0,
            w_global: 2.5,
            max_iters: 10,
            convergence_tol: 1e-3,
            roi_schedule: vec![25, 23, 21, 21],
            accept_threshold: Some(-5.0),
            reject_threshold: Some(-15.0),
            extended_yaw: false,
            score_tie_tol: 1e-3,
        }
    }
}

impl NurlmsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("fit config", reason));
        if !(self.rho > 0.0) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.r >= 0.0) {
            return bad(format!("r must be non-negative, got {}", self.r));
        }
        if !(self.w_global > 0.0) {
            return bad(format!("w_global must be positive, got {}", self.w_global));
        }
        if self.roi_schedule.is_empty() {
            return bad("roi_schedule is empty".into());
        }
        if let Some(&s) = self.roi_schedule.iter().find(|&&s| s < crate::cen::KERNEL_SIDE) {
            return bad(format!("roi size {s} is smaller than the detector kernel"));
        }
        if !(self.convergence_tol >= 0.0) || !(self.score_tie_tol >= 0.0) {
            return bad("tolerances must be non-negative".into());
        }
        Ok(())
    }
}

/// Per-landmark detector reliabilities `c_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkReliability {
    c: Vec<f64>,
}

impl LandmarkReliability {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        if let Some(i) = c.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("reliability", format!("c[{i}] = {} is not positive", c[i])));
        }
        Ok(Self { c })
    }

    pub fn uniform(n: usize) -> Self {
        Self { c: vec![1.0; n] }
    }

    pub fn values(&self) -> &[f64] {
        &self.c
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }
}

/// Source of response maps. Implemented by detector banks and by the oracle
/// detector of the synthetic harness.
pub trait LocalDetector: Sync {
    /// Available detector scales (interocular distance, pixels), ascending.
    fn scales_px(&self) -> Vec<f64>;

    /// Yaw angles (degrees) of the available views, including mirrored ones.
    fn views_deg(&self) -> Vec<f64>;

    fn response(
        &self,
        image: &GrayImage,
        landmark: usize,
        view_deg: f64,
        scale_px: f64,
        roi: &RoiPlacement,
    ) -> Result<ResponseMap>;

    /// Checks that every landmark resolves to a detector for every stage of
    /// `cfg` and every view.
    fn validate_for(&self, _n_landmarks: usize, _cfg: &NurlmsConfig) -> Result<()> {
        Ok(())
    }
}

/// Gaussian-KDE mean shift: the kernel-weighted mean of the response grid's
/// cell centres, minus `current`. Distances are measured in grid cells, so
/// `rho` is in working-scale pixels². The result is in image pixels.
pub fn mean_shift(rmap: &ResponseMap, current: [f64; 2], rho: f64) -> Result<[f64; 2]> {
    if !(rho > 0.0) {
        return Err(Error::invalid("mean shift", format!("rho must be positive, got {rho}")));
    }
    let n = rmap.side();
    let inv_step = 1.0 / rmap.step;
    // offsets of every cell from the current point, in grid units
    let mut max_log = f64::NEG_INFINITY;
    let mut logs = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let y = rmap.cell_center(r, c);
            let dx = (y[0] - current[0]) * inv_step;
            let dy = (y[1] - current[1]) * inv_step;
            let lk = -(dx * dx + dy * dy) / (2.0 * rho);
            if rmap.get(r, c) > 0.0 {
                max_log = max_log.max(lk);
            }
            logs.push((lk, dx, dy));
        }
    }
    if !max_log.is_finite() {
        return Err(Error::DegenerateResponse);
    }
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (pi, (lk, dx, dy)) in rmap.values().iter().zip(logs) {
        let w = pi * (lk - max_log).exp();
        sw += w;
        sx += w * dx;
        sy += w * dy;
    }
    if !(sw > 0.0) || !sw.is_finite() {
        return Err(Error::DegenerateResponse);
    }
    Ok([sx / sw * rmap.step, sy / sw * rmap.step])
}

/// One regularized, reliability-weighted update. `v` stacks the mean-shift
/// vectors as `[x_0, y_0, x_1, y_1, ...]` in image pixels.
pub fn update_step(
    model: &PdmModel,
    params: &PdmParams,
    v: &DVector<f64>,
    reliab: &LandmarkReliability,
    visible: &[bool],
    cfg: &NurlmsConfig,
) -> Result<DVector<f64>> {
    update_step_scaled(model, params, v, reliab, visible, cfg, 1.0)
}

/// [`update_step`] with image displacements rescaled by `working_scale`
/// (working pixels per image pixel) before weighting.
pub fn update_step_scaled(
    model: &PdmModel,
    params: &PdmParams,
    v: &DVector<f64>,
    reliab: &LandmarkReliability,
    visible: &[bool],
    cfg: &NurlmsConfig,
    working_scale: f64,
) -> Result<DVector<f64>> {
    let n = model.n_landmarks();
    check_dim("mean-shift vector", 2 * n, v.len())?;
    check_dim("reliability", n, reliab.len())?;
    check_dim("visibility", n, visible.len())?;
    let jac = model.jacobian(params)?;
    let k = jac.ncols();

    let data_scale = working_scale * working_scale;
    let weights = DVector::from_fn(2 * n, |row, _| {
        let i = row / 2;
        if visible[i] {
            data_scale * cfg.w_global * reliab.values()[i]
        } else {
            0.0
        }
    });
    let mut jtw = jac.transpose();
    for (mut col, w) in jtw.column_iter_mut().zip(weights.iter()) {
        col *= *w;
    }
    let mut normal = &jtw * &jac;
    let mut rhs = &jtw * v;
    let p = params.to_vector();
    for j in RIGID_PARAMS..k {
        let prec = cfg.r / model.eigenvalues()[j - RIGID_PARAMS];
        normal[(j, j)] += prec;
        rhs[j] -= prec * p[j];
    }
    solve_normal_equations(normal, rhs)
}

/// Solves the symmetric PSD system. Parameters with neither data nor prior
/// (an all-zero row) are held fixed at zero; the rest must be positive
/// definite.
fn solve_normal_equations(normal: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    let k = normal.nrows();
    let active: Vec<usize> = (0..k).filter(|&j| normal.row(j).iter().any(|&v| v != 0.0) || rhs[j] != 0.0).collect();
    let mut delta = DVector::zeros(k);
    if active.is_empty() {
        return Ok(delta);
    }
    let a = DMatrix::from_fn(active.len(), active.len(), |r, c| normal[(active[r], active[c])]);
    let b = DVector::from_fn(active.len(), |r, _| rhs[active[r]]);
    let max_diag = a.diagonal().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let chol = a.cholesky().ok_or(Error::SingularSystem)?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, &v| m.min(v * v));
    if !(min_pivot > 1e-13 * max_diag) {
        return Err(Error::SingularSystem);
    }
    let x = chol.solve(&b);
    for (r, &j) in active.iter().enumerate() {
        delta[j] = x[r];
    }
    Ok(delta)
}

/// Index of the view whose yaw is nearest to the current global yaw; ties
/// go to the smaller absolute yaw.
pub fn select_view(views_deg: &[f64], current_rotation: [f64; 3]) -> usize {
    let yaw = yaw_of(current_rotation).to_degrees();
    let mut best = 0;
    for (i, &v) in views_deg.iter().enumerate().skip(1) {
        let d = (v - yaw).abs();
        let bd = (views_deg[best] - yaw).abs();
        if d < bd - 1e-9 || ((d - bd).abs() <= 1e-9 && v.abs() < views_deg[best].abs()) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub roi: usize,
    pub scale_px: f64,
    pub view_deg: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: PdmParams,
    pub landmarks: LandmarkSet,
    /// Sum of log response at the final positions minus `r` times the shape
    /// prior penalty.
    pub map_score: f64,
    pub stages: Vec<StageReport>,
    /// Index of the winning initialization, for multi-hypothesis fits.
    pub hypothesis: Option<usize>,
    pub hypotheses_started: usize,
    pub hypotheses_completed: usize,
    pub low_confidence: bool,
}

impl FitResult {
    pub fn iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }

    pub fn visible_count(&self) -> usize {
        self.landmarks.visibility.iter().filter(|&&v| v).count()
    }

    /// MAP score per visible landmark, the quantity compared against the
    /// accept/reject thresholds.
    pub fn score_per_landmark(&self) -> f64 {
        self.map_score / self.visible_count().max(1) as f64
    }
}

enum Outcome {
    Completed(FitResult),
    Rejected(FitResult),
}

/// Fits from `init` through every stage of `cfg.roi_schedule`.
pub fn fit(
    model: &PdmModel,
    detector: &dyn LocalDetector,
    image: &GrayImage,
    init: &PdmParams,
    cfg: &NurlmsConfig,
    reliab: &LandmarkReliability,
) -> Result<FitResult> {
    cfg.validate()?;
    detector.validate_for(model.n_landmarks(), cfg)?;
    match fit_impl(model, detector, image, init, cfg, reliab, None)? {
        Outcome::Completed(r) | Outcome::Rejected(r) => Ok(r),
    }
}

#[allow(clippy::too_many_arguments)]
fn fit_impl(
    model: &PdmModel,
    detector: &dyn LocalDetector,
    image: &GrayImage,
    init: &PdmParams,
    cfg: &NurlmsConfig,
    reliab: &LandmarkReliability,
    reject_below: Option<f64>,
) -> Result<Outcome> {
    init.validate(model)?;
    check_dim("reliability", model.n_landmarks(), reliab.len())?;
    let scales = detector.scales_px();
    let views = detector.views_deg();
    if scales.is_empty() || views.is_empty() {
        return Err(Error::invalid("detector", "no scales or views available"));
    }
    let n = model.n_landmarks();
    let reference = model.reference_length();
    let mut params = init.clone();
    let mut stages = Vec::with_capacity(cfg.roi_schedule.len());
    let mut maps: Vec<Option<ResponseMap>> = Vec::new();
    let mut visible = vec![true; n];

    for (stage, &roi) in cfg.roi_schedule.iter().enumerate() {
        let scale_px = scales[stage.min(scales.len() - 1)];
        let view_deg = views[select_view(&views, params.rotation)];
        let working_scale = scale_px / (params.scale * reference);
        let step = 1.0 / working_scale;
        visible = model.visibility(&params)?;
        let shape = model.shape_from_params(&params)?;
        maps = (0..n)
            .into_par_iter()
            .map(|i| {
                if !visible[i] {
                    return Ok(None);
                }
                let placement = RoiPlacement { center: shape.points[i], size: roi, step };
                detector.response(image, i, view_deg, scale_px, &placement).map(Some)
            })
            .collect::<Result<_>>()?;

        let mut iterations = 0;
        let mut converged = false;
        while iterations < cfg.max_iters {
            let shape = model.shape_from_params(&params)?;
            let mut v = DVector::zeros(2 * n);
            for (i, map) in maps.iter().enumerate() {
                let Some(map) = map else { continue };
                match mean_shift(map, shape.points[i], cfg.rho) {
                    Ok(d) => {
                        v[2 * i] = d[0];
                        v[2 * i + 1] = d[1];
                    }
                    Err(Error::DegenerateResponse) => {}
                    Err(e) => return Err(e),
                }
            }
            let delta = update_step_scaled(model, &params, &v, reliab, &visible, cfg, working_scale)?;
            params = params.apply_update(&delta)?;
            iterations += 1;
            let norm = delta.norm();
            trace!("stage {stage} iter {iterations}: |dp| = {norm:e}");
            if norm < cfg.convergence_tol {
                converged = true;
                break;
            }
        }
        debug!("stage {stage}: roi {roi}, scale {scale_px}, view {view_deg}, {iterations} iterations");
        stages.push(StageReport { roi, scale_px, view_deg, iterations, converged });

        if stage + 1 < cfg.roi_schedule.len() {
            if let Some(threshold) = reject_below {
                let partial = assemble(model, &params, &maps, &visible, cfg, stages.clone())?;
                if partial.score_per_landmark() < threshold {
                    debug!("hypothesis rejected after stage {stage}: {}", partial.score_per_landmark());
                    return Ok(Outcome::Rejected(partial));
                }
            }
        }
    }
    Ok(Outcome::Completed(assemble(model, &params, &maps, &visible, cfg, stages)?))
}

fn assemble(
    model: &PdmModel,
    params: &PdmParams,
    maps: &[Option<ResponseMap>],
    visible: &[bool],
    cfg: &NurlmsConfig,
    stages: Vec<StageReport>,
) -> Result<FitResult> {
    let mut landmarks = model.shape_from_params(params)?;
    landmarks.visibility = visible.to_vec();
    let log_prob: f64 = maps
        .iter()
        .zip(&landmarks.points)
        .filter_map(|(m, p)| m.as_ref().map(|m| m.value_at(*p).max(MIN_PROBABILITY).ln()))
        .sum();
    let map_score = log_prob - cfg.r * model.regularization(params)?;
    Ok(FitResult {
        params: params.clone(),
        landmarks,
        map_score,
        stages,
        hypothesis: None,
        hypotheses_started: 1,
        hypotheses_completed: 1,
        low_confidence: false,
    })
}

/// Initial orientations tried from a bounding box, in evaluation order:
/// frontal, ±30° yaw, ±30° pitch, ±30° roll, then optionally ±55° and ±90°
/// yaw.
pub fn hypothesis_orientations(extended_yaw: bool) -> Vec<[f64; 3]> {
    let d = |deg: f64| deg.to_radians();
    let mut out = vec![
        [0.0, 0.0, 0.0],
        [0.0, d(30.0), 0.0],
        [0.0, d(-30.0), 0.0],
        [d(30.0), 0.0, 0.0],
        [d(-30.0), 0.0, 0.0],
        [0.0, 0.0, d(30.0)],
        [0.0, 0.0, d(-30.0)],
    ];
    if extended_yaw {
        for deg in [55.0, -55.0, 90.0, -90.0] {
            out.push([0.0, d(deg), 0.0]);
        }
    }
    out
}

/// Fits from every initial orientation of [`hypothesis_orientations`] and
/// keeps the best-scoring result.
///
/// With an `accept_threshold`, hypotheses run in order and the first whose
/// per-landmark MAP score reaches it is returned immediately. Without one,
/// all hypotheses run (concurrently) and the highest score wins, earlier
/// hypotheses winning ties within `score_tie_tol`. Hypotheses falling below
/// `reject_threshold` between stages are discarded; if every hypothesis is
/// discarded the best discarded one is returned flagged `low_confidence`.
pub fn multi_hypothesis_fit(
    model: &PdmModel,
    detector: &dyn LocalDetector,
    image: &GrayImage,
    bbox: &BBox,
    cfg: &NurlmsConfig,
    reliab: &LandmarkReliability,
) -> Result<FitResult> {
    cfg.validate()?;
    detector.validate_for(model.n_landmarks(), cfg)?;
    let orientations = hypothesis_orientations(cfg.extended_yaw);
    let inits = orientations.iter().map(|o| model.init_from_bbox(bbox, *o)).collect::<Result<Vec<_>>>()?;

    let run = |init: &PdmParams| match fit_impl(model, detector, image, init, cfg, reliab, cfg.reject_threshold) {
        Err(e) if e.class() == ErrorClass::Numerical => {
            debug!("hypothesis failed: {e}");
            Ok(None)
        }
        other => other.map(Some),
    };

    let mut outcomes: Vec<(usize, Outcome)> = Vec::new();
    let mut started = 0;
    match cfg.accept_threshold {
        Some(accept) => {
            for (h, init) in inits.iter().enumerate() {
                started += 1;
                let Some(outcome) = run(init)? else { continue };
                let accepted = matches!(&outcome, Outcome::Completed(r) if r.score_per_landmark() >= accept);
                outcomes.push((h, outcome));
                if accepted {
                    break;
                }
            }
        }
        None => {
            started = inits.len();
            let all: Vec<Option<Outcome>> = inits.par_iter().map(run).collect::<Result<_>>()?;
            outcomes = all.into_iter().enumerate().filter_map(|(h, o)| o.map(|o| (h, o))).collect();
        }
    }

    let completed = outcomes.iter().filter(|(_, o)| matches!(o, Outcome::Completed(_))).count();
    let pick = |want_completed: bool| {
        let mut best: Option<(usize, &FitResult)> = None;
        for (h, o) in &outcomes {
            let r = match (o, want_completed) {
                (Outcome::Completed(r), true) | (Outcome::Rejected(r), false) => r,
                _ => continue,
            };
            let better = match best {
                None => true,
                Some((_, b)) => r.score_per_landmark() > b.score_per_landmark() + cfg.score_tie_tol,
            };
            if better {
                best = Some((*h, r));
            }
        }
        best.map(|(h, r)| (h, r.clone()))
    };
    let (h, mut result, low_confidence) = match pick(true) {
        Some((h, r)) => (h, r, false),
        None => match pick(false) {
            Some((h, r)) => (h, r, true),
            None => return Err(Error::Numerical("every hypothesis failed numerically".into())),
        },
    };
    result.hypothesis = Some(h);
    result.hypotheses_started = started;
    result.hypotheses_completed = completed;
    result.low_confidence = low_confidence;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_map(side: usize, center: [f64; 2], step: f64) -> ResponseMap {
        ResponseMap::centered(side, vec![0.3; side * side], center, step).unwrap()
    }

    #[test]
    fn mean_shift_is_zero_on_symmetric_map() {
        let map = uniform_map(11, [40.0, 30.0], 1.5);
        let v = mean_shift(&map, [40.0, 30.0], 1.85 * 1.85).unwrap();
        assert!(v[0].abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    fn mean_shift_single_cell_points_at_it() {
        let mut vals = vec![0.0; 49];
        vals[2 * 7 + 5] = 0.8;
        let map = ResponseMap::centered(7, vals, [10.0, 10.0], 2.0).unwrap();
        let target = map.cell_center(2, 5);
        let current = [9.3, 11.1];
        let v = mean_shift(&map, current, 3.0).unwrap();
        assert_relative_eq!(v[0], target[0] - current[0], epsilon = 1e-12);
        assert_relative_eq!(v[1], target[1] - current[1], epsilon = 1e-12);
    }

    #[test]
    fn mean_shift_degenerate_and_bad_rho() {
        let map = ResponseMap::centered(5, vec![0.0; 25], [0.0, 0.0], 1.0).unwrap();
        assert!(matches!(mean_shift(&map, [0.0, 0.0], 1.0), Err(Error::DegenerateResponse)));
        let map = uniform_map(5, [0.0, 0.0], 1.0);
        assert!(mean_shift(&map, [0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn mean_shift_far_from_grid_does_not_underflow() {
        let mut vals = vec![0.0; 25];
        vals[0] = 1.0;
        vals[24] = 1.0;
        let map = ResponseMap::centered(5, vals, [0.0, 0.0], 1.0).unwrap();
        let v = mean_shift(&map, [500.0, 500.0], 1.0).unwrap();
        assert_relative_eq!(v[0], 2.0 - 500.0, epsilon = 1e-9);
    }

    #[test]
    fn view_selection_examples() {
        let views = [-70.0, -45.0, -20.0, 0.0, 20.0, 45.0, 70.0];
        assert_eq!(views[select_view(&views, [0.0; 3])], 0.0);
        assert_eq!(views[select_view(&views, [0.0, 0.9, 0.0])], 45.0);
        assert_eq!(views[select_view(&views, [0.0, -0.9, 0.0])], -45.0);
        // halfway between 0 and 20 goes to 0
        assert_eq!(views[select_view(&views, [0.0, 10f64.to_radians(), 0.0])], 0.0);
        assert_eq!(views[select_view(&views, [0.0, -10f64.to_radians(), 0.0])], 0.0);
    }

    #[test]
    fn prior_only_update_pulls_shape_to_mode() {
        let model = PdmModel::synthetic(6, 3, 1).unwrap();
        let mut p = PdmParams::rigid(3, 50.0, [100.0, 90.0], [0.1, 0.2, -0.1]);
        p.nonrigid = vec![0.2, -0.1, 0.05];
        let v = DVector::from_fn(12, |i, _| i as f64 - 5.0);
        let cfg = NurlmsConfig::default();
        let dp = update_step(&model, &p, &v, &LandmarkReliability::uniform(6), &[false; 6], &cfg).unwrap();
        for j in 0..6 {
            assert_eq!(dp[j], 0.0);
        }
        for j in 0..3 {
            assert_relative_eq!(dp[6 + j], -p.nonrigid[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn unregularized_square_system_reproduces_v() {
        let model = PdmModel::synthetic(4, 2, 5).unwrap();
        let p = PdmParams {
            scale: 1.3,
            translation: [2.0, -1.0],
            rotation: [0.1, -0.2, 0.15],
            nonrigid: vec![0.05, -0.02],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        let cfg = NurlmsConfig { r: 0.0, ..Default::default() };
        let dp = update_step(&model, &p, &v, &LandmarkReliability::uniform(4), &[true; 4], &cfg).unwrap();
        let j = model.jacobian(&p).unwrap();
        assert!((j * dp - &v).amax() < 1e-8);
    }

    #[test]
    fn rank_deficient_unregularized_system_is_singular() {
        let model = PdmModel::synthetic(3, 2, 5).unwrap();
        let p = PdmParams::rigid(2, 1.0, [0.0, 0.0], [0.0; 3]);
        let v = DVector::from_element(6, 0.5);
        let cfg = NurlmsConfig { r: 0.0, ..Default::default() };
        let res = update_step(&model, &p, &v, &LandmarkReliability::uniform(3), &[true; 3], &cfg);
        assert!(matches!(res, Err(Error::SingularSystem)));
    }

    #[test]
    fn equal_reliabilities_reduce_to_unweighted_rlms() {
        let model = PdmModel::synthetic(10, 4, 8).unwrap();
        let mut p = PdmParams::rigid(4, 1.2, [0.3, -0.2], [0.05, 0.3, 0.0]);
        p.nonrigid = vec![0.1, 0.0, -0.2, 0.05];
        let v = DVector::from_fn(20, |i, _| 0.1 * (((i * 7) % 5) as f64 - 2.0));
        let cfg = NurlmsConfig { r: 0.0, ..Default::default() };
        let c = LandmarkReliability::new(vec![0.7; 10]).unwrap();
        let dp = update_step(&model, &p, &v, &c, &[true; 10], &cfg).unwrap();
        // (w c J'J) dp = w c J'v, with W = w c I
        let j = model.jacobian(&p).unwrap();
        let wc = cfg.w_global * 0.7;
        let expect = (j.transpose() * &j * wc).lu().solve(&(j.transpose() * &v * wc)).unwrap();
        let err = (dp - expect).amax();
        assert!(err < 1e-12, "max difference {err:e}");
    }

    #[test]
    fn config_validation() {
        assert!(NurlmsConfig::default().validate().is_ok());
        let bad = NurlmsConfig { rho: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = NurlmsConfig { roi_schedule: vec![], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = NurlmsConfig { roi_schedule: vec![9], ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(LandmarkReliability::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn config_json_uses_defaults_for_missing_fields() {
        let cfg: NurlmsConfig = serde_json::from_str(r#"{"r": 10.0, "accept_threshold": null}"#).unwrap();
        assert_eq!(cfg.r, 10.0);
        assert_eq!(cfg.accept_threshold, None);
        assert_eq!(cfg.roi_schedule, vec![25, 23, 21, 21]);
        assert!(serde_json::from_str::<NurlmsConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn seven_default_hypotheses() {
        assert_eq!(hypothesis_orientations(false).len(), 7);
        assert_eq!(hypothesis_orientations(true).len(), 11);
        assert_eq!(hypothesis_orientations(false)[0], [0.0; 3]);
    }
}

//! 3D point distribution model.
//!
//! A landmark is placed at `s * R2d * (mean_i + Phi_i q) + t`, where `R2d` is
//! the top two rows of the rotation given by axis angles `w`. Parameters are
//! ordered `[s, tx, ty, wx, wy, wz, q_1..q_m]` wherever they appear as a flat
//! vector (Jacobian columns, update steps).

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rotation::{exp_map, log_map};

/// Number of rigid parameters (scale, 2 translation, 3 rotation).
pub const RIGID_PARAMS: usize = 6;

const ORTHONORMAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PdmModel {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eye_corners: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdmParams {
    pub scale: f64,
    pub translation: [f64; 2],
    pub rotation: [f64; 3],
    pub nonrigid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
}

/// Axis-aligned box in image pixels; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn center(&self) -> [f64; 2] {
        [self.x + self.width / 2.0, self.y + self.height / 2.0]
    }

    /// Smallest box containing `points`; `None` for an empty iterator.
    pub fn enclosing<'a>(points: impl IntoIterator<Item = &'a [f64; 2]>) -> Option<BBox> {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        let mut any = false;
        for p in points {
            any = true;
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        any.then(|| BBox { x: lo[0], y: lo[1], width: hi[0] - lo[0], height: hi[1] - lo[1] })
    }
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>, visibility: Vec<bool>) -> Result<Self> {
        check_dim("landmark visibility", points.len(), visibility.len())?;
        Ok(Self { points, visibility })
    }

    pub fn all_visible(points: Vec<[f64; 2]>) -> Self {
        let visibility = vec![true; points.len()];
        Self { points, visibility }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bbox(&self) -> Option<BBox> {
        BBox::enclosing(self.points.iter())
    }

    pub fn visible_bbox(&self) -> Option<BBox> {
        BBox::enclosing(self.points.iter().zip(&self.visibility).filter(|(_, &v)| v).map(|(p, _)| p))
    }
}

impl PdmParams {
    /// Rigid-only parameters (`q = 0`) for a model with `n_modes` modes.
    pub fn rigid(n_modes: usize, scale: f64, translation: [f64; 2], rotation: [f64; 3]) -> Self {
        Self { scale, translation, rotation, nonrigid: vec![0.0; n_modes] }
    }

    pub fn len(&self) -> usize {
        RIGID_PARAMS + self.nonrigid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.len());
        v[0] = self.scale;
        v[1] = self.translation[0];
        v[2] = self.translation[1];
        v[3] = self.rotation[0];
        v[4] = self.rotation[1];
        v[5] = self.rotation[2];
        for (j, q) in self.nonrigid.iter().enumerate() {
            v[RIGID_PARAMS + j] = *q;
        }
        v
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        exp_map(self.rotation)
    }

    /// Applies an additive update to scale, translation and shape, and
    /// composes the rotation increment on the left of the current rotation.
    pub fn apply_update(&self, delta: &DVector<f64>) -> Result<PdmParams> {
        check_dim("parameter update", self.len(), delta.len())?;
        if delta.iter().any(|d| !d.is_finite()) {
            return Err(Error::Numerical("non-finite parameter update".into()));
        }
        let scale = self.scale + delta[0];
        if scale <= 0.0 {
            return Err(Error::Numerical(format!("scale collapsed to {scale}")));
        }
        let rot = exp_map([delta[3], delta[4], delta[5]]) * self.rotation_matrix();
        Ok(PdmParams {
            scale,
            translation: [self.translation[0] + delta[1], self.translation[1] + delta[2]],
            rotation: log_map(&rot),
            nonrigid: self.nonrigid.iter().enumerate().map(|(j, q)| q + delta[RIGID_PARAMS + j]).collect(),
        })
    }

    pub fn validate(&self, model: &PdmModel) -> Result<()> {
        check_dim("nonrigid parameters", model.n_modes(), self.nonrigid.len())?;
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::invalid("params", format!("scale must be positive, got {}", self.scale)));
        }
        let all = self.translation.iter().chain(&self.rotation).chain(&self.nonrigid);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("params", "non-finite entry"));
        }
        Ok(())
    }
}

impl PdmModel {
    pub fn new(
        mean: DVector<f64>,
        basis: DMatrix<f64>,
        eigenvalues: DVector<f64>,
        eye_corners: Option<[usize; 2]>,
    ) -> Result<Self> {
        if !mean.len().is_multiple_of(3) || mean.is_empty() {
            return Err(Error::invalid("pdm", format!("mean length {} is not a positive multiple of 3", mean.len())));
        }
        check_dim("pdm basis rows", mean.len(), basis.nrows())?;
        check_dim("pdm eigenvalues", basis.ncols(), eigenvalues.len())?;
        if let Some(j) = eigenvalues.iter().position(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::invalid(
                "pdm",
                format!("eigenvalues[{j}] = {} is not strictly positive", eigenvalues[j]),
            ));
        }
        if mean.iter().chain(basis.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("pdm", "non-finite mean or basis entry"));
        }
        let gram = basis.transpose() * &basis;
        let m = basis.ncols();
        let deviation = (gram - DMatrix::<f64>::identity(m, m)).abs().max();
        if m > 0 && deviation > ORTHONORMAL_TOL {
            return Err(Error::invalid(
                "pdm",
                format!("basis columns are not orthonormal (max deviation {deviation:e})"),
            ));
        }
        let n = mean.len() / 3;
        if let Some([a, b]) = eye_corners {
            if a >= n || b >= n || a == b {
                return Err(Error::invalid("pdm", format!("eye corner indices {a}, {b} invalid for {n} landmarks")));
            }
        }
        Ok(Self { mean, basis, eigenvalues, eye_corners })
    }

    pub fn n_landmarks(&self) -> usize {
        self.mean.len() / 3
    }

    pub fn n_modes(&self) -> usize {
        self.basis.ncols()
    }

    pub fn n_params(&self) -> usize {
        RIGID_PARAMS + self.n_modes()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eye_corners(&self) -> Option<[usize; 2]> {
        self.eye_corners
    }

    pub fn mean_point(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.mean[3 * i], self.mean[3 * i + 1], self.mean[3 * i + 2])
    }

    /// Distance between the outer eye corners of the mean shape in the image
    /// plane. Without configured eye corners, the mean of the frontal
    /// bounding-box width and height stands in.
    pub fn reference_length(&self) -> f64 {
        match self.eye_corners {
            Some([a, b]) => {
                let d = self.mean_point(a) - self.mean_point(b);
                d.x.hypot(d.y)
            }
            None => {
                let pts: Vec<[f64; 2]> = (0..self.n_landmarks())
                    .map(|i| {
                        let p = self.mean_point(i);
                        [p.x, p.y]
                    })
                    .collect();
                let bb = BBox::enclosing(pts.iter()).expect("non-empty model");
                (bb.width + bb.height) / 2.0
            }
        }
    }

    /// 3D landmark positions `mean_i + Phi_i q` before the rigid transform.
    pub fn deformed_shape(&self, q: &[f64]) -> Result<Vec<Vector3<f64>>> {
        check_dim("nonrigid parameters", self.n_modes(), q.len())?;
        let q = DVector::from_column_slice(q);
        let flat = &self.mean + &self.basis * q;
        Ok((0..self.n_landmarks()).map(|i| Vector3::new(flat[3 * i], flat[3 * i + 1], flat[3 * i + 2])).collect())
    }

    /// Rotated (not yet scaled or translated) 3D points `R (mean_i + Phi_i q)`.
    fn rotated_shape(&self, params: &PdmParams) -> Result<Vec<Vector3<f64>>> {
        let rot = params.rotation_matrix();
        Ok(self.deformed_shape(&params.nonrigid)?.into_iter().map(|p| rot * p).collect())
    }

    pub fn shape_from_params(&self, params: &PdmParams) -> Result<LandmarkSet> {
        let s = params.scale;
        let [tx, ty] = params.translation;
        let points = self.rotated_shape(params)?.into_iter().map(|p| [s * p.x + tx, s * p.y + ty]).collect();
        Ok(LandmarkSet::all_visible(points))
    }

    /// Self-occlusion mask. Each landmark's outward direction is taken from a
    /// head centre placed behind the mean face; a landmark is visible while
    /// that direction, after rotation, still has a component towards the
    /// camera.
    pub fn visibility(&self, params: &PdmParams) -> Result<Vec<bool>> {
        let center = self.head_center();
        let rot = params.rotation_matrix();
        Ok(self.deformed_shape(&params.nonrigid)?.into_iter().map(|p| (rot * (p - center)).z > 0.0).collect())
    }

    fn head_center(&self) -> Vector3<f64> {
        let n = self.n_landmarks();
        let mut c = Vector3::zeros();
        let (mut xmin, mut xmax, mut zmin) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..n {
            let p = self.mean_point(i);
            c += p;
            xmin = xmin.min(p.x);
            xmax = xmax.max(p.x);
            zmin = zmin.min(p.z);
        }
        c /= n as f64;
        Vector3::new(c.x, c.y, zmin - 0.5 * (xmax - xmin))
    }

    /// Jacobian of the stacked landmark coordinates `[x_0, y_0, x_1, ...]`
    /// with respect to the parameters. Rotation columns linearize an
    /// incremental rotation composed on the left of the current one.
    pub fn jacobian(&self, params: &PdmParams) -> Result<DMatrix<f64>> {
        let n = self.n_landmarks();
        let m = self.n_modes();
        let s = params.scale;
        let rot = params.rotation_matrix();
        let rotated = self.rotated_shape(params)?;
        // rows 0 and 1 of R Phi_i, per landmark
        let mut jac = DMatrix::zeros(2 * n, RIGID_PARAMS + m);
        for (i, p) in rotated.iter().enumerate() {
            let (rx, ry) = (2 * i, 2 * i + 1);
            jac[(rx, 0)] = p.x;
            jac[(ry, 0)] = p.y;
            jac[(rx, 1)] = 1.0;
            jac[(ry, 2)] = 1.0;
            // d(R(dw) P)/d(dw) = -[P]x
            jac[(rx, 3)] = 0.0;
            jac[(rx, 4)] = s * p.z;
            jac[(rx, 5)] = -s * p.y;
            jac[(ry, 3)] = -s * p.z;
            jac[(ry, 4)] = 0.0;
            jac[(ry, 5)] = s * p.x;
            for j in 0..m {
                let phi = Vector3::new(self.basis[(3 * i, j)], self.basis[(3 * i + 1, j)], self.basis[(3 * i + 2, j)]);
                let d = rot * phi;
                jac[(rx, RIGID_PARAMS + j)] = s * d.x;
                jac[(ry, RIGID_PARAMS + j)] = s * d.y;
            }
        }
        Ok(jac)
    }

    /// Mahalanobis norm of the non-rigid parameters under the eigenvalue prior.
    pub fn regularization(&self, params: &PdmParams) -> Result<f64> {
        check_dim("nonrigid parameters", self.n_modes(), params.nonrigid.len())?;
        Ok(params.nonrigid.iter().zip(self.eigenvalues.iter()).map(|(q, l)| q * q / l).sum())
    }

    /// Places the mean shape, viewed from `orientation`, so that its projected
    /// bounding box has the centre and the width of `bbox`.
    pub fn init_from_bbox(&self, bbox: &BBox, orientation: [f64; 3]) -> Result<PdmParams> {
        if !(bbox.width > 0.0 && bbox.height > 0.0) || !bbox.x.is_finite() || !bbox.y.is_finite() {
            return Err(Error::invalid("bbox", format!("degenerate box {bbox:?}")));
        }
        let unit = PdmParams::rigid(self.n_modes(), 1.0, [0.0, 0.0], orientation);
        let shape_bb = self.shape_from_params(&unit)?.bbox().expect("model has landmarks");
        if !(shape_bb.width > 0.0) {
            return Err(Error::invalid("pdm", "mean shape has zero projected width"));
        }
        let scale = bbox.width / shape_bb.width;
        let [bx, by] = bbox.center();
        let [sx, sy] = shape_bb.center();
        Ok(PdmParams::rigid(self.n_modes(), scale, [bx - scale * sx, by - scale * sy], orientation))
    }

    /// Reproducible toy face model: landmarks 0 and 1 are the outer eye
    /// corners (one unit apart), landmark 2 the nose tip, the rest scattered
    /// over an ellipsoidal face cap. The basis is an orthonormalized Gaussian
    /// matrix and eigenvalues decay geometrically.
    pub fn synthetic(n_landmarks: usize, n_modes: usize, seed: u64) -> Result<Self> {
        if n_landmarks < 3 {
            return Err(Error::invalid("synthetic pdm", "needs at least 3 landmarks"));
        }
        if n_modes > 3 * n_landmarks {
            return Err(Error::invalid("synthetic pdm", "more modes than coordinates"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ax, ay, depth) = (0.8, 1.0, 0.6);
        let cap = |x: f64, y: f64| depth * (1.0 - (x / ax).powi(2) - (y / ay).powi(2)).max(0.0).sqrt();

        let mut pts: Vec<[f64; 3]> =
            vec![[-0.5, -0.25, cap(-0.5, -0.25)], [0.5, -0.25, cap(0.5, -0.25)], [0.0, 0.15, cap(0.0, 0.15) + 0.15]];
        let area = std::f64::consts::PI * ax * ay;
        let mut min_dist = 0.75 * (area / n_landmarks as f64).sqrt();
        let unit = Uniform::new(-1.0, 1.0).expect("valid range");
        let mut failures = 0;
        while pts.len() < n_landmarks {
            let x = ax * 0.95 * unit.sample(&mut rng);
            let y = ay * 0.95 * unit.sample(&mut rng);
            if (x / ax).powi(2) + (y / ay).powi(2) > 0.95 * 0.95 {
                continue;
            }
            let clear = pts.iter().all(|p| (p[0] - x).hypot(p[1] - y) >= min_dist);
            if clear {
                pts.push([x, y, cap(x, y)]);
                failures = 0;
            } else {
                failures += 1;
                if failures > 200 {
                    min_dist *= 0.95;
                    failures = 0;
                }
            }
        }
        let mean = DVector::from_iterator(3 * n_landmarks, pts.iter().flatten().copied());

        let gaussian = DMatrix::from_fn(3 * n_landmarks, n_modes, |_, _| StandardNormal.sample(&mut rng));
        let basis = if n_modes == 0 { gaussian } else { gaussian.qr().q() };
        // first-mode std of ~5% of the eye distance per landmark
        let first = 0.0025 * 3.0 * n_landmarks as f64;
        let eigenvalues = DVector::from_fn(n_modes, |j, _| first * 0.7f64.powi(j as i32));
        Self::new(mean, basis, eigenvalues, Some([0, 1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model() -> PdmModel {
        PdmModel::synthetic(12, 4, 3).unwrap()
    }

    #[test]
    fn identity_params_project_mean_shape() {
        let m = model();
        let p = PdmParams::rigid(4, 1.0, [0.0, 0.0], [0.0; 3]);
        let shape = m.shape_from_params(&p).unwrap();
        for i in 0..m.n_landmarks() {
            let x = m.mean_point(i);
            assert_eq!(shape.points[i], [x.x, x.y]);
        }
        assert!(shape.visibility.iter().all(|&v| v));
    }

    #[test]
    fn similarity_of_mean_shape() {
        let m = model();
        let p = PdmParams::rigid(4, 2.0, [10.0, 0.0], [0.0; 3]);
        let shape = m.shape_from_params(&p).unwrap();
        for i in 0..m.n_landmarks() {
            let x = m.mean_point(i);
            assert!((shape.points[i][0] - (2.0 * x.x + 10.0)).abs() < 1e-12);
            assert!((shape.points[i][1] - 2.0 * x.y).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = model();
        let p = PdmParams::rigid(3, 1.0, [0.0, 0.0], [0.0; 3]);
        assert!(matches!(m.shape_from_params(&p), Err(Error::Dimension { .. })));
        assert!(matches!(m.jacobian(&p), Err(Error::Dimension { .. })));
        assert!(matches!(m.regularization(&p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn jacobian_rigid_columns_at_rest() {
        let m = model();
        let p = PdmParams::rigid(4, 1.7, [3.0, -2.0], [0.0; 3]);
        let j = m.jacobian(&p).unwrap();
        for i in 0..m.n_landmarks() {
            let x = m.mean_point(i);
            assert!((j[(2 * i, 0)] - x.x).abs() < 1e-15);
            assert!((j[(2 * i + 1, 0)] - x.y).abs() < 1e-15);
            assert_eq!((j[(2 * i, 1)], j[(2 * i, 2)]), (1.0, 0.0));
            assert_eq!((j[(2 * i + 1, 1)], j[(2 * i + 1, 2)]), (0.0, 1.0));
        }
    }

    #[test]
    fn regularization_values() {
        let basis = DMatrix::from_column_slice(6, 2, &[1., 0., 0., 0., 0., 0., 0., 1., 0., 0., 0., 0.]);
        let m = PdmModel::new(
            DVector::from_vec(vec![0., 0., 0., 1., 0., 0.]),
            basis,
            DVector::from_vec(vec![1.0, 1.0]),
            None,
        )
        .unwrap();
        let mut p = PdmParams::rigid(2, 1.0, [5.0, 5.0], [0.1, 0.2, 0.3]);
        assert_eq!(m.regularization(&p).unwrap(), 0.0);
        p.nonrigid = vec![3.0, 4.0];
        assert_eq!(m.regularization(&p).unwrap(), 25.0);
    }

    #[test]
    fn loader_invariants() {
        let mean = DVector::from_vec(vec![0.0; 6]);
        let bad_basis = DMatrix::from_element(6, 1, 1.0);
        assert!(PdmModel::new(mean.clone(), bad_basis, DVector::from_vec(vec![1.0]), None).is_err());
        let mut ok_basis = DMatrix::zeros(6, 1);
        ok_basis[(0, 0)] = 1.0;
        assert!(PdmModel::new(mean.clone(), ok_basis.clone(), DVector::from_vec(vec![0.0]), None).is_err());
        assert!(PdmModel::new(mean, ok_basis, DVector::from_vec(vec![2.0]), Some([0, 5])).is_err());
    }

    #[test]
    fn bbox_init_fixed_point_and_scaling() {
        let m = model();
        let unit = PdmParams::rigid(4, 1.0, [0.0, 0.0], [0.0; 3]);
        let bb = m.shape_from_params(&unit).unwrap().bbox().unwrap();
        let p = m.init_from_bbox(&bb, [0.0; 3]).unwrap();
        assert!((p.scale - 1.0).abs() < 1e-12);
        assert!(p.translation[0].abs() < 1e-12 && p.translation[1].abs() < 1e-12);

        let [cx, cy] = bb.center();
        let wide = BBox { x: cx - bb.width, y: cy - bb.height, width: 2.0 * bb.width, height: 2.0 * bb.height };
        let p = m.init_from_bbox(&wide, [0.0; 3]).unwrap();
        assert!((p.scale - 2.0).abs() < 1e-12);
        assert!(p.nonrigid.iter().all(|&q| q == 0.0));
    }

    #[test]
    fn bbox_init_with_profile_orientation() {
        let m = model();
        let target = BBox { x: 40.0, y: 60.0, width: 120.0, height: 140.0 };
        let p = m.init_from_bbox(&target, [0.0, 0.52, 0.0]).unwrap();
        assert_eq!(p.rotation, [0.0, 0.52, 0.0]);
        let got = m.shape_from_params(&p).unwrap().bbox().unwrap();
        assert!((got.width - 120.0).abs() / 120.0 < 0.01);
        let (c0, c1) = (got.center(), target.center());
        assert!((c0[0] - c1[0]).abs() < 1e-9 && (c0[1] - c1[1]).abs() < 1e-9);
    }

    #[test]
    fn degenerate_bbox_rejected() {
        let m = model();
        let bb = BBox { x: 0.0, y: 0.0, width: 0.0, height: 10.0 };
        assert!(m.init_from_bbox(&bb, [0.0; 3]).is_err());
    }

    #[test]
    fn frontal_face_fully_visible_profile_hides_far_side() {
        let m = PdmModel::synthetic(40, 3, 9).unwrap();
        let frontal = PdmParams::rigid(3, 1.0, [0.0, 0.0], [0.0; 3]);
        assert!(m.visibility(&frontal).unwrap().iter().all(|&v| v));
        let profile = PdmParams::rigid(3, 1.0, [0.0, 0.0], [0.0, 1.5, 0.0]);
        let vis = m.visibility(&profile).unwrap();
        assert!(vis.iter().any(|&v| !v));
        assert!(vis.iter().any(|&v| v));
    }

    #[test]
    fn synthetic_model_is_reproducible_and_valid() {
        let a = PdmModel::synthetic(68, 10, 42).unwrap();
        let b = PdmModel::synthetic(68, 10, 42).unwrap();
        assert_eq!(a, b);
        assert!((a.reference_length() - 1.0).abs() < 1e-12);
        let l = a.eigenvalues();
        assert!(l.iter().zip(l.iter().skip(1)).all(|(x, y)| y < x));
    }

    #[test]
    fn update_composes_rotation_on_the_left() {
        let p = PdmParams::rigid(0, 1.0, [0.0, 0.0], [0.0, 0.3, 0.0]);
        let mut d = DVector::zeros(6);
        d[4] = 0.2;
        let q = p.apply_update(&d).unwrap();
        assert!((q.rotation[1] - 0.5).abs() < 1e-12);
        d[0] = -2.0;
        assert!(p.apply_update(&d).is_err());
    }

    proptest! {
        #[test]
        fn shape_is_similarity_equivariant(
            s in 0.5f64..3.0, k in 0.2f64..4.0,
            tx in -50.0f64..50.0, ty in -50.0f64..50.0,
            dx in -20.0f64..20.0, dy in -20.0f64..20.0,
            wy in -1.0f64..1.0, q0 in -0.3f64..0.3,
        ) {
            let m = model();
            let mut p = PdmParams::rigid(4, s, [tx, ty], [0.1, wy, -0.2]);
            p.nonrigid[0] = q0;
            let base = m.shape_from_params(&p).unwrap();

            let mut scaled = p.clone();
            scaled.scale *= k;
            let sc = m.shape_from_params(&scaled).unwrap();
            for (a, b) in base.points.iter().zip(&sc.points) {
                prop_assert!(((b[0] - tx) - k * (a[0] - tx)).abs() < 1e-9);
                prop_assert!(((b[1] - ty) - k * (a[1] - ty)).abs() < 1e-9);
            }

            let mut shifted = p.clone();
            shifted.translation = [tx + dx, ty + dy];
            let sh = m.shape_from_params(&shifted).unwrap();
            for (a, b) in base.points.iter().zip(&sh.points) {
                prop_assert!((b[0] - a[0] - dx).abs() < 1e-9);
                prop_assert!((b[1] - a[1] - dy).abs() < 1e-9);
            }
        }

        #[test]
        fn regularization_grows_with_each_mode(j in 0usize..4, a in 0.0f64..2.0, extra in 1e-3f64..1.0) {
            let m = model();
            let mut p = PdmParams::rigid(4, 1.0, [0.0, 0.0], [0.0; 3]);
            p.nonrigid = vec![0.1, -0.2, 0.05, 0.3];
            p.nonrigid[j] = a;
            let lo = m.regularization(&p).unwrap();
            p.nonrigid[j] = a + extra;
            let hi = m.regularization(&p).unwrap();
            p.nonrigid[j] = -(a + extra);
            let hi_neg = m.regularization(&p).unwrap();
            prop_assert!(hi > lo);
            prop_assert!((hi - hi_neg).abs() < 1e-15);
        }

        #[test]
        fn bbox_init_reproduces_center_and_width(
            x in 0.0f64..300.0, y in 0.0f64..300.0,
            w in 20.0f64..200.0, h in 20.0f64..200.0,
            yaw in -1.0f64..1.0, pitch in -0.5f64..0.5, roll in -0.5f64..0.5,
        ) {
            let m = model();
            let bb = BBox { x, y, width: w, height: h };
            let p = m.init_from_bbox(&bb, [pitch, yaw, roll]).unwrap();
            let got = m.shape_from_params(&p).unwrap().bbox().unwrap();
            let (c0, c1) = (got.center(), bb.center());
            prop_assert!((c0[0] - c1[0]).abs() < 1e-9 && (c0[1] - c1[1]).abs() < 1e-9);
            prop_assert!((got.width - w).abs() / w < 0.01);
        }
    }
}

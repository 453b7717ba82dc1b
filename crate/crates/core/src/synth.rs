//! Synthetic faces with known geometry.
//!
//! Scenes place parametric landmark appearances at the positions given by a
//! point distribution model, so every rendered landmark has exact ground
//! truth. The oracle detector turns that ground truth into Gaussian response
//! maps, standing in for trained detectors in fitting tests.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::cen::{ResponseMap, RoiPlacement};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::model_io::{read_json, write_json};
use crate::nurlms::{LocalDetector, NurlmsConfig};
use crate::pdm::{LandmarkSet, PdmModel, PdmParams};

pub const SIDECAR_VERSION: u32 = 1;

/// Parametric appearance family of a landmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prototype {
    DarkBlob,
    BrightRing,
    Corner,
    Cross,
}

impl Prototype {
    /// Signed intensity profile at offset `(u, v)` measured in feature radii.
    pub fn profile(self, u: f64, v: f64) -> f64 {
        let r2 = u * u + v * v;
        match self {
            Prototype::DarkBlob => -(-r2 / (2.0 * 0.5 * 0.5)).exp(),
            Prototype::BrightRing => {
                let d = r2.sqrt() - 0.8;
                (-d * d / (2.0 * 0.2 * 0.2)).exp()
            }
            Prototype::Corner => {
                let s = |x: f64| 1.0 / (1.0 + (-6.0 * x).exp());
                -s(u) * s(v) * (-r2 / 2.0).exp()
            }
            Prototype::Cross => {
                let bar = |x: f64| (-x * x / (2.0 * 0.15 * 0.15)).exp();
                0.5 * (bar(u) + bar(v)) * (-r2 / 2.0).exp()
            }
        }
    }

    /// Offsets beyond this many radii contribute nothing visible.
    pub const SUPPORT: f64 = 2.5;
}

/// Mixture of appearance prototypes shared by all landmarks of one type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceModel {
    pub prototypes: Vec<Prototype>,
    pub weights: Vec<f64>,
    /// Feature radius as a fraction of the interocular distance.
    pub radius_iod: f64,
    /// Range of the per-feature contrast, in gray levels.
    pub contrast: (f64, f64),
}

impl Default for AppearanceModel {
    fn default() -> Self {
        Self {
            prototypes: vec![Prototype::DarkBlob, Prototype::BrightRing, Prototype::Corner],
            weights: vec![0.5, 0.3, 0.2],
            radius_iod: 0.1,
            contrast: (40.0, 90.0),
        }
    }
}

impl AppearanceModel {
    pub fn validate(&self) -> Result<()> {
        if self.prototypes.is_empty() || self.prototypes.len() != self.weights.len() {
            return Err(Error::invalid("appearance", "need one weight per prototype"));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) || self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("appearance", "weights must be non-negative with positive sum"));
        }
        if !(self.radius_iod > 0.0) || !(self.contrast.0 <= self.contrast.1) {
            return Err(Error::invalid("appearance", "bad radius or contrast range"));
        }
        Ok(())
    }

    /// Draws a prototype index according to the mixing weights.
    pub fn sample_prototype<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, w) in self.weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    pub fn sample_contrast<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = self.contrast;
        lo + (hi - lo) * rng.random::<f64>()
    }
}

/// Adds `contrast * profile` of a feature centred at `center` to `img`.
pub fn stamp(img: &mut GrayImage, proto: Prototype, center: [f64; 2], radius: f64, contrast: f64) {
    let reach = Prototype::SUPPORT * radius;
    let x0 = (center[0] - reach).floor().max(0.0) as usize;
    let y0 = (center[1] - reach).floor().max(0.0) as usize;
    let x1 = ((center[0] + reach).ceil() as isize).min(img.width() as isize - 1);
    let y1 = ((center[1] + reach).ceil() as isize).min(img.height() as isize - 1);
    if x1 < 0 || y1 < 0 {
        return;
    }
    for y in y0..=y1 as usize {
        for x in x0..=x1 as usize {
            let u = (x as f64 - center[0]) / radius;
            let v = (y as f64 - center[1]) / radius;
            if u.abs() > Prototype::SUPPORT || v.abs() > Prototype::SUPPORT {
                continue;
            }
            let val = img.get(x, y) + contrast * proto.profile(u, v);
            img.set(x, y, val);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub appearance: AppearanceModel,
    pub background: (f64, f64),
    pub noise_std: f64,
    /// Minimum distance, in pixels, between any landmark and the image border.
    pub margin: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { appearance: AppearanceModel::default(), background: (90.0, 160.0), noise_std: 3.0, margin: 12.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: GrayImage,
    pub true_params: PdmParams,
    pub true_landmarks: LandmarkSet,
    pub prototype_ids: Vec<usize>,
    pub eye_corners: Option<[usize; 2]>,
}

/// Renders the face given by `params` into a `size = (width, height)` image.
/// Self-occluded landmarks are not drawn and are marked invisible.
pub fn render_scene(
    model: &PdmModel,
    params: &PdmParams,
    size: (usize, usize),
    seed: u64,
    cfg: &SceneConfig,
) -> Result<SyntheticScene> {
    cfg.appearance.validate()?;
    params.validate(model)?;
    let (w, h) = size;
    let mut landmarks = model.shape_from_params(params)?;
    for (i, p) in landmarks.points.iter().enumerate() {
        let inside = p[0] >= cfg.margin
            && p[1] >= cfg.margin
            && p[0] <= w as f64 - 1.0 - cfg.margin
            && p[1] <= h as f64 - 1.0 - cfg.margin;
        if !inside {
            return Err(Error::invalid(
                "scene",
                format!("landmark {i} at ({:.1}, {:.1}) is outside the {w}×{h} image margin", p[0], p[1]),
            ));
        }
    }
    landmarks.visibility = model.visibility(params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.n_landmarks();
    let prototype_ids: Vec<usize> = (0..n).map(|_| cfg.appearance.sample_prototype(&mut rng)).collect();
    let contrasts: Vec<f64> = (0..n).map(|_| cfg.appearance.sample_contrast(&mut rng)).collect();
    let (lo, hi) = cfg.background;
    let background = lo + (hi - lo) * rng.random::<f64>();

    let mut image = GrayImage::new(w, h, background);
    let radius = cfg.appearance.radius_iod * params.scale * model.reference_length();
    for i in 0..n {
        if landmarks.visibility[i] {
            let proto = cfg.appearance.prototypes[prototype_ids[i]];
            stamp(&mut image, proto, landmarks.points[i], radius, contrasts[i]);
        }
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("finite std");
        image = image.map(|v| v + noise.sample(&mut rng));
    }
    Ok(SyntheticScene {
        image,
        true_params: params.clone(),
        true_landmarks: landmarks,
        prototype_ids,
        eye_corners: model.eye_corners(),
    })
}

/// Ranges for randomly posed scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSampler {
    /// Interocular distance range in pixels.
    pub iod_px: (f64, f64),
    pub max_yaw_deg: f64,
    pub max_pitch_deg: f64,
    pub max_roll_deg: f64,
    /// Non-rigid parameters are drawn from `N(0, shape_kappa² Λ)`.
    pub shape_kappa: f64,
    /// Largest offset of the face centre from the image centre, in pixels.
    pub max_shift: f64,
}

impl Default for PoseSampler {
    fn default() -> Self {
        Self {
            iod_px: (50.0, 70.0),
            max_yaw_deg: 15.0,
            max_pitch_deg: 10.0,
            max_roll_deg: 10.0,
            shape_kappa: 0.5,
            max_shift: 10.0,
        }
    }
}

impl PoseSampler {
    pub fn sample<R: Rng + ?Sized>(&self, model: &PdmModel, size: (usize, usize), rng: &mut R) -> PdmParams {
        let mut sym = |max: f64| max * (2.0 * rng.random::<f64>() - 1.0);
        let pitch = sym(self.max_pitch_deg).to_radians();
        let yaw = sym(self.max_yaw_deg).to_radians();
        let roll = sym(self.max_roll_deg).to_radians();
        let dx = sym(self.max_shift);
        let dy = sym(self.max_shift);
        let rotation = crate::rotation::log_map(&crate::rotation::matrix_from_euler(pitch, yaw, roll));
        let iod = self.iod_px.0 + (self.iod_px.1 - self.iod_px.0) * rng.random::<f64>();
        let scale = iod / model.reference_length();
        let nonrigid = model
            .eigenvalues()
            .iter()
            .map(|l| self.shape_kappa * l.sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        let mut params = PdmParams { scale, translation: [0.0, 0.0], rotation, nonrigid };
        // centre the projected shape
        let bb = model
            .shape_from_params(&params)
            .expect("sampled params match the model")
            .bbox()
            .expect("model has landmarks");
        let [cx, cy] = bb.center();
        params.translation = [size.0 as f64 / 2.0 - cx + dx, size.1 as f64 / 2.0 - cy + dy];
        params
    }
}

/// Gaussian map of standard deviation `sigma` grid cells, centred on the
/// true position of `landmark` and sampled on the response grid of `roi`.
pub fn oracle_response(scene: &SyntheticScene, landmark: usize, roi: &RoiPlacement, sigma: f64) -> Result<ResponseMap> {
    let truth = *scene
        .true_landmarks
        .points
        .get(landmark)
        .ok_or_else(|| Error::invalid("oracle", format!("no landmark {landmark}")))?;
    let side = roi.response_side();
    if side == 0 {
        return Err(Error::invalid("oracle", "roi smaller than the detector kernel"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("oracle", "sigma must be positive"));
    }
    let origin = roi.response_origin();
    let mut values = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let dx = (origin[0] + c as f64 * roi.step - truth[0]) / roi.step;
            let dy = (origin[1] + r as f64 * roi.step - truth[1]) / roi.step;
            values.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    ResponseMap::new(side, values, origin, roi.step)
}

/// Detector that answers from a scene's ground truth.
#[derive(Debug, Clone)]
pub struct OracleDetector<'a> {
    pub scene: &'a SyntheticScene,
    /// Gaussian width in working-scale pixels.
    pub sigma: f64,
    pub scales_px: Vec<f64>,
    pub views_deg: Vec<f64>,
}

impl<'a> OracleDetector<'a> {
    pub fn new(scene: &'a SyntheticScene, sigma: f64) -> Self {
        Self {
            scene,
            sigma,
            scales_px: vec![17.0, 23.0, 30.0, 60.0],
            views_deg: vec![-70.0, -45.0, -20.0, 0.0, 20.0, 45.0, 70.0],
        }
    }
}

impl LocalDetector for OracleDetector<'_> {
    fn scales_px(&self) -> Vec<f64> {
        self.scales_px.clone()
    }

    fn views_deg(&self) -> Vec<f64> {
        self.views_deg.clone()
    }

    fn response(
        &self,
        _image: &GrayImage,
        landmark: usize,
        _view_deg: f64,
        _scale_px: f64,
        roi: &RoiPlacement,
    ) -> Result<ResponseMap> {
        oracle_response(self.scene, landmark, roi, self.sigma)
    }

    fn validate_for(&self, n_landmarks: usize, _cfg: &NurlmsConfig) -> Result<()> {
        if n_landmarks > self.scene.true_landmarks.len() {
            return Err(Error::invalid("oracle", "scene has fewer landmarks than the model"));
        }
        Ok(())
    }
}

/// JSON sidecar written next to each exported scene image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub version: u32,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub true_params: PdmParams,
    pub landmarks: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    pub prototypes: Vec<usize>,
    #[serde(default)]
    pub eye_corners: Option<[usize; 2]>,
}

impl SceneSidecar {
    pub fn truth(&self) -> Result<LandmarkSet> {
        LandmarkSet::new(self.landmarks.clone(), self.visible.clone())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sc: SceneSidecar = read_json(path)?;
        if sc.version != SIDECAR_VERSION {
            return Err(Error::Version { what: "scene sidecar", found: sc.version, expected: SIDECAR_VERSION });
        }
        if sc.landmarks.len() != sc.visible.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "landmarks and visible differ in length".into(),
            });
        }
        Ok(sc)
    }
}

impl SyntheticScene {
    pub fn sidecar(&self, image_name: &str) -> SceneSidecar {
        SceneSidecar {
            version: SIDECAR_VERSION,
            image: image_name.to_string(),
            width: self.image.width(),
            height: self.image.height(),
            true_params: self.true_params.clone(),
            landmarks: self.true_landmarks.points.clone(),
            visible: self.true_landmarks.visibility.clone(),
            prototypes: self.prototype_ids.clone(),
            eye_corners: self.eye_corners,
        }
    }

    /// Writes `<stem>.pgm` and `<stem>.json` into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let image_name = format!("{stem}.pgm");
        self.image.write_pgm(dir.join(&image_name))?;
        write_json(dir.join(format!("{stem}.json")), &self.sidecar(&image_name))
    }
}

/// Renders `count` randomly posed scenes, seeds derived from `seed`.
pub fn random_scenes(
    model: &PdmModel,
    count: usize,
    size: (usize, usize),
    seed: u64,
    pose: &PoseSampler,
    cfg: &SceneConfig,
) -> Result<Vec<SyntheticScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0u64, u64::MAX).expect("valid range");
    (0..count)
        .map(|_| {
            let params = pose.sample(model, size, &mut rng);
            render_scene(model, &params, size, unit.sample(&mut rng), cfg)
        })
        .collect()
}

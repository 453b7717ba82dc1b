//! Versioned JSON formats for shape models, detectors, detector banks,
//! reliabilities and fit configurations, plus the fit-result CSV.
//!
//! Every loader validates the invariants of the type it produces. Floats are
//! written in shortest round-trip form, so save followed by load reproduces
//! every weight bit for bit.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cen::{CenMeta, CenModel, ResponseMap, RoiPlacement, KERNEL_LEN, KERNEL_SIDE};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nurlms::{FitResult, LandmarkReliability, LocalDetector, NurlmsConfig};
use crate::pdm::{LandmarkSet, PdmModel};

pub const FORMAT_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text =
        serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(io_err(path))
}

fn check_version(what: &'static str, found: u32) -> Result<()> {
    if found == FORMAT_VERSION {
        Ok(())
    } else {
        Err(Error::Version { what, found, expected: FORMAT_VERSION })
    }
}

fn at_path(path: &Path, err: Error) -> Error {
    match err {
        Error::Invalid { what, reason } => {
            Error::Format { path: path.to_path_buf(), reason: format!("invalid {what}: {reason}") }
        }
        Error::Dimension { what, expected, actual } => {
            Error::Format { path: path.to_path_buf(), reason: format!("{what}: expected {expected}, got {actual}") }
        }
        other => other,
    }
}

// --- shape model -----------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct PdmFile {
    version: u32,
    n: usize,
    m: usize,
    mean: Vec<f64>,
    basis: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eye_corners: Option<[usize; 2]>,
}

pub fn pdm_to_json(model: &PdmModel) -> serde_json::Value {
    let basis = model.basis();
    let file = PdmFile {
        version: FORMAT_VERSION,
        n: model.n_landmarks(),
        m: model.n_modes(),
        mean: model.mean().iter().copied().collect(),
        basis: basis.row_iter().map(|r| r.iter().copied().collect()).collect(),
        eigenvalues: model.eigenvalues().iter().copied().collect(),
        eye_corners: model.eye_corners(),
    };
    serde_json::to_value(file).expect("plain data serializes")
}

pub fn pdm_from_json(value: serde_json::Value) -> Result<PdmModel> {
    let f: PdmFile = serde_json::from_value(value).map_err(|e| Error::invalid("pdm", e.to_string()))?;
    check_version("pdm", f.version)?;
    if f.mean.len() != 3 * f.n {
        return Err(Error::invalid("pdm", format!("mean has {} entries, expected 3n = {}", f.mean.len(), 3 * f.n)));
    }
    if f.basis.len() != 3 * f.n {
        return Err(Error::invalid("pdm", format!("basis has {} rows, expected 3n = {}", f.basis.len(), 3 * f.n)));
    }
    if let Some(i) = f.basis.iter().position(|r| r.len() != f.m) {
        return Err(Error::invalid(
            "pdm",
            format!("basis[{i}] has {} entries, expected m = {}", f.basis[i].len(), f.m),
        ));
    }
    if f.eigenvalues.len() != f.m {
        return Err(Error::invalid("pdm", format!("{} eigenvalues, expected m = {}", f.eigenvalues.len(), f.m)));
    }
    let basis = DMatrix::from_fn(3 * f.n, f.m, |r, c| f.basis[r][c]);
    PdmModel::new(DVector::from_vec(f.mean), basis, DVector::from_vec(f.eigenvalues), f.eye_corners)
}

pub fn load_pdm(path: impl AsRef<Path>) -> Result<PdmModel> {
    let path = path.as_ref();
    pdm_from_json(read_json(path)?).map_err(|e| at_path(path, e))
}

pub fn save_pdm(path: impl AsRef<Path>, model: &PdmModel) -> Result<()> {
    write_json(path, &pdm_to_json(model))
}

// --- detectors -----------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ConvLayer {
    kernels: Vec<Vec<Vec<f64>>>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DenseLayer {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Combiner {
    w: Vec<f64>,
    b: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CenFile {
    version: u32,
    landmark: usize,
    view: i32,
    scale_px: u32,
    c1: ConvLayer,
    c2: DenseLayer,
    c3: DenseLayer,
    combiner: Combiner,
}

fn dense_to_file(w: &DMatrix<f64>, b: &DVector<f64>) -> DenseLayer {
    DenseLayer {
        weights: w.row_iter().map(|r| r.iter().copied().collect()).collect(),
        bias: b.iter().copied().collect(),
    }
}

fn dense_from_file(layer: DenseLayer, name: &str) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let rows = layer.weights.len();
    let cols = layer.weights.first().map_or(0, Vec::len);
    if let Some(i) = layer.weights.iter().position(|r| r.len() != cols) {
        return Err(Error::invalid("cen", format!("{name}.weights[{i}] is ragged")));
    }
    let w = DMatrix::from_fn(rows, cols, |r, c| layer.weights[r][c]);
    Ok((w, DVector::from_vec(layer.bias)))
}

pub fn cen_to_json(model: &CenModel) -> serde_json::Value {
    let c1 = model.arch().c1;
    let kernels = (0..c1).map(|k| model.kernel(k).chunks(KERNEL_SIDE).map(<[f64]>::to_vec).collect()).collect();
    let (w2, b2) = model.layer2();
    let (w3, b3) = model.layer3();
    let (w4, b4) = model.combiner();
    let file = CenFile {
        version: FORMAT_VERSION,
        landmark: model.meta.landmark,
        view: model.meta.view_deg,
        scale_px: model.meta.scale_px,
        c1: ConvLayer { kernels, bias: model.bias1().iter().copied().collect() },
        c2: dense_to_file(w2, b2),
        c3: dense_to_file(w3, b3),
        combiner: Combiner { w: w4.iter().copied().collect(), b: b4 },
    };
    serde_json::to_value(file).expect("plain data serializes")
}

/// Parses a detector. Negative combiner weights are rejected unless
/// `allow_negative_combiner` is set (ablation models).
pub fn cen_from_json(value: serde_json::Value, allow_negative_combiner: bool) -> Result<CenModel> {
    let f: CenFile = serde_json::from_value(value).map_err(|e| Error::invalid("cen", e.to_string()))?;
    check_version("cen", f.version)?;
    let c1 = f.c1.kernels.len();
    let mut kernels = DMatrix::zeros(c1, KERNEL_LEN);
    for (k, kernel) in f.c1.kernels.iter().enumerate() {
        if kernel.len() != KERNEL_SIDE || kernel.iter().any(|row| row.len() != KERNEL_SIDE) {
            return Err(Error::invalid("cen", format!("c1.kernels[{k}] is not {KERNEL_SIDE}×{KERNEL_SIDE}")));
        }
        for (y, row) in kernel.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                kernels[(k, y * KERNEL_SIDE + x)] = *v;
            }
        }
    }
    let (w2, b2) = dense_from_file(f.c2, "c2")?;
    let (w3, b3) = dense_from_file(f.c3, "c3")?;
    let model = CenModel::new(
        CenMeta { landmark: f.landmark, view_deg: f.view, scale_px: f.scale_px },
        kernels,
        DVector::from_vec(f.c1.bias),
        w2,
        b2,
        w3,
        b3,
        DVector::from_vec(f.combiner.w),
        f.combiner.b,
    )?;
    if !allow_negative_combiner {
        model.check_nonnegative()?;
    }
    Ok(model)
}

pub fn load_cen(path: impl AsRef<Path>, allow_negative_combiner: bool) -> Result<CenModel> {
    let path = path.as_ref();
    cen_from_json(read_json(path)?, allow_negative_combiner).map_err(|e| at_path(path, e))
}

pub fn save_cen(path: impl AsRef<Path>, model: &CenModel) -> Result<()> {
    write_json(path, &cen_to_json(model))
}

// --- detector banks ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub landmark: usize,
    pub view: i32,
    pub scale: u32,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub views_yaw_deg: Vec<i32>,
    pub scales_px: Vec<u32>,
    pub models: Vec<ManifestEntry>,
    /// Landmark served by the mirrored detector of landmark `i`; identity
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mirror_landmarks: Option<Vec<usize>>,
}

type BankKey = (usize, i32, u32);

/// Detectors indexed by landmark, view yaw and scale. A request for a view
/// with no stored detector is served by mirroring the detector of the
/// opposite yaw (and mirrored landmark), built on first use.
#[derive(Debug)]
pub struct CenBank {
    views_yaw_deg: Vec<i32>,
    scales_px: Vec<u32>,
    models: HashMap<BankKey, Arc<CenModel>>,
    mirror: Option<Vec<usize>>,
    mirrored: Mutex<HashMap<BankKey, Arc<CenModel>>>,
}

impl CenBank {
    pub fn new(
        views_yaw_deg: Vec<i32>,
        scales_px: Vec<u32>,
        models: Vec<CenModel>,
        mirror: Option<Vec<usize>>,
    ) -> Result<Self> {
        if scales_px.is_empty() || views_yaw_deg.is_empty() {
            return Err(Error::invalid("bank", "needs at least one view and one scale"));
        }
        if scales_px.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("bank", format!("scales_px {scales_px:?} not strictly ascending")));
        }
        let mut index = HashMap::new();
        for (i, m) in models.into_iter().enumerate() {
            let key = (m.meta.landmark, m.meta.view_deg, m.meta.scale_px);
            if !views_yaw_deg.contains(&key.1) {
                return Err(Error::invalid("bank", format!("models[{i}]: view {} not in views_yaw_deg", key.1)));
            }
            if !scales_px.contains(&key.2) {
                return Err(Error::invalid("bank", format!("models[{i}]: scale {} not in scales_px", key.2)));
            }
            if index.insert(key, Arc::new(m)).is_some() {
                return Err(Error::invalid("bank", format!("models[{i}]: duplicate entry {key:?}")));
            }
        }
        if let Some(mirror) = &mirror {
            for (i, &j) in mirror.iter().enumerate() {
                if mirror.get(j) != Some(&i) {
                    return Err(Error::invalid("bank", format!("mirror_landmarks is not an involution at {i}")));
                }
            }
        }
        Ok(Self { views_yaw_deg, scales_px, models: index, mirror, mirrored: Mutex::new(HashMap::new()) })
    }

    pub fn scales(&self) -> &[u32] {
        &self.scales_px
    }

    pub fn stored_views(&self) -> &[i32] {
        &self.views_yaw_deg
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Stored views plus their mirrors, ascending.
    pub fn view_table(&self) -> Vec<i32> {
        let mut v: Vec<i32> = self.views_yaw_deg.iter().flat_map(|&y| [y, -y]).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    fn mirror_of(&self, landmark: usize) -> usize {
        self.mirror.as_ref().and_then(|m| m.get(landmark).copied()).unwrap_or(landmark)
    }

    pub fn stored(&self, landmark: usize, view_deg: i32, scale_px: u32) -> Option<&Arc<CenModel>> {
        self.models.get(&(landmark, view_deg, scale_px))
    }

    /// Resolves a detector directly or through mirroring.
    pub fn lookup(&self, landmark: usize, view_deg: i32, scale_px: u32) -> Option<Arc<CenModel>> {
        if let Some(m) = self.stored(landmark, view_deg, scale_px) {
            return Some(Arc::clone(m));
        }
        let key = (landmark, view_deg, scale_px);
        let mut cache = self.mirrored.lock().expect("mirror cache poisoned");
        if let Some(m) = cache.get(&key) {
            return Some(Arc::clone(m));
        }
        let source = self.stored(self.mirror_of(landmark), -view_deg, scale_px)?;
        let m = Arc::new(source.mirrored(landmark));
        cache.insert(key, Arc::clone(&m));
        Some(m)
    }

    fn stage_scale(&self, stage: usize) -> u32 {
        self.scales_px[stage.min(self.scales_px.len() - 1)]
    }

    pub fn manifest(&self, file_of: impl Fn(&CenModel) -> String) -> Manifest {
        let sorted: BTreeMap<&BankKey, &Arc<CenModel>> = self.models.iter().collect();
        Manifest {
            version: FORMAT_VERSION,
            views_yaw_deg: self.views_yaw_deg.clone(),
            scales_px: self.scales_px.clone(),
            models: sorted
                .into_iter()
                .map(|(k, m)| ManifestEntry { landmark: k.0, view: k.1, scale: k.2, file: file_of(m) })
                .collect(),
            mirror_landmarks: self.mirror.clone(),
        }
    }
}

impl LocalDetector for CenBank {
    fn scales_px(&self) -> Vec<f64> {
        self.scales_px.iter().map(|&s| s as f64).collect()
    }

    fn views_deg(&self) -> Vec<f64> {
        self.view_table().into_iter().map(|v| v as f64).collect()
    }

    fn response(
        &self,
        image: &GrayImage,
        landmark: usize,
        view_deg: f64,
        scale_px: f64,
        roi: &RoiPlacement,
    ) -> Result<ResponseMap> {
        let view = view_deg.round() as i32;
        let scale = scale_px.round() as u32;
        let model =
            self.lookup(landmark, view, scale).ok_or(Error::MissingDetector { landmark, view_deg: view, scale_px })?;
        let patch = roi.sample(image);
        model.response_map(&patch, roi.roi_origin(), roi.step)
    }

    fn validate_for(&self, n_landmarks: usize, cfg: &NurlmsConfig) -> Result<()> {
        let views = self.view_table();
        for stage in 0..cfg.roi_schedule.len() {
            let scale = self.stage_scale(stage);
            for landmark in 0..n_landmarks {
                for &view in &views {
                    if self.lookup(landmark, view, scale).is_none() {
                        return Err(Error::MissingDetector { landmark, view_deg: view, scale_px: scale as f64 });
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn default_model_file(m: &CenModel) -> String {
    format!("cen_l{}_v{}_s{}.json", m.meta.landmark, m.meta.view_deg, m.meta.scale_px)
}

/// Reads a bank directory (`manifest.json` plus one JSON file per detector).
pub fn load_bank(dir: impl AsRef<Path>, allow_negative_combiner: bool) -> Result<CenBank> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = read_json(&manifest_path)?;
    check_version("bank manifest", manifest.version)?;
    let mut models = Vec::with_capacity(manifest.models.len());
    for (i, entry) in manifest.models.iter().enumerate() {
        let path = dir.join(&entry.file);
        let model = load_cen(&path, allow_negative_combiner)?;
        let meta = model.meta;
        if (meta.landmark, meta.view_deg, meta.scale_px) != (entry.landmark, entry.view, entry.scale) {
            return Err(Error::Format {
                path: manifest_path,
                reason: format!(
                    "models[{i}] declares ({}, {}, {}) but {} holds ({}, {}, {})",
                    entry.landmark, entry.view, entry.scale, entry.file, meta.landmark, meta.view_deg, meta.scale_px
                ),
            });
        }
        models.push(model);
    }
    CenBank::new(manifest.views_yaw_deg, manifest.scales_px, models, manifest.mirror_landmarks)
        .map_err(|e| at_path(&manifest_path, e))
}

/// Writes a bank directory; detector files are named by their key.
pub fn save_bank(dir: impl AsRef<Path>, bank: &CenBank) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = bank.manifest(default_model_file);
    for entry in &manifest.models {
        let model = bank.stored(entry.landmark, entry.view, entry.scale).expect("manifest lists stored models");
        save_cen(dir.join(&entry.file), model)?;
    }
    write_json(dir.join("manifest.json"), &manifest)
}

// --- reliabilities and configs -------------------------------------------

pub fn load_reliability(path: impl AsRef<Path>) -> Result<LandmarkReliability> {
    let path = path.as_ref();
    let values: Vec<f64> = read_json(path)?;
    LandmarkReliability::new(values).map_err(|e| at_path(path, e))
}

pub fn save_reliability(path: impl AsRef<Path>, reliab: &LandmarkReliability) -> Result<()> {
    write_json(path, reliab.values())
}

pub fn load_config(path: impl AsRef<Path>) -> Result<NurlmsConfig> {
    let path = path.as_ref();
    let cfg: NurlmsConfig = read_json(path)?;
    cfg.validate().map_err(|e| at_path(path, e))?;
    Ok(cfg)
}

// --- fit results ---------------------------------------------------------

/// CSV with a `#`-comment header carrying the score and iteration counts,
/// then one `id,x,y,visible` row per landmark.
pub fn fit_result_csv(result: &FitResult) -> String {
    let mut out = String::new();
    let iters: Vec<String> = result.stages.iter().map(|s| s.iterations.to_string()).collect();
    let _ = writeln!(out, "# map_score={}", result.map_score);
    let _ = writeln!(out, "# iterations={}", iters.join(","));
    if let Some(h) = result.hypothesis {
        let _ = writeln!(out, "# hypothesis={h}");
    }
    let _ = writeln!(out, "# low_confidence={}", result.low_confidence);
    out.push_str("id,x,y,visible\n");
    for (i, (p, v)) in result.landmarks.points.iter().zip(&result.landmarks.visibility).enumerate() {
        let _ = writeln!(out, "{i},{},{},{}", p[0], p[1], u8::from(*v));
    }
    out
}

pub fn parse_landmark_csv(text: &str, path: &Path) -> Result<LandmarkSet> {
    let bad = |line: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut points = Vec::new();
    let mut visibility = Vec::new();
    let mut header_seen = false;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            if line != "id,x,y,visible" {
                return Err(bad(ln + 1, format!("expected header id,x,y,visible, got {line:?}")));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(ln + 1, "expected 4 fields".into()));
        }
        let id: usize = fields[0].parse().map_err(|_| bad(ln + 1, "bad id".into()))?;
        if id != points.len() {
            return Err(bad(ln + 1, format!("expected id {}, got {id}", points.len())));
        }
        let x: f64 = fields[1].parse().map_err(|_| bad(ln + 1, "bad x".into()))?;
        let y: f64 = fields[2].parse().map_err(|_| bad(ln + 1, "bad y".into()))?;
        let vis = match fields[3] {
            "1" => true,
            "0" => false,
            other => return Err(bad(ln + 1, format!("bad visibility {other:?}"))),
        };
        points.push([x, y]);
        visibility.push(vis);
    }
    if !header_seen {
        return Err(bad(0, "missing header".into()));
    }
    LandmarkSet::new(points, visibility)
}

pub fn read_landmark_csv(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_landmark_csv(&text, path)
}

/// Lists files in `dir` with the given extension, sorted by name.
pub fn list_files(dir: impl AsRef<Path>, extension: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == extension))
        .collect();
    out.sort();
    Ok(out)
}

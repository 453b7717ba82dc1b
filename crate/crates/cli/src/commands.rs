use std::fs;
use std::path::{Path, PathBuf};

use clmfit::cen::CenMeta;
use clmfit::image::GrayImage;
use clmfit::metrics::{linear_thresholds, normalized_error, ErrorReport};
use clmfit::model_io::{
    fit_result_csv, list_files, load_bank, load_config, load_pdm, load_reliability, read_json, read_landmark_csv,
    save_bank, save_cen, save_pdm, save_reliability, write_json, write_text, CenBank,
};
use clmfit::nurlms::{multi_hypothesis_fit, LandmarkReliability, NurlmsConfig};
use clmfit::pdm::{LandmarkSet, PdmModel};
use clmfit::synth::{random_scenes, PoseSampler, SceneConfig, SceneSidecar};
use clmfit::trainer::{evaluate_detector, gen_synthetic_patches, patches_from_images, train_cen, Split, TrainConfig};
use clmfit::{Error, Result};
use log::info;

use crate::{EvalArgs, FitArgs, PdmArgs, SynthArgs, TrainArgs, EXIT_LOW_CONFIDENCE, EXIT_OK};

pub fn fit(a: &FitArgs) -> Result<u8> {
    let model = load_pdm(&a.pdm)?;
    let bank = load_bank(&a.bank, a.allow_ablation)?;
    let image = GrayImage::read_pgm(&a.image)?;
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => NurlmsConfig::default(),
    };
    if a.exhaustive {
        cfg.accept_threshold = None;
    }
    let n = model.n_landmarks();
    let reliab = match &a.reliability {
        Some(p) => load_reliability(p)?,
        None => LandmarkReliability::uniform(n),
    };
    if reliab.len() != n {
        return Err(Error::Dimension { what: "reliability entries", expected: n, actual: reliab.len() });
    }
    let result = multi_hypothesis_fit(&model, &bank, &image, &a.bbox, &cfg, &reliab)?;
    write_text(&a.out, &fit_result_csv(&result))?;
    println!(
        "fitted {n} landmarks: map score {:.4}, best hypothesis {} ({} started), {} iterations",
        result.map_score,
        result.hypothesis.unwrap_or(0),
        result.hypotheses_started,
        result.iterations()
    );
    if result.low_confidence {
        eprintln!("warning: every hypothesis fell below the rejection threshold");
        return Ok(EXIT_LOW_CONFIDENCE);
    }
    Ok(EXIT_OK)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })
}

pub fn synth(a: &SynthArgs, seed: u64) -> Result<u8> {
    let model = load_pdm(&a.pdm)?;
    create_dir(&a.out)?;
    let scenes = random_scenes(&model, a.count, a.size, seed, &PoseSampler::default(), &SceneConfig::default())?;
    for (i, scene) in scenes.iter().enumerate() {
        scene.export(&a.out, &format!("scene_{i:04}"))?;
    }
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(EXIT_OK)
}

/// Images with their landmarks and interocular distance, from a scene
/// directory.
fn load_scenes(dir: &Path) -> Result<Vec<(GrayImage, LandmarkSet, f64)>> {
    let mut out = Vec::new();
    for path in list_files(dir, "json")? {
        let sc = SceneSidecar::read(&path)?;
        let image = GrayImage::read_pgm(dir.join(&sc.image))?;
        let truth = sc.truth()?;
        let [a, b] = sc.eye_corners.ok_or_else(|| Error::Format {
            path: path.clone(),
            reason: "eye_corners missing; needed for the working scale".into(),
        })?;
        let (p, q) = (truth.points[a], truth.points[b]);
        out.push((image, truth, (p[0] - q[0]).hypot(p[1] - q[1])));
    }
    if out.is_empty() {
        return Err(Error::invalid("data", format!("no scene sidecars in {}", dir.display())));
    }
    Ok(out)
}

fn curve_path(a: &TrainArgs) -> PathBuf {
    a.curve.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
        a.out.with_file_name(format!("{stem}.loss.csv"))
    })
}

pub fn train(a: &TrainArgs, seed: u64) -> Result<u8> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    cfg.enforce_nonneg = !a.no_nonneg;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    cfg.validate()?;

    let (train, test) = match &a.data {
        Some(dir) => {
            let mut scenes = load_scenes(dir)?;
            let held_out = if scenes.len() > 1 { (scenes.len() / 5).max(1) } else { 0 };
            let test_scenes = scenes.split_off(scenes.len() - held_out);
            let train = patches_from_images(&scenes, &cfg, a.samples, Split::Train)?;
            let test = if test_scenes.is_empty() {
                gen_synthetic_patches(&cfg, a.test_samples, Split::Test)?
            } else {
                patches_from_images(&test_scenes, &cfg, a.samples, Split::Test)?
            };
            (train, test)
        }
        None => (
            gen_synthetic_patches(&cfg, a.samples, Split::Train)?,
            gen_synthetic_patches(&cfg, a.test_samples, Split::Test)?,
        ),
    };
    info!("training on {} patches, testing on {}", train.len(), test.len());
    let outcome = train_cen(&train, Some(&test), &cfg, a.arch)?;
    let metrics = evaluate_detector(&outcome.model, &test)?;

    save_cen(&a.out, &outcome.model)?;
    write_text(curve_path(a), &outcome.curve_csv())?;
    if let (Some(dir), Some(n)) = (&a.bank_out, a.landmarks) {
        let models = (0..n)
            .map(|landmark| {
                let mut m = outcome.model.clone();
                m.meta = CenMeta { landmark, ..m.meta };
                m
            })
            .collect();
        let bank = CenBank::new(vec![0], vec![cfg.scale_px], models, None)?;
        save_bank(dir, &bank)?;
        // detector reliability is its held-out r², kept strictly positive
        let c = LandmarkReliability::new(vec![metrics.r2.max(1e-3); n])?;
        save_reliability(dir.join("reliability.json"), &c)?;
    }
    println!(
        "loss {:.6} -> {:.6}; test r2 {:.4}, rmse {:.4}",
        outcome.initial_loss(),
        outcome.final_loss(),
        metrics.r2,
        metrics.rmse
    );
    Ok(EXIT_OK)
}

fn self_check(pdm: &Path, dir: &Path) -> Result<u8> {
    let model = load_pdm(pdm)?;
    let mut failures = 0;
    let files = list_files(dir, "json")?;
    for path in &files {
        let sc = SceneSidecar::read(path)?;
        let shape = model.shape_from_params(&sc.true_params)?;
        let worst = shape
            .points
            .iter()
            .zip(&sc.landmarks)
            .map(|(p, q)| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()))
            .fold(0.0f64, f64::max);
        let ok = shape.len() == sc.landmarks.len() && worst <= 1e-9;
        if !ok {
            failures += 1;
        }
        println!("{} {}", if ok { "ok" } else { "MISMATCH" }, path.display());
    }
    println!("{} of {} sidecars consistent with the shape model", files.len() - failures, files.len());
    if failures > 0 {
        return Err(Error::invalid("sidecars", format!("{failures} inconsistent with the shape model")));
    }
    Ok(EXIT_OK)
}

pub fn eval(a: &EvalArgs) -> Result<u8> {
    if a.self_check {
        let (Some(pdm), Some(dir)) = (&a.pdm, &a.data) else {
            return Err(Error::invalid("--self-check", "needs --pdm and --data"));
        };
        return self_check(pdm, dir);
    }
    if a.pred.len() != a.truth.len() {
        return Err(Error::invalid(
            "--pred/--truth",
            format!("{} predictions for {} ground-truth files", a.pred.len(), a.truth.len()),
        ));
    }
    let mut errors = Vec::with_capacity(a.pred.len());
    for (pred, truth) in a.pred.iter().zip(&a.truth) {
        let p = read_landmark_csv(pred)?;
        let sc = SceneSidecar::read(truth)?;
        errors.push(normalized_error(&p, &sc.truth()?, a.mode, sc.eye_corners)?);
    }
    let report = ErrorReport::new(errors, &linear_thresholds(a.curve_max, 100), a.mode)?;
    if let Some(path) = &a.curve {
        write_text(path, &report.curve_csv())?;
    }
    if let Some(path) = &a.report {
        write_json(path, &report.summary_json())?;
    }
    println!("median {:?} ({} images, {} normalised)", report.median, report.count, report.mode);
    Ok(EXIT_OK)
}

pub fn pdm(a: &PdmArgs, seed: u64) -> Result<u8> {
    let model = PdmModel::synthetic(a.landmarks, a.modes, seed)?;
    save_pdm(&a.out, &model)?;
    println!("wrote a {}-landmark, {}-mode shape model to {}", a.landmarks, a.modes, a.out.display());
    Ok(EXIT_OK)
}

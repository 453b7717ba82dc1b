use clmfit::metrics::{median, normalized_error, NormMode};
use clmfit::model_io::{load_pdm, save_pdm};
use clmfit::nurlms::{fit, multi_hypothesis_fit, LandmarkReliability, NurlmsConfig};
use clmfit::pdm::{BBox, PdmModel};
use clmfit::synth::{random_scenes, OracleDetector, PoseSampler, SceneConfig};

fn iod_error(pred: &clmfit::pdm::LandmarkSet, truth: &clmfit::pdm::LandmarkSet) -> f64 {
    normalized_error(pred, truth, NormMode::Iod, Some([0, 1])).unwrap()
}

#[test]
fn scenes_reproduce_the_shape_model() {
    let model = PdmModel::synthetic(24, 6, 1).unwrap();
    let scenes = random_scenes(&model, 100, (256, 256), 5, &PoseSampler::default(), &SceneConfig::default()).unwrap();
    for s in &scenes {
        let shape = model.shape_from_params(&s.true_params).unwrap();
        assert_eq!(shape.points, s.true_landmarks.points);
        assert_eq!(model.visibility(&s.true_params).unwrap(), s.true_landmarks.visibility);
    }
}

#[test]
fn oracle_fit_recovers_landmarks() {
    let model = PdmModel::synthetic(30, 8, 2).unwrap();
    let scenes = random_scenes(&model, 10, (256, 256), 9, &PoseSampler::default(), &SceneConfig::default()).unwrap();
    let reliab = LandmarkReliability::uniform(30);
    let cfg = NurlmsConfig::default();
    let errors: Vec<f64> = scenes
        .iter()
        .map(|s| {
            let bbox = s.true_landmarks.bbox().unwrap();
            let det = OracleDetector::new(s, 1.5);
            let r = multi_hypothesis_fit(&model, &det, &s.image, &bbox, &cfg, &reliab).unwrap();
            assert!(!r.low_confidence);
            iod_error(&r.landmarks, &s.true_landmarks)
        })
        .collect();
    assert!(median(&errors).unwrap() < 0.01, "{errors:?}");
}

#[test]
fn early_acceptance_saves_hypotheses() {
    let model = PdmModel::synthetic(20, 6, 3).unwrap();
    let frontal = PoseSampler { max_yaw_deg: 0.0, max_pitch_deg: 0.0, max_roll_deg: 0.0, ..Default::default() };
    let scenes = random_scenes(&model, 5, (256, 256), 2, &frontal, &SceneConfig::default()).unwrap();
    let reliab = LandmarkReliability::uniform(20);
    let early = NurlmsConfig::default();
    let exhaustive = NurlmsConfig { accept_threshold: None, ..Default::default() };
    for s in &scenes {
        let bbox = s.true_landmarks.bbox().unwrap();
        let det = OracleDetector::new(s, 1.5);
        let a = multi_hypothesis_fit(&model, &det, &s.image, &bbox, &early, &reliab).unwrap();
        let b = multi_hypothesis_fit(&model, &det, &s.image, &bbox, &exhaustive, &reliab).unwrap();
        assert!(a.hypotheses_started < b.hypotheses_started);
        assert_eq!(b.hypotheses_started, 7);
        assert_eq!(a.landmarks, b.landmarks);
    }
}

#[test]
fn single_fit_from_a_perturbed_start() {
    let model = PdmModel::synthetic(16, 4, 4).unwrap();
    let scene = &random_scenes(&model, 1, (200, 200), 8, &PoseSampler::default(), &SceneConfig::default()).unwrap()[0];
    let mut init = scene.true_params.clone();
    init.scale *= 1.08;
    init.translation[0] += 4.0;
    init.translation[1] -= 3.0;
    init.nonrigid.iter_mut().for_each(|q| *q = 0.0);
    let det = OracleDetector::new(scene, 1.5);
    let r =
        fit(&model, &det, &scene.image, &init, &NurlmsConfig::default(), &LandmarkReliability::uniform(16)).unwrap();
    assert!(iod_error(&r.landmarks, &scene.true_landmarks) < 0.02);
    assert_eq!(r.stages.len(), 4);
    assert!(r.map_score.is_finite());
}

#[test]
fn unreachable_box_is_flagged() {
    let model = PdmModel::synthetic(16, 4, 4).unwrap();
    let scene = &random_scenes(&model, 1, (256, 256), 8, &PoseSampler::default(), &SceneConfig::default()).unwrap()[0];
    let det = OracleDetector::new(scene, 1.0);
    // a box far from the face: every response is in the Gaussian tail
    let bbox = BBox { x: 0.0, y: 0.0, width: 30.0, height: 30.0 };
    let r = multi_hypothesis_fit(
        &model,
        &det,
        &scene.image,
        &bbox,
        &NurlmsConfig::default(),
        &LandmarkReliability::uniform(16),
    )
    .unwrap();
    assert!(r.low_confidence);
    assert_eq!(r.hypotheses_completed, 0);
}

#[test]
fn pdm_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let model = PdmModel::synthetic(12, 5, 6).unwrap();
    let path = dir.path().join("pdm.json");
    save_pdm(&path, &model).unwrap();
    assert_eq!(load_pdm(&path).unwrap(), model);
}

/// Objective minimised by mean shift plus the regularised update: each
/// landmark's negative log kernel density, weighted as in the update, plus
/// the shape prior.
fn objective(
    model: &PdmModel,
    params: &clmfit::pdm::PdmParams,
    maps: &[clmfit::cen::ResponseMap],
    cfg: &NurlmsConfig,
    working_scale: f64,
) -> f64 {
    let shape = model.shape_from_params(params).unwrap();
    let data: f64 = maps
        .iter()
        .zip(&shape.points)
        .map(|(m, x)| {
            let mut kde = 0.0;
            for r in 0..m.side() {
                for c in 0..m.side() {
                    let y = [m.origin[0] + c as f64 * m.step, m.origin[1] + r as f64 * m.step];
                    let d2 = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)) * working_scale * working_scale;
                    kde += m.get(r, c) * (-d2 / (2.0 * cfg.rho)).exp();
                }
            }
            -2.0 * cfg.rho * cfg.w_global * kde.ln()
        })
        .sum();
    data + cfg.r * model.regularization(params).unwrap()
}

#[test]
fn objective_rarely_increases_under_iteration() {
    use clmfit::cen::RoiPlacement;
    use clmfit::nurlms::{mean_shift, update_step_scaled, LocalDetector};
    use nalgebra::DVector;

    let model = PdmModel::synthetic(20, 5, 12).unwrap();
    let frontal = PoseSampler { max_yaw_deg: 0.0, max_pitch_deg: 0.0, max_roll_deg: 0.0, ..Default::default() };
    let scenes = random_scenes(&model, 40, (256, 256), 13, &frontal, &SceneConfig::default()).unwrap();
    let cfg = NurlmsConfig::default();
    let reliab = LandmarkReliability::uniform(20);
    let mut monotone = 0;
    for (k, s) in scenes.iter().enumerate() {
        let det = OracleDetector::new(s, 1.5);
        let scale_px = det.scales_px()[0];
        let mut params = s.true_params.clone();
        params.scale *= 1.0 + 0.02 * ((k % 5) as f64 - 2.0);
        params.translation[0] += (k % 7) as f64 - 3.0;
        params.translation[1] -= (k % 3) as f64 - 1.0;
        let working_scale = scale_px / (params.scale * model.reference_length());
        let shape = model.shape_from_params(&params).unwrap();
        let maps: Vec<_> = (0..20)
            .map(|i| {
                let roi = RoiPlacement { center: shape.points[i], size: 25, step: 1.0 / working_scale };
                det.response(&s.image, i, 0.0, scale_px, &roi).unwrap()
            })
            .collect();
        let mut prev = objective(&model, &params, &maps, &cfg, working_scale);
        let mut ok = true;
        for _ in 0..10 {
            let shape = model.shape_from_params(&params).unwrap();
            let mut v = DVector::zeros(40);
            for (i, m) in maps.iter().enumerate() {
                let d = mean_shift(m, shape.points[i], cfg.rho).unwrap();
                v[2 * i] = d[0];
                v[2 * i + 1] = d[1];
            }
            let delta = update_step_scaled(&model, &params, &v, &reliab, &[true; 20], &cfg, working_scale).unwrap();
            params = params.apply_update(&delta).unwrap();
            let next = objective(&model, &params, &maps, &cfg, working_scale);
            ok &= next <= prev + 1e-9 * prev.abs().max(1.0);
            prev = next;
        }
        monotone += usize::from(ok);
    }
    assert!(monotone * 100 >= 95 * scenes.len(), "{monotone} of {} monotone", scenes.len());
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clmfit::cen::{CenArch, CenMeta, CenModel};
use clmfit::model_io::{save_bank, CenBank};
use rand::SeedableRng;

fn clmfit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clmfit"))
        .args(args)
        .current_dir(dir)
        .env_remove("CLMFIT_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_truth(dir: &Path) {
    let sidecar = r#"{
        "version": 1, "image": "none.pgm", "width": 100, "height": 100,
        "true_params": {"scale": 1.0, "translation": [0.0, 0.0], "rotation": [0.0, 0.0, 0.0], "nonrigid": []},
        "landmarks": [[10.0, 10.0], [50.0, 10.0], [30.0, 40.0]],
        "visible": [true, true, true], "prototypes": [0, 0, 0], "eye_corners": [0, 1]
    }"#;
    fs::write(dir.join("truth.json"), sidecar).unwrap();
}

#[test]
fn eval_reports_zero_for_exact_prediction() {
    let dir = tempfile::tempdir().unwrap();
    write_truth(dir.path());
    fs::write(dir.path().join("pred.csv"), "id,x,y,visible\n0,10,10,1\n1,50,10,1\n2,30,40,1\n").unwrap();
    let out = clmfit(dir.path(), &["eval", "--pred", "pred.csv", "--truth", "truth.json", "--mode", "iod"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).starts_with("median 0.0 "), "{}", stdout(&out));
}

#[test]
fn eval_uniform_shift_over_iod() {
    let dir = tempfile::tempdir().unwrap();
    write_truth(dir.path());
    fs::write(dir.path().join("pred.csv"), "id,x,y,visible\n0,12,10,1\n1,52,10,1\n2,32,40,1\n").unwrap();
    let out = clmfit(
        dir.path(),
        &["eval", "--pred", "pred.csv", "--truth", "truth.json", "--curve", "curve.csv", "--report", "r.json"],
    );
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).starts_with("median 0.05 "), "{}", stdout(&out));
    let curve = fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert!(curve.starts_with("threshold,fraction\n"));
    assert!(curve.trim_end().ends_with(",1"));
}

#[test]
fn eval_rejects_landmark_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    write_truth(dir.path());
    fs::write(dir.path().join("pred.csv"), "id,x,y,visible\n0,10,10,1\n1,50,10,1\n").unwrap();
    let out = clmfit(dir.path(), &["eval", "--pred", "pred.csv", "--truth", "truth.json"]);
    assert_eq!(code(&out), 4);
}

#[test]
fn synth_writes_one_image_and_sidecar_per_scene() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&clmfit(p, &["pdm", "--landmarks", "12", "--modes", "3", "--out", "pdm.json"])), 0);
    assert_eq!(code(&clmfit(p, &["--seed", "9", "synth", "--pdm", "pdm.json", "--count", "3", "--out", "s"])), 0);
    let names: Vec<String> =
        fs::read_dir(p.join("s")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".pgm")).count(), 3);
    assert_eq!(names.iter().filter(|n| n.ends_with(".json")).count(), 3);
    let check = clmfit(p, &["eval", "--self-check", "--pdm", "pdm.json", "--data", "s"]);
    assert_eq!(code(&check), 0);
    assert!(stdout(&check).contains("3 of 3"));
}

#[test]
fn fit_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    clmfit(p, &["pdm", "--landmarks", "5", "--modes", "2", "--out", "pdm.json"]);
    let bad_box = clmfit(
        p,
        &["fit", "--pdm", "pdm.json", "--bank", "b", "--image", "x.pgm", "--bbox", "1,2,three,4", "--out", "o.csv"],
    );
    assert_eq!(code(&bad_box), 4);
    assert!(String::from_utf8_lossy(&bad_box.stderr).contains("--bbox"));
    let missing = clmfit(
        p,
        &["fit", "--pdm", "pdm.json", "--bank", "b", "--image", "x.pgm", "--bbox", "1,2,3,4", "--out", "o.csv"],
    );
    assert_eq!(code(&missing), 3);
    assert_eq!(code(&clmfit(p, &["fit", "--pdm", "pdm.json"])), 4);
}

#[test]
fn fit_rejects_ablation_models_unless_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    clmfit(p, &["pdm", "--landmarks", "6", "--modes", "2", "--out", "pdm.json"]);
    clmfit(p, &["synth", "--pdm", "pdm.json", "--count", "1", "--out", "s"]);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let models = (0..6)
        .map(|landmark| {
            let mut m =
                CenModel::random(CenMeta { landmark, view_deg: 0, scale_px: 30 }, CenArch::new(3, 2, 2), &mut rng);
            m.combiner_mut().0[0] = -0.5;
            m
        })
        .collect();
    save_bank(p.join("bank"), &CenBank::new(vec![0], vec![30], models, None).unwrap()).unwrap();
    let args = [
        "fit",
        "--pdm",
        "pdm.json",
        "--bank",
        "bank",
        "--image",
        "s/scene_0000.pgm",
        "--bbox",
        "90,90,80,90",
        "--out",
        "o.csv",
    ];
    let strict = clmfit(p, &args);
    assert_eq!(code(&strict), 4);
    assert!(String::from_utf8_lossy(&strict.stderr).contains("combiner.w[0]"));
    let mut relaxed = args.to_vec();
    relaxed.push("--allow-ablation");
    let ok = clmfit(p, &relaxed);
    assert!(matches!(code(&ok), 0 | 2), "{}", String::from_utf8_lossy(&ok.stderr));
    let csv = fs::read_to_string(p.join("o.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 7);
}

#[test]
fn train_prints_r2_in_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = clmfit(
        p,
        &[
            "train",
            "--arch",
            "4-3-2",
            "--out",
            "m.json",
            "--epochs",
            "2",
            "--samples",
            "60",
            "--test-samples",
            "20",
            "--no-nonneg",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let r2: f64 = text.split("test r2 ").nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&r2));
    assert!(p.join("m.loss.csv").exists());
}

#[test]
fn train_from_scene_directory() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    clmfit(p, &["pdm", "--landmarks", "8", "--modes", "2", "--out", "pdm.json"]);
    clmfit(p, &["synth", "--pdm", "pdm.json", "--count", "3", "--out", "s"]);
    let out =
        clmfit(p, &["train", "--data", "s", "--arch", "4-3-2", "--out", "m.json", "--epochs", "1", "--samples", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_divergence_exits_numerical() {
    let dir = tempfile::tempdir().unwrap();
    let out = clmfit(
        dir.path(),
        &["train", "--arch", "2-2-2", "--out", "m.json", "--epochs", "1", "--samples", "8", "--learning-rate", "1e308"],
    );
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}

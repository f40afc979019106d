use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dceus-mc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn dceus-mc")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small, fast phantom spec shared by the end-to-end tests.
fn tiny_spec(dir: &Path) -> PathBuf {
    let path = dir.join("spec.json");
    std::fs::write(
        &path,
        r#"{
            "dims": [24, 24, 16],
            "lesion_center": [11.5, 11.5, 7.5],
            "lesion_radii": [5.0, 4.5, 3.5],
            "speckle_stdev": 0.0,
            "additive_stdev": 0.0,
            "duration": 14.0,
            "seed": 11
        }"#,
    )
    .unwrap();
    path
}

fn quick_config(dir: &Path) -> PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(
        &path,
        r#"{
            "window_size": 3,
            "baseline_frame_count": 2,
            "parallelism": 1,
            "affine": { "levels": 2 },
            "ffd": { "levels": 2, "max_iterations_per_level": 20 }
        }"#,
    )
    .unwrap();
    path
}

#[test]
fn missing_input_fails_with_io_code_and_names_path() {
    let out = run(&["info", "/no/such/file.nii.gz"]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("/no/such/file.nii.gz"));
}

#[test]
fn invalid_window_size_in_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "window_size": 7 }"#).unwrap();
    // input file must exist so we actually reach config validation
    let spec = tiny_spec(dir.path());
    let cine = dir.path().join("cine.nii.gz");
    let sim = run(&[
        "simulate",
        "--preset",
        "none",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        cine.to_str().unwrap(),
    ]);
    assert!(sim.status.success(), "simulate failed: {}", stderr(&sim));
    let out = run(&[
        "correct",
        cine.to_str().unwrap(),
        "--out",
        dir.path().join("mc.nii.gz").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("window_size"));
}

#[test]
fn simulate_same_seed_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let mut outputs = Vec::new();
    for name in ["a.nii.gz", "b.nii.gz"] {
        let cine = dir.path().join(name);
        let out = run(&[
            "simulate",
            "--preset",
            "respiratory",
            "--seed",
            "7",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            cine.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "simulate failed: {}", stderr(&out));
        outputs.push(std::fs::read(&cine).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn simulate_rerun_from_manifest_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let first = dir.path().join("a.nii.gz");
    let out = run(&[
        "simulate",
        "--preset",
        "none",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        first.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest = dir.path().join("a.nii.gz.manifest.json");
    assert!(manifest.exists());
    let second = dir.path().join("b.nii.gz");
    let out = run(&[
        "simulate",
        "--preset",
        "none",
        "--spec",
        manifest.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn register_pair_recovers_known_shift() {
    use dceus_mc::nifti::{save_volume, Datatype};
    use dceus_mc::phantom::{generate_phantom_cine, MotionParams, MotionTrajectory, PhantomSpec};

    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec {
        texture_amplitude: 0.4,
        speckle_stdev: 0.0,
        additive_stdev: 0.0,
        duration: 4.0,
        ..Default::default()
    };
    let params = MotionParams {
        step_vox: [2.0, -1.0, 1.0],
        step_frame: Some(2),
        ..MotionParams::none()
    };
    let traj = MotionTrajectory::from_params(&params, spec.n_frames(), spec.frame_rate, spec.spacing);
    let out = generate_phantom_cine::<f32>(&spec, &traj).unwrap();

    // frame 3 content sits at +[2,-1,1] voxels relative to frame 0
    let ref_path = dir.path().join("ref.nii.gz");
    let flt_path = dir.path().join("flt.nii.gz");
    save_volume(out.cine.frame(0), &ref_path, Datatype::Float32).unwrap();
    save_volume(out.cine.frame(3), &flt_path, Datatype::Float32).unwrap();

    let out = run(&[
        "register-pair",
        ref_path.to_str().unwrap(),
        flt_path.to_str().unwrap(),
        "--affine-only",
    ]);
    assert!(out.status.success(), "register-pair failed: {}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let t = report["translation_mm"].as_array().unwrap();
    for (a, want) in t.iter().zip([2.0, -1.0, 1.0]) {
        assert!(
            (a.as_f64().unwrap() - want).abs() < 0.25,
            "translation {report:#}"
        );
    }
}

#[test]
fn info_reads_back_simulated_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let cine = dir.path().join("cine.nii.gz");
    let sim = run(&[
        "simulate",
        "--preset",
        "none",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        cine.to_str().unwrap(),
    ]);
    assert!(sim.status.success(), "{}", stderr(&sim));
    let out = run(&["info", cine.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("24 x 24 x 16"), "{text}");
    assert!(text.contains("frames:    14"), "{text}");
    // one row per frame in the intensity table
    assert!(text.contains("mean_intensity"), "{text}");
}

#[test]
fn evaluate_identical_inputs_has_zero_deltas_and_bad_range_fails() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let cine = dir.path().join("cine.nii.gz");
    let sim = run(&[
        "simulate",
        "--preset",
        "none",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        cine.to_str().unwrap(),
    ]);
    assert!(sim.status.success(), "{}", stderr(&sim));
    let masks = dir.path().join("cine.nii.gz.masks.nii.gz");

    let out = run(&[
        "evaluate",
        "--pre",
        cine.to_str().unwrap(),
        "--post",
        cine.to_str().unwrap(),
        "--pre-masks",
        masks.to_str().unwrap(),
        "--post-masks",
        masks.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let m: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let ncc = &m["ncc"];
    assert_eq!(ncc["pre"]["mean"], ncc["post"]["mean"]);
    let ov = &m["overlap"];
    assert_eq!(ov["pre"]["mean_percent"], ov["post"]["mean_percent"]);

    let out = run(&[
        "evaluate",
        "--pre",
        cine.to_str().unwrap(),
        "--post",
        cine.to_str().unwrap(),
        "--range",
        "0:99",
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn correct_end_to_end_writes_outputs_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let cfg = quick_config(dir.path());
    let cine = dir.path().join("cine.nii.gz");
    let sim = run(&[
        "simulate",
        "--preset",
        "none",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        cine.to_str().unwrap(),
    ]);
    assert!(sim.status.success(), "{}", stderr(&sim));

    let mc = dir.path().join("mc.nii.gz");
    let out = run(&[
        "correct",
        cine.to_str().unwrap(),
        "--out",
        mc.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "correct failed: {}", stderr(&out));
    assert!(mc.exists());
    let report_path = dir.path().join("mc.nii.gz.report.json");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["detected_start"].is_u64());
    assert!(report["window_plan"]["windows"].as_array().unwrap().len() >= 1);
    let manifest_path = dir.path().join("mc.nii.gz.manifest.json");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["config"]["window_size"], 3);
}

//! End-to-end checks of the command-line binary: configuration handling,
//! on-disk formats, manifest integrity, determinism, and exit codes. All
//! runs use deliberately tiny grids; numerical quality is covered elsewhere.

use std::path::Path;
use std::process::{Command, Output};

use geoxray::cli::Manifest;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_geoxray"))
}

/// Tiny Euclidean run shared by most tests, sized for speed.
fn tiny_args(out_dir: &Path) -> Vec<String> {
    [
        "grid_n=33",
        "boundary_n=12",
        "n_theta=16",
        "h_step=0.002",
        "cache_h_step=0.004",
        "metric.kind=euclidean",
        "attenuation=gaussian",
        "attenuation_scale=0.5",
        "neumann.max_iters=3",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .chain([
        "--set".to_string(),
        format!("out_dir={}", out_dir.display()),
    ])
    .collect()
}

fn run_ok(verb: &str, args: &[String]) -> Output {
    let out = bin().arg(verb).args(args).output().expect("spawn binary");
    assert!(
        out.status.success(),
        "{verb} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn test_unknown_config_key_is_rejected() {
    let out = bin()
        .args(["invert", "--set", "grid_nn=33"])
        .output()
        .expect("spawn binary");
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("grid_nn"), "stderr should name the bad key: {err}");
}

#[test]
fn test_malformed_set_is_rejected() {
    let out = bin()
        .args(["phantom", "--set", "grid_n"])
        .output()
        .expect("spawn binary");
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn test_phantom_manifest_covers_all_files_with_matching_hashes() {
    let dir = tempfile::tempdir().unwrap();
    run_ok("phantom", &tiny_args(dir.path()));
    let manifest = Manifest::read(&dir.path().join("phantom.manifest.json")).unwrap();
    assert_eq!(manifest.verb, "phantom");
    // f, a, c, each as bin + sidecar + pgm + pgm sidecar.
    assert_eq!(manifest.files.len(), 12);
    for (name, entry) in &manifest.files {
        let bytes = std::fs::read(dir.path().join(name)).expect("manifest file exists");
        assert_eq!(bytes.len() as u64, entry.bytes, "{name}: size");
        assert_eq!(sha256_hex(&bytes), entry.sha256, "{name}: hash");
    }
    // Every file in the directory is reachable from the manifest.
    for f in std::fs::read_dir(dir.path()).unwrap() {
        let name = f.unwrap().file_name().into_string().unwrap();
        if name != "phantom.manifest.json" {
            assert!(manifest.files.contains_key(&name), "unlisted file {name}");
        }
    }
}

#[test]
fn test_manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    run_ok("phantom", &tiny_args(dir.path()));
    let path = dir.path().join("phantom.manifest.json");
    let manifest = Manifest::read(&path).unwrap();
    let rewritten = dir.path().join("copy");
    std::fs::create_dir_all(&rewritten).unwrap();
    let copy_path = manifest.write(&rewritten).unwrap();
    assert_eq!(Manifest::read(&copy_path).unwrap(), manifest);
    assert_eq!(
        std::fs::read(&copy_path).unwrap(),
        std::fs::read(&path).unwrap(),
        "serialization is deterministic"
    );
}

#[test]
fn test_pgm_previews_are_wellformed() {
    let dir = tempfile::tempdir().unwrap();
    run_ok("phantom", &tiny_args(dir.path()));
    let pgm = std::fs::read(dir.path().join("f.pgm")).unwrap();
    let header = b"P5\n33 33\n65535\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 2 * 33 * 33);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("f.pgm.json")).unwrap())
            .unwrap();
    let window = sidecar["window"].as_array().unwrap();
    assert!(window[0].as_f64().unwrap() < window[1].as_f64().unwrap());
}

#[test]
fn test_forward_is_bit_identical_across_runs() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_ok("forward", &tiny_args(dir_a.path()));
    run_ok("forward", &tiny_args(dir_b.path()));
    let a = std::fs::read(dir_a.path().join("data.bin")).unwrap();
    let b = std::fs::read(dir_b.path().join("data.bin")).unwrap();
    assert_eq!(a, b, "same config must reproduce identical bytes");
    assert_eq!(
        std::fs::read(dir_a.path().join("data.json")).unwrap(),
        std::fs::read(dir_b.path().join("data.json")).unwrap()
    );
}

#[test]
fn test_invert_consumes_forward_data_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    run_ok("forward", &tiny_args(dir.path()));
    let mut args = tiny_args(dir.path());
    args.push("--data".into());
    args.push(dir.path().join("data.bin").display().to_string());
    run_ok("invert", &args);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert!(report["errors"].as_array().is_some_and(|e| !e.is_empty()));
    let csv = std::fs::read_to_string(dir.path().join("iterations.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iterate,residual_norm,rel_error,step_norm"));
    assert!(lines.count() >= 3, "one row per recorded iterate");
    let manifest = Manifest::read(&dir.path().join("invert.manifest.json")).unwrap();
    for name in ["f_est.bin", "f_est.json", "f_est.pgm", "error.pgm", "report.json", "iterations.csv"] {
        assert!(manifest.files.contains_key(name), "missing {name}");
    }
}

#[test]
fn test_invert_rejects_mismatched_data_shape() {
    let dir = tempfile::tempdir().unwrap();
    run_ok("forward", &tiny_args(dir.path()));
    let mut args = tiny_args(dir.path());
    // Same data files, larger configured boundary grid.
    for a in args.iter_mut() {
        if a == "boundary_n=12" {
            *a = "boundary_n=16".into();
        }
    }
    args.push("--data".into());
    args.push(dir.path().join("data.bin").display().to_string());
    let out = bin().arg("invert").args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("grid mismatch"), "stderr: {err}");
}

#[test]
fn test_invert_detects_corrupted_data() {
    let dir = tempfile::tempdir().unwrap();
    run_ok("forward", &tiny_args(dir.path()));
    let path = dir.path().join("data.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[40] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    let mut args = tiny_args(dir.path());
    args.push("--data".into());
    args.push(path.display().to_string());
    let out = bin().arg("invert").args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("hash"), "stderr: {err}");
}

#[test]
fn test_config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.json");
    std::fs::write(
        &config_path,
        serde_json::json!({
            "grid_n": 33,
            "boundary_n": 12,
            "n_theta": 16,
            "h_step": 0.002,
            "metric": {"kind": "euclidean"},
            "phantom": "jumpy",
            "out_dir": dir.path().join("out").display().to_string(),
        })
        .to_string(),
    )
    .unwrap();
    let out = run_ok(
        "phantom",
        &[
            "--config".to_string(),
            config_path.display().to_string(),
            "--set".to_string(),
            "phantom=smooth-gaussians".to_string(),
        ],
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("smooth-gaussians"),
        "--set must override the file: {stdout}"
    );
    let manifest = Manifest::read(&dir.path().join("out/phantom.manifest.json")).unwrap();
    assert_eq!(manifest.config.phantom, "smooth-gaussians");
    assert_eq!(manifest.config.grid_n, 33);
}

#[test]
fn test_doppler_invert_writes_vector_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = tiny_args(dir.path());
    for a in args.iter_mut() {
        if a == "attenuation=gaussian" {
            *a = "attenuation=constant".into();
        }
        if a == "neumann.max_iters=3" {
            *a = "neumann.max_iters=8".into();
        }
    }
    args.extend(["--set".into(), "phantom=poly-vector".into()]);
    args.extend(["--set".into(), "method=doppler".into()]);
    run_ok("invert", &args);
    for name in ["f1_est.bin", "f2_est.bin", "error.pgm"] {
        assert!(dir.path().join(name).is_file(), "missing {name}");
    }
}

#[test]
fn test_doppler_rejects_scalar_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = tiny_args(dir.path());
    args.extend(["--set".into(), "method=doppler".into()]);
    let out = bin().arg("forward").args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("vector phantom"), "stderr: {err}");
}

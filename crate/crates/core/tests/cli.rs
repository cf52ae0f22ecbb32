//! End-to-end tests of the `sphere-attn` binary.

use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use sphere_attn::attention::{SphereConfig, SphereWeights};
use sphere_attn::format::{load_cloud, load_weights, save_cloud, save_weights};
use sphere_attn::geometry::{to_spherical, PointCloud};
use sphere_attn::numerics::{matmul, DenseMatrix};
use sphere_attn::partition::{CubicWindowConfig, RadialWindowConfig};
use sphere_attn::synth::{brute_force_forward, generate_scene, BeamSceneConfig};

fn sphere_attn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sphere-attn")).args(args).env_remove("SPHERE_ATTN_THREADS").output().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_is_deterministic_and_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.spc"), dir.path().join("b.spc"));
    let first = json(&sphere_attn(&["gen", "--seed", "7", "--out", p(&a)]));
    json(&sphere_attn(&["gen", "--seed", "7", "--out", p(&b)]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let expected = generate_scene(&BeamSceneConfig::default()).unwrap();
    assert_eq!(first["points"], expected.len());
    assert_eq!(load_cloud(&a).unwrap().len(), expected.len());
}

#[test]
fn gen_counts_small_fan_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"scene": {"beam_count": 1, "azimuth_steps": 4, "dropout_prob": 0.0}}"#).unwrap();
    let out = json(&sphere_attn(&["gen", "--config", p(&cfg), "--out", p(&dir.path().join("s.spc"))]));
    assert_eq!(out["points"], 4);
}

#[test]
fn gen_reports_io_failure() {
    let out = sphere_attn(&["gen", "--out", "/nonexistent-dir/x.spc"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error:"));
}

#[test]
fn partition_stats_two_points_and_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let two = dir.path().join("two.spc");
    let pts = vec![[10.0, 0.1, 0.0], [40.0, 0.5, -0.25]];
    save_cloud(&two, &PointCloud::new(pts.clone(), DenseMatrix::zeros(2, 0)).unwrap()).unwrap();
    let stats = json(&sphere_attn(&["partition-stats", p(&two), "--mode", "radial"]));
    assert_eq!(stats["window_count"], 1);
    let (a, b) = (pts[0].map(|v| v as f32 as f64), pts[1].map(|v| v as f32 as f64));
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    assert_eq!(stats["reach"]["max"].as_f64().unwrap(), d);
    assert_eq!(stats["reach"]["approximate_flag"], false);

    let scene = dir.path().join("scene.spc");
    json(&sphere_attn(&["gen", "--out", p(&scene)]));
    let cubic = json(&sphere_attn(&["partition-stats", p(&scene), "--mode", "cubic", "--cubic-side", "5"]));
    assert!(cubic["reach"]["max"].as_f64().unwrap() <= 5.0 * 3f64.sqrt());
    let radial = json(&sphere_attn(&["partition-stats", p(&scene)]));
    assert!(radial["reach"]["max"].as_f64().unwrap() > 50.0);
    for key in ["window_count", "occupancy", "histogram"] {
        assert!(radial.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn partition_stats_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.spc");
    std::fs::write(&bad, b"XPC1\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
    let out = sphere_attn(&["partition-stats", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("malformed"));

    std::fs::write(&bad, b"SPC1\x05\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
    let out = sphere_attn(&["partition-stats", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("truncated"));
}

#[test]
fn forward_zero_weights_and_single_point() {
    let dir = tempfile::tempdir().unwrap();
    let (input, weights, out) = (dir.path().join("in.spc"), dir.path().join("w.spw"), dir.path().join("out.spc"));
    let scene = generate_scene(&BeamSceneConfig { beam_count: 4, azimuth_steps: 64, ..Default::default() }).unwrap();
    save_cloud(&input, &scene).unwrap();
    save_weights(&weights, &SphereWeights::<f32>::zeros(4, 4, 16)).unwrap();
    json(&sphere_attn(&["forward", p(&input), "--weights", p(&weights), "--out", p(&out)]));
    let z = load_cloud(&out).unwrap();
    assert_eq!(z.positions(), load_cloud(&input).unwrap().positions());
    assert!(z.features().data().iter().all(|&v| v == 0.0));

    let single = PointCloud::new(vec![[5.0, 1.0, 0.5]], DenseMatrix::from_fn(1, 16, |_, j| j as f64 / 16.0)).unwrap();
    save_cloud(&input, &single).unwrap();
    let w = SphereWeights::<f64>::random(4, 4, 16, &mut ChaCha8Rng::seed_from_u64(3));
    save_weights(&weights, &w).unwrap();
    let w: SphereWeights<f64> = load_weights(&weights).unwrap();
    json(&sphere_attn(&["forward", p(&input), "--weights", p(&weights), "--out", p(&out), "--f64"]));
    let expected = matmul(&matmul(single.features(), &w.params.w_v).unwrap(), &w.params.w_proj).unwrap();
    let got = load_cloud(&out).unwrap();
    // output passes through f32 storage
    assert!(got.features().max_abs_diff(&expected).unwrap() < 1e-6);
}

#[test]
fn forward_matches_oracle_on_scene() {
    let dir = tempfile::tempdir().unwrap();
    let (input, weights, out) = (dir.path().join("in.spc"), dir.path().join("w.spw"), dir.path().join("out.spc"));
    let scene = generate_scene(&BeamSceneConfig {
        beam_count: 16,
        azimuth_steps: 360,
        r_max_scene: 60.0,
        ..Default::default()
    })
    .unwrap();
    let keep: Vec<usize> =
        (0..scene.len()).filter(|&i| to_spherical(scene.positions()[i], [0.0; 3]).theta < 24.0).take(200).collect();
    save_cloud(&input, &scene.select(&keep)).unwrap();
    save_weights(&weights, &SphereWeights::<f32>::random(4, 4, 16, &mut ChaCha8Rng::seed_from_u64(11))).unwrap();
    let args = ["--window-theta", "6", "--window-phi", "6", "--window-r", "40", "--cubic-side", "8"];
    let mut cmd = vec!["forward", p(&input), "--weights", p(&weights), "--out", p(&out)];
    cmd.extend(args);
    let report = json(&sphere_attn(&cmd));
    assert_eq!(report["tokens"], 200);
    assert_eq!(report["precision"], "f32");

    let cloud = load_cloud(&input).unwrap();
    let w: SphereWeights<f64> = load_weights(&weights).unwrap();
    let cfg = SphereConfig::for_windows(
        RadialWindowConfig { delta_theta: 6.0, delta_phi: 6.0, r_max: 40.0 },
        CubicWindowConfig::uniform(8.0),
        16,
    );
    let oracle = brute_force_forward(cloud.positions(), cloud.features(), &cfg, &w).unwrap();
    let diff = load_cloud(&out).unwrap().features().max_abs_diff(&oracle).unwrap();
    assert!(diff < 1e-6, "{diff:e}");

    // rerun is byte-identical
    let first = std::fs::read(&out).unwrap();
    json(&sphere_attn(&cmd));
    assert_eq!(std::fs::read(&out).unwrap(), first);
}

#[test]
fn forward_dim_mismatch_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.spc");
    save_cloud(&input, &PointCloud::new(vec![[1.0, 2.0, 3.0]], DenseMatrix::zeros(1, 5)).unwrap()).unwrap();
    let out = sphere_attn(&["forward", p(&input), "--out", p(&dir.path().join("o.spc"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("invalid configuration"), "{}", stderr(&out));
}

#[test]
fn gradcheck_pass_fail_and_config() {
    let ok = json(&sphere_attn(&["gradcheck", "--seed", "0"]));
    assert_eq!(ok["passed"], true);
    assert_eq!(ok["max_rel_err"].as_object().unwrap().len(), 11);
    assert!(ok["max_rel_err"]["radial.t_r"].as_f64().unwrap() < 1e-4);

    let bad = sphere_attn(&["gradcheck", "--seed", "0", "--corrupt-backward"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("w_k"), "{}", stderr(&bad));
    let body: Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(body["passed"], false);

    let odd = sphere_attn(&["gradcheck", "--heads", "3"]);
    assert_eq!(odd.status.code(), Some(2));
    assert!(stderr(&odd).contains("even head count"));
    assert!(odd.stdout.is_empty());
}

#[test]
fn bench_reports_timings_and_stable_hash() {
    let run = || json(&sphere_attn(&["bench", "--synthetic", "3000", "--repeat", "1"]));
    let (a, b) = (run(), run());
    for key in ["partition", "forward"] {
        assert!(a[key]["median_s"].as_f64().unwrap() >= 0.0);
        assert!(a[key]["p95_s"].as_f64().is_some());
    }
    assert_eq!(a["points"], 3000);
    assert_eq!(a["radial_partition_sha256"], b["radial_partition_sha256"]);
    assert_eq!(a["cubic_partition_sha256"], b["cubic_partition_sha256"]);
    assert_eq!(a["radial_partition_sha256"].as_str().unwrap().len(), 64);

    let zero = sphere_attn(&["bench", "--synthetic", "10", "--repeat", "0"]);
    assert_eq!(zero.status.code(), Some(2));
}

#[test]
fn thread_cap_from_environment() {
    let bin = env!("CARGO_BIN_EXE_sphere-attn");
    let ok = Command::new(bin)
        .args(["bench", "--synthetic", "500", "--repeat", "2"])
        .env("SPHERE_ATTN_THREADS", "1")
        .output()
        .unwrap();
    assert!(ok.status.success());
    let bad =
        Command::new(bin).args(["bench", "--synthetic", "500"]).env("SPHERE_ATTN_THREADS", "zero").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("SPHERE_ATTN_THREADS"));
}

#[test]
fn voxel_flag_preprocesses_input() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.spc");
    let total = json(&sphere_attn(&["gen", "--out", p(&scene)]))["points"].as_u64().unwrap();
    let stats = json(&sphere_attn(&["partition-stats", p(&scene), "--voxel", "2.0"]));
    let kept = stats["points"].as_u64().unwrap();
    assert!(kept > 0 && kept < total, "{kept} of {total}");
}

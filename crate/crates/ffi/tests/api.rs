//! Exercises the C ABI from Rust, the way a foreign caller would.

use std::ffi::{CStr, CString};
use std::ptr;

use sphere_attn_ffi::*;

fn last_error() -> String {
    let p = sa_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn cstr(s: &std::path::Path) -> CString {
    CString::new(s.to_str().unwrap()).unwrap()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(sa_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn generate_forward_and_stats() {
    unsafe {
        let mut cloud = ptr::null_mut();
        assert_eq!(sa_cloud_generate(4, 128, 1.0, 60.0, 0.0, 16, 3, &mut cloud), SaStatus::Ok);
        assert!(sa_last_error_message().is_null());
        assert_eq!(sa_cloud_len(cloud), 512);
        assert_eq!(sa_cloud_feature_dim(cloud), 16);

        let mut model = ptr::null_mut();
        assert_eq!(sa_model_random(4, 4, 16, 9, &mut model), SaStatus::Ok);
        assert_eq!(sa_model_channels(model), 16);

        let mut out = vec![0f32; 512 * 16];
        assert_eq!(sa_forward(model, cloud, out.as_mut_ptr(), out.len()), SaStatus::Ok);
        assert!(out.iter().all(|v| v.is_finite()) && out.iter().any(|&v| v != 0.0));
        let mut again = vec![0f32; out.len()];
        assert_eq!(sa_forward(model, cloud, again.as_mut_ptr(), again.len()), SaStatus::Ok);
        assert_eq!(out, again);

        assert_eq!(sa_forward(model, cloud, out.as_mut_ptr(), out.len() - 1), SaStatus::Shape);
        assert!(last_error().contains("need 8192"));

        let mut json = ptr::null_mut();
        assert_eq!(sa_partition_stats_json(model, cloud, SaMode::Radial, &mut json), SaStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        sa_string_free(json);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["window_count"].as_u64().unwrap() > 0);
        assert!(v["reach"].get("approximate_flag").is_some());

        sa_model_free(model);
        sa_cloud_free(cloud);
    }
}

#[test]
fn matches_library_forward() {
    use rand::SeedableRng;
    use sphere_attn::attention::{sphereformer_forward, SphereConfig, SphereWeights};
    use sphere_attn::partition::{CubicWindowConfig, RadialWindowConfig};
    use sphere_attn::synth::{generate_scene, BeamSceneConfig};

    unsafe {
        let mut cloud = ptr::null_mut();
        assert_eq!(sa_cloud_generate(8, 64, 1.0, 50.0, 0.1, 8, 5, &mut cloud), SaStatus::Ok);
        let mut model = ptr::null_mut();
        assert_eq!(sa_model_random(2, 4, 8, 6, &mut model), SaStatus::Ok);
        assert_eq!(sa_model_set_windows(model, 10.0, 10.0, 30.0, 7.0), SaStatus::Ok);
        let n = sa_cloud_len(cloud);
        let mut out = vec![0f32; n * 8];
        assert_eq!(sa_forward(model, cloud, out.as_mut_ptr(), out.len()), SaStatus::Ok);

        let scene = generate_scene(&BeamSceneConfig {
            beam_count: 8,
            azimuth_steps: 64,
            r_min: 1.0,
            r_max_scene: 50.0,
            dropout_prob: 0.1,
            feature_dim: 8,
            seed: 5,
        })
        .unwrap();
        let w = SphereWeights::<f32>::random(2, 4, 8, &mut rand_chacha::ChaCha8Rng::seed_from_u64(6));
        let cfg = SphereConfig::for_windows(
            RadialWindowConfig { delta_theta: 10.0, delta_phi: 10.0, r_max: 30.0 },
            CubicWindowConfig::uniform(7.0),
            8,
        );
        let z = sphereformer_forward(scene.positions(), &scene.features().cast::<f32>(), &cfg, &w).unwrap();
        assert_eq!(z.data(), out.as_slice());
        sa_model_free(model);
        sa_cloud_free(cloud);
    }
}

#[test]
fn buffers_and_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cloud_path = cstr(&dir.path().join("c.spc"));
    let model_path = cstr(&dir.path().join("m.spw"));
    unsafe {
        let pos = [1.0f32, 2.0, 3.0, -4.0, 5.0, 0.5];
        let feat = [0.1f32, 0.2, 0.3, 0.4];
        let mut cloud = ptr::null_mut();
        assert_eq!(sa_cloud_new(pos.as_ptr(), feat.as_ptr(), 2, 2, &mut cloud), SaStatus::Ok);
        assert_eq!(sa_cloud_save(cloud, cloud_path.as_ptr()), SaStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(sa_cloud_load(cloud_path.as_ptr(), &mut back), SaStatus::Ok);
        assert_eq!((sa_cloud_len(back), sa_cloud_feature_dim(back)), (2, 2));

        let mut model = ptr::null_mut();
        assert_eq!(sa_model_random(2, 1, 4, 1, &mut model), SaStatus::Ok);
        assert_eq!(sa_model_save(model, model_path.as_ptr()), SaStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(sa_model_load(model_path.as_ptr(), &mut loaded), SaStatus::Ok);
        let (mut a, mut b) = ([0f32; 4], [0f32; 4]);
        assert_eq!(sa_forward(model, back, a.as_mut_ptr(), 4), SaStatus::Ok);
        assert_eq!(sa_forward(loaded, back, b.as_mut_ptr(), 4), SaStatus::Ok);
        assert_eq!(a, b);

        for p in [model, loaded] {
            sa_model_free(p);
        }
        sa_cloud_free(cloud);
        sa_cloud_free(back);
    }
}

#[test]
fn error_codes() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(sa_model_random(3, 2, 16, 0, &mut out), SaStatus::Config);
        assert!(last_error().contains("even head count"));
        assert!(out.is_null());

        assert_eq!(sa_cloud_load(ptr::null(), &mut ptr::null_mut()), SaStatus::NullPointer);
        let missing = CString::new("/nonexistent/file.spc").unwrap();
        assert_eq!(sa_cloud_load(missing.as_ptr(), &mut ptr::null_mut()), SaStatus::Io);

        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.spc");
        std::fs::write(&bad, b"NOPE").unwrap();
        assert_eq!(sa_cloud_load(cstr(&bad).as_ptr(), &mut ptr::null_mut()), SaStatus::Format);

        let nan = [f32::NAN, 0.0, 0.0];
        assert_eq!(sa_cloud_new(nan.as_ptr(), ptr::null(), 1, 0, &mut ptr::null_mut()), SaStatus::Numeric);

        let mut cloud = ptr::null_mut();
        assert_eq!(sa_cloud_generate(1, 4, 1.0, 10.0, 0.0, 5, 0, &mut cloud), SaStatus::Ok);
        let mut model = ptr::null_mut();
        assert_eq!(sa_model_random(2, 2, 8, 0, &mut model), SaStatus::Ok);
        let mut buf = [0f32; 16];
        assert_eq!(sa_forward(model, cloud, buf.as_mut_ptr(), 16), SaStatus::Config);
        assert_eq!(sa_forward(ptr::null(), cloud, buf.as_mut_ptr(), 16), SaStatus::NullPointer);
        assert_eq!(sa_model_set_windows(model, -1.0, 2.0, 120.0, 5.0), SaStatus::Config);
        assert_eq!(sa_cloud_generate(1, 4, 5.0, 5.0, 0.0, 1, 0, &mut ptr::null_mut()), SaStatus::Config);

        sa_model_free(model);
        sa_cloud_free(cloud);
        sa_cloud_free(ptr::null_mut());
        sa_string_free(ptr::null_mut());
    }
}

#[test]
fn exp_split_index_values() {
    assert_eq!(sa_exp_split_index(0.0, 1.0, 16), 8);
    assert_eq!(sa_exp_split_index(2.0, 1.0, 16), 9);
    assert_eq!(sa_exp_split_index(-1.0, 1.0, 16), 7);
    assert_eq!(sa_exp_split_index(1e9, 1.0, 16), 15);
    assert_eq!(sa_exp_split_index(1.0, 1.0, 7), -1);
    assert_eq!(sa_exp_split_index(1.0, 0.0, 16), -1);
}

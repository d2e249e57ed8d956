use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use bayesdiff::laplace::{fit_lastlayer, LaplaceConfig};
use bayesdiff::moments::{initial_latent, run_bayesdiff, BayesDiffConfig, SamplerKind, SkipSchedule};
use bayesdiff::score_model::{synth_dataset, NetConfig};
use bayesdiff::{DatasetKind, GammaMode, LastLayerPredictor, NoiseSchedule, ScoreNet, Shape};
use bayesdiff_ffi::*;

fn last_error() -> String {
    let p = bd_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Writes an untrained 2x2 network with a fitted posterior; the schedule has
/// 12 steps.
fn write_model(dir: &Path) -> (PathBuf, PathBuf) {
    let shape = Shape::new(1, 2, 2);
    let s = NoiseSchedule::linear_rescaled(12).unwrap();
    let cfg = NetConfig { shape, hidden: vec![8], time_features: 4, time_scale: 12.0, input_skip: true };
    let net = ScoreNet::new(cfg, 5).unwrap();
    let data = synth_dataset(DatasetKind::TwoModeGaussian, 64, 1, shape).unwrap();
    let post = fit_lastlayer(&net, &data, &s, &LaplaceConfig::from_weight_decay(1e-3, 1.0, 32, 0)).unwrap();
    let (ckpt, posterior) = (dir.join("checkpoint.bin"), dir.join("posterior.bin"));
    net.save(&ckpt).unwrap();
    post.save(&posterior).unwrap();
    (ckpt, posterior)
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(bd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn schedule_handles() {
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(bd_schedule_new_linear(1e-4, 0.02, 1000, &mut s), BdStatus::Ok);
        assert_eq!(bd_schedule_steps(s), 1000);
        let mut ab = 0.0;
        assert_eq!(bd_schedule_alpha_bar(s, 1000, &mut ab), BdStatus::Ok);
        assert!(ab > 0.0 && ab < 1e-4);
        assert_eq!(bd_schedule_alpha_bar(s, 1001, &mut ab), BdStatus::InvalidArgument);
        assert!(last_error().contains("1001"));
        assert_eq!(bd_schedule_alpha_bar(s, 0, ptr::null_mut()), BdStatus::NullPointer);
        bd_schedule_free(s);

        let mut bad = ptr::null_mut();
        assert_eq!(bd_schedule_new_linear(0.0, 0.0, 10, &mut bad), BdStatus::InvalidArgument);
        assert!(bad.is_null());
        assert!(last_error().contains("schedule"));
        assert_eq!(bd_schedule_new_linear_rescaled(10, ptr::null_mut()), BdStatus::NullPointer);
        assert_eq!(bd_schedule_steps(ptr::null()), 0);
        bd_schedule_free(ptr::null_mut());
    }
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = cstr(&tmp.path().join("nope.bin"));
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(bd_model_load(missing.as_ptr(), missing.as_ptr(), &mut m), BdStatus::Io);
        assert!(m.is_null());
        assert_eq!(bd_model_load(ptr::null(), missing.as_ptr(), &mut m), BdStatus::NullPointer);
        assert!(last_error().contains("checkpoint_path"));
    }
}

#[test]
fn run_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let (ckpt, posterior) = write_model(tmp.path());
    let (c, p) = (cstr(&ckpt), cstr(&posterior));
    let mut m = ptr::null_mut();
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(bd_model_load(c.as_ptr(), p.as_ptr(), &mut m), BdStatus::Ok);
        assert_eq!(bd_schedule_new_linear_rescaled(12, &mut s), BdStatus::Ok);
        let mut dim = 0;
        assert_eq!(bd_model_dim(m, &mut dim), BdStatus::Ok);
        assert_eq!(dim, 4);

        let (mut x0, mut mean0, mut var0) = ([0.0; 4], [0.0; 4], [0.0; 4]);
        let mut stats = BdRunStats::default();
        let status = bd_run_bayesdiff(
            m,
            s,
            BdSampler::DpmSolver2,
            4,
            2,
            7,
            ptr::null(),
            4,
            x0.as_mut_ptr(),
            mean0.as_mut_ptr(),
            var0.as_mut_ptr(),
            &mut stats,
        );
        assert_eq!(status, BdStatus::Ok, "{}", last_error());

        let net = ScoreNet::load(&ckpt).unwrap();
        let post = bayesdiff::LaplacePosterior::load(&posterior).unwrap();
        let pred = LastLayerPredictor::new(&net, &post, GammaMode::Exact).unwrap();
        let sched = NoiseSchedule::linear_rescaled(12).unwrap();
        let cfg = BayesDiffConfig::new(SamplerKind::DpmSolver2, 4, 7).with_skip(SkipSchedule::interval(2, 12).unwrap());
        let (want, _) = run_bayesdiff(&initial_latent(net.shape(), 7), &pred, &sched, &cfg).unwrap();
        assert_eq!(x0.as_slice(), want.x0.as_slice());
        assert_eq!(mean0.as_slice(), want.mean0.as_slice());
        assert_eq!(var0.as_slice(), want.var0.as_slice());
        assert_eq!(stats.nfe_count, want.nfe_count);
        assert_eq!(stats.image_uncertainty, want.image_uncertainty);

        // explicit starting latent, optional outputs omitted
        let x_t = [0.5, -0.5, 1.0, 0.0];
        let status = bd_run_bayesdiff(
            m,
            s,
            BdSampler::Ddim,
            4,
            0,
            1,
            x_t.as_ptr(),
            4,
            x0.as_mut_ptr(),
            ptr::null_mut(),
            var0.as_mut_ptr(),
            ptr::null_mut(),
        );
        assert_eq!(status, BdStatus::Ok);
        assert!(var0.iter().all(|v| *v >= 0.0));

        let status = bd_run_bayesdiff(
            m,
            s,
            BdSampler::Ddim,
            4,
            0,
            1,
            ptr::null(),
            3,
            x0.as_mut_ptr(),
            ptr::null_mut(),
            var0.as_mut_ptr(),
            ptr::null_mut(),
        );
        assert_eq!(status, BdStatus::ShapeMismatch);
        let status = bd_run_bayesdiff(
            m,
            s,
            BdSampler::Ddim,
            0,
            0,
            1,
            ptr::null(),
            4,
            x0.as_mut_ptr(),
            ptr::null_mut(),
            var0.as_mut_ptr(),
            ptr::null_mut(),
        );
        assert_eq!(status, BdStatus::InvalidArgument);
        bd_model_free(m);
        bd_schedule_free(s);
    }
}

/// Compiles `tests/c/smoke.c` against the generated header and the static
/// library, then runs it.
#[test]
fn c_program_links_against_the_static_library() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libbayesdiff_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let out = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .output()
        .expect("cc runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let (ckpt, posterior) = write_model(tmp.path());
    let run = Command::new(&exe).arg(&ckpt).arg(&posterior).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    let fields: Vec<&str> = stdout.split_whitespace().collect();
    assert_eq!(fields[0], "4");
    // T = 12, interval 4 -> uncertain steps {12, 8, 4}: 12 + 4 * 3
    assert_eq!(fields[1], "24");
    assert!(fields[2].parse::<f64>().unwrap() > 0.0);
}

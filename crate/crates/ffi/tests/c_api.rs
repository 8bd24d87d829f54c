use std::ffi::{CStr, CString};
use std::ptr;

use advlab_ffi::*;

const TINY: &str = r#"
seed = 3

[data]
source = { kind = "synthetic", classes = 2, per_class = 40, side = 12 }

[model]
architecture = { kind = "mlp", hidden = [8] }

[model.train]
epochs = 3

[[attacks]]
kind = "bim"
epsilon = "2/256"

[detectors]
kinds = ["maha"]
"#;

fn last_error() -> String {
    let p = advlab_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_config() -> *mut AdvlabConfig {
    let text = CString::new(TINY).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { advlab_config_from_toml(text.as_ptr(), &mut cfg) }, AdvlabStatus::Ok);
    assert!(!cfg.is_null());
    cfg
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(advlab_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_hash_and_seed() {
    let cfg = tiny_config();
    let mut buf = [0 as std::ffi::c_char; 65];
    assert_eq!(unsafe { advlab_config_hash(cfg, buf.as_mut_ptr(), buf.len()) }, AdvlabStatus::Ok);
    let h1 = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    assert_eq!(h1.len(), 64);
    assert!(h1.chars().all(|c| c.is_ascii_hexdigit()));

    assert_eq!(unsafe { advlab_config_hash(cfg, buf.as_mut_ptr(), 64) }, AdvlabStatus::BufferTooSmall);
    assert!(last_error().contains("65"));

    assert_eq!(unsafe { advlab_config_set_seed(cfg, 4) }, AdvlabStatus::Ok);
    assert_eq!(unsafe { advlab_config_hash(cfg, buf.as_mut_ptr(), buf.len()) }, AdvlabStatus::Ok);
    let h2 = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    assert_ne!(h1, h2);
    unsafe { advlab_config_free(cfg) };
}

#[test]
fn config_errors_carry_codes_and_messages() {
    let bad = CString::new("seed = 1\n[data]\nsource = { kind = \"synthetic\", classes = 2, per_class = 4, side = 12 }\n[model]\narchitecture = { kind = \"mlp\", hidden = [4] }\ntypo = 3\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { advlab_config_from_toml(bad.as_ptr(), &mut cfg) }, AdvlabStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("typo"), "{}", last_error());

    assert_eq!(unsafe { advlab_config_from_toml(ptr::null(), &mut cfg) }, AdvlabStatus::NullPointer);
    let missing = CString::new("/nonexistent/advlab.toml").unwrap();
    assert_eq!(unsafe { advlab_config_load(missing.as_ptr(), &mut cfg) }, AdvlabStatus::Io);
}

#[test]
fn null_handles_are_harmless() {
    unsafe {
        advlab_config_free(ptr::null_mut());
        advlab_network_free(ptr::null_mut());
        advlab_string_free(ptr::null_mut());
        assert_eq!(advlab_network_input_len(ptr::null()), 0);
        assert_eq!(advlab_network_num_classes(ptr::null()), 0);
    }
}

#[test]
fn train_predict_attack_save_load() {
    let cfg = tiny_config();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { advlab_network_train(cfg, &mut net) }, AdvlabStatus::Ok, "{}", last_error());
    let n = unsafe { advlab_network_input_len(net) };
    let k = unsafe { advlab_network_num_classes(net) };
    assert_eq!((n, k), (144, 2));

    let x = vec![0.5; n];
    let mut probs = vec![0.0; k];
    let mut class = usize::MAX;
    let st = unsafe { advlab_network_predict(net, x.as_ptr(), n, probs.as_mut_ptr(), k, &mut class) };
    assert_eq!(st, AdvlabStatus::Ok);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(class < k);

    let st = unsafe { advlab_network_predict(net, x.as_ptr(), n - 1, probs.as_mut_ptr(), k, &mut class) };
    assert_eq!(st, AdvlabStatus::Shape);
    let st = unsafe { advlab_network_predict(net, x.as_ptr(), n, probs.as_mut_ptr(), 1, &mut class) };
    assert_eq!(st, AdvlabStatus::BufferTooSmall);

    let eps = 4.0 / 256.0;
    let kind = CString::new("bim").unwrap();
    let mut adv = vec![0.0; n];
    let mut success = false;
    let st = unsafe {
        advlab_attack(net, kind.as_ptr(), x.as_ptr(), n, 1 - class, eps, 0.0, 0, 9, adv.as_mut_ptr(), &mut success)
    };
    assert_eq!(st, AdvlabStatus::Ok);
    let worst = x.iter().zip(&adv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= eps + 1e-12 && worst > 0.0);
    let mut adv_class = usize::MAX;
    unsafe { advlab_network_predict(net, adv.as_ptr(), n, probs.as_mut_ptr(), k, &mut adv_class) };
    assert_eq!(success, adv_class == 1 - class);

    let bad = CString::new("nope").unwrap();
    let st =
        unsafe { advlab_attack(net, bad.as_ptr(), x.as_ptr(), n, 0, eps, 0.0, 0, 9, adv.as_mut_ptr(), &mut success) };
    assert_eq!(st, AdvlabStatus::Config);
    assert!(last_error().contains("nope"));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { advlab_network_save(net, path.as_ptr()) }, AdvlabStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { advlab_network_load(path.as_ptr(), &mut back) }, AdvlabStatus::Ok);
    let mut probs2 = vec![0.0; k];
    unsafe { advlab_network_predict(net, x.as_ptr(), n, probs.as_mut_ptr(), k, ptr::null_mut()) };
    unsafe { advlab_network_predict(back, x.as_ptr(), n, probs2.as_mut_ptr(), k, ptr::null_mut()) };
    assert_eq!(probs, probs2);

    unsafe {
        advlab_network_free(back);
        advlab_network_free(net);
        advlab_config_free(cfg);
    }
}

#[test]
fn run_experiment_returns_report_json() {
    let cfg = tiny_config();
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { advlab_run_experiment(cfg, &mut json) }, AdvlabStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_string();
    let report = advlab::evalkit::ExperimentReport::from_json(&text).unwrap();
    assert_eq!(report.attacks.len(), 1);
    assert_eq!(report.seed, 3);
    unsafe {
        advlab_string_free(json);
        advlab_config_free(cfg);
    }
}

#[test]
fn auc_matches_hand_count() {
    let pos = [0.9, 0.4];
    let neg = [0.1, 0.4, 0.95];
    let mut out = 0.0;
    assert_eq!(unsafe { advlab_auc(pos.as_ptr(), 2, neg.as_ptr(), 3, &mut out) }, AdvlabStatus::Ok);
    // pairs won: 0.9 beats 0.1 and 0.4; 0.4 beats 0.1 and ties 0.4
    assert_eq!(out, 3.5 / 6.0);
    assert_eq!(unsafe { advlab_auc(pos.as_ptr(), 2, neg.as_ptr(), 0, &mut out) }, AdvlabStatus::InvalidArgument);
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header_path = concat!(env!("CARGO_MANIFEST_DIR"), "/include/advlab.h");
    let header = std::fs::read_to_string(header_path).unwrap();
    for f in [
        "advlab_last_error",
        "advlab_version",
        "advlab_string_free",
        "advlab_config_load",
        "advlab_config_from_toml",
        "advlab_config_hash",
        "advlab_config_set_seed",
        "advlab_config_free",
        "advlab_run_experiment",
        "advlab_network_load",
        "advlab_network_train",
        "advlab_network_save",
        "advlab_network_free",
        "advlab_network_input_len",
        "advlab_network_num_classes",
        "advlab_network_predict",
        "advlab_attack",
        "advlab_auc",
        "ADVLAB_STATUS_OK",
        "ADVLAB_STATUS_PANIC",
    ] {
        assert!(header.contains(f), "header lacks {f}");
    }
    // syntax check with the system C compiler when there is one
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"advlab.h\"\nint main(void) { AdvlabConfig *c = 0; return advlab_config_free(c), (int)ADVLAB_STATUS_OK; }\n",
    )
    .unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    match std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-I", include]).arg(&src).output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(_) => eprintln!("no C compiler; skipped header compile check"),
    }
}

//! End-to-end runs of the `advlab` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advlab::cli::{ae_file_name, RunManifest, RunStatus, MANIFEST_FILE, MODEL_FILE};
use advlab::evalkit::{run_experiment, ExperimentConfig};

const TINY: &str = r#"
seed = 7

[data]
source = { kind = "synthetic", classes = 2, per_class = 40, side = 12 }

[model]
architecture = { kind = "mlp", hidden = [8] }

[model.train]
epochs = 3

[[attacks]]
kind = "bim"
epsilon = "2/256"

[hfc]
enabled = true

[detectors]
kinds = ["maha", "kd"]
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("runs");
        let text = format!("{config}\n[output]\ndir = {:?}\n", out.to_str().unwrap());
        fs::write(dir.path().join("exp.toml"), text).unwrap();
        Sandbox { dir }
    }

    fn config_path(&self) -> PathBuf {
        self.dir.path().join("exp.toml")
    }

    fn config(&self) -> ExperimentConfig {
        ExperimentConfig::load(&self.config_path()).unwrap()
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_advlab")).args(args).current_dir(self.dir.path()).output().unwrap()
    }

    /// Runs `cmd` on the config and returns the printed run directory.
    fn ok(&self, cmd: &str, extra: &[&str]) -> PathBuf {
        let cfg = self.config_path();
        let mut args = vec![cmd, cfg.to_str().unwrap()];
        args.extend_from_slice(extra);
        let out = self.run(&args);
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
    }
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_two() {
    let sb = Sandbox::new(TINY);
    let cfg = sb.config_path();
    let cfg = cfg.to_str().unwrap();

    let out = sb.run(&["train", cfg, "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));

    let out = sb.run(&["attack", cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model"));

    let out = sb.run(&["train", "does-not-exist.toml"]);
    assert_eq!(out.status.code(), Some(2));

    let out = sb.run(&["train", cfg, "--epsilon", "abc"]);
    assert_eq!(out.status.code(), Some(2));

    // nothing was created by the failed commands
    assert!(!sb.dir.path().join("runs").exists());
}

#[test]
fn missing_dataset_names_the_key() {
    let sb = Sandbox::new(&TINY.replace(
        r#"source = { kind = "synthetic", classes = 2, per_class = 40, side = 12 }"#,
        r#"source = { kind = "file", path = "missing.idx" }"#,
    ));
    let out = sb.run(&["train", sb.config_path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("data.source.path"), "{err}");
}

#[test]
fn version_and_help_exit_zero() {
    let sb = Sandbox::new(TINY);
    let out = sb.run(&["version"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
    assert_eq!(sb.run(&["--help"]).status.code(), Some(0));
}

#[test]
fn reruns_get_fresh_directories_and_identical_models() {
    let sb = Sandbox::new(TINY);
    let first = sb.ok("train", &[]);
    let second = sb.ok("train", &[]);
    assert_ne!(first, second);
    assert!(second.file_name().unwrap().to_str().unwrap().ends_with("-2"));
    assert_eq!(fs::read(first.join(MODEL_FILE)).unwrap(), fs::read(second.join(MODEL_FILE)).unwrap());

    let m = manifest(&first);
    assert_eq!(m.status, RunStatus::Complete);
    assert_eq!(m.command, "train");
    assert_eq!(m.config_hash, sb.config().hash());
    assert!(m.artifacts.iter().any(|a| a == MODEL_FILE));
    assert!(first.join("config.toml").is_file());
}

#[test]
fn hfc_flag_matches_config_setting() {
    let sb = Sandbox::new(TINY);
    sb.ok("train", &[]);
    let flagged = sb.ok("attack", &["--hfc", "off"]);

    let off = Sandbox::new(&TINY.replace("enabled = true", "enabled = false"));
    off.ok("train", &[]);
    let configured = off.ok("attack", &[]);

    let name = ae_file_name(0, "bim", "plain");
    assert_eq!(fs::read(flagged.join(&name)).unwrap(), fs::read(configured.join(&name)).unwrap());
    assert!(!flagged.join(ae_file_name(0, "bim", "hfc")).exists());
}

#[test]
fn staged_eval_matches_library_run() {
    let sb = Sandbox::new(TINY);
    sb.ok("train", &[]);
    let detect = sb.ok("detect", &[]);
    assert_eq!(manifest(&detect).status, RunStatus::Complete);
    let eval = sb.ok("eval", &[]);
    let m = manifest(&eval);
    assert!(m.inputs.contains_key("model") && m.inputs.contains_key("detectors"));

    let staged = fs::read_to_string(eval.join("report.json")).unwrap();
    let library = run_experiment(&sb.config()).unwrap().report.to_json();
    assert_eq!(staged.trim_end(), library.trim_end());
}

#[test]
fn epsilon_override_changes_the_stage_key() {
    let sb = Sandbox::new(TINY);
    sb.ok("train", &[]);
    sb.ok("detect", &[]);
    // detectors fitted at 2/256 do not serve an eval at 1/256
    let out = sb.run(&["eval", sb.config_path().to_str().unwrap(), "--epsilon", "1/256"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn auxiliary_commands_write_their_reports() {
    let sb = Sandbox::new(&format!(
        "{TINY}\n[stress]\nlayer = 2\ndirection = \"up\"\nepsilons = [\"1/256\", \"2/256\"]\nsamples = 5\n\n\
         [probe]\nattack = {{ kind = \"bim\", epsilon = \"2/256\" }}\nsamples = 4\n\n\
         [ood]\npairs = 10\n\n[transfer]\nsubstitute_seed = 8\n"
    ));
    sb.ok("train", &[]);
    let stress = sb.ok("stress", &[]);
    let reports: Vec<advlab::evalkit::StressReport> =
        serde_json::from_str(&fs::read_to_string(stress.join("stress.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.target_ratio().unwrap() > 0.0));

    let probe = sb.ok("probe", &[]);
    let report: advlab::evalkit::ProbeReport =
        serde_json::from_str(&fs::read_to_string(probe.join("probe.json")).unwrap()).unwrap();
    assert!(report.samples > 0 && report.samples <= 4);
    assert_eq!(report.violations, 0);

    let ood = sb.ok("ood", &[]);
    assert!(ood.join("ood.json").is_file());

    sb.ok("detect", &[]);
    let transfer = sb.ok("transfer", &[]);
    for f in ["report.json", "transfer_report.json", "substitute_model.json"] {
        assert!(transfer.join(f).is_file(), "{f}");
    }
    assert_eq!(manifest(&transfer).status, RunStatus::Complete);

    // without the [probe] section the command is a config error
    let bare = Sandbox::new(TINY);
    bare.ok("train", &[]);
    let out = bare.run(&["probe", bare.config_path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

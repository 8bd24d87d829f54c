//! Bodies of the run-directory commands.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::runs::{find_run, RunDir, RunManifest, DETECTOR_KEYS, MODEL_KEYS};
use super::Common;
use crate::detectors::Detector;
use crate::error::{Error, Result};
use crate::evalkit::{
    attack_pool, budget_audit, cell_budget, fit_attack_detectors, fit_hfc_models, prepare, resolve_attack,
    run_experiment_with, run_ood, run_probe, run_stress, sweep_plot_csv, targets_for, transfer_experiment_with,
    AdvCount, ExperimentConfig, ExperimentOutput, RunOptions, StageTiming,
};
use crate::hfc::save_hfc;
use crate::nn::{load_network, save_network, Network};
use crate::tensor::Tensor;

pub const MODEL_FILE: &str = "model.json";
pub const DETECTOR_TRAINING_FILE: &str = "detector_training.json";

/// One crafted AE of an `ae_*.json` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeSample {
    /// Position in AdvTest.
    pub adv_test_index: usize,
    /// Position in the source dataset.
    pub source_index: usize,
    pub label: usize,
    pub target: usize,
    pub predicted: usize,
    pub success: bool,
    pub iterations_run: usize,
    pub x_adv: Tensor,
}

/// AEs of one attack and variant, as written by the attack command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeFile {
    pub label: String,
    pub attack: String,
    /// `plain` or `hfc`.
    pub variant: String,
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    pub attempted: usize,
    pub successes: usize,
    pub adv_acc: f64,
    pub max_perturbation: f64,
    pub budget_violations: usize,
    pub samples: Vec<AeSample>,
}

pub fn ae_file_name(index: usize, kind: &str, variant: &str) -> String {
    format!("ae_{index}_{}_{variant}.json", kind.to_ascii_lowercase())
}

pub fn detector_file_name(index: usize, detector: &str) -> String {
    format!("detector_{index}_{detector}.json")
}

fn timed<T>(run: &mut RunDir, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f();
    run.manifest.timings.push(StageTiming { stage: stage.to_string(), seconds: t0.elapsed().as_secs_f64() });
    out
}

fn missing(name: impl Into<String>, path: impl Into<PathBuf>) -> Error {
    Error::MissingArtifact { name: name.into(), path: path.into() }
}

/// The model file named by `--model`, or the newest matching train run.
fn resolve_model(cfg: &ExperimentConfig, flag: Option<&Path>) -> Result<PathBuf> {
    let path = match flag {
        Some(p) if p.is_dir() => p.join(MODEL_FILE),
        Some(p) => p.to_path_buf(),
        None => {
            let key = cfg.partial_hash(MODEL_KEYS);
            let out = &cfg.output.dir;
            match find_run(out, "train", "model", &key)? {
                Some(dir) => dir.join(MODEL_FILE),
                None => {
                    return Err(missing(
                        format!("model (run `advlab train` with this config first; model key {})", &key[..12]),
                        out.join("train-*").join(MODEL_FILE),
                    ))
                }
            }
        }
    };
    if !path.is_file() {
        return Err(missing("model", path));
    }
    Ok(path)
}

/// Detect run directory named by `--detectors`, or the newest matching one.
fn resolve_detectors(cfg: &ExperimentConfig, flag: Option<&Path>) -> Result<PathBuf> {
    let key = cfg.partial_hash(DETECTOR_KEYS);
    let out = &cfg.output.dir;
    let dir = match flag {
        Some(p) => p.to_path_buf(),
        None => find_run(out, "detect", "detectors", &key)?.ok_or_else(|| {
            missing(
                format!("detectors (run `advlab detect` with this config first; detector key {})", &key[..12]),
                out.join("detect-*"),
            )
        })?,
    };
    if !dir.join(super::runs::MANIFEST_FILE).is_file() {
        return Err(missing("detect run manifest", dir.join(super::runs::MANIFEST_FILE)));
    }
    let m = RunManifest::load(&dir)?;
    if m.stage_keys.get("detectors") != Some(&key) {
        return Err(Error::Config {
            key: "detectors".into(),
            message: format!(
                "{} was fitted for a different seed, data, model, attacks, target or detector settings",
                dir.display()
            ),
        });
    }
    Ok(dir)
}

fn load_detectors(cfg: &ExperimentConfig, dir: &Path) -> Result<(Vec<Vec<Detector>>, Vec<AdvCount>)> {
    let mut all = Vec::new();
    for a in 0..cfg.attacks.len() {
        let mut dets = Vec::new();
        for kind in &cfg.detectors.kinds {
            let p = dir.join(detector_file_name(a, kind.name()));
            if !p.is_file() {
                return Err(missing(format!("{} detector of attack {a}", kind.name()), p));
            }
            dets.push(Detector::load(&p)?);
        }
        all.push(dets);
    }
    let p = dir.join(DETECTOR_TRAINING_FILE);
    let text = std::fs::read_to_string(&p).map_err(|_| missing("detector training summary", &p))?;
    let counts: Vec<AdvCount> = serde_json::from_str(&text)?;
    Ok((all, counts))
}

/// Runs `command` in a fresh run directory; returns the directory.
pub(super) fn dispatch(command: &str, common: &Common, substitute_seed: Option<u64>) -> Result<PathBuf> {
    let cfg = common.config()?;
    let model = match command {
        "train" => None,
        _ => Some(resolve_model(&cfg, common.model.as_deref())?),
    };
    let detectors = match command {
        "eval" | "transfer" => Some(resolve_detectors(&cfg, common.detectors.as_deref())?),
        _ => None,
    };
    let substitute_seed = match command {
        "transfer" => {
            Some(substitute_seed.or(cfg.transfer.as_ref().map(|t| t.substitute_seed)).ok_or_else(|| Error::Config {
                key: "transfer.substitute_seed".into(),
                message: "transfer needs --substitute-seed or a [transfer] section".into(),
            })?)
        }
        _ => None,
    };

    let mut run = RunDir::create(&cfg.output.dir, command, &cfg)?;
    if let Some(m) = &model {
        run.manifest.inputs.insert("model".into(), m.clone());
    }
    if let Some(d) = &detectors {
        run.manifest.inputs.insert("detectors".into(), d.clone());
    }
    let outcome = (|| {
        let net = match &model {
            Some(p) => Some(load_network(p)?),
            None => None,
        };
        match command {
            "train" => train(&mut run, &cfg),
            "attack" => attack(&mut run, &cfg, net.expect("model resolved")),
            "detect" => detect(&mut run, &cfg, net.expect("model resolved")),
            "eval" => {
                eval(&mut run, &cfg, net.expect("model resolved"), detectors.as_deref().expect("detectors resolved"))
            }
            "stress" => {
                let prep = timed(&mut run, "prepare", || prepare(&cfg, net))?;
                let reports = timed(&mut run, "stress", || run_stress(&cfg, &prep))?;
                run.write_json("stress.json", &reports)
            }
            "probe" => {
                let prep = timed(&mut run, "prepare", || prepare(&cfg, net))?;
                let report = timed(&mut run, "probe", || run_probe(&cfg, &prep))?;
                run.write_json("probe.json", &report)
            }
            "ood" => {
                let prep = timed(&mut run, "prepare", || prepare(&cfg, net))?;
                let (report, models) = timed(&mut run, "ood", || run_ood(&cfg, &prep))?;
                for m in models.iter().flatten() {
                    save_hfc(m, &run.file(&format!("gmm_class{}.json", m.target)))?;
                }
                run.write_json("ood.json", &report)
            }
            "transfer" => transfer(
                &mut run,
                &cfg,
                net.expect("model resolved"),
                detectors.as_deref().expect("detectors resolved"),
                substitute_seed.expect("substitute seed resolved"),
            ),
            other => unreachable!("unknown command {other}"),
        }
    })();
    let dir = run.finish(&outcome)?;
    outcome.map(|()| dir)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    train: usize,
    adv_train: usize,
    adv_test: usize,
    train_accuracy: f64,
    test_accuracy: f64,
    epoch_loss: &'a [f64],
}

fn train(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let prep = timed(run, "train", || prepare(cfg, None))?;
    save_network(&prep.network, &run.file(MODEL_FILE))?;
    run.write_json(
        "train_summary.json",
        &TrainSummary {
            train: prep.split.train.len(),
            adv_train: prep.split.adv_train.len(),
            adv_test: prep.split.adv_test.len(),
            train_accuracy: prep.train_accuracy,
            test_accuracy: prep.test_accuracy,
            epoch_loss: &prep.history.epoch_loss,
        },
    )
}

/// AEs of the selected variant (`hfc.enabled`) for every attack, with the
/// same budgets and seeds as the matching report cell.
fn attack(run: &mut RunDir, cfg: &ExperimentConfig, net: Network) -> Result<()> {
    let prep = timed(run, "prepare", || prepare(cfg, Some(net)))?;
    let sp = &prep.split;
    let targets = targets_for(cfg, &sp.adv_test, 1);
    let hfc = if cfg.hfc.enabled {
        let needed: BTreeSet<usize> = targets.iter().copied().collect();
        let (models, _) = timed(run, "hfc", || fit_hfc_models(cfg, &prep.network, &sp.train, &needed))?;
        for m in models.iter().flatten() {
            save_hfc(m, &run.file(&format!("gmm_class{}.json", m.target)))?;
        }
        Some(models)
    } else {
        None
    };
    let variant = if hfc.is_some() { "hfc" } else { "plain" };
    for (a, spec) in cfg.attacks.iter().enumerate() {
        let (kind, kappa) = resolve_attack(&prep.network, &sp.train, spec, &format!("attacks[{a}]"))?;
        let budget = cell_budget(cfg, a, if hfc.is_some() { 2 } else { 1 });
        let results = timed(run, "attack", || {
            attack_pool(kind, &prep.network, &sp.adv_test.images, &targets, &budget, hfc.as_deref())
        })?;
        let (max_perturbation, budget_violations) = budget_audit(&sp.adv_test.images, &results, spec.epsilon);
        let successes = results.iter().filter(|r| r.success).count();
        let file = AeFile {
            label: spec.label(),
            attack: kind.name().to_string(),
            variant: variant.to_string(),
            epsilon: spec.epsilon,
            alpha: budget.alpha,
            iterations: budget.iterations,
            kappa,
            attempted: results.len(),
            successes,
            adv_acc: successes as f64 / results.len().max(1) as f64,
            max_perturbation,
            budget_violations,
            samples: results
                .into_iter()
                .enumerate()
                .map(|(i, r)| AeSample {
                    adv_test_index: i,
                    source_index: sp.adv_test_indices[i],
                    label: sp.adv_test.labels[i],
                    target: r.target,
                    predicted: r.predicted,
                    success: r.success,
                    iterations_run: r.iterations_run,
                    x_adv: r.x_adv,
                })
                .collect(),
        };
        run.write_json(&ae_file_name(a, &spec.kind, variant), &file)?;
    }
    Ok(())
}

fn detect(run: &mut RunDir, cfg: &ExperimentConfig, net: Network) -> Result<()> {
    let prep = timed(run, "prepare", || prepare(cfg, Some(net)))?;
    let mut counts = Vec::new();
    for (a, spec) in cfg.attacks.iter().enumerate() {
        let (kind, _) = resolve_attack(&prep.network, &prep.split.train, spec, &format!("attacks[{a}]"))?;
        let (dets, count) = timed(run, "detect", || fit_attack_detectors(cfg, &prep, a, kind))?;
        for d in &dets {
            d.save(&run.file(&detector_file_name(a, d.kind().name())))?;
        }
        counts.push(count);
    }
    run.write_json(DETECTOR_TRAINING_FILE, &counts)
}

fn write_report(run: &RunDir, name: &str, report: &crate::evalkit::ExperimentReport) -> Result<()> {
    let mut text = report.to_json();
    text.push('\n');
    run.write(name, text.as_bytes())
}

fn patch_training(out: &mut ExperimentOutput, counts: &[AdvCount]) {
    for (cell, c) in out.report.attacks.iter_mut().zip(counts) {
        cell.detector_training = Some(*c);
    }
}

fn eval(run: &mut RunDir, cfg: &ExperimentConfig, net: Network, detectors: &Path) -> Result<()> {
    let (dets, counts) = load_detectors(cfg, detectors)?;
    let opts = RunOptions { network: Some(net), detectors: Some(dets), score_dir: Some(&run.path) };
    let mut out = run_experiment_with(cfg, opts)?;
    patch_training(&mut out, &counts);
    run.manifest.timings.extend(out.timings.iter().cloned());
    write_report(run, "report.json", &out.report)?;
    run.write("plot.csv", sweep_plot_csv(&out.report).as_bytes())
}

fn transfer(
    run: &mut RunDir,
    cfg: &ExperimentConfig,
    net: Network,
    detectors: &Path,
    substitute_seed: u64,
) -> Result<()> {
    let (dets, counts) = load_detectors(cfg, detectors)?;
    let opts = RunOptions { network: Some(net), detectors: Some(dets), score_dir: Some(&run.path) };
    let mut out = transfer_experiment_with(cfg, substitute_seed, opts)?;
    patch_training(&mut out.white_box, &counts);
    for (cell, c) in out.transfer.attacks.iter_mut().zip(&counts) {
        cell.detector_training = Some(*c);
    }
    run.manifest.timings.extend(out.white_box.timings.iter().cloned());
    save_network(&out.substitute, &run.file("substitute_model.json"))?;
    write_report(run, "report.json", &out.white_box.report)?;
    write_report(run, "transfer_report.json", &out.transfer)?;
    run.write("plot.csv", sweep_plot_csv(&out.white_box.report).as_bytes())?;
    run.write("transfer_plot.csv", sweep_plot_csv(&out.transfer).as_bytes())
}

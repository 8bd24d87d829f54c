//! End-to-end detection experiment and its semi-white-box transfer variant.
//!
//! Stages: data, train, split, hfc, then for every configured attack:
//! plain AEs on AdvTrain fit the detectors, plain and HFC AEs on AdvTest are
//! scored against the clean AdvTest images. Detectors only ever see
//! successful AEs.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{iterative_attack, kappa_default, AttackBudget, AttackKind, AttackResult};
use crate::data::{split, LabeledSet, SplitOutcome, SplitReport};
use crate::detectors::{fit_detector, write_score_csv, Detector, FeatureBank, ScoreRow};
use crate::error::{Error, Result};
use crate::evalkit::config::{AttackSpec, ExperimentConfig, Metric, SubSeeds};
use crate::evalkit::metrics::{auc, tpr_at_tnr};
use crate::hfc::{attach_hfc, fit_hfc, EmReport, HfcModel};
use crate::nn::{accuracy, train_classifier, Network, TrainHistory};
use crate::rng::{derive_seed, STREAM_ATTACK, STREAM_BU, STREAM_TARGET};
use crate::tensor::Tensor;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Tolerance on `|x_adv - x|_inf <= epsilon` in budget audits.
pub const BUDGET_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format_version: u32,
    /// `white_box` or `transfer`.
    pub mode: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substitute_seed: Option<u64>,
    pub data: DataSummary,
    pub attacks: Vec<AttackCell>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train: usize,
    pub adv_train: usize,
    pub adv_test: usize,
    pub split: SplitReport,
    pub train_accuracy: f64,
    /// Accuracy on the whole test pool, before misclassified samples are dropped.
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackCell {
    pub label: String,
    pub attack: String,
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Plain AEs on AdvTrain used to fit the detectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector_training: Option<AdvCount>,
    pub plain: VariantCell,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hfc: Option<VariantCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvCount {
    pub attempted: usize,
    pub successes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantCell {
    pub attempted: usize,
    pub successes: usize,
    pub adv_acc: f64,
    /// Largest `|x_adv - x|_inf` over all AEs of this cell.
    pub max_perturbation: f64,
    /// AEs outside the epsilon-ball or the `[0, 1]` box.
    pub budget_violations: usize,
    pub detectors: Vec<DetectorCell>,
    /// Score file holding every number of `detectors`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_file: Option<String>,
}

impl VariantCell {
    pub fn detector(&self, name: &str) -> Option<&DetectorCell> {
        self.detectors.iter().find(|d| d.detector == name)
    }
}

/// `None` when the metric was not requested or no AE succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorCell {
    pub detector: String,
    pub auc: Option<f64>,
    pub tpr_at_90: Option<f64>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: ExperimentReport = serde_json::from_str(text)?;
        if r.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::FormatVersion { found: r.format_version, expected: REPORT_FORMAT_VERSION });
        }
        Ok(r)
    }

    pub fn attack(&self, label: &str) -> Option<&AttackCell> {
        self.attacks.iter().find(|a| a.label == label)
    }
}

/// AEs of one (attack, variant) cell.
#[derive(Debug, Clone)]
pub struct AdvSet {
    pub label: String,
    /// `plain` or `hfc`.
    pub variant: String,
    pub epsilon: f64,
    /// Clean AdvTest images, aligned with `results`.
    pub clean_indices: Vec<usize>,
    pub results: Vec<AttackResult>,
}

#[derive(Debug, Clone)]
pub struct ScoreFile {
    pub name: String,
    pub rows: Vec<ScoreRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Everything a run produced. Wall-clock timings live here rather than in
/// the report so reports stay byte-reproducible.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub network: Network,
    /// Indexed by target class; `None` where no HFC model was needed.
    pub hfc_models: Vec<Option<Arc<HfcModel>>>,
    pub em_reports: Vec<(usize, Vec<EmReport>)>,
    /// Fitted detectors per attack, aligned with `report.attacks`.
    pub detectors: Vec<Vec<Detector>>,
    pub adversarial: Vec<AdvSet>,
    pub scores: Vec<ScoreFile>,
    pub timings: Vec<StageTiming>,
}

/// Pre-built artifacts and an optional directory for score files.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Use this classifier instead of training one.
    pub network: Option<Network>,
    /// Detectors per attack (aligned with `config.attacks`) instead of fitting them.
    pub detectors: Option<Vec<Vec<Detector>>>,
    /// Score CSVs are written here as soon as each cell finishes, so a
    /// failing run keeps the files of completed cells.
    pub score_dir: Option<&'a Path>,
}

/// The trained classifier and the data split it induces.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seeds: SubSeeds,
    pub classes: usize,
    pub input_shape: Vec<usize>,
    pub split: SplitOutcome,
    pub network: Network,
    pub history: TrainHistory,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Trains a classifier of the configured architecture on `train`.
pub fn train_network(
    cfg: &ExperimentConfig,
    input_shape: &[usize],
    classes: usize,
    train: &LabeledSet,
    seeds: &SubSeeds,
) -> Result<(Network, TrainHistory)> {
    let net = cfg.model.architecture.build(input_shape, classes, seeds.init)?;
    train_classifier(&net, train, &cfg.model.train.to_train_config(seeds.train))
}

/// Data, training and split stages.
pub fn prepare(cfg: &ExperimentConfig, network: Option<Network>) -> Result<Prepared> {
    let set = cfg.load_dataset().map_err(|e| e.in_stage("data"))?;
    prepare_set(cfg, &set, network)
}

/// [`prepare`] on an explicit dataset instead of the configured source.
pub fn prepare_set(cfg: &ExperimentConfig, set: &LabeledSet, network: Option<Network>) -> Result<Prepared> {
    let seeds = cfg.seeds();
    let input_shape = set.image_shape().ok_or_else(|| Error::invalid("dataset is empty").in_stage("data"))?.to_vec();
    let spec = cfg.split_spec();
    let pre = split(set, &spec, None).map_err(|e| e.in_stage("split"))?;
    let (network, history) = match network {
        Some(net) => {
            if net.input_shape() != input_shape.as_slice() || net.num_classes() != set.num_classes {
                return Err(Error::Shape(format!(
                    "model expects {:?} with {} classes, data has {:?} with {}",
                    net.input_shape(),
                    net.num_classes(),
                    input_shape,
                    set.num_classes
                ))
                .in_stage("train"));
            }
            (net, TrainHistory::default())
        }
        None => {
            train_network(cfg, &input_shape, set.num_classes, &pre.train, &seeds).map_err(|e| e.in_stage("train"))?
        }
    };
    let train_accuracy = accuracy(&network, &pre.train).map_err(|e| e.in_stage("train"))?;
    let mut pool = pre.adv_train.clone();
    pool.images.extend(pre.adv_test.images.iter().cloned());
    pool.labels.extend(pre.adv_test.labels.iter().copied());
    let test_accuracy = accuracy(&network, &pool).map_err(|e| e.in_stage("train"))?;
    let mut outcome = split(set, &spec, Some(&network)).map_err(|e| e.in_stage("split"))?;
    cap(&mut outcome.adv_train, &mut outcome.adv_train_indices, cfg.data.max_adv_train);
    cap(&mut outcome.adv_test, &mut outcome.adv_test_indices, cfg.data.max_adv_test);
    Ok(Prepared {
        seeds,
        classes: set.num_classes,
        input_shape,
        split: outcome,
        network,
        history,
        train_accuracy,
        test_accuracy,
    })
}

fn cap(set: &mut LabeledSet, indices: &mut Vec<usize>, limit: Option<usize>) {
    if let Some(n) = limit {
        if set.len() > n {
            set.images.truncate(n);
            set.labels.truncate(n);
            indices.truncate(n);
        }
    }
}

/// Attack targets for every sample of `set`; `pool` separates the streams
/// of AdvTrain (0) and AdvTest (1).
pub fn targets_for(cfg: &ExperimentConfig, set: &LabeledSet, pool: u64) -> Vec<usize> {
    let seed = derive_seed(cfg.seeds().target, STREAM_TARGET, pool);
    set.labels.iter().enumerate().map(|(i, &y)| cfg.target.target(y, set.num_classes, seed, i)).collect()
}

/// Fits one HFC model per class in `targets`.
/// Per-class HFC models, `None` for classes never targeted.
pub type HfcModels = Vec<Option<Arc<HfcModel>>>;

/// EM histories per fitted target class.
pub type EmLog = Vec<(usize, Vec<EmReport>)>;

pub fn fit_hfc_models(
    cfg: &ExperimentConfig,
    net: &Network,
    train: &LabeledSet,
    targets: &BTreeSet<usize>,
) -> Result<(HfcModels, EmLog)> {
    let mut models = vec![None; net.num_classes()];
    let mut reports = Vec::new();
    for &t in targets {
        let (model, em) = fit_hfc(net, train, t, &cfg.hfc_config())?;
        models[t] = Some(Arc::new(model));
        reports.push((t, em));
    }
    Ok((models, reports))
}

/// Attacks `xs[i]` toward `targets[i]` on `net`, adding the HFC term of the
/// target class when `hfc` is given. Sample `i` draws its randomness from
/// `derive_seed(budget.seed, STREAM_ATTACK, i)`.
pub fn attack_pool(
    kind: AttackKind,
    net: &Network,
    xs: &[Tensor],
    targets: &[usize],
    budget: &AttackBudget,
    hfc: Option<&[Option<Arc<HfcModel>>]>,
) -> Result<Vec<AttackResult>> {
    xs.par_iter()
        .zip(targets.par_iter())
        .enumerate()
        .map(|(i, (x, &t))| {
            let extras = match hfc {
                Some(models) => {
                    let model = models
                        .get(t)
                        .and_then(Clone::clone)
                        .ok_or_else(|| Error::invalid(format!("no HFC model for target class {t}")))?;
                    attach_hfc(kind, model, t)?
                }
                None => Vec::new(),
            };
            let b = AttackBudget { seed: derive_seed(budget.seed, STREAM_ATTACK, i as u64), ..*budget };
            iterative_attack(kind, net, x, t, &b, &extras, false)
        })
        .collect()
}

/// Re-labels AEs by the prediction of `victim` (for transferred AEs).
pub fn judge_on(victim: &Network, results: &mut [AttackResult]) -> Result<()> {
    let preds = results.par_iter().map(|r| victim.predict(&r.x_adv)).collect::<Result<Vec<usize>>>()?;
    for (r, p) in results.iter_mut().zip(preds) {
        r.predicted = p;
        r.success = p == r.target;
    }
    Ok(())
}

/// `(max |x_adv - x|_inf, count outside the ball or the box)`.
pub fn budget_audit(clean: &[Tensor], results: &[AttackResult], epsilon: f64) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    for (x, r) in clean.iter().zip(results) {
        let d = r.x_adv.max_abs_diff(x);
        worst = worst.max(d);
        let in_box = r.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v));
        if d > epsilon + BUDGET_TOL || !in_box {
            violations += 1;
        }
    }
    (worst, violations)
}

/// Scores every image with one detector; image `i` uses BU seed
/// `derive_seed(seed, STREAM_BU, offset + i)`.
fn score_images(det: &Detector, net: &Network, images: &[&Tensor], seed: u64, offset: usize) -> Result<Vec<f64>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, x)| det.score(net, x, derive_seed(seed, STREAM_BU, (offset + i) as u64)))
        .collect()
}

/// Where AEs are crafted.
struct Source<'a> {
    mode: &'static str,
    net: &'a Network,
    hfc: Vec<Option<Arc<HfcModel>>>,
    substitute_seed: Option<u64>,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    prep: &'a Prepared,
    hash: String,
    timings: Vec<StageTiming>,
}

impl Ctx<'_> {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage));
        self.timings.push(StageTiming { stage: stage.to_string(), seconds: t0.elapsed().as_secs_f64() });
        out
    }
}

/// Runs the full white-box protocol.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_experiment_with(cfg, RunOptions::default())
}

pub fn run_experiment_with(cfg: &ExperimentConfig, opts: RunOptions<'_>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let t0 = Instant::now();
    let prep = prepare(cfg, opts.network.clone())?;
    let mut ctx = Ctx {
        cfg,
        prep: &prep,
        hash: cfg.hash(),
        timings: vec![StageTiming { stage: "prepare".into(), seconds: t0.elapsed().as_secs_f64() }],
    };
    let (hfc, em) = fit_victim_hfc(&mut ctx)?;
    let source = Source { mode: "white_box", net: &prep.network, hfc: hfc.clone(), substitute_seed: None };
    let mut outs = run_cells(&mut ctx, &[source], opts.detectors, opts.score_dir)?;
    let (report, adversarial, scores, detectors) = outs.remove(0);
    Ok(ExperimentOutput {
        report,
        network: prep.network.clone(),
        hfc_models: hfc,
        em_reports: em,
        detectors,
        adversarial,
        scores,
        timings: ctx.timings,
    })
}

fn needed_targets(cfg: &ExperimentConfig, prep: &Prepared) -> BTreeSet<usize> {
    if !cfg.hfc.enabled || cfg.attacks.is_empty() {
        return BTreeSet::new();
    }
    targets_for(cfg, &prep.split.adv_test, 1).into_iter().collect()
}

type HfcFit = (Vec<Option<Arc<HfcModel>>>, Vec<(usize, Vec<EmReport>)>);

fn fit_victim_hfc(ctx: &mut Ctx<'_>) -> Result<HfcFit> {
    let (cfg, prep) = (ctx.cfg, ctx.prep);
    let targets = needed_targets(cfg, prep);
    ctx.time("hfc", || fit_hfc_models(cfg, &prep.network, &prep.split.train, &targets))
}

type CellOutput = (ExperimentReport, Vec<AdvSet>, Vec<ScoreFile>, Vec<Vec<Detector>>);

/// Budget of attack `index` on one pool: 0 is AdvTrain (plain), 1 is
/// AdvTest plain, 2 is AdvTest with HFC.
pub fn cell_budget(cfg: &ExperimentConfig, index: usize, pool: u64) -> AttackBudget {
    cfg.attacks[index].budget(derive_seed(cfg.seeds().attack, index as u64, pool))
}

/// Attack kind of `spec` with a CW `kappa` left open resolved on the
/// Train images; also returns the kappa used.
pub fn resolve_attack(
    net: &Network,
    train: &LabeledSet,
    spec: &AttackSpec,
    key: &str,
) -> Result<(AttackKind, Option<f64>)> {
    let kind = spec.attack_kind(key)?;
    Ok(match kind {
        AttackKind::Cw { kappa: None } => {
            let k = kappa_default(net, &train.images)?;
            (AttackKind::Cw { kappa: Some(k) }, Some(k))
        }
        AttackKind::Cw { kappa } => (kind, kappa),
        _ => (kind, None),
    })
}

/// Fits the configured detectors for attack `index` on the victim's own
/// successful plain AEs of AdvTrain.
pub fn fit_attack_detectors(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    index: usize,
    kind: AttackKind,
) -> Result<(Vec<Detector>, AdvCount)> {
    let sp = &prep.split;
    let spec = &cfg.attacks[index];
    let label = spec.label();
    let targets = targets_for(cfg, &sp.adv_train, 0);
    let results = attack_pool(kind, &prep.network, &sp.adv_train.images, &targets, &cell_budget(cfg, index, 0), None)?;
    let successes: Vec<Tensor> = results.iter().filter(|r| r.success).map(|r| r.x_adv.clone()).collect();
    let count = AdvCount { attempted: results.len(), successes: successes.len() };
    if successes.is_empty() {
        return Err(Error::invalid(format!("no successful {label} AEs on AdvTrain to fit detectors")));
    }
    let bank = FeatureBank::build(
        &prep.network,
        &sp.train.images,
        &sp.train.labels,
        &sp.adv_train.images,
        &successes,
        &label,
        spec.epsilon,
    )?;
    let dcfg = cfg.detector_config();
    let dets = cfg.detectors.kinds.iter().map(|&k| fit_detector(k, &bank, &dcfg)).collect::<Result<Vec<_>>>()?;
    Ok((dets, count))
}

fn run_cells(
    ctx: &mut Ctx<'_>,
    sources: &[Source<'_>],
    given: Option<Vec<Vec<Detector>>>,
    score_dir: Option<&Path>,
) -> Result<Vec<CellOutput>> {
    let (cfg, prep) = (ctx.cfg, ctx.prep);
    let victim = &prep.network;
    let sp = &prep.split;
    let seeds = prep.seeds;
    if let Some(g) = &given {
        if g.len() != cfg.attacks.len() {
            return Err(Error::invalid(format!("{} detector sets given for {} attacks", g.len(), cfg.attacks.len())));
        }
    }
    let data = DataSummary {
        train: sp.train.len(),
        adv_train: sp.adv_train.len(),
        adv_test: sp.adv_test.len(),
        split: sp.report.clone(),
        train_accuracy: prep.train_accuracy,
        test_accuracy: prep.test_accuracy,
    };
    let mut reports: Vec<ExperimentReport> = sources
        .iter()
        .map(|s| ExperimentReport {
            format_version: REPORT_FORMAT_VERSION,
            mode: s.mode.to_string(),
            config_hash: ctx.hash.clone(),
            seed: cfg.seed,
            substitute_seed: s.substitute_seed,
            data: data.clone(),
            attacks: Vec::new(),
            warnings: sp.report.warnings.clone(),
        })
        .collect();
    let mut adv_sets: Vec<Vec<AdvSet>> = vec![Vec::new(); sources.len()];
    let mut score_files: Vec<Vec<ScoreFile>> = vec![Vec::new(); sources.len()];
    let mut all_detectors = Vec::new();
    let test_targets = targets_for(cfg, &sp.adv_test, 1);
    let want_auc = cfg.metrics.contains(&Metric::Auc);
    let want_tpr = cfg.metrics.contains(&Metric::TprAt90);
    if sp.adv_test.is_empty() && !cfg.attacks.is_empty() {
        return Err(Error::invalid("AdvTest is empty after discarding misclassified samples").in_stage("split"));
    }

    for (a, spec) in cfg.attacks.iter().enumerate() {
        let key = format!("attacks[{a}]");
        let (kind, kappa) = resolve_attack(victim, &sp.train, spec, &key).map_err(|e| e.in_stage("attack"))?;
        let budget_for = |pool: u64| cell_budget(cfg, a, pool);
        let label = spec.label();

        let mut training = None;
        let detectors: Vec<Detector> = match &given {
            Some(g) => g[a].clone(),
            None if cfg.detectors.kinds.is_empty() => Vec::new(),
            None => {
                let (dets, count) = ctx.time("detect", || fit_attack_detectors(cfg, prep, a, kind))?;
                training = Some(count);
                dets
            }
        };

        let clean_refs: Vec<&Tensor> = sp.adv_test.images.iter().collect();
        let clean_scores: Vec<Vec<f64>> = ctx.time("score", || {
            detectors.iter().map(|d| score_images(d, victim, &clean_refs, seeds.detectors, 0)).collect()
        })?;

        for (s, source) in sources.iter().enumerate() {
            let mut variants = vec![("plain", None)];
            if cfg.hfc.enabled {
                variants.push(("hfc", Some(source.hfc.as_slice())));
            }
            let mut cells = Vec::new();
            for (v, (variant, hfc)) in variants.into_iter().enumerate() {
                let budget = budget_for(1 + v as u64);
                let mut results = ctx.time("attack", || {
                    attack_pool(kind, source.net, &sp.adv_test.images, &test_targets, &budget, hfc)
                })?;
                if !std::ptr::eq(source.net, victim) {
                    judge_on(victim, &mut results).map_err(|e| e.in_stage("attack"))?;
                }
                let (max_perturbation, budget_violations) = budget_audit(&sp.adv_test.images, &results, spec.epsilon);
                let successes: Vec<usize> = (0..results.len()).filter(|&i| results[i].success).collect();
                let adv_refs: Vec<&Tensor> = successes.iter().map(|&i| &results[i].x_adv).collect();
                let attack_name = format!("{label}/{variant}");
                let mut rows = Vec::new();
                let mut det_cells = Vec::new();
                for (d, det) in detectors.iter().enumerate() {
                    let name = det.kind().name();
                    let adv_scores =
                        ctx.time("score", || score_images(det, victim, &adv_refs, seeds.detectors, clean_refs.len()))?;
                    for (i, &sc) in clean_scores[d].iter().enumerate() {
                        rows.push(ScoreRow {
                            sample_id: i,
                            attack: attack_name.clone(),
                            detector: name.to_string(),
                            score: sc,
                            label: 0,
                        });
                    }
                    for (&i, &sc) in successes.iter().zip(&adv_scores) {
                        rows.push(ScoreRow {
                            sample_id: i,
                            attack: attack_name.clone(),
                            detector: name.to_string(),
                            score: sc,
                            label: 1,
                        });
                    }
                    let have = !adv_scores.is_empty();
                    det_cells.push(DetectorCell {
                        detector: name.to_string(),
                        auc: if want_auc && have { Some(auc(&adv_scores, &clean_scores[d])?) } else { None },
                        tpr_at_90: if want_tpr && have {
                            Some(tpr_at_tnr(&adv_scores, &clean_scores[d], 0.9)?)
                        } else {
                            None
                        },
                    });
                }
                if successes.is_empty() && !detectors.is_empty() {
                    reports[s].warnings.push(format!("{attack_name}: no successful AEs, detector metrics undefined"));
                }
                if budget_violations > 0 {
                    reports[s].warnings.push(format!("{attack_name}: {budget_violations} AEs violate the budget"));
                }
                let score_file = (!detectors.is_empty()).then(|| {
                    format!(
                        "scores_{}{}_{}_{}.csv",
                        if source.mode == "transfer" { "transfer_" } else { "" },
                        a,
                        spec.kind.to_ascii_lowercase(),
                        variant
                    )
                });
                if let (Some(dir), Some(name)) = (score_dir, &score_file) {
                    write_score_csv(&rows, &dir.join(name)).map_err(|e| e.in_stage("score"))?;
                }
                if let Some(name) = &score_file {
                    score_files[s].push(ScoreFile { name: name.clone(), rows });
                }
                cells.push(VariantCell {
                    attempted: results.len(),
                    successes: successes.len(),
                    adv_acc: successes.len() as f64 / results.len() as f64,
                    max_perturbation,
                    budget_violations,
                    detectors: det_cells,
                    score_file,
                });
                adv_sets[s].push(AdvSet {
                    label: label.clone(),
                    variant: variant.to_string(),
                    epsilon: spec.epsilon,
                    clean_indices: (0..results.len()).collect(),
                    results,
                });
            }
            let mut cells = cells.into_iter();
            let budget = budget_for(0);
            // FGSM takes one step of size epsilon whatever the budget says
            let (alpha, iterations) = match kind {
                AttackKind::Fgsm => (spec.epsilon, 1),
                _ => (budget.alpha, budget.iterations),
            };
            reports[s].attacks.push(AttackCell {
                label: label.clone(),
                attack: kind.name().to_string(),
                epsilon: spec.epsilon,
                alpha,
                iterations,
                kappa,
                detector_training: training,
                plain: cells.next().expect("plain cell"),
                hfc: cells.next(),
            });
        }
        all_detectors.push(detectors);
    }
    Ok(reports.into_iter().zip(adv_sets).zip(score_files).map(|((r, a), s)| (r, a, s, all_detectors.clone())).collect())
}

/// White-box and transfer results of one semi-white-box run.
#[derive(Debug, Clone)]
pub struct TransferOutput {
    pub white_box: ExperimentOutput,
    /// AEs crafted on the substitute and judged by the victim's classifier
    /// and detectors.
    pub transfer: ExperimentReport,
    pub transfer_adversarial: Vec<AdvSet>,
    pub transfer_scores: Vec<ScoreFile>,
    pub substitute: Network,
}

/// Trains a substitute of the same architecture on the same Train split
/// with seeds derived from `substitute_seed`, crafts AEs on it (with its
/// own HFC models) and evaluates them against the victim.
///
/// With `substitute_seed == config.seed` the substitute equals the victim
/// and the transfer report repeats the white-box numbers.
pub fn transfer_experiment(cfg: &ExperimentConfig, substitute_seed: u64) -> Result<TransferOutput> {
    transfer_experiment_with(cfg, substitute_seed, RunOptions::default())
}

pub fn transfer_experiment_with(
    cfg: &ExperimentConfig,
    substitute_seed: u64,
    opts: RunOptions<'_>,
) -> Result<TransferOutput> {
    cfg.validate()?;
    let t0 = Instant::now();
    let prep = prepare(cfg, opts.network.clone())?;
    let sub_seeds = SubSeeds::from_seed(substitute_seed);
    let substitute = if substitute_seed == cfg.seed && opts.network.is_none() {
        prep.network.clone()
    } else {
        train_network(cfg, &prep.input_shape, prep.classes, &prep.split.train, &sub_seeds)
            .map_err(|e| e.in_stage("train"))?
            .0
    };
    if substitute.input_shape() != prep.network.input_shape() {
        return Err(Error::Shape("substitute and victim input shapes differ".into()));
    }
    let mut ctx = Ctx {
        cfg,
        prep: &prep,
        hash: cfg.hash(),
        timings: vec![StageTiming { stage: "prepare".into(), seconds: t0.elapsed().as_secs_f64() }],
    };
    let (hfc, em) = fit_victim_hfc(&mut ctx)?;
    let targets = needed_targets(cfg, &prep);
    let sub_cfg = ExperimentConfig { seed: substitute_seed, ..cfg.clone() };
    let (sub_hfc, _) = ctx.time("hfc", || fit_hfc_models(&sub_cfg, &substitute, &prep.split.train, &targets))?;
    let sources = [
        Source { mode: "white_box", net: &prep.network, hfc: hfc.clone(), substitute_seed: None },
        Source { mode: "transfer", net: &substitute, hfc: sub_hfc, substitute_seed: Some(substitute_seed) },
    ];
    let mut outs = run_cells(&mut ctx, &sources, opts.detectors, opts.score_dir)?;
    let (transfer, transfer_adversarial, transfer_scores, _) = outs.pop().expect("transfer cell");
    let (report, adversarial, scores, detectors) = outs.pop().expect("white-box cell");
    Ok(TransferOutput {
        white_box: ExperimentOutput {
            report,
            network: prep.network.clone(),
            hfc_models: hfc,
            em_reports: em,
            detectors,
            adversarial,
            scores,
            timings: ctx.timings,
        },
        transfer,
        transfer_adversarial,
        transfer_scores,
        substitute,
    })
}

/// Rows of the epsilon-sweep plot file:
/// `attack,epsilon,detector,auc_plain,auc_hfc,adv_acc_plain,adv_acc_hfc`.
pub fn sweep_plot_csv(report: &ExperimentReport) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("attack,epsilon,detector,auc_plain,auc_hfc,adv_acc_plain,adv_acc_hfc\n");
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
    for cell in &report.attacks {
        let hfc_acc = cell.hfc.as_ref().map(|h| h.adv_acc);
        for d in &cell.plain.detectors {
            let hfc_auc = cell.hfc.as_ref().and_then(|h| h.detector(&d.detector)).and_then(|c| c.auc);
            let _ = writeln!(
                out,
                "{},{:?},{},{},{},{:?},{}",
                cell.attack,
                cell.epsilon,
                d.detector,
                fmt(d.auc),
                fmt(hfc_auc),
                cell.plain.adv_acc,
                fmt(hfc_acc)
            );
        }
    }
    out
}

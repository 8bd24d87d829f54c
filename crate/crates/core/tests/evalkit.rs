//! Library-level runs of the experiment, transfer, stress, probe and OOD
//! protocols on a tiny synthetic setup.

use advlab::data::LesionSize;
use advlab::detectors::DetectorKind;
use advlab::evalkit::{
    prepare, run_experiment, run_ood, run_probe, run_stress, sweep_plot_csv, transfer_experiment, ExperimentConfig,
    Theorem,
};

const TINY: &str = r#"
seed = 11

[data]
source = { kind = "synthetic", classes = 2, per_class = 60, side = 12 }

[model]
architecture = { kind = "mlp", hidden = [12] }

[model.train]
epochs = 5

[[attacks]]
kind = "bim"
epsilon = "2/256"

[[attacks]]
kind = "fgsm"
epsilon = "4/256"

[hfc]
enabled = true

[detectors]
kinds = ["kd", "maha"]

[stress]
layer = 2
direction = "up"
epsilons = ["1/256", "4/256"]
samples = 8

[probe]
attack = { kind = "pgd", epsilon = "2/256" }
samples = 6

[ood]
sizes = ["small", "large"]
quantities = [1, 3]
pairs = 20
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

#[test]
fn report_cells_are_consistent() {
    let cfg = tiny();
    let out = run_experiment(&cfg).unwrap();
    let r = &out.report;
    assert_eq!(r.config_hash, cfg.hash());
    assert_eq!(r.attacks.len(), 2);
    assert_eq!(out.detectors.len(), 2);
    for (cell, spec) in r.attacks.iter().zip(&cfg.attacks) {
        assert_eq!(cell.epsilon, spec.epsilon);
        for v in std::iter::once(&cell.plain).chain(cell.hfc.as_ref()) {
            assert_eq!(v.attempted, r.data.adv_test);
            assert!((v.adv_acc - v.successes as f64 / v.attempted as f64).abs() < 1e-15);
            assert_eq!(v.budget_violations, 0);
            assert!(v.max_perturbation <= cell.epsilon + 1e-12);
            let names: Vec<&str> = v.detectors.iter().map(|d| d.detector.as_str()).collect();
            assert_eq!(names, ["kd", "maha"]);
        }
        let dt = cell.detector_training.as_ref().unwrap();
        assert!(dt.successes <= dt.attempted && dt.attempted == r.data.adv_train);
    }
    // fgsm is a single step of size epsilon
    assert_eq!((r.attacks[1].alpha, r.attacks[1].iterations), (4.0 / 256.0, 1));

    let back = advlab::evalkit::ExperimentReport::from_json(&r.to_json()).unwrap();
    assert_eq!(&back, r);

    let csv = sweep_plot_csv(r);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "attack,epsilon,detector,auc_plain,auc_hfc,adv_acc_plain,adv_acc_hfc");
    assert_eq!(lines.count(), 4);
}

#[test]
fn output_dir_does_not_change_results() {
    let a = tiny();
    let mut b = tiny();
    b.output.dir = "elsewhere".into();
    assert_eq!(a.hash(), b.hash());
    let mut c = tiny();
    c.seed += 1;
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.partial_hash(advlab::cli::MODEL_KEYS), {
        let mut d = tiny();
        d.detectors.kinds = vec![DetectorKind::Lid];
        d.partial_hash(advlab::cli::MODEL_KEYS)
    });
}

#[test]
fn self_transfer_repeats_white_box() {
    let mut cfg = tiny();
    cfg.attacks.truncate(1);
    cfg.detectors.kinds = vec![DetectorKind::Maha];
    let out = transfer_experiment(&cfg, cfg.seed).unwrap();
    let wb = &out.white_box.report.attacks[0];
    let tr = &out.transfer.attacks[0];
    // identical apart from the score file name
    for (w, t) in [(&wb.plain, &tr.plain), (wb.hfc.as_ref().unwrap(), tr.hfc.as_ref().unwrap())] {
        assert_eq!((w.attempted, w.successes, w.adv_acc), (t.attempted, t.successes, t.adv_acc));
        assert_eq!(w.max_perturbation, t.max_perturbation);
        assert_eq!(w.detectors, t.detectors);
    }
    assert_eq!(out.transfer.substitute_seed, Some(cfg.seed));
}

#[test]
fn stress_moves_the_pushed_layer() {
    let mut cfg = tiny();
    let prep = prepare(&cfg, None).unwrap();
    let up = run_stress(&cfg, &prep).unwrap();
    assert_eq!(up.len(), 2);
    let up_ratios: Vec<f64> = up.iter().map(|r| r.target_ratio().unwrap()).collect();
    assert!(up_ratios.iter().all(|&r| r > 0.0));
    assert!(up_ratios[1] >= up_ratios[0]);

    cfg.stress.as_mut().unwrap().direction = advlab::evalkit::Direction::Down;
    let down = run_stress(&cfg, &prep).unwrap();
    assert!(down.iter().all(|r| r.target_ratio().unwrap() < 0.0));

    cfg.stress = None;
    assert!(run_stress(&cfg, &prep).is_err());
}

#[test]
fn probe_finds_no_violations_on_a_binary_net() {
    let mut cfg = tiny();
    let prep = prepare(&cfg, None).unwrap();
    let r = run_probe(&cfg, &prep).unwrap();
    assert_eq!(r.theorem, Theorem::Binary);
    assert_eq!(r.violations, 0);
    assert!(r.components_checked > 0);
    assert_eq!(r.sign_agreement, 1.0);

    cfg.probe.as_mut().unwrap().theorem = Some(2);
    assert!(run_probe(&cfg, &prep).is_err());
    cfg.probe.as_mut().unwrap().theorem = Some(3);
    assert!(run_probe(&cfg, &prep).is_err());
}

#[test]
fn ood_report_covers_the_configured_grid() {
    let cfg = tiny();
    let prep = prepare(&cfg, None).unwrap();
    let (report, models) = run_ood(&cfg, &prep).unwrap();
    assert_eq!(report.cells.len(), 4);
    assert!(report.clean_samples <= 20 && report.clean_samples > 0);
    assert!(models.iter().all(Option::is_some));
    for c in &report.cells {
        assert!(c.pairs + c.skipped <= report.clean_samples);
        if let Some(a) = c.auc {
            assert!((0.0..=1.0).contains(&a));
        }
    }
    assert!(report.cell(LesionSize::Tiny, 1).is_none());
    let (again, _) = run_ood(&cfg, &prep).unwrap();
    assert_eq!(again, report);
}

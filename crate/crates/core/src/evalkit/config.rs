//! Declarative experiment configuration.
//!
//! Configs are TOML documents with one section per module. Every random
//! stream is derived from the single top-level `seed` (see [`SubSeeds`]).
//! A config's identity is the SHA-256 of its canonical JSON form: sorted
//! keys, shortest round-trip numbers, every default filled in, and the
//! `[output]` section left out, so moving the output directory does not
//! change the hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    default_iterations, AttackBudget, AttackKind, DEFAULT_ALPHA, DEFAULT_MIM_DECAY, DEFAULT_TIM_RADIUS,
};
use crate::data::{
    gen_synthetic_with, load_idx_or_csv, LabeledSet, LesionSize, LoadOptions, SplitSpec, SyntheticParams,
};
use crate::detectors::{DetectorConfig, DetectorKind, DnnConfig, DEFAULT_L2};
use crate::error::{Error, Result};
use crate::hfc::HfcConfig;
use crate::nn::{LayerSpec, Network, TrainConfig};
use crate::rng::{
    derive_seed, STREAM_ATTACK, STREAM_DATA, STREAM_DETECTOR, STREAM_GMM, STREAM_INIT, STREAM_LESION, STREAM_SHUFFLE,
    STREAM_SPLIT, STREAM_TARGET,
};

/// Accepts a number or a fraction string such as `"1/256"`.
fn de_number<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Float(f64),
        Int(i64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Float(v) => Ok(v),
        Raw::Int(v) => Ok(v as f64),
        Raw::Text(s) => parse_number(&s).map_err(serde::de::Error::custom),
    }
}

fn de_opt_number<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    de_number(d).map(Some)
}

/// Parses `0.5`, `2` or `1/256`.
pub fn parse_number(text: &str) -> std::result::Result<f64, String> {
    let text = text.trim();
    let value = match text.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|_| format!("bad numerator in `{text}`"))?;
            let den: f64 = den.trim().parse().map_err(|_| format!("bad denominator in `{text}`"))?;
            if den == 0.0 {
                return Err(format!("zero denominator in `{text}`"));
            }
            num / den
        }
        None => text.parse().map_err(|_| format!("`{text}` is not a number"))?,
    };
    if !value.is_finite() {
        return Err(format!("`{text}` is not finite"));
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub target: TargetRule,
    #[serde(default)]
    pub hfc: HfcSection,
    #[serde(default)]
    pub detectors: DetectorSection,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stress: Option<StressSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood: Option<OodSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimensionality: Option<DimensionalitySection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_advtrain_fraction")]
    pub advtrain_fraction_of_test: f64,
    /// Caps on the AdvTrain / AdvTest pools after misclassified samples are
    /// dropped (first `n` kept).
    #[serde(default)]
    pub max_adv_train: Option<usize>,
    #[serde(default)]
    pub max_adv_test: Option<usize>,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_advtrain_fraction() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        classes: usize,
        per_class: usize,
        side: usize,
        #[serde(default)]
        params: SyntheticParams,
    },
    /// IDX (detected by magic) or CSV images; paths are relative to the
    /// working directory.
    File {
        path: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        shape: Option<Vec<usize>>,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    #[serde(default)]
    pub train: TrainSection,
}

/// Classifier layout. The final affine layer to the class logits is added
/// automatically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Unpadded `kernel x kernel` convolutions, each followed by ReLU and
    /// (while the map is at least `pool` wide) average pooling, then
    /// flatten and ReLU hidden layers.
    Conv {
        #[serde(default = "default_channels")]
        channels: Vec<usize>,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_pool")]
        pool: usize,
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
    },
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
    },
    /// Explicit layers, excluding the final classifier.
    Layers { layers: Vec<LayerSpec> },
}

fn default_channels() -> Vec<usize> {
    vec![8, 16]
}

fn default_kernel() -> usize {
    3
}

fn default_pool() -> usize {
    2
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

impl Architecture {
    /// Layers for a `[channels, height, width]` (or flat) input, including
    /// the final classifier.
    pub fn build_layers(&self, input_shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
        let mut layers = Vec::new();
        let mut hidden_widths: &[usize] = &[];
        match self {
            Architecture::Conv { channels, kernel, pool, hidden } => {
                let &[mut c, mut h, mut w] = input_shape else {
                    return Err(config_err(
                        "model.architecture.kind",
                        format!("conv architecture needs [c, h, w] images, got {input_shape:?}"),
                    ));
                };
                for &out in channels {
                    if h < *kernel || w < *kernel {
                        return Err(config_err(
                            "model.architecture.channels",
                            format!("a {h}x{w} map is smaller than the {kernel}x{kernel} kernel"),
                        ));
                    }
                    layers.push(LayerSpec::Conv2d {
                        in_channels: c,
                        out_channels: out,
                        kernel: *kernel,
                        stride: 1,
                        padding: 0,
                    });
                    layers.push(LayerSpec::Relu);
                    h = h + 1 - kernel;
                    w = w + 1 - kernel;
                    c = out;
                    if *pool > 1 && h >= *pool && w >= *pool {
                        layers.push(LayerSpec::AvgPool2d { size: *pool });
                        h /= pool;
                        w /= pool;
                    }
                }
                layers.push(LayerSpec::Flatten);
                hidden_widths = hidden;
            }
            Architecture::Mlp { hidden } => {
                if input_shape.len() > 1 {
                    layers.push(LayerSpec::Flatten);
                }
                hidden_widths = hidden;
            }
            Architecture::Layers { layers: explicit } => layers.extend(explicit.iter().copied()),
        }
        if !matches!(self, Architecture::Layers { .. }) {
            let mut width = flat_width(input_shape, &layers)?;
            for &h in hidden_widths {
                layers.push(LayerSpec::Affine { inputs: width, outputs: h });
                layers.push(LayerSpec::Relu);
                width = h;
            }
            layers.push(LayerSpec::Affine { inputs: width, outputs: classes });
        } else {
            let width = flat_width(input_shape, &layers)?;
            layers.push(LayerSpec::Affine { inputs: width, outputs: classes });
        }
        Ok(layers)
    }

    /// Builds and initializes the network.
    pub fn build(&self, input_shape: &[usize], classes: usize, init_seed: u64) -> Result<Network> {
        let layers = self.build_layers(input_shape, classes)?;
        Network::new(input_shape.to_vec(), layers, classes, init_seed)
    }
}

fn flat_width(input_shape: &[usize], layers: &[LayerSpec]) -> Result<usize> {
    let mut shape = input_shape.to_vec();
    for (i, l) in layers.iter().enumerate() {
        shape = l.output_shape(&shape).map_err(|message| Error::LayerShape {
            layer: i,
            kind: l.name().to_string(),
            message,
        })?;
    }
    if shape.len() != 1 {
        return Err(config_err(
            "model.architecture",
            format!("layers end in shape {shape:?}; the classifier needs a flat vector"),
        ));
    }
    Ok(shape[0])
}

/// Training hyperparameters; the seed comes from [`SubSeeds`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(deserialize_with = "de_number")]
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub standardize: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 0.0,
            standardize: true,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            standardize: self.standardize,
            seed,
        }
    }
}

/// One attack to evaluate. `epsilon` and `alpha` accept fractions such as
/// `"1/256"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: String,
    #[serde(deserialize_with = "de_number")]
    pub epsilon: f64,
    #[serde(default, deserialize_with = "de_opt_number")]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default, deserialize_with = "de_opt_number")]
    pub decay: Option<f64>,
    #[serde(default)]
    pub radius: Option<usize>,
    #[serde(default, deserialize_with = "de_opt_number")]
    pub kappa: Option<f64>,
}

impl AttackSpec {
    pub fn new(kind: &str, epsilon: f64) -> Self {
        AttackSpec {
            kind: kind.to_string(),
            epsilon,
            alpha: None,
            iterations: None,
            random_start: false,
            decay: None,
            radius: None,
            kappa: None,
        }
    }

    /// Resolves the attack kind; `key` prefixes error paths.
    pub fn attack_kind(&self, key: &str) -> Result<AttackKind> {
        let base = AttackKind::from_name(&self.kind).map_err(|e| config_err(format!("{key}.kind"), e.to_string()))?;
        let misplaced = |field: &str| config_err(format!("{key}.{field}"), format!("not a parameter of {}", self.kind));
        let kind = match base {
            AttackKind::Mim { .. } => AttackKind::Mim { decay: self.decay.unwrap_or(DEFAULT_MIM_DECAY) },
            AttackKind::Tim { .. } => AttackKind::Tim { radius: self.radius.unwrap_or(DEFAULT_TIM_RADIUS) },
            AttackKind::Cw { .. } => AttackKind::Cw { kappa: self.kappa },
            other => other,
        };
        if self.decay.is_some() && !matches!(kind, AttackKind::Mim { .. }) {
            return Err(misplaced("decay"));
        }
        if self.radius.is_some() && !matches!(kind, AttackKind::Tim { .. }) {
            return Err(misplaced("radius"));
        }
        if self.kappa.is_some() && !matches!(kind, AttackKind::Cw { .. }) {
            return Err(misplaced("kappa"));
        }
        kind.validate().map_err(|e| config_err(key, e.to_string()))?;
        Ok(kind)
    }

    /// Budget with defaults filled in: alpha `0.02/256`, `T = ceil(2 eps / alpha)`.
    pub fn budget(&self, seed: u64) -> AttackBudget {
        let alpha = self.alpha.unwrap_or(DEFAULT_ALPHA);
        AttackBudget {
            epsilon: self.epsilon,
            alpha,
            iterations: self.iterations.unwrap_or_else(|| default_iterations(self.epsilon, alpha)),
            random_start: self.random_start,
            seed,
        }
    }

    /// Label used in score files, e.g. `bim@0.00390625`.
    pub fn label(&self) -> String {
        format!("{}@{:?}", self.kind.to_ascii_lowercase(), self.epsilon)
    }
}

/// How the attack target is chosen for a sample of true class `y`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// `(y + 1) mod K`.
    #[default]
    Next,
    /// Uniform over the other classes, drawn per sample.
    Random,
}

impl TargetRule {
    pub fn target(self, label: usize, classes: usize, seed: u64, index: usize) -> usize {
        match self {
            TargetRule::Next => (label + 1) % classes,
            TargetRule::Random => {
                use rand::Rng;
                let mut rng = crate::rng::stream_rng(seed, STREAM_TARGET, index as u64);
                let r = rng.gen_range(0..classes - 1);
                if r >= label {
                    r + 1
                } else {
                    r
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HfcSection {
    pub enabled: bool,
    pub components: Option<usize>,
    pub layers: Option<Vec<usize>>,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for HfcSection {
    fn default() -> Self {
        let d = HfcConfig::default();
        HfcSection { enabled: true, components: d.components, layers: d.layers, max_iters: d.max_iters, tol: d.tol }
    }
}

impl HfcSection {
    pub fn to_hfc_config(&self, seed: u64) -> HfcConfig {
        HfcConfig {
            components: self.components,
            layers: self.layers.clone(),
            max_iters: self.max_iters,
            tol: self.tol,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub kinds: Vec<DetectorKind>,
    pub lid_k: usize,
    pub bu_passes: usize,
    pub bu_rate: f64,
    pub maha_class_conditional: bool,
    pub logistic_l2: f64,
    pub svm_c: f64,
    pub dnn: DnnConfig,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorConfig::default();
        DetectorSection {
            kinds: DetectorKind::ALL.to_vec(),
            lid_k: d.lid_k,
            bu_passes: d.bu_passes,
            bu_rate: d.bu_rate,
            maha_class_conditional: d.maha_class_conditional,
            logistic_l2: DEFAULT_L2,
            svm_c: d.svm_c,
            dnn: d.dnn,
        }
    }
}

impl DetectorSection {
    pub fn to_detector_config(&self, seed: u64) -> DetectorConfig {
        DetectorConfig {
            lid_k: self.lid_k,
            bu_passes: self.bu_passes,
            bu_rate: self.bu_rate,
            maha_class_conditional: self.maha_class_conditional,
            logistic_l2: self.logistic_l2,
            svm_c: self.svm_c,
            dnn: self.dnn.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    TprAt90,
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::Auc, Metric::TprAt90]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressSection {
    /// Layer whose mean activation is pushed.
    pub layer: usize,
    pub direction: Direction,
    /// Each epsilon is run with the default alpha and iteration count.
    #[serde(deserialize_with = "de_numbers")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_stress_samples")]
    pub samples: usize,
}

fn default_stress_samples() -> usize {
    50
}

fn de_numbers<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    struct Wrap(#[serde(deserialize_with = "de_number")] f64);
    Ok(Vec::<Wrap>::deserialize(d)?.into_iter().map(|w| w.0).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    /// Probe I (binary) or II (multi-class); picked from the class count
    /// when absent.
    #[serde(default)]
    pub theorem: Option<u8>,
    pub attack: AttackSpec,
    #[serde(default = "default_probe_samples")]
    pub samples: usize,
    #[serde(default = "default_cosine_points")]
    pub cosine_points: usize,
}

fn default_probe_samples() -> usize {
    50
}

fn default_cosine_points() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    /// Seed of the independently trained substitute; only its
    /// initialization and training shuffle differ from the victim.
    pub substitute_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSection {
    #[serde(default = "default_sizes")]
    pub sizes: Vec<LesionSize>,
    #[serde(default = "default_quantities")]
    pub quantities: Vec<usize>,
    /// Number of clean/lesioned pairs per cell.
    #[serde(default = "default_pairs")]
    pub pairs: usize,
}

impl Default for OodSection {
    fn default() -> Self {
        OodSection { sizes: default_sizes(), quantities: default_quantities(), pairs: default_pairs() }
    }
}

fn default_sizes() -> Vec<LesionSize> {
    LesionSize::ALL.to_vec()
}

fn default_quantities() -> Vec<usize> {
    vec![1, 2, 3]
}

fn default_pairs() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionalitySection {
    pub sides: Vec<usize>,
    pub attack: AttackSpec,
    /// Also evaluate images generated at the largest side and average-pooled
    /// down to each smaller side.
    #[serde(default)]
    pub downsample: bool,
}

/// Where CLI runs write their artifacts. Not part of the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs") }
    }
}

/// Seeds of every random consumer, derived from the top-level seed as
/// `derive_seed(seed, stream, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubSeeds {
    pub data: u64,
    pub split: u64,
    pub init: u64,
    pub train: u64,
    pub attack: u64,
    pub target: u64,
    pub hfc: u64,
    pub detectors: u64,
    pub lesion: u64,
}

impl SubSeeds {
    pub fn from_seed(seed: u64) -> Self {
        let d = |stream| derive_seed(seed, stream, 0);
        SubSeeds {
            data: d(STREAM_DATA),
            split: d(STREAM_SPLIT),
            init: d(STREAM_INIT),
            train: d(STREAM_SHUFFLE),
            attack: d(STREAM_ATTACK),
            target: d(STREAM_TARGET),
            hfc: d(STREAM_GMM),
            detectors: d(STREAM_DETECTOR),
            lesion: d(STREAM_LESION),
        }
    }
}

pub(crate) fn config_err(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config { key: key.into(), message: message.into() }
}

impl ExperimentConfig {
    /// Parses TOML text and validates it. Errors name the offending key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            config_err(if key == "." { "(root)".to_string() } else { key }, inner.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn seeds(&self) -> SubSeeds {
        SubSeeds::from_seed(self.seed)
    }

    /// Checks value ranges and cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        for (key, f) in
            [("data.train_fraction", d.train_fraction), ("data.advtrain_fraction_of_test", d.advtrain_fraction_of_test)]
        {
            if !(f > 0.0 && f < 1.0) {
                return Err(config_err(key, format!("must lie strictly between 0 and 1, got {f}")));
            }
        }
        match &d.source {
            DataSource::Synthetic { classes, per_class, side, .. } => {
                if *classes < 2 {
                    return Err(config_err("data.source.classes", "need at least two classes"));
                }
                if *per_class == 0 {
                    return Err(config_err("data.source.per_class", "must be positive"));
                }
                if *side < 4 {
                    return Err(config_err("data.source.side", "must be at least 4"));
                }
            }
            DataSource::File { path, labels, .. } => {
                if !path.exists() {
                    return Err(config_err("data.source.path", format!("{} does not exist", path.display())));
                }
                if let Some(l) = labels {
                    if !l.exists() {
                        return Err(config_err("data.source.labels", format!("{} does not exist", l.display())));
                    }
                }
            }
        }
        let t = &self.model.train;
        if t.batch_size == 0 {
            return Err(config_err("model.train.batch_size", "must be positive"));
        }
        if !(t.learning_rate > 0.0) {
            return Err(config_err("model.train.learning_rate", "must be positive"));
        }
        for (i, a) in self.attacks.iter().enumerate() {
            validate_attack(a, &format!("attacks[{i}]"))?;
        }
        if self.hfc.components == Some(0) {
            return Err(config_err("hfc.components", "must be positive"));
        }
        if let Some(p) = &self.probe {
            validate_attack(&p.attack, "probe.attack")?;
            if !matches!(p.theorem, None | Some(1) | Some(2)) {
                return Err(config_err("probe.theorem", "must be 1 or 2"));
            }
        }
        if let Some(s) = &self.stress {
            for (i, &e) in s.epsilons.iter().enumerate() {
                if !(0.0..=1.0).contains(&e) {
                    return Err(config_err(format!("stress.epsilons[{i}]"), "must lie in [0, 1]"));
                }
            }
        }
        if let Some(o) = &self.ood {
            if o.quantities.contains(&0) {
                return Err(config_err("ood.quantities", "lesion quantities must be positive"));
            }
        }
        if let Some(dm) = &self.dimensionality {
            if dm.sides.len() < 2 {
                return Err(config_err("dimensionality.sides", "need at least two sides"));
            }
            validate_attack(&dm.attack, "dimensionality.attack")?;
        }
        Ok(())
    }

    /// Canonical JSON: sorted keys, defaults filled, output section removed.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output");
        }
        // serde_json maps are ordered by key, so this is already canonical
        serde_json::to_string(&value).expect("value serializes")
    }

    /// Hex SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Hash of the top-level `keys` only; identifies stage artifacts such as
    /// a trained model (`seed`, `data`, `model`) across unrelated edits.
    pub fn partial_hash(&self, keys: &[&str]) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let map = value.as_object().expect("config is an object");
        let kept: serde_json::Map<String, serde_json::Value> =
            map.iter().filter(|(k, _)| keys.contains(&k.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect();
        let text = serde_json::to_string(&kept).expect("value serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Generates or loads the full dataset.
    pub fn load_dataset(&self) -> Result<LabeledSet> {
        match &self.data.source {
            DataSource::Synthetic { classes, per_class, side, params } => {
                gen_synthetic_with(*classes, *per_class, *side, self.seeds().data, params)
            }
            DataSource::File { path, labels, shape, num_classes } => load_idx_or_csv(
                path,
                &LoadOptions { labels: labels.clone(), shape: shape.clone(), num_classes: *num_classes },
            ),
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.data.train_fraction,
            advtrain_fraction_of_test: self.data.advtrain_fraction_of_test,
            seed: self.seeds().split,
        }
    }

    pub fn hfc_config(&self) -> HfcConfig {
        self.hfc.to_hfc_config(self.seeds().hfc)
    }

    pub fn detector_config(&self) -> DetectorConfig {
        self.detectors.to_detector_config(self.seeds().detectors)
    }
}

fn validate_attack(a: &AttackSpec, key: &str) -> Result<()> {
    a.attack_kind(key)?;
    if !(0.0..=1.0).contains(&a.epsilon) {
        return Err(config_err(format!("{key}.epsilon"), format!("must lie in [0, 1], got {}", a.epsilon)));
    }
    if let Some(alpha) = a.alpha {
        if !(alpha > 0.0) {
            return Err(config_err(format!("{key}.alpha"), "must be positive"));
        }
    }
    if a.iterations == Some(0) {
        return Err(config_err(format!("{key}.iterations"), "must be at least 1"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
seed = 3

[data]
source = { kind = "synthetic", classes = 2, per_class = 20, side = 12 }

[model]
architecture = { kind = "conv", channels = [4], hidden = [8] }

[[attacks]]
kind = "bim"
epsilon = "1/256"
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(TOY).unwrap();
        assert_eq!(cfg.attacks[0].epsilon, 1.0 / 256.0);
        assert_eq!(cfg.detectors.kinds.len(), 6);
        assert!(cfg.hfc.enabled);
        let b = cfg.attacks[0].budget(0);
        assert_eq!(b.iterations, 100);
    }

    #[test]
    fn hash_ignores_output_and_formatting() {
        let a = ExperimentConfig::from_toml(TOY).unwrap();
        let moved = format!("{TOY}\n[output]\ndir = \"elsewhere\"\n");
        let b = ExperimentConfig::from_toml(&moved).unwrap();
        assert_eq!(a.hash(), b.hash());
        let decimal = TOY.replace("\"1/256\"", "0.00390625");
        assert_eq!(a.hash(), ExperimentConfig::from_toml(&decimal).unwrap().hash());
        let reseeded = TOY.replace("seed = 3", "seed = 4");
        assert_ne!(a.hash(), ExperimentConfig::from_toml(&reseeded).unwrap().hash());
    }

    #[test]
    fn toml_round_trip() {
        let a = ExperimentConfig::from_toml(TOY).unwrap();
        let b = ExperimentConfig::from_toml(&a.to_toml()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors_name_the_key() {
        let bad = TOY.replace("per_class = 20", "per_class = 20, colour = 1");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("data.source"), "{err}");
        let bad = TOY.replace("\"1/256\"", "\"1/0\"");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("attacks[0].epsilon"), "{err}");
        let bad = format!("{TOY}decay = 0.5\n");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("attacks[0].decay"), "{err}");
        let missing = TOY.replace(
            "{ kind = \"synthetic\", classes = 2, per_class = 20, side = 12 }",
            "{ kind = \"file\", path = \"/nonexistent/x.idx\" }",
        );
        let err = ExperimentConfig::from_toml(&missing).unwrap_err().to_string();
        assert!(err.contains("data.source.path"), "{err}");
    }

    #[test]
    fn conv_builder_skips_pooling_on_small_maps() {
        let arch = Architecture::Conv { channels: vec![8, 16], kernel: 3, pool: 2, hidden: vec![32] };
        let net = arch.build(&[1, 8, 8], 2, 0).unwrap();
        assert_eq!(net.output_shape(4), &[16, 1, 1]);
        let net = arch.build(&[1, 24, 24], 2, 0).unwrap();
        assert_eq!(net.output_shape(5), &[16, 4, 4]);
        assert!(arch.build(&[1, 4, 4], 2, 0).is_err());
    }

    #[test]
    fn random_target_never_true_class() {
        for i in 0..200 {
            let t = TargetRule::Random.target(2, 4, 9, i);
            assert!(t != 2 && t < 4);
        }
        assert_eq!(TargetRule::Next.target(3, 4, 0, 0), 0);
    }

    #[test]
    fn fractions() {
        assert_eq!(parse_number("1/256").unwrap(), 1.0 / 256.0);
        assert_eq!(parse_number(" 0.5 ").unwrap(), 0.5);
        assert!(parse_number("a/2").is_err());
    }
}

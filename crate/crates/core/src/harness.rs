//! Experiment orchestration: run configuration, data and model preparation,
//! the training recipes, run reports and their export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::baselines::{AdaptationObjective, Discriminator, ObjectiveKind};
use crate::data::{generate_toy_benchmark, load_image_folder, DomainRole, LabeledDataset, ToyBenchmarkSpec};
use crate::diagnostics::{diagnostics_csv, noisy_label_probe, DiagnosticsConfig, DiagnosticsRecord, EvalSets, ProbeConfig};
use crate::error::{Error, Result};
use crate::model::{BackboneKind, ModelBundle, ModelConfig};
use crate::objectives::TridaConfig;
use crate::optim::{Schedule, SgdConfig};
use crate::plot::write_line_chart;
use crate::seed::sub_seed;
use crate::synthesis::{export_synthetic, synthesize_dataset, SynthesisConfig, SynthesisInit};
use crate::taxonomy::{build_pretrain_subset, load_taxonomy, select_pretrain_classes, SelectionResult, BUILTIN_TOY};
use crate::training::{pretrain_bundle, target_accuracy, train_sfuda_step2, train_source, train_uda, LossRecord, TrainLog, TrainSettings, Tracker};

/// Environment variables `TRIDA_<KEY>` override configuration keys; the key
/// is upper-cased with dots replaced by underscores.
pub const ENV_PREFIX: &str = "TRIDA_";

pub const SOURCE_CHECKPOINT: &str = "source_model.ckpt";
pub const FINAL_CHECKPOINT: &str = "final_model.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    Uda,
    SfudaStep1,
    SfudaStep2,
    NoisyProbe,
    Synthesize,
}

impl Recipe {
    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::Uda => "uda",
            Recipe::SfudaStep1 => "sfuda_step1",
            Recipe::SfudaStep2 => "sfuda_step2",
            Recipe::NoisyProbe => "noisy_probe",
            Recipe::Synthesize => "synthesize",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Recipe::Uda, Recipe::SfudaStep1, Recipe::SfudaStep2, Recipe::NoisyProbe, Recipe::Synthesize]
            .into_iter()
            .find(|r| r.as_str() == s)
    }

    fn objective_kind(self) -> ObjectiveKind {
        match self {
            Recipe::Uda => ObjectiveKind::UdaAdversarial,
            Recipe::SfudaStep2 => ObjectiveKind::SfudaShotLike,
            _ => ObjectiveKind::SourceOnly,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Toy(ToyBenchmarkSpec),
    /// Image folders `root/<class>/<image>` per domain.
    Folders {
        source: Option<PathBuf>,
        target: Option<PathBuf>,
        pretrain: Option<PathBuf>,
        image_side: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub recipe: Recipe,
    pub run_id: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub data: DataSource,
    pub taxonomy: String,
    pub class_map: Option<PathBuf>,
    pub tau: f64,
    pub per_class_cap: Option<usize>,
    pub model: ModelConfig,
    /// Epochs of the pre-training stage that produces the initial backbone
    /// when no `init_checkpoint` is given.
    pub pretrain_epochs: usize,
    pub pretrain_seed: u64,
    pub init_checkpoint: Option<PathBuf>,
    pub source_checkpoint: Option<PathBuf>,
    pub trida: TridaConfig,
    pub objective: AdaptationObjective,
    pub sgd: SgdConfig,
    pub schedule: Schedule,
    pub diagnostics: bool,
    pub diag: DiagnosticsConfig,
    pub noise_fraction: f64,
    pub probe_pretrain_loss: bool,
    pub synth: SynthesisConfig,
    pub synth_workers: usize,
    /// Replace real pre-training data by images synthesized from the
    /// initial bundle.
    pub synth_for_pretrain: bool,
    pub repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            recipe: Recipe::SfudaStep1,
            run_id: "run".to_string(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
            epochs: 10,
            batch_size: 32,
            data: DataSource::Toy(ToyBenchmarkSpec::default()),
            taxonomy: BUILTIN_TOY.to_string(),
            class_map: None,
            tau: 0.2,
            per_class_cap: None,
            model: ModelConfig::default(),
            pretrain_epochs: 10,
            pretrain_seed: 0,
            init_checkpoint: None,
            source_checkpoint: None,
            trida: TridaConfig::default(),
            objective: AdaptationObjective::new(ObjectiveKind::SourceOnly),
            sgd: SgdConfig::default(),
            schedule: Schedule::PolyDecay,
            diagnostics: true,
            diag: DiagnosticsConfig::default(),
            noise_fraction: 0.5,
            probe_pretrain_loss: false,
            synth: SynthesisConfig::default(),
            synth_workers: 1,
            synth_for_pretrain: false,
            repeats: 1,
        }
    }
}

/// Every configuration key, in rendering order.
pub const CONFIG_KEYS: &[&str] = &[
    "recipe",
    "run_id",
    "seed",
    "output_dir",
    "epochs",
    "batch_size",
    "repeats",
    "data",
    "toy.n_classes_task",
    "toy.n_classes_pretrain",
    "toy.image_side",
    "toy.samples_per_class",
    "toy.seed",
    "toy.shift.hue",
    "toy.shift.texture",
    "toy.shift.noise",
    "toy.shift.contrast",
    "source_dir",
    "target_dir",
    "pretrain_dir",
    "image_side",
    "taxonomy",
    "class_map",
    "tau",
    "per_class_cap",
    "model.backbone",
    "model.bottleneck_dim",
    "model.weight_norm_head",
    "pretrain_epochs",
    "pretrain_seed",
    "init_checkpoint",
    "source_checkpoint",
    "trida",
    "trida.beta",
    "trida.alpha",
    "trida.use_pretrain",
    "trida.use_sem",
    "trida.use_feat",
    "objective.label_smoothing",
    "objective.w_pl",
    "objective.grl_max",
    "objective.disc_hidden",
    "optim.preset",
    "optim.lr_backbone",
    "optim.lr_new",
    "optim.momentum",
    "optim.weight_decay",
    "optim.schedule",
    "diag.enabled",
    "diag.n_projections",
    "diag.n_eval",
    "diag.seed",
    "probe.noise_fraction",
    "probe.pretrain_loss",
    "synth.steps",
    "synth.step_size",
    "synth.w_tv",
    "synth.w_l2",
    "synth.w_feat",
    "synth.images_per_class",
    "synth.init",
    "synth.seed",
    "synth.workers",
    "synth.use_for_pretrain",
];

/// Keys that do not influence results and are left out of the hash.
const UNHASHED_KEYS: &[&str] = &["run_id", "output_dir", "repeats", "synth.workers"];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::invalid(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("{key}: expected a boolean, got `{value}`"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn render_backbone(b: &BackboneKind) -> String {
    match b {
        BackboneKind::Identity => "identity".to_string(),
        BackboneKind::Conv { channels } => {
            let c: Vec<String> = channels.iter().map(|c| c.to_string()).collect();
            format!("conv:{}", c.join(","))
        }
    }
}

impl RunConfig {
    fn toy_mut(&mut self) -> &mut ToyBenchmarkSpec {
        if !matches!(self.data, DataSource::Toy(_)) {
            self.data = DataSource::Toy(ToyBenchmarkSpec::default());
        }
        match &mut self.data {
            DataSource::Toy(s) => s,
            DataSource::Folders { .. } => unreachable!(),
        }
    }

    fn folders_mut(&mut self) -> (&mut Option<PathBuf>, &mut Option<PathBuf>, &mut Option<PathBuf>, &mut usize) {
        if !matches!(self.data, DataSource::Folders { .. }) {
            self.data = DataSource::Folders {
                source: None,
                target: None,
                pretrain: None,
                image_side: 32,
            };
        }
        match &mut self.data {
            DataSource::Folders {
                source,
                target,
                pretrain,
                image_side,
            } => (source, target, pretrain, image_side),
            DataSource::Toy(_) => unreachable!(),
        }
    }

    /// Sets one key. Toy keys switch the data source to the toy benchmark,
    /// folder keys to image folders.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "recipe" => self.recipe = Recipe::parse(v).ok_or_else(|| Error::invalid(format!("unknown recipe `{v}`")))?,
            "run_id" => {
                if v.is_empty() || v.contains(['/', '\\']) {
                    return Err(Error::invalid("run_id must be a non-empty file-name component"));
                }
                self.run_id = v.to_string()
            }
            "seed" => self.seed = parse_value(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "repeats" => self.repeats = parse_value(key, v)?,
            "data" => match v {
                "toy" => {
                    self.toy_mut();
                }
                "folders" => {
                    self.folders_mut();
                }
                _ => return Err(Error::invalid(format!("data must be `toy` or `folders`, got `{v}`"))),
            },
            "toy.n_classes_task" => self.toy_mut().n_classes_task = parse_value(key, v)?,
            "toy.n_classes_pretrain" => self.toy_mut().n_classes_pretrain = parse_value(key, v)?,
            "toy.image_side" => self.toy_mut().image_side = parse_value(key, v)?,
            "toy.samples_per_class" => self.toy_mut().samples_per_class_per_domain = parse_value(key, v)?,
            "toy.seed" => self.toy_mut().seed = parse_value(key, v)?,
            "toy.shift.hue" => self.toy_mut().shift.hue = parse_value(key, v)?,
            "toy.shift.texture" => self.toy_mut().shift.texture = parse_value(key, v)?,
            "toy.shift.noise" => self.toy_mut().shift.noise = parse_value(key, v)?,
            "toy.shift.contrast" => self.toy_mut().shift.contrast = parse_value(key, v)?,
            "source_dir" => *self.folders_mut().0 = opt_path(v),
            "target_dir" => *self.folders_mut().1 = opt_path(v),
            "pretrain_dir" => *self.folders_mut().2 = opt_path(v),
            "image_side" => *self.folders_mut().3 = parse_value(key, v)?,
            "taxonomy" => self.taxonomy = v.to_string(),
            "class_map" => self.class_map = opt_path(v),
            "tau" => self.tau = parse_value(key, v)?,
            "per_class_cap" => self.per_class_cap = if v.is_empty() || v == "none" { None } else { Some(parse_value(key, v)?) },
            "model.backbone" => {
                self.model.backbone = if v == "identity" {
                    BackboneKind::Identity
                } else if let Some(list) = v.strip_prefix("conv:") {
                    let channels = list.split(',').map(|c| parse_value(key, c.trim())).collect::<Result<Vec<usize>>>()?;
                    BackboneKind::Conv { channels }
                } else {
                    return Err(Error::invalid(format!("{key}: expected `identity` or `conv:c1,c2,...`, got `{v}`")));
                }
            }
            "model.bottleneck_dim" => self.model.bottleneck_dim = parse_value(key, v)?,
            "model.weight_norm_head" => self.model.weight_norm_head = parse_bool(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_value(key, v)?,
            "pretrain_seed" => self.pretrain_seed = parse_value(key, v)?,
            "init_checkpoint" => self.init_checkpoint = opt_path(v),
            "source_checkpoint" => self.source_checkpoint = opt_path(v),
            "trida" => {
                let on = parse_bool(key, v)?;
                self.trida.use_pretrain = on;
                self.trida.use_sem = on;
                self.trida.use_feat = on;
            }
            "trida.beta" => self.trida.beta = parse_value(key, v)?,
            "trida.alpha" => self.trida.alpha = parse_value(key, v)?,
            "trida.use_pretrain" => self.trida.use_pretrain = parse_bool(key, v)?,
            "trida.use_sem" => self.trida.use_sem = parse_bool(key, v)?,
            "trida.use_feat" => self.trida.use_feat = parse_bool(key, v)?,
            "objective.label_smoothing" => self.objective.label_smoothing = parse_value(key, v)?,
            "objective.w_pl" => self.objective.w_pl = parse_value(key, v)?,
            "objective.grl_max" => self.objective.grl_max = parse_value(key, v)?,
            "objective.disc_hidden" => self.objective.disc_hidden = parse_value(key, v)?,
            "optim.preset" => {
                self.sgd = match v {
                    "default" => SgdConfig::default(),
                    "visda" => SgdConfig::visda(),
                    _ => return Err(Error::invalid(format!("{key}: expected `default` or `visda`, got `{v}`"))),
                }
            }
            "optim.lr_backbone" => self.sgd.lr_backbone = parse_value(key, v)?,
            "optim.lr_new" => self.sgd.lr_new = parse_value(key, v)?,
            "optim.momentum" => self.sgd.momentum = parse_value(key, v)?,
            "optim.weight_decay" => self.sgd.weight_decay = parse_value(key, v)?,
            "optim.schedule" => {
                self.schedule = match v {
                    "poly" => Schedule::PolyDecay,
                    "constant" => Schedule::Constant,
                    _ => return Err(Error::invalid(format!("{key}: expected `poly` or `constant`, got `{v}`"))),
                }
            }
            "diag.enabled" => self.diagnostics = parse_bool(key, v)?,
            "diag.n_projections" => self.diag.n_projections = parse_value(key, v)?,
            "diag.n_eval" => self.diag.n_eval = parse_value(key, v)?,
            "diag.seed" => self.diag.seed = parse_value(key, v)?,
            "probe.noise_fraction" => self.noise_fraction = parse_value(key, v)?,
            "probe.pretrain_loss" => self.probe_pretrain_loss = parse_bool(key, v)?,
            "synth.steps" => self.synth.steps = parse_value(key, v)?,
            "synth.step_size" => self.synth.step_size = parse_value(key, v)?,
            "synth.w_tv" => self.synth.reg_weights.w_tv = parse_value(key, v)?,
            "synth.w_l2" => self.synth.reg_weights.w_l2 = parse_value(key, v)?,
            "synth.w_feat" => self.synth.reg_weights.w_feat = parse_value(key, v)?,
            "synth.images_per_class" => self.synth.images_per_class = parse_value(key, v)?,
            "synth.init" => {
                self.synth.init = SynthesisInit::parse(v).ok_or_else(|| Error::invalid(format!("{key}: unknown init `{v}`")))?
            }
            "synth.seed" => self.synth.seed = parse_value(key, v)?,
            "synth.workers" => self.synth_workers = parse_value(key, v)?,
            "synth.use_for_pretrain" => self.synth_for_pretrain = parse_bool(key, v)?,
            _ => return Err(Error::Lookup(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines. `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn env_name(key: &str) -> String {
        format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "_"))
    }

    /// Applies overrides looked up by [`RunConfig::env_name`].
    pub fn apply_env_with(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        for key in CONFIG_KEYS {
            if let Some(v) = lookup(&Self::env_name(key)) {
                self.set(key, &v)
                    .map_err(|e| Error::invalid(format!("environment override {}: {e}", Self::env_name(key))))?;
            }
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_env_with(|k| std::env::var(k).ok())
    }

    /// Canonical `key=value` pairs for every key that applies.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut p: Vec<(&'static str, String)> = vec![
            ("recipe", self.recipe.as_str().to_string()),
            ("run_id", self.run_id.clone()),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("repeats", self.repeats.to_string()),
        ];
        match &self.data {
            DataSource::Toy(s) => {
                p.push(("data", "toy".into()));
                p.push(("toy.n_classes_task", s.n_classes_task.to_string()));
                p.push(("toy.n_classes_pretrain", s.n_classes_pretrain.to_string()));
                p.push(("toy.image_side", s.image_side.to_string()));
                p.push(("toy.samples_per_class", s.samples_per_class_per_domain.to_string()));
                p.push(("toy.seed", s.seed.to_string()));
                p.push(("toy.shift.hue", s.shift.hue.to_string()));
                p.push(("toy.shift.texture", s.shift.texture.to_string()));
                p.push(("toy.shift.noise", s.shift.noise.to_string()));
                p.push(("toy.shift.contrast", s.shift.contrast.to_string()));
            }
            DataSource::Folders {
                source,
                target,
                pretrain,
                image_side,
            } => {
                let show = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
                p.push(("data", "folders".into()));
                p.push(("source_dir", show(source)));
                p.push(("target_dir", show(target)));
                p.push(("pretrain_dir", show(pretrain)));
                p.push(("image_side", image_side.to_string()));
            }
        }
        let show = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        p.extend([
            ("taxonomy", self.taxonomy.clone()),
            ("class_map", show(&self.class_map)),
            ("tau", self.tau.to_string()),
            ("per_class_cap", self.per_class_cap.map_or_else(|| "none".to_string(), |c| c.to_string())),
            ("model.backbone", render_backbone(&self.model.backbone)),
            ("model.bottleneck_dim", self.model.bottleneck_dim.to_string()),
            ("model.weight_norm_head", self.model.weight_norm_head.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_seed", self.pretrain_seed.to_string()),
            ("init_checkpoint", show(&self.init_checkpoint)),
            ("source_checkpoint", show(&self.source_checkpoint)),
            ("trida.beta", self.trida.beta.to_string()),
            ("trida.alpha", self.trida.alpha.to_string()),
            ("trida.use_pretrain", self.trida.use_pretrain.to_string()),
            ("trida.use_sem", self.trida.use_sem.to_string()),
            ("trida.use_feat", self.trida.use_feat.to_string()),
            ("objective.label_smoothing", self.objective.label_smoothing.to_string()),
            ("objective.w_pl", self.objective.w_pl.to_string()),
            ("objective.grl_max", self.objective.grl_max.to_string()),
            ("objective.disc_hidden", self.objective.disc_hidden.to_string()),
            ("optim.lr_backbone", self.sgd.lr_backbone.to_string()),
            ("optim.lr_new", self.sgd.lr_new.to_string()),
            ("optim.momentum", self.sgd.momentum.to_string()),
            ("optim.weight_decay", self.sgd.weight_decay.to_string()),
            (
                "optim.schedule",
                match self.schedule {
                    Schedule::PolyDecay => "poly",
                    Schedule::Constant => "constant",
                }
                .to_string(),
            ),
            ("diag.enabled", self.diagnostics.to_string()),
            ("diag.n_projections", self.diag.n_projections.to_string()),
            ("diag.n_eval", self.diag.n_eval.to_string()),
            ("diag.seed", self.diag.seed.to_string()),
            ("probe.noise_fraction", self.noise_fraction.to_string()),
            ("probe.pretrain_loss", self.probe_pretrain_loss.to_string()),
            ("synth.steps", self.synth.steps.to_string()),
            ("synth.step_size", self.synth.step_size.to_string()),
            ("synth.w_tv", self.synth.reg_weights.w_tv.to_string()),
            ("synth.w_l2", self.synth.reg_weights.w_l2.to_string()),
            ("synth.w_feat", self.synth.reg_weights.w_feat.to_string()),
            ("synth.images_per_class", self.synth.images_per_class.to_string()),
            ("synth.init", self.synth.init.as_str().to_string()),
            ("synth.seed", self.synth.seed.to_string()),
            ("synth.workers", self.synth_workers.to_string()),
            ("synth.use_for_pretrain", self.synth_for_pretrain.to_string()),
        ]);
        p
    }

    /// The configuration as a loadable key-value file.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        s
    }

    /// SHA-256 of the result-relevant keys.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.pairs().into_iter().filter(|(k, _)| !UNHASHED_KEYS.contains(k)) {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn image_side(&self) -> usize {
        match &self.data {
            DataSource::Toy(s) => s.image_side,
            DataSource::Folders { image_side, .. } => *image_side,
        }
    }

    /// Model configuration of the adapted network.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            image_side: self.image_side(),
            backbone_pretrained: true,
            ..self.model.clone()
        }
    }

    pub fn train_settings(&self, checkpoint: Option<PathBuf>) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            sgd: self.sgd,
            schedule: self.schedule,
            seed: sub_seed(self.seed, "train"),
            checkpoint,
        }
    }

    fn needs_base(&self) -> bool {
        match self.recipe {
            Recipe::SfudaStep2 => self.synth_for_pretrain && self.trida.is_active(),
            _ => true,
        }
    }

    /// Checks every field the recipe needs before any computation.
    pub fn validate(&self) -> Result<()> {
        if self.recipe != Recipe::Synthesize && self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be positive"));
        }
        self.train_settings(None).validate()?;
        self.trida.validate()?;
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::invalid(format!("tau must lie in [0, 1), got {}", self.tau)));
        }
        let o = &self.objective;
        if ![o.label_smoothing, o.w_pl, o.grl_max].iter().all(|v| v.is_finite() && *v >= 0.0) || o.label_smoothing >= 1.0 {
            return Err(Error::invalid("objective weights must be finite and non-negative, smoothing below 1"));
        }
        if o.disc_hidden == 0 {
            return Err(Error::invalid("objective.disc_hidden must be positive"));
        }
        if self.diag.n_projections == 0 || self.diag.n_eval < 2 {
            return Err(Error::invalid("diag.n_projections must be positive and diag.n_eval at least 2"));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(Error::invalid("probe.noise_fraction must lie in [0, 1]"));
        }
        self.synth.validate()?;
        if self.synth_workers == 0 {
            return Err(Error::invalid("synth.workers must be positive"));
        }
        match &self.data {
            DataSource::Toy(s) => s.validate()?,
            DataSource::Folders {
                source,
                target,
                pretrain,
                image_side,
            } => {
                if *image_side < 8 {
                    return Err(Error::invalid("image_side must be at least 8"));
                }
                for (name, p) in [("source_dir", source), ("target_dir", target), ("pretrain_dir", pretrain)] {
                    match p {
                        None => return Err(Error::invalid(format!("{name} is required for folder data"))),
                        Some(p) if !p.is_dir() => return Err(Error::invalid(format!("{name} `{}` is not a directory", p.display()))),
                        _ => {}
                    }
                }
            }
        }
        if let Some(p) = &self.init_checkpoint {
            if !p.is_file() {
                return Err(Error::invalid(format!("init_checkpoint `{}` does not exist", p.display())));
            }
        }
        if self.recipe == Recipe::SfudaStep2 {
            match &self.source_checkpoint {
                None => return Err(Error::invalid("sfuda_step2 needs source_checkpoint (the step-1 model)")),
                Some(p) if !p.is_file() => {
                    return Err(Error::invalid(format!("source checkpoint `{}` does not exist", p.display())))
                }
                _ => {}
            }
        }
        if let Some(p) = &self.class_map {
            if !p.is_file() {
                return Err(Error::invalid(format!("class_map `{}` does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// The three domains of a run.
#[derive(Clone, Debug)]
pub struct Domains {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
    pub pretrain: LabeledDataset,
}

pub fn load_domains(cfg: &RunConfig) -> Result<Domains> {
    match &cfg.data {
        DataSource::Toy(spec) => {
            let b = generate_toy_benchmark(spec)?;
            Ok(Domains {
                source: b.source,
                target: b.target,
                pretrain: b.pretrain,
            })
        }
        DataSource::Folders {
            source,
            target,
            pretrain,
            image_side,
        } => {
            let load = |p: &Option<PathBuf>, role| {
                let p = p.as_ref().ok_or_else(|| Error::invalid(format!("{role} directory missing")))?;
                load_image_folder(p, role, *image_side)
            };
            let d = Domains {
                source: load(source, DomainRole::Source)?,
                target: load(target, DomainRole::Target)?,
                pretrain: load(pretrain, DomainRole::Pretrain)?,
            };
            if d.source.class_set() != d.target.class_set() {
                return Err(Error::invalid("source and target folders must have the same classes"));
            }
            Ok(d)
        }
    }
}

/// Data, class selection and the initial pre-trained bundle shared by the
/// runs of one configuration (everything that does not depend on the run
/// seed).
#[derive(Clone, Debug)]
pub struct Workspace {
    pub domains: Domains,
    pub selection: SelectionResult,
    pub pretrain_subset: LabeledDataset,
    /// Pre-trained bundle providing the initial backbone, with `h_p` over
    /// every pre-training class.
    pub base: Option<ModelBundle>,
    /// Images synthesized from `base` for the selected classes.
    pub synthetic: Option<LabeledDataset>,
}

/// Trains the bundle that stands in for a pre-trained network: the
/// backbone learned from scratch on all pre-training data.
pub fn pretrain_base(cfg: &RunConfig, pretrain: &LabeledDataset) -> Result<ModelBundle> {
    let classes = pretrain.class_set().to_vec();
    let model = ModelConfig {
        backbone_pretrained: false,
        ..cfg.model_config()
    };
    let mut base = ModelBundle::new(model, classes.clone(), classes, sub_seed(cfg.pretrain_seed, "init/base"))?;
    let settings = TrainSettings {
        epochs: cfg.pretrain_epochs,
        batch_size: cfg.batch_size,
        sgd: SgdConfig::default(),
        schedule: Schedule::PolyDecay,
        seed: sub_seed(cfg.pretrain_seed, "train/base"),
        checkpoint: None,
    };
    pretrain_bundle(&mut base, pretrain, &settings)?;
    Ok(base)
}

pub fn prepare(cfg: &RunConfig) -> Result<Workspace> {
    cfg.validate()?;
    let domains = load_domains(cfg)?;
    let mut tax = load_taxonomy(&cfg.taxonomy)?;
    if let Some(p) = &cfg.class_map {
        tax.load_class_mapping(p)?;
    }
    let selection = select_pretrain_classes(&tax, domains.pretrain.class_set(), domains.target.class_set(), cfg.tau)?;
    log::info!("selected {} pre-training classes at tau = {}", selection.selected.len(), cfg.tau);
    if selection.selected.is_empty() && (cfg.trida.is_active() || cfg.recipe == Recipe::Synthesize) {
        return Err(Error::invalid(format!("no pre-training class is selected at tau = {}", cfg.tau)));
    }
    let pretrain_subset = if selection.selected.is_empty() {
        domains.pretrain.clone()
    } else {
        build_pretrain_subset(&domains.pretrain, &selection, cfg.per_class_cap)?
    };
    let base = if cfg.needs_base() {
        Some(match &cfg.init_checkpoint {
            Some(p) => ModelBundle::load(p)?,
            None => {
                log::info!("pre-training the initial bundle for {} epochs", cfg.pretrain_epochs);
                pretrain_base(cfg, &domains.pretrain)?
            }
        })
    } else {
        None
    };
    let synthetic = match (&base, cfg.synth_for_pretrain && cfg.recipe != Recipe::Synthesize) {
        (Some(b), true) => {
            log::info!("synthesizing {} images per selected class", cfg.synth.images_per_class);
            Some(synthesize_dataset(b, &selection.selected, &cfg.synth, None, cfg.synth_workers)?.0)
        }
        _ => None,
    };
    Ok(Workspace {
        domains,
        selection,
        pretrain_subset,
        base,
        synthetic,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub run_id: String,
    pub recipe: Recipe,
    pub seed: u64,
    pub config_hash: String,
    pub config_text: String,
    pub selected_classes: Vec<String>,
    pub diagnostics: Vec<DiagnosticsRecord>,
    /// `(domain, accuracy)` of the final stripped model.
    pub final_accuracy: Vec<(String, f64)>,
    pub losses: Vec<LossRecord>,
    pub pseudo_label_accuracy: Vec<f64>,
    /// Sorted indices of corrupted labels (noisy-label probe).
    pub corrupted: Vec<usize>,
    /// Final confidences per synthesized class.
    pub synthesis: Vec<(String, Vec<f64>)>,
    /// File names inside the output directory.
    pub checkpoints: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn accuracy(&self, domain: &str) -> Option<f64> {
        self.final_accuracy.iter().find(|(d, _)| d == domain).map(|p| p.1)
    }

    /// SHA-256 over every field except the wall-clock time.
    pub fn hash(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{}|{}|{}|{}", self.run_id, self.recipe.as_str(), self.seed, self.config_hash).unwrap();
        s.push_str(&self.config_text);
        writeln!(s, "{}", self.selected_classes.join(",")).unwrap();
        s.push_str(&diagnostics_csv(&self.diagnostics).unwrap_or_default());
        for (d, a) in &self.final_accuracy {
            writeln!(s, "{d}={a}").unwrap();
        }
        s.push_str(&losses_csv(&self.losses).unwrap_or_default());
        writeln!(s, "{:?}|{:?}|{:?}|{:?}", self.pseudo_label_accuracy, self.corrupted, self.synthesis, self.checkpoints).unwrap();
        hex::encode(Sha256::digest(s.as_bytes()))
    }
}

/// The report plus the final (unstripped) model of a run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub model: Option<ModelBundle>,
}

fn fresh_bundle(cfg: &RunConfig, ws: &Workspace) -> Result<ModelBundle> {
    let base = ws.base.as_ref().ok_or_else(|| Error::invalid("no initial bundle prepared"))?;
    let mut b = ModelBundle::new(
        cfg.model_config(),
        ws.domains.target.class_set().to_vec(),
        ws.selection.selected.clone(),
        sub_seed(cfg.seed, "init/adapt"),
    )?;
    b.load_backbone_from(base)?;
    Ok(b)
}

fn objective_for(cfg: &RunConfig) -> AdaptationObjective {
    AdaptationObjective {
        kind: cfg.recipe.objective_kind(),
        ..cfg.objective
    }
}

/// Runs one recipe with prepared data. Checkpoints go to `cfg.output_dir`.
pub fn run_prepared(cfg: &RunConfig, ws: &Workspace) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let diag = DiagnosticsConfig { ..cfg.diag };
    let sets = if cfg.diagnostics || cfg.recipe == Recipe::NoisyProbe {
        Some(EvalSets::new(&ws.domains.source, &ws.domains.target, &ws.pretrain_subset, &diag)?)
    } else {
        None
    };
    let tracker = sets.as_ref().map(|s| Tracker { sets: s, cfg: &diag });
    let settings = cfg.train_settings(Some(out.join(LAST_GOOD_CHECKPOINT)));
    let objective = objective_for(cfg);
    let mut report = RunReport {
        run_id: cfg.run_id.clone(),
        recipe: cfg.recipe,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config_text: cfg.to_text(),
        selected_classes: ws.selection.selected.clone(),
        diagnostics: Vec::new(),
        final_accuracy: Vec::new(),
        losses: Vec::new(),
        pseudo_label_accuracy: Vec::new(),
        corrupted: Vec::new(),
        synthesis: Vec::new(),
        checkpoints: Vec::new(),
        wall_clock_secs: 0.0,
    };
    let pretrain_data = ws.synthetic.as_ref().filter(|_| cfg.synth_for_pretrain).unwrap_or(&ws.pretrain_subset);
    let mut log = TrainLog::default();
    let model = match cfg.recipe {
        Recipe::SfudaStep1 => {
            let mut b = fresh_bundle(cfg, ws)?;
            let trida = TridaConfig {
                use_sem: false,
                use_feat: false,
                ..cfg.trida
            };
            log = train_source(&mut b, &ws.domains.source, Some(pretrain_data), &trida, &objective, &settings, tracker.as_ref())?;
            b.save(&out.join(SOURCE_CHECKPOINT))?;
            report.checkpoints.push(SOURCE_CHECKPOINT.to_string());
            Some(b)
        }
        Recipe::SfudaStep2 => {
            let path = cfg.source_checkpoint.as_ref().expect("validated");
            let mut b = ModelBundle::load(path)?;
            if b.target_classes() != ws.domains.target.class_set() {
                return Err(Error::invalid("source checkpoint classes differ from the target classes"));
            }
            if cfg.trida.is_active() && b.pretrain_classes() != pretrain_data.class_set() {
                b = b.reset_pretrain_head(pretrain_data.class_set().to_vec(), sub_seed(cfg.seed, "init/pretrain-head"));
            }
            log = train_sfuda_step2(&mut b, &ws.domains.target, Some(pretrain_data), &cfg.trida, &objective, &settings, tracker.as_ref())?;
            Some(b)
        }
        Recipe::Uda => {
            let mut b = fresh_bundle(cfg, ws)?;
            let mut disc = Discriminator::new(b.feature_dim(), objective.disc_hidden, sub_seed(cfg.seed, "init/disc"));
            log = train_uda(
                &mut b,
                &mut disc,
                &ws.domains.source,
                &ws.domains.target,
                Some(pretrain_data),
                &cfg.trida,
                &objective,
                &settings,
                tracker.as_ref(),
            )?;
            Some(b)
        }
        Recipe::NoisyProbe => {
            let mut b = fresh_bundle(cfg, ws)?;
            let probe = ProbeConfig {
                noise_fraction: cfg.noise_fraction,
                with_pretrain_loss: cfg.probe_pretrain_loss,
                train: settings.clone(),
            };
            let outcome = noisy_label_probe(&mut b, &ws.domains.source, pretrain_data, sets.as_ref().expect("built above"), &diag, &probe)?;
            report.corrupted = outcome.corrupted;
            log = outcome.log;
            Some(b)
        }
        Recipe::Synthesize => {
            let base = ws.base.as_ref().expect("prepared");
            let (ds, results) = synthesize_dataset(base, &ws.selection.selected, &cfg.synth, None, cfg.synth_workers)?;
            export_synthetic(&ds, &results, &cfg.synth, &out.join("synthetic"))?;
            report.synthesis = results.into_iter().map(|r| (r.class_id, r.confidences)).collect();
            None
        }
    };
    report.diagnostics = log.diagnostics;
    report.losses = log.losses;
    report.pseudo_label_accuracy = log.pseudo_label_accuracy;
    if let Some(m) = &model {
        let stripped = m.clone().strip_pretrain_head();
        stripped.save(&out.join(FINAL_CHECKPOINT))?;
        report.checkpoints.push(FINAL_CHECKPOINT.to_string());
        report.final_accuracy = vec![
            ("source".to_string(), target_accuracy(&stripped, &ws.domains.source)?),
            ("target".to_string(), target_accuracy(&stripped, &ws.domains.target)?),
        ];
    }
    let last_good = out.join(LAST_GOOD_CHECKPOINT);
    if last_good.exists() {
        fs::remove_file(&last_good).map_err(|e| Error::io(&last_good, e))?;
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(RunOutcome { report, model })
}

/// Validates, prepares and runs one configuration.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    let ws = prepare(cfg)?;
    Ok(run_prepared(cfg, &ws)?.report)
}

/// Configuration of repeat `r`: seed `seed + r`, its own run id and output
/// subdirectory. A single repeat is returned unchanged.
pub fn repeat_config(cfg: &RunConfig, r: usize) -> RunConfig {
    if cfg.repeats <= 1 {
        return cfg.clone();
    }
    let seed = cfg.seed + r as u64;
    let run_id = format!("{}_s{seed}", cfg.run_id);
    RunConfig {
        seed,
        output_dir: cfg.output_dir.join(&run_id),
        run_id,
        repeats: 1,
        ..cfg.clone()
    }
}

/// Runs every repeat over one shared workspace.
pub fn run_repeats(cfg: &RunConfig) -> Result<Vec<RunReport>> {
    let ws = prepare(cfg)?;
    (0..cfg.repeats.max(1))
        .map(|r| {
            let c = repeat_config(cfg, r);
            log::info!("run {} (seed {})", c.run_id, c.seed);
            let report = run_prepared(&c, &ws)?.report;
            export_report(&report, &c.output_dir)?;
            Ok(report)
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    (m, s)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn losses_csv(losses: &[LossRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "step", "lambda", "baseline", "source", "pretrain", "sem", "feat", "total"])?;
    for r in losses {
        let b = &r.breakdown;
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            opt(r.lambda),
            b.baseline.to_string(),
            opt(b.source),
            opt(b.pretrain),
            opt(b.sem),
            opt(b.feat),
            b.total.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Chart file names and the metric each one plots.
pub fn chart_files(run_id: &str) -> Vec<(String, &'static str)> {
    ["w_st", "w_sp", "w_tp", "silhouette_pretrain"]
        .into_iter()
        .map(|m| (format!("chart_{m}_{run_id}.png"), m))
        .collect()
}

/// Line charts of the three Wasserstein curves and the silhouette.
pub fn write_charts(records: &[DiagnosticsRecord], dir: &Path, run_id: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (name, metric) in chart_files(run_id) {
        let series: Vec<f64> = records
            .iter()
            .map(|r| match metric {
                "w_st" => r.w_st,
                "w_sp" => r.w_sp,
                "w_tp" => r.w_tp,
                _ => r.silhouette_pretrain,
            })
            .collect();
        let path = dir.join(name);
        write_line_chart(&[&series], &path)?;
        out.push(path);
    }
    Ok(out)
}

fn write(path: PathBuf, text: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    out.push(path);
    Ok(())
}

/// Writes the report into `dir`: diagnostics and loss CSVs, charts,
/// the configuration snapshot and a summary listing checkpoints.
pub fn export_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = &report.run_id;
    let mut files = Vec::new();
    write(dir.join(format!("diag_{id}.csv")), &diagnostics_csv(&report.diagnostics)?, &mut files)?;
    write(dir.join(format!("losses_{id}.csv")), &losses_csv(&report.losses)?, &mut files)?;
    write(dir.join(format!("config_{id}.txt")), &report.config_text, &mut files)?;
    if !report.pseudo_label_accuracy.is_empty() {
        let mut s = "epoch,pseudo_label_accuracy\n".to_string();
        for (e, a) in report.pseudo_label_accuracy.iter().enumerate() {
            writeln!(s, "{e},{a}").unwrap();
        }
        write(dir.join(format!("pseudo_labels_{id}.csv")), &s, &mut files)?;
    }
    if !report.synthesis.is_empty() {
        let mut s = "class,image,confidence\n".to_string();
        for (c, conf) in &report.synthesis {
            for (i, v) in conf.iter().enumerate() {
                writeln!(s, "{c},{i},{v}").unwrap();
            }
        }
        write(dir.join(format!("synthesis_{id}.csv")), &s, &mut files)?;
    }
    let mut summary = String::new();
    writeln!(summary, "run_id={id}").unwrap();
    writeln!(summary, "recipe={}", report.recipe.as_str()).unwrap();
    writeln!(summary, "seed={}", report.seed).unwrap();
    writeln!(summary, "config_hash={}", report.config_hash).unwrap();
    writeln!(summary, "report_hash={}", report.hash()).unwrap();
    writeln!(summary, "selected_classes={}", report.selected_classes.join(",")).unwrap();
    for (d, a) in &report.final_accuracy {
        writeln!(summary, "final_accuracy.{d}={a}").unwrap();
    }
    if !report.corrupted.is_empty() {
        writeln!(summary, "corrupted_labels={}", report.corrupted.len()).unwrap();
    }
    for c in &report.checkpoints {
        writeln!(summary, "checkpoint={}", dir.join(c).display()).unwrap();
    }
    writeln!(summary, "wall_clock_secs={:.3}", report.wall_clock_secs).unwrap();
    write(dir.join(format!("summary_{id}.txt")), &summary, &mut files)?;
    files.extend(write_charts(&report.diagnostics, dir, id)?);
    Ok(files)
}

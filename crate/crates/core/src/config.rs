//! Run configuration: flat sectioned `key = value` text. File parsing,
//! environment overrides (`TWOHEAD_<SECTION>_<KEY>`), and `--set section.key=value`
//! flags all funnel through one typed setter, so every source behaves
//! identically and `dump` round-trips to an identical run.

use std::path::Path;

use crate::attack::{AttackConfig, AttackMode, NormKind};
use crate::data::{gen_synthetic, parse_idx, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ArchitectureConfig, InputShape, TrunkSpec};
use crate::surface::DirKind;
use crate::training::TrainMode;

/// Prefix for environment-variable overrides.
pub const ENV_PREFIX: &str = "TWOHEAD_";

// ── choice enums ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrunkChoice {
    Mlp,
    Conv,
}

/// Whether PGD starts from a random point in the ball. `Auto` resolves to
/// on for untargeted attacks and off for targeted ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomStart {
    Auto,
    On,
    Off,
}

/// What happens to the clean encoder while the robust one trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CleanPolicy {
    Frozen,
    Momentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefenseChoice {
    Softmax,
    Knn,
}

// ── the config ──────────────────────────────────────────────────────────────

/// Every knob of a run. Defaults are the desk-scale recipe: a 10-class
/// synthetic task that trains in minutes on one CPU core while exercising
/// every mechanism of the full method.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [data]
    pub source: DataSource,
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub noise_sigma: f64,
    /// Seed for synthetic data generation, independent of the run seed so
    /// different training seeds can share one fixed task.
    pub data_seed: u64,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,

    // [model]
    pub trunk: TrunkChoice,
    pub widths: Vec<usize>,
    pub conv_channels1: usize,
    pub conv_channels2: usize,
    pub conv_dense: usize,
    pub d_feat: usize,

    // [loss]
    pub tau: f64,
    pub eta_init: f64,
    pub kl_weight: f64,

    // [attack] — epsilon and alpha are in 1/255 pixel units.
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub norm: NormKind,
    pub attack_mode: AttackMode,
    pub random_start: RandomStart,

    // [train]
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub replay_m: usize,
    pub clean_policy: CleanPolicy,
    pub momentum_enc: f64,
    pub bank_capacity: usize,
    pub clean_epochs: usize,
    /// PGD step count for the per-epoch robust-accuracy monitor.
    pub eval_steps: usize,
    pub seed: u64,

    // [eval]
    pub defense: DefenseChoice,
    pub knn_k: usize,

    // [surface] — radius/scale 0 mean "use the attack epsilon".
    pub surface_radius: f64,
    pub surface_scale: f64,
    pub surface_resolution: usize,
    pub surface_dir1: DirKind,
    pub surface_dir2: DirKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            source: DataSource::Synthetic,
            classes: 10,
            dim: 64,
            n_per_class: 50,
            noise_sigma: 0.05,
            data_seed: 0,
            train_images: String::new(),
            train_labels: String::new(),
            test_images: String::new(),
            test_labels: String::new(),

            trunk: TrunkChoice::Mlp,
            widths: vec![256, 256],
            conv_channels1: 8,
            conv_channels2: 16,
            conv_dense: 128,
            d_feat: 128,

            tau: 0.2,
            eta_init: 1.0 / 30.0,
            kl_weight: 0.1,

            epsilon: 8.0,
            alpha: 2.0,
            steps: 10,
            norm: NormKind::Linf,
            attack_mode: AttackMode::Untargeted,
            random_start: RandomStart::Auto,

            mode: TrainMode::That,
            epochs: 250,
            batch: 32,
            lr: 0.004,
            milestones: vec![167, 219],
            momentum: 0.9,
            weight_decay: 1e-4,
            replay_m: 4,
            clean_policy: CleanPolicy::Frozen,
            momentum_enc: 0.999,
            bank_capacity: 4096,
            clean_epochs: 250,
            eval_steps: 10,
            seed: 1,

            defense: DefenseChoice::Softmax,
            knn_k: 50,

            surface_radius: 0.0,
            surface_scale: 0.0,
            surface_resolution: 21,
            surface_dir1: DirKind::Adversarial,
            surface_dir2: DirKind::Rademacher,
        }
    }
}

// ── value parsers ───────────────────────────────────────────────────────────

fn p_usize(v: &str, what: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::config(format!("{what}: expected an unsigned integer, got {v:?}")))
}

fn p_u64(v: &str, what: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::config(format!("{what}: expected an unsigned integer, got {v:?}")))
}

fn p_f64(v: &str, what: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::config(format!("{what}: expected a number, got {v:?}")))
}

fn p_usize_list(v: &str, what: &str) -> Result<Vec<usize>> {
    let t = v.trim();
    if t.is_empty() {
        return Ok(Vec::new());
    }
    t.split(',').map(|s| p_usize(s.trim(), what)).collect()
}

fn join_list(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn bad_choice(what: &str, got: &str, options: &str) -> Error {
    Error::config(format!("{what}: expected one of {options}, got {got:?}"))
}

impl RunConfig {
    // ── the single setter ───────────────────────────────────────────────────

    /// Apply one `key = value` pair from any source. Unknown sections and
    /// keys are errors so typos never silently fall back to defaults.
    pub fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match (section, key) {
            ("data", "source") => {
                self.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "idx" => DataSource::Idx,
                    _ => return Err(bad_choice("data.source", v, "synthetic|idx")),
                }
            }
            ("data", "classes") => self.classes = p_usize(v, "data.classes")?,
            ("data", "dim") => self.dim = p_usize(v, "data.dim")?,
            ("data", "n_per_class") => self.n_per_class = p_usize(v, "data.n_per_class")?,
            ("data", "noise_sigma") => self.noise_sigma = p_f64(v, "data.noise_sigma")?,
            ("data", "data_seed") => self.data_seed = p_u64(v, "data.data_seed")?,
            ("data", "train_images") => self.train_images = v.to_string(),
            ("data", "train_labels") => self.train_labels = v.to_string(),
            ("data", "test_images") => self.test_images = v.to_string(),
            ("data", "test_labels") => self.test_labels = v.to_string(),

            ("model", "trunk") => {
                self.trunk = match v {
                    "mlp" => TrunkChoice::Mlp,
                    "conv" => TrunkChoice::Conv,
                    _ => return Err(bad_choice("model.trunk", v, "mlp|conv")),
                }
            }
            ("model", "widths") => self.widths = p_usize_list(v, "model.widths")?,
            ("model", "conv_channels1") => self.conv_channels1 = p_usize(v, "model.conv_channels1")?,
            ("model", "conv_channels2") => self.conv_channels2 = p_usize(v, "model.conv_channels2")?,
            ("model", "conv_dense") => self.conv_dense = p_usize(v, "model.conv_dense")?,
            ("model", "d_feat") => self.d_feat = p_usize(v, "model.d_feat")?,

            ("loss", "tau") => self.tau = p_f64(v, "loss.tau")?,
            ("loss", "eta_init") => self.eta_init = p_f64(v, "loss.eta_init")?,
            ("loss", "kl_weight") => self.kl_weight = p_f64(v, "loss.kl_weight")?,

            ("attack", "epsilon") => self.epsilon = p_f64(v, "attack.epsilon")?,
            ("attack", "alpha") => self.alpha = p_f64(v, "attack.alpha")?,
            ("attack", "steps") => self.steps = p_usize(v, "attack.steps")?,
            ("attack", "norm") => {
                self.norm = match v {
                    "linf" => NormKind::Linf,
                    "l2" => NormKind::L2,
                    _ => return Err(bad_choice("attack.norm", v, "linf|l2")),
                }
            }
            ("attack", "mode") => {
                self.attack_mode = match v {
                    "untargeted" => AttackMode::Untargeted,
                    "targeted" => AttackMode::Targeted,
                    _ => return Err(bad_choice("attack.mode", v, "untargeted|targeted")),
                }
            }
            ("attack", "random_start") => {
                self.random_start = match v {
                    "auto" => RandomStart::Auto,
                    "on" => RandomStart::On,
                    "off" => RandomStart::Off,
                    _ => return Err(bad_choice("attack.random_start", v, "auto|on|off")),
                }
            }

            ("train", "mode") => self.mode = TrainMode::parse(v)?,
            ("train", "epochs") => self.epochs = p_usize(v, "train.epochs")?,
            ("train", "batch") => self.batch = p_usize(v, "train.batch")?,
            ("train", "lr") => self.lr = p_f64(v, "train.lr")?,
            ("train", "milestones") => self.milestones = p_usize_list(v, "train.milestones")?,
            ("train", "momentum") => self.momentum = p_f64(v, "train.momentum")?,
            ("train", "weight_decay") => self.weight_decay = p_f64(v, "train.weight_decay")?,
            ("train", "replay_m") => self.replay_m = p_usize(v, "train.replay_m")?,
            ("train", "clean_policy") => {
                self.clean_policy = match v {
                    "frozen" => CleanPolicy::Frozen,
                    "momentum" => CleanPolicy::Momentum,
                    _ => return Err(bad_choice("train.clean_policy", v, "frozen|momentum")),
                }
            }
            ("train", "momentum_enc") => self.momentum_enc = p_f64(v, "train.momentum_enc")?,
            ("train", "bank_capacity") => self.bank_capacity = p_usize(v, "train.bank_capacity")?,
            ("train", "clean_epochs") => self.clean_epochs = p_usize(v, "train.clean_epochs")?,
            ("train", "eval_steps") => self.eval_steps = p_usize(v, "train.eval_steps")?,
            ("train", "seed") => self.seed = p_u64(v, "train.seed")?,

            ("eval", "defense") => {
                self.defense = match v {
                    "softmax" => DefenseChoice::Softmax,
                    "knn" => DefenseChoice::Knn,
                    _ => return Err(bad_choice("eval.defense", v, "softmax|knn")),
                }
            }
            ("eval", "k") => self.knn_k = p_usize(v, "eval.k")?,

            ("surface", "radius") => self.surface_radius = p_f64(v, "surface.radius")?,
            ("surface", "scale") => self.surface_scale = p_f64(v, "surface.scale")?,
            ("surface", "resolution") => {
                self.surface_resolution = p_usize(v, "surface.resolution")?
            }
            ("surface", "dir1") => self.surface_dir1 = DirKind::parse(v)?,
            ("surface", "dir2") => self.surface_dir2 = DirKind::parse(v)?,

            _ => {
                return Err(Error::config(format!(
                    "unknown config key [{section}] {key}"
                )))
            }
        }
        Ok(())
    }

    // ── sources ─────────────────────────────────────────────────────────────

    /// Parse sectioned `key = value` text. `#` lines are comments; keys
    /// before any `[section]` header are errors.
    pub fn parse_into(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "config line {}: expected `key = value`, got {line:?}",
                    lineno + 1
                )));
            };
            if section.is_empty() {
                return Err(Error::config(format!(
                    "config line {}: key before any [section] header",
                    lineno + 1
                )));
            }
            self.apply(&section, key.trim(), value)
                .map_err(|e| Error::config(format!("config line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.parse_into(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_text(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Apply `TWOHEAD_<SECTION>_<KEY>=value` pairs. The section never
    /// contains an underscore, so the first `_` after the prefix splits it
    /// from the key. Unknown names under the prefix are errors.
    pub fn apply_env_pairs<'a>(
        &mut self,
        vars: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<()> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let Some((section, key)) = rest.split_once('_') else {
                return Err(Error::config(format!(
                    "env var {name}: expected {ENV_PREFIX}<SECTION>_<KEY>"
                )));
            };
            self.apply(&section.to_lowercase(), &key.to_lowercase(), value)
                .map_err(|e| Error::config(format!("env var {name}: {e}")))?;
        }
        Ok(())
    }

    /// Apply one `section.key=value` command-line override.
    pub fn apply_set(&mut self, spec: &str) -> Result<()> {
        let Some((path, value)) = spec.split_once('=') else {
            return Err(Error::config(format!(
                "--set {spec:?}: expected section.key=value"
            )));
        };
        let Some((section, key)) = path.trim().split_once('.') else {
            return Err(Error::config(format!(
                "--set {spec:?}: expected section.key=value"
            )));
        };
        self.apply(section.trim(), key.trim(), value)
            .map_err(|e| Error::config(format!("--set {spec:?}: {e}")))
    }

    // ── dump ────────────────────────────────────────────────────────────────

    /// Canonical text form. Parsing the dump reproduces this config exactly:
    /// floats print in Rust's shortest round-trip form.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: &str| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        };
        s.push_str("[data]\n");
        kv(
            &mut s,
            "source",
            match self.source {
                DataSource::Synthetic => "synthetic",
                DataSource::Idx => "idx",
            },
        );
        kv(&mut s, "classes", &self.classes.to_string());
        kv(&mut s, "dim", &self.dim.to_string());
        kv(&mut s, "n_per_class", &self.n_per_class.to_string());
        kv(&mut s, "noise_sigma", &self.noise_sigma.to_string());
        kv(&mut s, "data_seed", &self.data_seed.to_string());
        kv(&mut s, "train_images", &self.train_images);
        kv(&mut s, "train_labels", &self.train_labels);
        kv(&mut s, "test_images", &self.test_images);
        kv(&mut s, "test_labels", &self.test_labels);

        s.push_str("\n[model]\n");
        kv(
            &mut s,
            "trunk",
            match self.trunk {
                TrunkChoice::Mlp => "mlp",
                TrunkChoice::Conv => "conv",
            },
        );
        kv(&mut s, "widths", &join_list(&self.widths));
        kv(&mut s, "conv_channels1", &self.conv_channels1.to_string());
        kv(&mut s, "conv_channels2", &self.conv_channels2.to_string());
        kv(&mut s, "conv_dense", &self.conv_dense.to_string());
        kv(&mut s, "d_feat", &self.d_feat.to_string());

        s.push_str("\n[loss]\n");
        kv(&mut s, "tau", &self.tau.to_string());
        kv(&mut s, "eta_init", &self.eta_init.to_string());
        kv(&mut s, "kl_weight", &self.kl_weight.to_string());

        s.push_str("\n[attack]\n");
        kv(&mut s, "epsilon", &self.epsilon.to_string());
        kv(&mut s, "alpha", &self.alpha.to_string());
        kv(&mut s, "steps", &self.steps.to_string());
        kv(
            &mut s,
            "norm",
            match self.norm {
                NormKind::Linf => "linf",
                NormKind::L2 => "l2",
            },
        );
        kv(
            &mut s,
            "mode",
            match self.attack_mode {
                AttackMode::Untargeted => "untargeted",
                AttackMode::Targeted => "targeted",
            },
        );
        kv(
            &mut s,
            "random_start",
            match self.random_start {
                RandomStart::Auto => "auto",
                RandomStart::On => "on",
                RandomStart::Off => "off",
            },
        );

        s.push_str("\n[train]\n");
        kv(&mut s, "mode", self.mode.name());
        kv(&mut s, "epochs", &self.epochs.to_string());
        kv(&mut s, "batch", &self.batch.to_string());
        kv(&mut s, "lr", &self.lr.to_string());
        kv(&mut s, "milestones", &join_list(&self.milestones));
        kv(&mut s, "momentum", &self.momentum.to_string());
        kv(&mut s, "weight_decay", &self.weight_decay.to_string());
        kv(&mut s, "replay_m", &self.replay_m.to_string());
        kv(
            &mut s,
            "clean_policy",
            match self.clean_policy {
                CleanPolicy::Frozen => "frozen",
                CleanPolicy::Momentum => "momentum",
            },
        );
        kv(&mut s, "momentum_enc", &self.momentum_enc.to_string());
        kv(&mut s, "bank_capacity", &self.bank_capacity.to_string());
        kv(&mut s, "clean_epochs", &self.clean_epochs.to_string());
        kv(&mut s, "eval_steps", &self.eval_steps.to_string());
        kv(&mut s, "seed", &self.seed.to_string());

        s.push_str("\n[eval]\n");
        kv(
            &mut s,
            "defense",
            match self.defense {
                DefenseChoice::Softmax => "softmax",
                DefenseChoice::Knn => "knn",
            },
        );
        kv(&mut s, "k", &self.knn_k.to_string());

        s.push_str("\n[surface]\n");
        kv(&mut s, "radius", &self.surface_radius.to_string());
        kv(&mut s, "scale", &self.surface_scale.to_string());
        kv(&mut s, "resolution", &self.surface_resolution.to_string());
        kv(&mut s, "dir1", self.surface_dir1.name());
        kv(&mut s, "dir2", self.surface_dir2.name());
        s
    }

    // ── validation ──────────────────────────────────────────────────────────

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.classes < 2 {
            return fail(format!("data.classes {} must be at least 2", self.classes));
        }
        if self.dim == 0 || self.n_per_class == 0 {
            return fail("data.dim and data.n_per_class must be positive".to_string());
        }
        if !(self.noise_sigma > 0.0) {
            return fail(format!("data.noise_sigma {} must be > 0", self.noise_sigma));
        }
        if self.source == DataSource::Idx {
            for (k, v) in [
                ("train_images", &self.train_images),
                ("train_labels", &self.train_labels),
                ("test_images", &self.test_images),
                ("test_labels", &self.test_labels),
            ] {
                if v.is_empty() {
                    return fail(format!("data.source = idx requires data.{k}"));
                }
            }
        }
        match self.trunk {
            TrunkChoice::Mlp => {
                if self.widths.is_empty() || self.widths.contains(&0) {
                    return fail("model.widths must be a non-empty list of positive sizes".to_string());
                }
            }
            TrunkChoice::Conv => {
                if self.conv_channels1 == 0 || self.conv_channels2 == 0 || self.conv_dense == 0 {
                    return fail("conv channel and dense sizes must be positive".to_string());
                }
            }
        }
        if self.d_feat == 0 {
            return fail("model.d_feat must be positive".to_string());
        }
        if !(self.tau > 0.0) {
            return fail(format!("loss.tau {} must be > 0", self.tau));
        }
        if !(self.eta_init > 0.0) {
            return fail(format!("loss.eta_init {} must be > 0", self.eta_init));
        }
        if !(self.kl_weight >= 0.0) {
            return fail(format!("loss.kl_weight {} must be >= 0", self.kl_weight));
        }
        if !(self.epsilon > 0.0) || !(self.alpha > 0.0) {
            return fail("attack.epsilon and attack.alpha must be > 0".to_string());
        }
        if self.steps == 0 {
            return fail("attack.steps must be at least 1".to_string());
        }
        if self.epochs == 0 || self.batch == 0 {
            return fail("train.epochs and train.batch must be positive".to_string());
        }
        if !(self.lr > 0.0) {
            return fail(format!("train.lr {} must be > 0", self.lr));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return fail(format!(
                "train.milestones {:?} must be strictly increasing",
                self.milestones
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("train.momentum {} must be in [0,1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("train.weight_decay {} must be >= 0", self.weight_decay));
        }
        if self.replay_m == 0 {
            return fail("train.replay_m must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.momentum_enc) {
            return fail(format!(
                "train.momentum_enc {} must be in [0,1]",
                self.momentum_enc
            ));
        }
        if self.bank_capacity < 2 || !self.bank_capacity.is_power_of_two() {
            return fail(format!(
                "train.bank_capacity {} must be a power of two >= 2",
                self.bank_capacity
            ));
        }
        if self.mode.uses_bank() && self.bank_capacity < self.batch {
            return fail(format!(
                "train.bank_capacity {} must be >= train.batch {} so a whole batch fits",
                self.bank_capacity, self.batch
            ));
        }
        if self.clean_epochs == 0 || self.eval_steps == 0 {
            return fail("train.clean_epochs and train.eval_steps must be positive".to_string());
        }
        if self.mode.is_free() && self.norm != NormKind::Linf {
            return fail(format!(
                "free training modes replay a sign-step perturbation and support only attack.norm = linf, got {:?} for mode {}",
                self.norm,
                self.mode.name()
            ));
        }
        if self.knn_k == 0 {
            return fail("eval.k must be at least 1".to_string());
        }
        if self.surface_resolution == 0 {
            return fail("surface.resolution must be at least 1".to_string());
        }
        if self.surface_radius < 0.0 || self.surface_scale < 0.0 {
            return fail("surface.radius and surface.scale must be >= 0".to_string());
        }
        Ok(())
    }

    // ── converters into module configs ──────────────────────────────────────

    /// Attack settings in [0,1] pixel units with `random_start` resolved.
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            epsilon: (self.epsilon / 255.0) as f32,
            alpha: (self.alpha / 255.0) as f32,
            steps: self.steps,
            norm: self.norm,
            mode: self.attack_mode,
            random_start: match self.random_start {
                RandomStart::Auto => self.attack_mode == AttackMode::Untargeted,
                RandomStart::On => true,
                RandomStart::Off => false,
            },
            lo: 0.0,
            hi: 1.0,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau as f32,
            eta_init: self.eta_init as f32,
            kl_weight: self.kl_weight as f32,
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            classes: self.classes,
            dim: self.dim,
            n_per_class: self.n_per_class,
            noise_sigma: self.noise_sigma,
        }
    }

    /// Load (train, test) per `[data]`.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.source {
            DataSource::Synthetic => gen_synthetic(&self.synthetic_config(), self.data_seed),
            DataSource::Idx => {
                let tr = parse_idx(
                    Path::new(&self.train_images),
                    Path::new(&self.train_labels),
                )?;
                let te = parse_idx(Path::new(&self.test_images), Path::new(&self.test_labels))?;
                Ok((tr, te))
            }
        }
    }

    /// Architecture for a concrete dataset; checks that the class counts
    /// agree and that a conv trunk gets 2-d samples.
    pub fn arch_for(&self, data: &Dataset) -> Result<ArchitectureConfig> {
        if data.classes != self.classes {
            return Err(Error::config(format!(
                "dataset has {} classes but config says {}",
                data.classes, self.classes
            )));
        }
        let arch = match self.trunk {
            TrunkChoice::Mlp => ArchitectureConfig {
                input: InputShape::Flat(data.dim()),
                trunk: TrunkSpec::Mlp {
                    widths: self.widths.clone(),
                },
                d_feat: self.d_feat,
                classes: self.classes,
            },
            TrunkChoice::Conv => {
                let [h, w] = data.sample_dims[..] else {
                    return Err(Error::config(format!(
                        "conv trunk needs height x width samples, got dims {:?}",
                        data.sample_dims
                    )));
                };
                ArchitectureConfig {
                    input: InputShape::Image {
                        channels: 1,
                        height: h,
                        width: w,
                    },
                    trunk: TrunkSpec::Conv {
                        channels1: self.conv_channels1,
                        channels2: self.conv_channels2,
                        dense: self.conv_dense,
                    },
                    d_feat: self.d_feat,
                    classes: self.classes,
                }
            }
        };
        arch.validate()?;
        Ok(arch)
    }
}

// ── tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips_exactly() {
        let mut cfg = RunConfig::default();
        cfg.lr = 1.6;
        cfg.weight_decay = 1e-4;
        cfg.eta_init = 1.0 / 30.0;
        cfg.noise_sigma = 0.123456789123456789;
        cfg.milestones = vec![35, 60, 90];
        cfg.mode = TrainMode::FreeThat;
        cfg.train_images = "data/train-images.idx".to_string();
        let again = RunConfig::from_text(&cfg.dump()).unwrap();
        assert_eq!(cfg, again);
        // The dump of the re-parse is byte-identical too.
        assert_eq!(cfg.dump(), again.dump());
    }

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_text(&cfg.dump()).unwrap(), cfg);
    }

    #[test]
    fn file_text_parses_with_comments_and_sections() {
        let text = "\
# desk run
[train]
mode = standard_at
epochs = 3

[attack]
epsilon = 4
steps = 7
";
        let cfg = RunConfig::from_text(text).unwrap();
        assert_eq!(cfg.mode, TrainMode::StandardAt);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.epsilon, 4.0);
        assert_eq!(cfg.steps, 7);
        // untouched keys keep defaults
        assert_eq!(cfg.batch, 32);
    }

    #[test]
    fn unknown_keys_and_malformed_lines_are_errors() {
        assert!(RunConfig::from_text("[train]\nmod = that\n").is_err());
        assert!(RunConfig::from_text("[nope]\nx = 1\n").is_err());
        assert!(RunConfig::from_text("mode = that\n").is_err()); // before any section
        assert!(RunConfig::from_text("[train]\nmode that\n").is_err()); // no '='
        assert!(RunConfig::from_text("[train]\nepochs = ten\n").is_err());
    }

    #[test]
    fn env_and_set_overrides_apply() {
        let mut cfg = RunConfig::default();
        cfg.apply_env_pairs([
            ("TWOHEAD_TRAIN_WEIGHT_DECAY", "0.5"),
            ("TWOHEAD_ATTACK_EPSILON", "16"),
            ("UNRELATED_VAR", "ignored"),
        ])
        .unwrap();
        assert_eq!(cfg.weight_decay, 0.5);
        assert_eq!(cfg.epsilon, 16.0);

        cfg.apply_set("train.lr=0.02").unwrap();
        assert_eq!(cfg.lr, 0.02);
        assert!(cfg.apply_set("train.lr").is_err());
        assert!(cfg.apply_set("lr=0.02").is_err());
        assert!(cfg.apply_env_pairs([("TWOHEAD_TRAIN_NOPE", "1")]).is_err());
    }

    #[test]
    fn validation_rejects_bad_combinations() {
        let mut cfg = RunConfig::default();
        cfg.milestones = vec![10, 10];
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.mode = TrainMode::FreeAt;
        cfg.norm = NormKind::L2;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.bank_capacity = 100; // not a power of two
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.bank_capacity = 64; // smaller than one batch
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.replay_m = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.source = DataSource::Idx;
        assert!(cfg.validate().is_err()); // missing paths
    }

    #[test]
    fn attack_config_resolves_units_and_random_start() {
        let mut cfg = RunConfig::default();
        let atk = cfg.attack_config();
        assert_eq!(atk.epsilon, 8.0 / 255.0);
        assert_eq!(atk.alpha, 2.0 / 255.0);
        assert!(atk.random_start); // auto + untargeted

        cfg.attack_mode = AttackMode::Targeted;
        assert!(!cfg.attack_config().random_start); // auto + targeted

        cfg.random_start = RandomStart::On;
        assert!(cfg.attack_config().random_start);
    }

    #[test]
    fn arch_for_synthetic_dataset() {
        let cfg = RunConfig::default();
        let (train, _) = cfg.load_datasets().unwrap();
        let arch = cfg.arch_for(&train).unwrap();
        assert_eq!(arch.input.dim(), 64);
        assert_eq!(arch.classes, 10);
        // conv on flat samples is rejected
        let mut bad = cfg.clone();
        bad.trunk = TrunkChoice::Conv;
        assert!(bad.arch_for(&train).is_err());
    }
}

//! Run configuration: TOML file plus `UGC_<SECTION>_<KEY>` environment overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ugc_core::{EvoParams, SearchSpaceSpec};

use crate::error::{Result, UgcError};
use crate::losses::{GanMode, LossWeights};
use crate::nn::FeatureExtractor;
use crate::params::AdamConfig;

/// Dataset location and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding `source/`, `target/` and `splits/`.
    pub root: PathBuf,
    /// Labeled fraction of the training ids.
    pub fraction: f64,
    /// Seed of the labeled/unlabeled shuffle.
    pub partition_seed: u64,
    /// Number of highest-numbered ids held out for evaluation.
    pub eval_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: PathBuf::from("data/toy"), fraction: 0.25, partition_seed: 0, eval_count: 100 }
    }
}

/// Discriminator shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Base filter count.
    pub ndf: usize,
    /// Number of stride-2 layers.
    pub n_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { ndf: 64, n_layers: 3 }
    }
}

/// Fixed feature networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Stage widths of the perceptual network.
    pub channels: Vec<usize>,
    /// Seed of the perceptual network.
    pub seed: u64,
    /// Seed of the network used for the FID proxy.
    pub fid_seed: u64,
    /// Factor applied to perceptual feature maps before the feature and style terms.
    pub feature_scale: f64,
}

impl ExtractorConfig {
    /// The perceptual network for images with `in_channels` channels.
    pub fn perceptual(&self, in_channels: usize) -> FeatureExtractor<f32> {
        FeatureExtractor::new(in_channels, &self.channels, self.seed).with_scale(self.feature_scale)
    }

    /// The FID-proxy network for images with `in_channels` channels.
    pub fn fid(&self, in_channels: usize) -> FeatureExtractor<f32> {
        FeatureExtractor::new(in_channels, &self.channels, self.fid_seed)
    }
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { channels: vec![16, 32, 32], seed: 1, fid_seed: 2, feature_scale: 1e-3 }
    }
}

/// First-stage supernet training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    /// Number of optimizer steps.
    pub total_steps: u64,
    /// Labeled samples per step.
    pub batch_labeled: usize,
    /// Unlabeled samples per step.
    pub batch_unlabeled: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// Fraction of steps at the initial rate before linear decay.
    pub lr_constant_fraction: f64,
    /// Optimizer moments.
    pub adam: AdamConfig,
    /// Steps between checkpoints (0 keeps only the final one).
    pub checkpoint_every: u64,
    /// Update after each of the three losses instead of once per step.
    pub alternating: bool,
    /// Generator adversarial form.
    pub gan_mode: GanMode,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_labeled: 4,
            batch_unlabeled: 4,
            lr0: 2e-4,
            lr_constant_fraction: 0.5,
            adam: AdamConfig::default(),
            checkpoint_every: 500,
            alternating: false,
            gan_mode: GanMode::NonSaturating,
        }
    }
}

/// Fitness used by the architecture search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitnessKind {
    /// Negative distillation loss against the largest network on unlabeled sources.
    #[default]
    Od,
    /// Negative L1 against labeled targets.
    L1,
    /// Negative proxy FID against labeled targets.
    Fid,
}

/// Evolutionary search of the student and teachers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Evolution hyper-parameters.
    pub evo: EvoParams,
    /// Student budget as a MACs compression ratio against the largest network.
    pub student_compression: f64,
    /// Explicit student MACs budget; overrides `student_compression` when nonzero.
    pub student_max_macs: u64,
    /// Teacher MACs as a multiple of the student's.
    pub teacher_ratio: f64,
    /// Relative tolerance around `teacher_ratio`.
    pub teacher_tolerance: f64,
    /// Fitness function.
    pub fitness: FitnessKind,
    /// Number of validation images used by the fitness.
    pub val_count: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            evo: EvoParams::default(),
            student_compression: 20.0,
            student_max_macs: 0,
            teacher_ratio: 20.0,
            teacher_tolerance: 0.25,
            fitness: FitnessKind::Od,
            val_count: 16,
        }
    }
}

/// Second-stage online distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    /// Number of student steps.
    pub total_steps: u64,
    /// Teachers update when `step % teacher_update_interval == 0`.
    pub teacher_update_interval: u64,
    /// Labeled samples per step.
    pub batch_labeled: usize,
    /// Unlabeled samples per step.
    pub batch_unlabeled: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// Fraction of steps at the initial rate before linear decay.
    pub lr_constant_fraction: f64,
    /// Optimizer moments.
    pub adam: AdamConfig,
    /// Decay of the discriminator-score EMA.
    pub ema_decay: f64,
    /// Probability of keeping an above-average teacher output.
    pub gate_probability: f64,
    /// Gate every unlabeled sample separately instead of once per batch.
    pub per_sample_gate: bool,
    /// Steps between checkpoints (0 keeps only the final one).
    pub checkpoint_every: u64,
    /// Generator adversarial form for teacher updates.
    pub gan_mode: GanMode,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            teacher_update_interval: 5,
            batch_labeled: 4,
            batch_unlabeled: 4,
            lr0: 2e-4,
            lr_constant_fraction: 0.5,
            adam: AdamConfig::default(),
            ema_decay: 0.99,
            gate_probability: 0.5,
            per_sample_gate: false,
            checkpoint_every: 500,
            gan_mode: GanMode::NonSaturating,
        }
    }
}

/// Supervised-only baseline of the student architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Number of optimizer steps.
    pub total_steps: u64,
    /// Labeled samples per step.
    pub batch_labeled: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// Fraction of steps at the initial rate before linear decay.
    pub lr_constant_fraction: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { total_steps: 4000, batch_labeled: 4, lr0: 2e-4, lr_constant_fraction: 0.5 }
    }
}

/// Everything a pipeline run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every random stream is derived from it.
    pub seed: u64,
    /// Output directory for artifacts.
    pub out_dir: PathBuf,
    /// Dataset.
    pub data: DataConfig,
    /// Search space.
    pub space: SearchSpaceSpec,
    /// Loss coefficients.
    pub losses: LossWeights,
    /// Discriminator.
    pub discriminator: DiscriminatorConfig,
    /// Feature networks.
    pub extractor: ExtractorConfig,
    /// First stage.
    pub stage1: Stage1Config,
    /// Architecture search.
    pub search: SearchConfig,
    /// Second stage.
    pub stage2: Stage2Config,
    /// Supervised baseline.
    pub baseline: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            space: SearchSpaceSpec::default(),
            losses: LossWeights::default(),
            discriminator: DiscriminatorConfig::default(),
            extractor: ExtractorConfig::default(),
            stage1: Stage1Config::default(),
            search: SearchConfig::default(),
            stage2: Stage2Config::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| UgcError::Config(e.to_string()))?;
        Self::from_table(value)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| UgcError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies overrides from `vars` (normally `std::env::vars()`).
    pub fn load(path: &Path, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| UgcError::io(path, e))?;
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| UgcError::Config(format!("{}: {e}", path.display())))?;
        apply_overrides(&mut table, vars)?;
        Self::from_table(table)
    }

    /// Like [`RunConfig::load`], starting from the defaults when `path` is `None`.
    pub fn resolve(path: Option<&Path>, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p, vars),
            None => {
                let mut table = toml::Table::new();
                apply_overrides(&mut table, vars)?;
                Self::from_table(table)
            }
        }
    }

    /// Serializes to TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved configuration to `dir/config.toml`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| UgcError::io(dir, e))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| UgcError::io(&path, e))?;
        Ok(path)
    }

    /// Checks cross-field invariants.
    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        self.losses.validate()?;
        let err = |m: String| Err(UgcError::Config(m));
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            return err(format!("data.fraction {} outside (0, 1]", self.data.fraction));
        }
        for (name, frac, lr) in [
            ("stage1", self.stage1.lr_constant_fraction, self.stage1.lr0),
            ("stage2", self.stage2.lr_constant_fraction, self.stage2.lr0),
            ("baseline", self.baseline.lr_constant_fraction, self.baseline.lr0),
        ] {
            if !(0.0..=1.0).contains(&frac) {
                return err(format!("{name}.lr_constant_fraction {frac} outside [0, 1]"));
            }
            if lr <= 0.0 {
                return err(format!("{name}.lr0 must be positive"));
            }
        }
        if self.stage1.total_steps == 0 || self.stage2.total_steps == 0 {
            return err("total_steps must be positive".into());
        }
        if self.stage2.teacher_update_interval == 0 {
            return err("stage2.teacher_update_interval must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.stage2.gate_probability) {
            return err(format!("stage2.gate_probability {} outside [0, 1]", self.stage2.gate_probability));
        }
        if !(0.0..1.0).contains(&self.stage2.ema_decay) {
            return err(format!("stage2.ema_decay {} outside [0, 1)", self.stage2.ema_decay));
        }
        if !(self.extractor.feature_scale > 0.0) || self.extractor.channels.is_empty() {
            return err("extractor needs at least one stage and a positive feature_scale".into());
        }
        if self.search.evo.population_size < 2 {
            return err("search.evo.population_size must be at least 2".into());
        }
        if self.stage1.batch_labeled == 0 || self.stage2.batch_labeled == 0 || self.baseline.batch_labeled == 0 {
            return err("labeled batch sizes must be positive".into());
        }
        Ok(())
    }
}

/// Applies `UGC_<SECTION>_<KEY>=value` overrides to a TOML table.
///
/// Sections and keys are matched case-insensitively against the existing
/// table layout; `UGC_SEED` and `UGC_OUT_DIR` address top-level keys. Values
/// are parsed as TOML literals, falling back to plain strings.
pub fn apply_overrides(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    const SECTIONS: [&str; 9] =
        ["data", "space", "losses", "discriminator", "extractor", "stage1", "search", "stage2", "baseline"];
    for (k, v) in vars {
        let Some(rest) = k.strip_prefix("UGC_") else { continue };
        if rest == "CONFIG" || rest.starts_with("LOG") {
            continue;
        }
        let lower = rest.to_ascii_lowercase();
        let value = parse_literal(&v);
        if let Some((section, key)) = lower.split_once('_').filter(|(s, _)| SECTIONS.contains(s)) {
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let sub = entry.as_table_mut().ok_or_else(|| UgcError::Config(format!("{section} is not a table")))?;
            // Nested tables such as `search.evo` are addressed as `UGC_SEARCH_EVO_<KEY>`.
            if let Some((inner, key2)) = key.split_once('_').filter(|(i, _)| ["evo", "adam"].contains(i)) {
                let t = sub.entry(inner.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                t.as_table_mut()
                    .ok_or_else(|| UgcError::Config(format!("{section}.{inner} is not a table")))?
                    .insert(key2.to_string(), value);
            } else {
                sub.insert(key.to_string(), value);
            }
        } else {
            table.insert(lower, value);
        }
    }
    Ok(())
}

fn parse_literal(s: &str) -> toml::Value {
    let wrapped = format!("v = {s}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(s.to_string())),
        Err(_) => toml::Value::String(s.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn env_overrides_apply() {
        let mut t: toml::Table = toml::from_str("[stage1]\ntotal_steps = 10\n").unwrap();
        let vars = [
            ("UGC_STAGE1_TOTAL_STEPS".to_string(), "42".to_string()),
            ("UGC_SPACE_WIDTH_CHOICES".to_string(), "[4, 8]".to_string()),
            ("UGC_DATA_ROOT".to_string(), "/tmp/x".to_string()),
            ("UGC_SEARCH_EVO_GENERATIONS".to_string(), "3".to_string()),
            ("UGC_SEED".to_string(), "9".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        apply_overrides(&mut t, vars).unwrap();
        let cfg = RunConfig::from_table(t).unwrap();
        assert_eq!(cfg.stage1.total_steps, 42);
        assert_eq!(cfg.space.width_choices, vec![4, 8]);
        assert_eq!(cfg.data.root, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.search.evo.generations, 3);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("[stage1]\ntotal_stepz = 1\n").is_err());
        assert!(RunConfig::from_toml("[stage2]\ngate_probability = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[space]\nwidth_choices = [8, 4]\n").is_err());
    }
}

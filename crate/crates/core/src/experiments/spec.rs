use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::OptimConfig;
use crate::rollout::{RolloutConfig, Variant};
use crate::savi::EncoderConfig;
use crate::scene::GeneratorParams;
use crate::training::TrainConfig;

/// Bumped whenever a change alters what a cached stage would produce.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+cache1");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    #[default]
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::param("preset", format!("`{s}` is not one of paper, desk"))),
        }
    }
}

/// One table row: a variant trained on all or part of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowSpec {
    pub variant: String,
    #[serde(default)]
    pub label: Option<String>,
    /// Use only the first `train_size` videos of the training split.
    #[serde(default)]
    pub train_size: Option<usize>,
    /// Engine time-step multiplier; only meaningful for `ours_inaccurate`.
    #[serde(default)]
    pub dt_factor: Option<f64>,
}

impl RowSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant: variant.as_str().into(),
            label: None,
            train_size: None,
            dt_factor: None,
        }
    }

    pub fn with_train_size(mut self, n: usize) -> Self {
        self.train_size = Some(n);
        self
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_true() -> bool {
    true
}

fn default_gate() -> f64 {
    0.5
}

fn default_eval_batch() -> usize {
    8
}

fn default_example_steps() -> Vec<usize> {
    vec![1, 6, 12, 18, 24]
}

/// Experiment description as read from TOML. The `data`, `savi`,
/// `savi_optim`, `train` and `rollout` tables override the preset's values
/// key by key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub rows: Vec<RowSpec>,
    /// Add the frozen encoder's own scores as a reference row.
    #[serde(default = "default_true")]
    pub upper_bound: bool,
    /// Minimum held-out ARI-FG (fraction) the backbone must reach before
    /// any predictor is trained.
    #[serde(default = "default_gate")]
    pub backbone_gate: f64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// Unroll steps shown in the qualitative grid.
    #[serde(default = "default_example_steps")]
    pub example_steps: Vec<usize>,
    #[serde(default)]
    pub data: toml::Table,
    #[serde(default)]
    pub savi: toml::Table,
    #[serde(default)]
    pub savi_optim: toml::Table,
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub rollout: toml::Table,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: String::new(),
            preset: Preset::Desk,
            seeds: default_seeds(),
            rows: Vec::new(),
            upper_bound: true,
            backbone_gate: default_gate(),
            eval_batch_size: default_eval_batch(),
            example_steps: default_example_steps(),
            data: toml::Table::new(),
            savi: toml::Table::new(),
            savi_optim: toml::Table::new(),
            train: toml::Table::new(),
            rollout: toml::Table::new(),
        }
    }
}

fn rows(variants: &[Variant]) -> Vec<RowSpec> {
    variants.iter().map(|&v| RowSpec::new(v)).collect()
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        Ok(spec)
    }

    pub fn named(name: &str, preset: Preset, rows: Vec<RowSpec>, upper_bound: bool) -> Self {
        Self {
            name: name.into(),
            preset,
            rows,
            upper_bound,
            ..Self::default()
        }
    }

    /// Full engine knowledge against the data-driven baseline.
    pub fn baseline(preset: Preset) -> Self {
        let r = rows(&[Variant::Ours, Variant::OursPure, Variant::Slotformer]);
        Self::named("baseline", preset, r, true)
    }

    /// Engine run with a wrong time step.
    pub fn inaccurate(preset: Preset) -> Self {
        let r = rows(&[Variant::OursInaccurate, Variant::Ours, Variant::Slotformer]);
        Self::named("inaccurate", preset, r, false)
    }

    /// Training on 300 videos only, with the full-data models for reference.
    pub fn data_efficiency(preset: Preset) -> Self {
        let r = vec![
            RowSpec::new(Variant::Ours).with_train_size(300),
            RowSpec::new(Variant::Slotformer).with_train_size(300),
            RowSpec::new(Variant::Ours),
            RowSpec::new(Variant::Slotformer),
        ];
        Self::named("data_efficiency", preset, r, false)
    }

    /// No split of the latent into dynamics and appearance parts.
    pub fn joint_latent(preset: Preset) -> Self {
        let r = rows(&[Variant::OursSingle, Variant::Ours, Variant::Slotformer]);
        Self::named("joint_latent", preset, r, false)
    }

    pub fn builtin(name: &str, preset: Preset) -> Result<Self> {
        match name {
            "baseline" => Ok(Self::baseline(preset)),
            "inaccurate" => Ok(Self::inaccurate(preset)),
            "data_efficiency" => Ok(Self::data_efficiency(preset)),
            "joint_latent" => Ok(Self::joint_latent(preset)),
            _ => Err(Error::param(
                "name",
                format!("`{name}` is not one of baseline, inaccurate, data_efficiency, joint_latent"),
            )),
        }
    }

    /// Applies the preset and every override, validating the result.
    pub fn resolve(&self) -> Result<ResolvedExperiment> {
        if self.seeds.is_empty() {
            return Err(Error::param("seeds", "must list at least one seed"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::param("eval_batch_size", "must be >= 1"));
        }
        let (generator, encoder, savi_optim, train) = match self.preset {
            Preset::Paper => (
                GeneratorParams::paper(),
                EncoderConfig::paper(),
                OptimConfig::paper(),
                TrainConfig::paper(),
            ),
            Preset::Desk => (
                GeneratorParams::desk(),
                EncoderConfig::desk(),
                OptimConfig::desk(),
                TrainConfig::desk(),
            ),
        };
        let generator: GeneratorParams = overlay("data", &generator, &self.data)?;
        generator.validate()?;
        let encoder: EncoderConfig = overlay("savi", &encoder, &self.savi)?;
        encoder.validate()?;
        let savi_optim: OptimConfig = overlay("savi_optim", &savi_optim, &self.savi_optim)?;
        savi_optim.validate("savi_optim")?;
        let train: TrainConfig = overlay("train", &train, &self.train)?;
        train.validate()?;
        if self.rollout.contains_key("variant") {
            return Err(Error::param("rollout.variant", "set the variant per row in experiments"));
        }
        let mut resolved_rows = Vec::with_capacity(self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            let variant: Variant = row.variant.parse()?;
            let mut cfg = rollout_for(variant, &encoder, &self.rollout)?;
            if let Some(f) = row.dt_factor {
                cfg.engine.dt_factor = f;
            }
            cfg.validate()?;
            if row.train_size == Some(0) {
                return Err(Error::param(format!("rows[{i}].train_size"), "must be >= 1"));
            }
            let label = row.label.clone().unwrap_or_else(|| match row.train_size {
                Some(n) => format!("{}-{n}", variant.label()),
                None => variant.label().to_string(),
            });
            resolved_rows.push(ResolvedRow {
                label,
                variant,
                train_size: row.train_size,
                rollout: cfg,
            });
        }
        let mut labels: Vec<&str> = resolved_rows.iter().map(|r| r.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::param("rows", "row labels must be unique"));
        }
        if let Some(&s) = self.example_steps.iter().find(|&&s| s == 0) {
            return Err(Error::param("example_steps", format!("step {s} is not a 1-based unroll step")));
        }
        Ok(ResolvedExperiment {
            name: self.name.clone(),
            preset: self.preset,
            seeds: self.seeds.clone(),
            upper_bound: self.upper_bound,
            backbone_gate: self.backbone_gate,
            eval_batch_size: self.eval_batch_size,
            example_steps: self.example_steps.clone(),
            generator,
            encoder,
            savi_optim,
            train,
            rows: resolved_rows,
        })
    }
}

/// Rollout settings for `variant` on top of `encoder`, with overrides.
pub fn rollout_for(variant: Variant, encoder: &EncoderConfig, overrides: &toml::Table) -> Result<RolloutConfig> {
    let base = RolloutConfig {
        num_slots: encoder.num_slots,
        ..RolloutConfig::for_variant(variant, encoder.slot_dim)
    };
    let mut overrides = overrides.clone();
    overrides.remove("variant");
    let cfg: RolloutConfig = overlay("rollout", &base, &overrides)?;
    if cfg.num_slots != encoder.num_slots || cfg.slot_dim != encoder.slot_dim {
        return Err(Error::param(
            "rollout.num_slots",
            "slot count and width must match the encoder",
        ));
    }
    Ok(cfg)
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Deserializes `base` with the keys of `over` replacing its own.
pub fn overlay<T: Serialize + DeserializeOwned>(section: &str, base: &T, over: &toml::Table) -> Result<T> {
    let mut table = match toml::Value::try_from(base) {
        Ok(toml::Value::Table(t)) => t,
        Ok(_) => return Err(Error::Config(format!("`{section}` defaults are not a table"))),
        Err(e) => return Err(Error::Config(format!("cannot serialize `{section}` defaults: {e}"))),
    };
    merge(&mut table, over);
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::param(section, e.message().trim().to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRow {
    pub label: String,
    pub variant: Variant,
    pub train_size: Option<usize>,
    pub rollout: RolloutConfig,
}

/// Fully expanded experiment; what the cache keys are computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedExperiment {
    pub name: String,
    pub preset: Preset,
    pub seeds: Vec<u64>,
    pub upper_bound: bool,
    pub backbone_gate: f64,
    pub eval_batch_size: usize,
    pub example_steps: Vec<usize>,
    pub generator: GeneratorParams,
    pub encoder: EncoderConfig,
    pub savi_optim: OptimConfig,
    pub train: TrainConfig,
    pub rows: Vec<ResolvedRow>,
}

impl ResolvedExperiment {
    pub fn config_hash(&self) -> Result<String> {
        content_hash(self)
    }
}

/// SHA-256 over the JSON encoding of `value` and the code version.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    let mut h = Sha256::new();
    h.update(CODE_VERSION.as_bytes());
    h.update(serde_json::to_vec(value)?);
    Ok(hex::encode(h.finalize()))
}

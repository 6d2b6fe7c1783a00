//! Run configuration: flat `section.key = value` lines (TOML dotted keys).
//! Every field has a default, so an empty file is a valid desk config.

use anyhow::{bail, Context, Result};
use fpm_core::network::Architecture;
use fpm_core::objective::LossWeights;
use fpm_core::optics::{LedGrid, NoiseConfig, PatternDescriptor, Preset};
use fpm_core::oracle::OracleConfig;
use fpm_core::pipeline::TileGeometry;
use fpm_core::synth::Ensemble;
use fpm_core::trainer::{Phase, TrainSchedule};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub optics: OpticsCfg,
    pub sim: SimCfg,
    pub oracle: OracleCfg,
    pub geometry: GeometryCfg,
    pub model: ModelCfg,
    pub train: TrainCfg,
    pub transfer: TransferCfg,
    pub eval: EvalCfg,
    pub bench: BenchCfg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticsCfg {
    pub pattern: String,
    pub na_objective: f64,
    pub wavelength_um: f64,
    pub led_pitch_mm: f64,
    pub led_height_mm: f64,
    pub grid: usize,
    pub noise: NoiseCfg,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseCfg {
    pub dark: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimCfg {
    /// `cells`, `granular` or `fibres`.
    pub ensemble: String,
    /// High-res object size.
    pub width: usize,
    pub height: usize,
    pub pixel_um: f64,
    pub r: usize,
    /// Number of stacks written; frame 0 is always emitted.
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleCfg {
    pub iterations: usize,
    pub step_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryCfg {
    pub preset: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCfg {
    /// `desk` or `full`.
    pub preset: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsCfg {
    pub lambda1: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl From<LossWeights> for WeightsCfg {
    fn from(w: LossWeights) -> Self {
        Self {
            lambda1: w.lambda1,
            beta1: w.beta1,
            beta2: w.beta2,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
        }
    }
}

impl From<&WeightsCfg> for LossWeights {
    fn from(w: &WeightsCfg) -> Self {
        Self {
            lambda1: w.lambda1,
            beta1: w.beta1,
            beta2: w.beta2,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
        }
    }
}

impl Default for WeightsCfg {
    fn default() -> Self {
        LossWeights::phase1().into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCfg {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub signed_mae: bool,
    pub label_noise: f64,
    pub phase1: WeightsCfg,
    pub phase2: WeightsCfg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferCfg {
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCfg {
    pub minutes_per_frame: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchCfg {
    pub repetitions: usize,
    /// Generator patches per repetition.
    pub patches: usize,
    /// Oracle sweeps per repetition.
    pub oracle_iterations: usize,
}

impl Default for OpticsCfg {
    fn default() -> Self {
        let g = LedGrid::default();
        Self {
            pattern: "P4".into(),
            na_objective: g.na_objective,
            wavelength_um: g.wavelength,
            led_pitch_mm: g.pitch_mm,
            led_height_mm: g.height_mm,
            grid: g.count,
            noise: NoiseCfg::default(),
        }
    }
}

impl Default for SimCfg {
    fn default() -> Self {
        Self {
            ensemble: "cells".into(),
            width: 256,
            height: 256,
            pixel_um: 0.3,
            r: 4,
            frames: 6,
        }
    }
}

impl Default for OracleCfg {
    fn default() -> Self {
        let d = OracleConfig::default();
        Self {
            iterations: d.iterations,
            step_size: d.step_size,
        }
    }
}

impl Default for GeometryCfg {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
        }
    }
}

impl Default for ModelCfg {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            seed: 0,
        }
    }
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self::from_schedule(&TrainSchedule::desk())
    }
}

impl Default for TransferCfg {
    fn default() -> Self {
        Self { iterations: 300 }
    }
}

impl Default for EvalCfg {
    fn default() -> Self {
        Self {
            minutes_per_frame: 2.0,
        }
    }
}

impl Default for BenchCfg {
    fn default() -> Self {
        Self {
            repetitions: 5,
            patches: 32,
            oracle_iterations: 5,
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 7,
            optics: OpticsCfg::default(),
            sim: SimCfg::default(),
            oracle: OracleCfg::default(),
            geometry: GeometryCfg::default(),
            model: ModelCfg::default(),
            train: TrainCfg::default(),
            transfer: TransferCfg::default(),
            eval: EvalCfg::default(),
            bench: BenchCfg::default(),
        }
    }
}

impl TrainCfg {
    fn from_schedule(s: &TrainSchedule) -> Self {
        Self {
            phase1_epochs: s.phase1.epochs,
            phase2_epochs: s.phase2.epochs,
            iterations_per_epoch: s.iterations_per_epoch,
            batch_size: s.batch_size,
            lr: s.lr,
            lr_decay_factor: s.lr_decay_factor,
            lr_decay_every: s.lr_decay_every,
            signed_mae: s.signed_mae,
            label_noise: s.label_noise,
            phase1: s.phase1.weights.into(),
            phase2: s.phase2.weights.into(),
        }
    }
}

/// Marks a configuration problem (exit code 1).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    /// One `key = value` line per field, sorted by key.
    pub fn dump(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        lines.join("\n") + "\n"
    }

    fn check(&self) -> Result<()> {
        self.pattern()?;
        self.ensemble()?;
        self.geometry()?;
        self.architecture_name()?;
        let s = &self.sim;
        if s.r == 0
            || s.width == 0
            || s.height == 0
            || !s.width.is_multiple_of(s.r)
            || !s.height.is_multiple_of(s.r)
        {
            return Err(invalid(format!(
                "sim.width/sim.height ({}x{}) must be positive multiples of sim.r ({})",
                s.width, s.height, s.r
            )));
        }
        if !(s.pixel_um > 0.0) {
            return Err(invalid("sim.pixel_um must be positive"));
        }
        if self.optics.noise.dark < 0.0 || self.optics.noise.sigma < 0.0 {
            return Err(invalid(
                "optics.noise.dark and optics.noise.sigma must be non-negative",
            ));
        }
        if !(self.oracle.step_size > 0.0) {
            return Err(invalid("oracle.step_size must be positive"));
        }
        if self.bench.repetitions == 0 {
            return Err(invalid("bench.repetitions must be at least 1"));
        }
        self.schedule()
            .validate()
            .map_err(|e| invalid(format!("train: {e}")))?;
        Ok(())
    }

    pub fn grid(&self) -> LedGrid {
        let o = &self.optics;
        LedGrid {
            pitch_mm: o.led_pitch_mm,
            count: o.grid,
            height_mm: o.led_height_mm,
            wavelength: o.wavelength_um,
            na_objective: o.na_objective,
        }
    }

    pub fn pattern(&self) -> Result<PatternDescriptor> {
        let grid = self.grid();
        let name = self.optics.pattern.trim();
        if let Some(preset) = Preset::parse(name) {
            return Ok(PatternDescriptor::Preset { preset, grid });
        }
        if name.eq_ignore_ascii_case("grid") {
            return Ok(PatternDescriptor::Grid(grid));
        }
        if let Some(na) = name.strip_prefix("full:") {
            let max_na = na
                .parse::<f64>()
                .map_err(|_| invalid(format!("optics.pattern: bad NA in {name:?}")))?;
            return Ok(PatternDescriptor::Full { max_na, grid });
        }
        bail!(invalid(format!(
            "optics.pattern must be P1..P4, grid or full:<na>, got {name:?}"
        )))
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            dark: self.optics.noise.dark,
            sigma: self.optics.noise.sigma,
            seed: self.seed,
        }
    }

    pub fn ensemble(&self) -> Result<Ensemble> {
        match self.sim.ensemble.as_str() {
            "cells" => Ok(Ensemble::cells()),
            "fibres" => Ok(Ensemble::fibres()),
            "granular" => Ok(Ensemble::granular()),
            other => Err(invalid(format!(
                "sim.ensemble must be cells, granular or fibres, got {other:?}"
            ))),
        }
    }

    pub fn geometry(&self) -> Result<TileGeometry> {
        let g = match self.geometry.preset.as_str() {
            "desk" => TileGeometry::desk(),
            "full" => TileGeometry::full(),
            other => {
                return Err(invalid(format!(
                    "geometry.preset must be desk or full, got {other:?}"
                )))
            }
        };
        Ok(g)
    }

    fn architecture_name(&self) -> Result<&str> {
        match self.model.preset.as_str() {
            p @ ("desk" | "full") => Ok(p),
            other => Err(invalid(format!(
                "model.preset must be desk or full, got {other:?}"
            ))),
        }
    }

    pub fn architecture(&self, alpha: usize) -> Result<Architecture> {
        Ok(match self.architecture_name()? {
            "full" => Architecture::full(alpha),
            _ => Architecture::desk(alpha),
        })
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            iterations: self.oracle.iterations,
            step_size: self.oracle.step_size,
            r: self.sim.r,
            ..OracleConfig::default()
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        let t = &self.train;
        TrainSchedule {
            phase1: Phase {
                epochs: t.phase1_epochs,
                weights: (&t.phase1).into(),
            },
            phase2: Phase {
                epochs: t.phase2_epochs,
                weights: (&t.phase2).into(),
            },
            iterations_per_epoch: t.iterations_per_epoch,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_every: t.lr_decay_every,
            seed: self.seed,
            signed_mae: t.signed_mae,
            label_noise: t.label_noise,
        }
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_parses_back_to_the_same_config() {
        let cfg = Config::default();
        assert_eq!(Config::parse(&cfg.dump()).unwrap(), cfg);
    }

    #[test]
    fn dotted_keys_override_defaults() {
        let cfg =
            Config::parse("seed = 3\noptics.pattern = \"P1\"\ntrain.phase2.beta2 = 0.1\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.optics.pattern, "P1");
        assert_eq!(cfg.train.phase2.beta2, 0.1);
        assert_eq!(cfg.sim, SimCfg::default());
    }

    #[test]
    fn errors_name_the_field() {
        let e = Config::parse("optics.patern = \"P1\"").unwrap_err();
        assert!(e.to_string().contains("patern"), "{e}");
        let e = Config::parse("sim.r = 3").unwrap_err();
        assert!(e.to_string().contains("sim.r"), "{e}");
        let e = Config::parse("optics.pattern = \"P9\"").unwrap_err();
        assert!(e.to_string().contains("optics.pattern"), "{e}");
    }
}

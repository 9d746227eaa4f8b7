//! Experiment configuration: a TOML document layered over a named preset.
//!
//! The user document is merged key by key over the preset before it is
//! deserialized, so any field may be omitted. Arrays of tables merge
//! element-wise over the preset's first element, which lets a config list
//! segments or stations by only the fields that differ from the preset.

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::analytic::{CarModel, SegmentBudget, SegmentStats};
use crate::cascade::{CampaignConfig, ControllerConfig, Scenario, Topology};
use crate::coincidence::EngineConfig;
use crate::timetag::{ClockModel, DetectorModel, DEFAULT_DELAY_PS_PER_KM};

pub const SCHEMA_VERSION: u32 = 1;

/// TOML integers are signed 64-bit.
pub const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("config schema: {0}")]
    Schema(String),
    #[error("unknown preset `{0}` (expected paper-2025 or desk-scale)")]
    UnknownPreset(String),
    #[error("unsupported schema_version {0} (this build reads {SCHEMA_VERSION})")]
    Version(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Ten-second intervals over a 35000 s campaign with the reference link
    /// budget: two 100 km segments.
    #[serde(rename = "paper-2025")]
    Paper2025,
    /// The same per-interval statistics compressed into 0.1 s intervals,
    /// 200 of them.
    #[serde(rename = "desk-scale")]
    DeskScale,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper2025 => "paper-2025",
            Preset::DeskScale => "desk-scale",
        }
    }

    pub fn parse(name: &str) -> Result<Self, ConfigError> {
        match name {
            "paper-2025" => Ok(Preset::Paper2025),
            "desk-scale" => Ok(Preset::DeskScale),
            other => Err(ConfigError::UnknownPreset(other.into())),
        }
    }
}

/// Link budget of one segment; timing comes from the campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub pair_rate_per_interval: f64,
    pub idler_loss_db: f64,
    pub signal_fixed_loss_db: f64,
    pub fiber_len_km: f64,
    pub atten_db_per_km: f64,
    pub jitter_sigma_ps: f64,
    pub residual_dispersion_ps_f: f64,
    pub residual_dispersion_ps_b: f64,
    pub accidental_pairs_per_interval: f64,
}

impl SegmentConfig {
    pub fn to_budget(&self, interval_s: f64, skew: f64) -> SegmentBudget {
        SegmentBudget {
            pair_rate_per_interval: self.pair_rate_per_interval,
            idler_loss_db: self.idler_loss_db,
            signal_fixed_loss_db: self.signal_fixed_loss_db,
            fiber_len_km: self.fiber_len_km,
            atten_db_per_km: self.atten_db_per_km,
            jitter_sigma_ps: self.jitter_sigma_ps,
            residual_dispersion_ps_f: self.residual_dispersion_ps_f,
            residual_dispersion_ps_b: self.residual_dispersion_ps_b,
            accidental_pairs_per_interval: self.accidental_pairs_per_interval,
            interval_s,
            skew,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    pub coarse_bin_ps: i64,
    pub fine_bin_ps: i64,
    pub window_ps: i64,
    /// Fixed coarse search half-span; twice the fiber delay when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_span_ps: Option<i64>,
    pub acquire_remote_tags: usize,
    pub max_recenter: usize,
}

impl EngineSection {
    pub fn engine(&self) -> EngineConfig {
        let base = EngineConfig::default();
        EngineConfig {
            coarse_bin_ps: self.coarse_bin_ps,
            fine_bin_ps: self.fine_bin_ps,
            window_ps: self.window_ps,
            search_span_ps: self.search_span_ps.unwrap_or(base.search_span_ps),
            acquire_remote_tags: self.acquire_remote_tags,
            max_recenter: self.max_recenter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagFormat {
    Csv,
    Binary,
}

impl TagFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TagFormat::Csv => "csv",
            TagFormat::Binary => "bin",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Keep every interval's raw time tags under `tags/`.
    pub write_tags: bool,
    pub tag_format: TagFormat,
    /// Remove the campaign mean from `campaign.csv`.
    pub demean: bool,
    /// Emit a gnuplot script next to each prediction CSV.
    pub plot_script: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Distance,
    Skew,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub sweep: SweepKind,
    /// Cascade depths of the distance sweep.
    pub n_list: Vec<usize>,
    /// Total distances of the distance sweep.
    pub km_grid: Vec<f64>,
    pub skew_grid: Vec<f64>,
    /// Interval used to convert skew into walk-off in the skew sweep.
    pub skew_interval_s: f64,
    pub car_model: CarModel,
    /// Zero-skew statistics the skew sweep starts from.
    pub measured: Vec<SegmentStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub defaults: Preset,
    pub seed: u64,
    pub scenario: Scenario,
    pub duration_s: f64,
    pub interval_s: f64,
    /// Relay clock rate error in the independent-clock scenarios.
    pub relay_skew: f64,
    pub delay_ps_per_km: f64,
    pub detector: DetectorModel,
    pub segments: Vec<SegmentConfig>,
    pub stations: Vec<ClockModel>,
    pub controller: ControllerConfig,
    pub engine: EngineSection,
    pub output: OutputConfig,
    pub predict: PredictConfig,
}

fn preset_config(preset: Preset) -> ExperimentConfig {
    let reference = SegmentBudget::reference(100.0);
    let segment = SegmentConfig {
        pair_rate_per_interval: reference.pair_rate_per_interval,
        idler_loss_db: reference.idler_loss_db,
        signal_fixed_loss_db: reference.signal_fixed_loss_db,
        fiber_len_km: reference.fiber_len_km,
        atten_db_per_km: reference.atten_db_per_km,
        jitter_sigma_ps: reference.jitter_sigma_ps,
        residual_dispersion_ps_f: 0.0,
        residual_dispersion_ps_b: 0.0,
        accidental_pairs_per_interval: 0.0,
    };
    let (duration_s, interval_s) = match preset {
        Preset::Paper2025 => (35_000.0, 10.0),
        Preset::DeskScale => (20.0, 0.1),
    };
    let engine = EngineConfig::default();
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        defaults: preset,
        seed: 1,
        scenario: Scenario::Crc,
        duration_s,
        interval_s,
        relay_skew: 35.1e-12,
        delay_ps_per_km: DEFAULT_DELAY_PS_PER_KM,
        detector: DetectorModel::default(),
        segments: vec![segment.clone(), segment],
        stations: vec![ClockModel::ideal(); 3],
        controller: ControllerConfig::default(),
        engine: EngineSection {
            coarse_bin_ps: engine.coarse_bin_ps,
            fine_bin_ps: engine.fine_bin_ps,
            window_ps: engine.window_ps,
            search_span_ps: None,
            acquire_remote_tags: engine.acquire_remote_tags,
            max_recenter: engine.max_recenter,
        },
        output: OutputConfig { write_tags: false, tag_format: TagFormat::Csv, demean: true, plot_script: true },
        predict: PredictConfig {
            sweep: SweepKind::Both,
            n_list: vec![1, 2, 5, 10, 20],
            km_grid: (0..=100).map(|i| i as f64 * 10.0).collect(),
            skew_grid: vec![0.0, 5e-12, 1e-11, 1.5e-11, 1.9e-11, 2.5e-11, 3e-11, 3.26e-11, 35.1e-12, 4e-11, 5e-11],
            skew_interval_s: 10.0,
            car_model: CarModel::Frozen,
            measured: crate::analytic::measured_reference_stats(),
        },
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    Value::try_from(v).expect("config types serialize to TOML")
}

fn merge(base: Value, over: Value) -> Value {
    match (base, over) {
        (Value::Table(mut b), Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(bv) => merge(bv, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Table(b)
        }
        (Value::Array(b), Value::Array(o))
            if !b.is_empty() && b.iter().all(Value::is_table) && o.iter().all(Value::is_table) =>
        {
            Value::Array(o.into_iter().enumerate().map(|(i, v)| merge(b[i.min(b.len() - 1)].clone(), v)).collect())
        }
        (_, o) => o,
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        preset_config(preset)
    }

    /// Parse a TOML document, filling omitted fields from its preset.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let user: Value =
            text.parse::<toml::Table>().map(Value::Table).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let preset = match user.get("defaults") {
            None => Preset::Paper2025,
            Some(Value::String(s)) => Preset::parse(s)?,
            Some(other) => return Err(ConfigError::Schema(format!("`defaults` must be a string, found {other}"))),
        };
        if let Some(v) = user.get("schema_version") {
            match v.as_integer() {
                Some(n) if n == SCHEMA_VERSION as i64 => {}
                Some(n) => return Err(ConfigError::Version(n.clamp(0, u32::MAX as i64) as u32)),
                None => return Err(ConfigError::Schema("`schema_version` must be an integer".into())),
            }
        }
        let merged = merge(to_value(&preset_config(preset)), user);
        let cfg: ExperimentConfig =
            merged.try_into().map_err(|e: toml::de::Error| ConfigError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Version(self.schema_version));
        }
        if self.seed > MAX_SEED {
            return bad(format!("seed must be at most {MAX_SEED}, got {}", self.seed));
        }
        if !(self.interval_s > 0.0) || !self.interval_s.is_finite() {
            return bad(format!("interval_s must be positive, got {}", self.interval_s));
        }
        if !(self.duration_s >= self.interval_s) || !self.duration_s.is_finite() {
            return bad(format!("duration_s must cover at least one interval, got {}", self.duration_s));
        }
        if self.segments.is_empty() {
            return bad("at least one segment is required".into());
        }
        if self.stations.len() != self.segments.len() + 1 {
            return bad(format!(
                "{} segments need {} stations, got {}",
                self.segments.len(),
                self.segments.len() + 1,
                self.stations.len()
            ));
        }
        if !(self.relay_skew.abs() < crate::timetag::MAX_RATE_ERROR) {
            return bad(format!("relay_skew must be below 1e-6 in magnitude, got {}", self.relay_skew));
        }
        if !(self.delay_ps_per_km >= 0.0) {
            return bad("delay_ps_per_km must be >= 0".into());
        }
        for (i, s) in self.segments.iter().enumerate() {
            s.to_budget(self.interval_s, 0.0)
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("segment {i}: {e}")))?;
        }
        for (i, c) in self.stations.iter().enumerate() {
            c.validate().map_err(|e| ConfigError::Invalid(format!("station {i}: {e}")))?;
        }
        self.detector.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.engine.engine().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.predict.skew_interval_s > 0.0) {
            return bad("predict.skew_interval_s must be positive".into());
        }
        Ok(())
    }

    pub fn n_intervals(&self) -> usize {
        // tolerate representation error in duration / interval
        (self.duration_s / self.interval_s + 1e-9).floor() as usize
    }

    pub fn budgets(&self) -> Vec<SegmentBudget> {
        self.segments.iter().map(|s| s.to_budget(self.interval_s, 0.0)).collect()
    }

    pub fn campaign(&self) -> CampaignConfig {
        CampaignConfig {
            scenario: self.scenario,
            topology: Topology {
                segments: self.budgets(),
                stations: self.stations.clone(),
                detector: self.detector.clone(),
                delay_ps_per_km: self.delay_ps_per_km,
            },
            n_intervals: self.n_intervals(),
            interval_s: self.interval_s,
            seed: self.seed,
            relay_skew: self.relay_skew,
            controller: self.controller.clone(),
            engine: self.engine.engine(),
            search_span_ps: self.engine.search_span_ps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default_preset() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::preset(Preset::Paper2025));
        assert_eq!(cfg.n_intervals(), 3500);
    }

    #[test]
    fn desk_preset() {
        let cfg = ExperimentConfig::from_toml_str("defaults = \"desk-scale\"\nseed = 9").unwrap();
        assert_eq!(cfg.interval_s, 0.1);
        assert_eq!(cfg.n_intervals(), 200);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn round_trip_is_idempotent() {
        let text = "defaults = \"desk-scale\"\nscenario = \"irc-fc\"\n[engine]\nsearch_span_ps = 3000000\n";
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        let once = cfg.to_toml_string();
        let again = ExperimentConfig::from_toml_str(&once).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml_string(), once);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml_str("sed = 1"), Err(ConfigError::Schema(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("[detector]\nefficency = 0.5"), Err(ConfigError::Schema(_))));
    }

    #[test]
    fn segments_merge_over_preset_element() {
        let text = "[[segments]]\nfiber_len_km = 50.0\n[[stations]]\n[[stations]]\noffset_ps = 250.0\n";
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.segments.len(), 1);
        assert_eq!(cfg.segments[0].fiber_len_km, 50.0);
        assert_eq!(cfg.segments[0].idler_loss_db, 11.0);
        assert_eq!(cfg.stations[1].offset_ps, 250.0);
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(ExperimentConfig::from_toml_str("defaults = \"x\""), Err(ConfigError::UnknownPreset(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("schema_version = 7"), Err(ConfigError::Version(7))));
        assert!(matches!(ExperimentConfig::from_toml_str("seed = ["), Err(ConfigError::Syntax(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("interval_s = 0.0"), Err(ConfigError::Invalid(_))));
        assert!(ExperimentConfig::from_toml_str("[[segments]]\n").is_err());
        let mut cfg = ExperimentConfig::preset(Preset::DeskScale);
        cfg.seed = MAX_SEED + 1;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }
}

//! Per-interval two-way offsets, cascaded summation, skew estimation and
//! the relay frequency-correction loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{SegmentBudget, PS_PER_S};
use crate::coincidence::{measure_delay, CoincidenceError, CoincidenceSummary, EngineConfig};
use crate::stats::{fit_drift, StatsError};
use crate::timetag::{
    simulate_segment, substream, ClockModel, DetectorModel, SegmentPhysics, SegmentStreams, SimError, Window,
    DEFAULT_DELAY_PS_PER_KM, MAX_RATE_ERROR,
};

#[derive(Debug, Error, PartialEq)]
pub enum CascadeError {
    #[error("cascade needs at least one segment")]
    Empty,
    #[error("segment estimates belong to different intervals ({0} and {1})")]
    MismatchedIntervals(u64, u64),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Engine(#[from] CoincidenceError),
    #[error("tag output failed: {0}")]
    Sink(String),
}

pub type Result<T> = std::result::Result<T, CascadeError>;

/// Two-way offset of one segment in one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentEstimate {
    pub interval_index: u64,
    /// Far station reading minus near station reading.
    pub offset_ps: f64,
    pub fwd: CoincidenceSummary,
    pub bwd: CoincidenceSummary,
    pub sd_ps: f64,
}

/// Combine the two directions of a segment.
pub fn segment_offset(interval_index: u64, fwd: CoincidenceSummary, bwd: CoincidenceSummary) -> SegmentEstimate {
    SegmentEstimate {
        interval_index,
        offset_ps: (fwd.delay_ps - bwd.delay_ps) / 2.0,
        sd_ps: 0.5 * fwd.predicted_sd_ps.hypot(bwd.predicted_sd_ps),
        fwd,
        bwd,
    }
}

/// End-to-end offset of one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeRecord {
    pub interval_index: u64,
    pub per_segment: Vec<SegmentEstimate>,
    pub total_offset_ps: f64,
    pub total_sd_ps: f64,
}

pub fn total_offset(segments: Vec<SegmentEstimate>) -> Result<CascadeRecord> {
    let first = segments.first().ok_or(CascadeError::Empty)?.interval_index;
    if let Some(s) = segments.iter().find(|s| s.interval_index != first) {
        return Err(CascadeError::MismatchedIntervals(first, s.interval_index));
    }
    let total_offset_ps = segments.iter().map(|s| s.offset_ps).sum();
    let total_sd_ps = segments.iter().map(|s| s.sd_ps * s.sd_ps).sum::<f64>().sqrt();
    Ok(CascadeRecord { interval_index: first, per_segment: segments, total_offset_ps, total_sd_ps })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkewEstimate {
    /// Fractional frequency difference, s/s.
    pub skew: f64,
    pub uncertainty: f64,
}

/// Linear drift of an offset series given as `(time s, offset ps)`.
pub fn estimate_skew(series: &[(f64, f64)]) -> Result<SkewEstimate> {
    let (t, y): (Vec<f64>, Vec<f64>) = series.iter().copied().unzip();
    let fit = fit_drift(&t, &y, 1)?;
    Ok(SkewEstimate { skew: fit.slope() / PS_PER_S, uncertainty: fit.slope_std_error() / PS_PER_S })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// Measurement intervals per correction epoch.
    pub epoch_intervals: usize,
    /// Most recent intervals used for each slope fit.
    pub window: usize,
    pub gain: f64,
    /// Smallest rate mismatch the trimmer can realize.
    pub residual_floor: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { epoch_intervals: 10, window: 10, gain: 0.8, residual_floor: 8e-16 }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CascadeError::InvalidTopology(format!("controller: {m}")));
        if self.epoch_intervals == 0 {
            return bad("epoch_intervals must be positive");
        }
        if self.window < 3 {
            return bad("window must hold at least 3 intervals");
        }
        if !(0.0..=1.0).contains(&self.gain) {
            return bad("gain must be in [0, 1]");
        }
        if !(self.residual_floor >= 0.0 && self.residual_floor < MAX_RATE_ERROR) {
            return bad("residual_floor must be in [0, 1e-6)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub window: usize,
    pub gain: f64,
    pub trim_applied: f64,
    pub residual_floor: f64,
    pub last_estimated_skew: f64,
}

impl ControllerState {
    pub fn new(cfg: &ControllerConfig) -> Self {
        ControllerState {
            window: cfg.window,
            gain: cfg.gain,
            trim_applied: 0.0,
            residual_floor: cfg.residual_floor,
            last_estimated_skew: 0.0,
        }
    }
}

const MAX_TRIM: f64 = MAX_RATE_ERROR * (1.0 - 1e-9);

/// One proportional correction. Returns the updated state; its
/// `trim_applied` is the new trim command.
pub fn controller_step(state: &ControllerState, estimated_skew: f64) -> ControllerState {
    if state.gain == 0.0 || !estimated_skew.is_finite() {
        return state.clone();
    }
    ControllerState {
        trim_applied: (state.trim_applied - state.gain * estimated_skew).clamp(-MAX_TRIM, MAX_TRIM),
        last_estimated_skew: estimated_skew,
        ..state.clone()
    }
}

/// Rate mismatch actually realized by a trimmed clock against its
/// reference. The trimmer cannot do better than `residual_floor`.
pub fn effective_skew(native_skew: f64, trim: f64, reference_skew: f64, residual_floor: f64) -> f64 {
    let eff = native_skew + trim - reference_skew;
    if eff.abs() >= residual_floor {
        eff
    } else if eff < 0.0 {
        -residual_floor
    } else {
        residual_floor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Common reference clock at every station.
    #[serde(rename = "crc")]
    Crc,
    /// Independent relay clocks, uncorrected.
    #[serde(rename = "irc")]
    Irc,
    /// Independent relay clocks with feedback frequency correction.
    #[serde(rename = "irc-fc")]
    IrcFc,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Crc => "crc",
            Scenario::Irc => "irc",
            Scenario::IrcFc => "irc-fc",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "crc" => Ok(Scenario::Crc),
            "irc" => Ok(Scenario::Irc),
            "irc-fc" => Ok(Scenario::IrcFc),
            other => Err(format!("unknown scenario `{other}` (expected crc, irc or irc-fc)")),
        }
    }
}

/// A linear chain: `segments[k]` joins `stations[k]` and `stations[k+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub segments: Vec<SegmentBudget>,
    pub stations: Vec<ClockModel>,
    pub detector: DetectorModel,
    pub delay_ps_per_km: f64,
}

impl Topology {
    /// `n` identical segments with ideal clocks.
    pub fn uniform(n: usize, budget: SegmentBudget) -> Self {
        Topology {
            segments: vec![budget; n],
            stations: vec![ClockModel::ideal(); n + 1],
            detector: DetectorModel::default(),
            delay_ps_per_km: DEFAULT_DELAY_PS_PER_KM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(CascadeError::Empty);
        }
        if self.stations.len() != self.segments.len() + 1 {
            return Err(CascadeError::InvalidTopology(format!(
                "{} segments need {} stations, got {}",
                self.segments.len(),
                self.segments.len() + 1,
                self.stations.len()
            )));
        }
        for c in &self.stations {
            c.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    pub scenario: Scenario,
    pub topology: Topology,
    pub n_intervals: usize,
    pub interval_s: f64,
    pub seed: u64,
    /// Native rate error of every relay clock against the end clocks in the
    /// independent-clock scenarios.
    pub relay_skew: f64,
    pub controller: ControllerConfig,
    pub engine: EngineConfig,
    /// Fixed coarse search span; by default twice each segment's fiber delay.
    pub search_span_ps: Option<i64>,
}

/// Both directions of one segment in one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMeasurement {
    pub fwd: std::result::Result<CoincidenceSummary, CoincidenceError>,
    pub bwd: std::result::Result<CoincidenceSummary, CoincidenceError>,
    pub saturated: bool,
    pub estimate: Option<SegmentEstimate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalResult {
    pub interval_index: u64,
    pub t_s: f64,
    pub segments: Vec<SegmentMeasurement>,
    /// Present when every segment produced a valid estimate.
    pub record: Option<CascadeRecord>,
    pub flags: Vec<String>,
}

impl IntervalResult {
    pub fn flag(&self) -> String {
        if self.flags.is_empty() {
            "ok".to_string()
        } else {
            self.flags.join("|")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerLogRow {
    pub epoch: usize,
    pub relay: usize,
    pub estimated_skew: f64,
    pub trim_applied: f64,
    pub effective_skew: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignResult {
    pub scenario: Scenario,
    pub interval_s: f64,
    pub intervals: Vec<IntervalResult>,
    pub controller_log: Vec<ControllerLogRow>,
    pub epoch_intervals: usize,
}

impl CampaignResult {
    /// `(t_s, total offset)` of every unflagged interval.
    pub fn total_offsets(&self) -> Vec<(f64, f64)> {
        self.intervals.iter().filter_map(|r| r.record.as_ref().map(|rec| (r.t_s, rec.total_offset_ps))).collect()
    }

    /// `(t_s, offset)` of one segment over intervals where it is valid.
    pub fn segment_offsets(&self, segment: usize) -> Vec<(f64, f64)> {
        self.intervals
            .iter()
            .filter_map(|r| r.segments[segment].estimate.as_ref().map(|e| (r.t_s, e.offset_ps)))
            .collect()
    }

    /// Sample SD of the valid total offsets from `first_interval` onward.
    pub fn total_sd_from(&self, first_interval: u64) -> std::result::Result<f64, StatsError> {
        let v: Vec<f64> = self
            .intervals
            .iter()
            .filter(|r| r.interval_index >= first_interval)
            .filter_map(|r| r.record.as_ref().map(|rec| rec.total_offset_ps))
            .collect();
        crate::stats::sample_sd(&v)
    }

    /// First interval simulated under a trim that is within `bound`, with
    /// every later trim also within `bound`.
    pub fn converged_from(&self, bound: f64) -> Option<u64> {
        let last = self.controller_log.iter().map(|r| r.epoch).max()?;
        let last_bad = self.controller_log.iter().filter(|r| r.effective_skew.abs() > bound).map(|r| r.epoch).max();
        let first_good = match last_bad {
            None => 0,
            Some(e) if e < last => e + 1,
            Some(_) => return None,
        };
        Some((first_good as u64 + 1) * self.epoch_intervals as u64)
    }
}

/// Receives the raw streams of every (interval, segment) as they are
/// produced; may be called from several threads.
pub type TagSink<'a> = dyn Fn(u64, usize, &SegmentStreams) -> std::io::Result<()> + Sync + 'a;

fn scenario_clocks(cfg: &CampaignConfig) -> Vec<ClockModel> {
    let n = cfg.topology.stations.len();
    let floor = cfg.controller.residual_floor;
    cfg.topology
        .stations
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let relay = i != 0 && i != n - 1;
            let skew = match (cfg.scenario, relay) {
                (Scenario::Crc, false) => 0.0,
                (Scenario::Crc, true) => floor,
                (_, false) => c.skew,
                (_, true) => c.skew + cfg.relay_skew,
            };
            ClockModel { skew, trim: 0.0, ..c.clone() }
        })
        .collect()
}

struct Prepared {
    physics: Vec<SegmentPhysics>,
    engines: Vec<EngineConfig>,
}

fn prepare(cfg: &CampaignConfig) -> Result<Prepared> {
    cfg.topology.validate()?;
    cfg.controller.validate()?;
    cfg.engine.validate()?;
    if !(cfg.interval_s > 0.0) {
        return Err(CascadeError::InvalidTopology("interval_s must be positive".into()));
    }
    let mut physics = Vec::new();
    let mut engines = Vec::new();
    for b in &cfg.topology.segments {
        let mut b = b.clone();
        b.interval_s = cfg.interval_s;
        physics.push(SegmentPhysics::from_budget(&b, &cfg.topology.detector, cfg.topology.delay_ps_per_km)?);
        let span = cfg
            .search_span_ps
            .unwrap_or_else(|| cfg.engine.span_for_fiber(b.fiber_len_km, cfg.topology.delay_ps_per_km));
        let engine = EngineConfig { search_span_ps: span, ..cfg.engine.clone() };
        engine.validate()?;
        engines.push(engine);
    }
    Ok(Prepared { physics, engines })
}

fn error_code(e: &CoincidenceError) -> &'static str {
    match e {
        CoincidenceError::EmptyStream(_) => "empty_stream",
        CoincidenceError::AcquisitionFailed { .. } => "acquisition_failed",
        CoincidenceError::InsufficientStatistics(_) => "insufficient_statistics",
        CoincidenceError::InvalidConfig(_) => "invalid_config",
    }
}

fn measure_task(
    cfg: &CampaignConfig,
    prep: &Prepared,
    clocks: &[ClockModel],
    interval: u64,
    segment: usize,
    sink: Option<&TagSink>,
) -> Result<SegmentMeasurement> {
    let t_ps = (cfg.interval_s * PS_PER_S).round() as i64;
    let window = Window { start_ps: interval as i64 * t_ps, duration_ps: t_ps };
    let mut rng = substream(cfg.seed, segment as u32, interval);
    let streams = simulate_segment(&prep.physics[segment], &clocks[segment], &clocks[segment + 1], window, &mut rng);
    if let Some(sink) = sink {
        sink(interval, segment, &streams).map_err(|e| CascadeError::Sink(e.to_string()))?;
    }
    let engine = &prep.engines[segment];
    let fwd = measure_delay(&streams.fwd_idler, &streams.fwd_signal, engine);
    let bwd = measure_delay(&streams.bwd_idler, &streams.bwd_signal, engine);
    let estimate = match (&fwd, &bwd) {
        (Ok(f), Ok(b)) => Some(segment_offset(interval, f.clone(), b.clone())),
        _ => None,
    };
    Ok(SegmentMeasurement { fwd, bwd, saturated: streams.saturated, estimate })
}

fn assemble(interval: u64, t_s: f64, segments: Vec<SegmentMeasurement>) -> IntervalResult {
    let mut flags = Vec::new();
    for (k, m) in segments.iter().enumerate() {
        for (dir, r) in [("fwd", &m.fwd), ("bwd", &m.bwd)] {
            if let Err(e) = r {
                flags.push(format!("seg{k}_{dir}:{}", error_code(e)));
            }
        }
        if m.saturated {
            flags.push(format!("seg{k}:saturated"));
        }
    }
    let record = segments
        .iter()
        .map(|m| m.estimate.clone())
        .collect::<Option<Vec<_>>>()
        .map(|est| total_offset(est).expect("one interval, non-empty"));
    IntervalResult { interval_index: interval, t_s, segments, record, flags }
}

fn run_batch(
    cfg: &CampaignConfig,
    prep: &Prepared,
    clocks: &[ClockModel],
    intervals: std::ops::Range<u64>,
    sink: Option<&TagSink>,
) -> Result<Vec<IntervalResult>> {
    let n_seg = cfg.topology.segments.len();
    let tasks: Vec<(u64, usize)> = intervals.clone().flat_map(|i| (0..n_seg).map(move |k| (i, k))).collect();
    let measured: Vec<SegmentMeasurement> =
        tasks.par_iter().map(|&(i, k)| measure_task(cfg, prep, clocks, i, k, sink)).collect::<Result<_>>()?;
    let mut it = measured.into_iter();
    Ok(intervals
        .map(|i| {
            let segs: Vec<SegmentMeasurement> = it.by_ref().take(n_seg).collect();
            assemble(i, i as f64 * cfg.interval_s, segs)
        })
        .collect())
}

/// Simulate and measure a whole campaign.
///
/// Without feedback every (interval, segment) task is independent and all
/// run concurrently. With feedback the intervals of one correction epoch
/// run concurrently under fixed trims; at the epoch boundary each relay's
/// trim is updated from the slope of the segment joining it to its
/// upstream neighbour, and takes effect from the next interval.
pub fn run_campaign(cfg: &CampaignConfig, sink: Option<&TagSink>) -> Result<CampaignResult> {
    let prep = prepare(cfg)?;
    let mut clocks = scenario_clocks(cfg);
    let n = cfg.n_intervals as u64;
    let mut intervals = Vec::with_capacity(cfg.n_intervals);
    let mut log = Vec::new();

    if cfg.scenario != Scenario::IrcFc {
        intervals = run_batch(cfg, &prep, &clocks, 0..n, sink)?;
        return Ok(CampaignResult {
            scenario: cfg.scenario,
            interval_s: cfg.interval_s,
            intervals,
            controller_log: log,
            epoch_intervals: cfg.controller.epoch_intervals,
        });
    }

    let n_relays = clocks.len() - 2;
    let mut states = vec![ControllerState::new(&cfg.controller); n_relays];
    let reference_skew = clocks[0].skew;
    let epoch_len = cfg.controller.epoch_intervals as u64;
    let t_ps = (cfg.interval_s * PS_PER_S).round() as i64;
    let mut epoch = 0usize;
    let mut start = 0u64;
    while start < n {
        let end = (start + epoch_len).min(n);
        intervals.extend(run_batch(cfg, &prep, &clocks, start..end, sink)?);
        for (r, state) in states.iter_mut().enumerate() {
            let relay = r + 1;
            let recent: Vec<(f64, f64)> = intervals
                .iter()
                .rev()
                .take(cfg.controller.window)
                .filter_map(|iv| iv.segments[relay - 1].estimate.as_ref().map(|e| (iv.t_s, e.offset_ps)))
                .collect();
            let estimate = estimate_skew(&recent).map(|e| e.skew).unwrap_or(f64::NAN);
            if estimate.is_finite() {
                *state = controller_step(state, estimate);
            } else {
                log::warn!("epoch {epoch}: relay {relay} skew estimate unavailable, trim unchanged");
            }
            let clk = &mut clocks[relay];
            let native = clk.skew;
            let eff = effective_skew(native, state.trim_applied, reference_skew, state.residual_floor);
            let realized_trim = (reference_skew + eff - native).clamp(-MAX_TRIM, MAX_TRIM);
            clk.retrim(realized_trim, end as i64 * t_ps);
            log.push(ControllerLogRow {
                epoch,
                relay,
                estimated_skew: estimate,
                trim_applied: state.trim_applied,
                effective_skew: eff,
            });
        }
        epoch += 1;
        start = end;
    }
    Ok(CampaignResult {
        scenario: cfg.scenario,
        interval_s: cfg.interval_s,
        intervals,
        controller_log: log,
        epoch_intervals: cfg.controller.epoch_intervals,
    })
}

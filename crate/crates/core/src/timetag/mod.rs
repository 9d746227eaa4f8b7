//! Monte Carlo generation of detector time-tag streams.
//!
//! Time is kept as signed 64-bit picoseconds throughout. True emission and
//! arrival times are integers; a station clock maps a true time to its
//! reading with the integer part carried exactly and only the small
//! offset/rate correction computed in floating point.

pub mod io;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{SegmentBudget, PS_PER_S};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid clock: {0}")]
    InvalidClock(String),
    #[error("invalid channel: {0}")]
    InvalidChannel(String),
    #[error("invalid detector: {0}")]
    InvalidDetector(String),
    #[error("tags must be sorted: tag {index} ({value} ps) precedes a smaller one")]
    Unsorted { index: usize, value: i64 },
}

/// Largest clock rate error the models accept.
pub const MAX_RATE_ERROR: f64 = 1e-6;

/// Default group delay of standard single-mode fiber.
pub const DEFAULT_DELAY_PS_PER_KM: f64 = 4.9e6;

/// One station's reference clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockModel {
    /// Reading offset at true time zero.
    pub offset_ps: f64,
    /// Native fractional rate error.
    #[serde(default)]
    pub skew: f64,
    /// White phase noise added to every reading.
    #[serde(default)]
    pub white_pm_sigma_ps: f64,
    /// Rate correction currently applied by a controller.
    #[serde(default)]
    pub trim: f64,
}

impl Default for ClockModel {
    fn default() -> Self {
        ClockModel::ideal()
    }
}

impl ClockModel {
    pub fn ideal() -> Self {
        ClockModel { offset_ps: 0.0, skew: 0.0, white_pm_sigma_ps: 0.0, trim: 0.0 }
    }

    pub fn with_offset(offset_ps: f64) -> Self {
        ClockModel { offset_ps, ..ClockModel::ideal() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !self.offset_ps.is_finite() {
            return Err(SimError::InvalidClock("offset must be finite".into()));
        }
        if !(self.skew.abs() < MAX_RATE_ERROR) {
            return Err(SimError::InvalidClock(format!("|skew| must be < {MAX_RATE_ERROR:e}, got {}", self.skew)));
        }
        if !(self.trim.abs() < MAX_RATE_ERROR) {
            return Err(SimError::InvalidClock(format!("|trim| must be < {MAX_RATE_ERROR:e}, got {}", self.trim)));
        }
        if !(self.white_pm_sigma_ps >= 0.0) {
            return Err(SimError::InvalidClock("white phase noise must be >= 0".into()));
        }
        Ok(())
    }

    /// Total fractional rate error including the trim.
    pub fn rate_error(&self) -> f64 {
        self.skew + self.trim
    }

    /// Reading for a true time, with `noise_ps` added before rounding.
    pub fn read(&self, true_ps: i64, noise_ps: f64) -> i64 {
        let correction = self.offset_ps + self.rate_error() * true_ps as f64 + noise_ps;
        true_ps + correction.round() as i64
    }

    /// True time, to the nearest picosecond, of a noiseless reading.
    pub fn invert(&self, reading_ps: i64) -> i64 {
        let rate = self.rate_error();
        // reading = t·(1 + rate) + offset; only the small correction goes through f64
        let shifted = reading_ps as f64 - self.offset_ps;
        let correction = self.offset_ps + rate * shifted / (1.0 + rate);
        reading_ps - correction.round() as i64
    }

    /// Change the trim at `at_true_ps` keeping the reading continuous there.
    pub fn retrim(&mut self, new_trim: f64, at_true_ps: i64) {
        self.offset_ps += (self.trim - new_trim) * at_true_ps as f64;
        self.trim = new_trim;
    }
}

/// A fiber or free-running optical path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    pub length_km: f64,
    pub atten_db_per_km: f64,
    pub fixed_loss_db: f64,
    #[serde(default = "default_delay")]
    pub delay_ps_per_km: f64,
    /// Standard deviation of residual dispersive spread.
    #[serde(default)]
    pub residual_dispersion_ps: f64,
}

fn default_delay() -> f64 {
    DEFAULT_DELAY_PS_PER_KM
}

impl ChannelModel {
    pub fn lossless(length_km: f64) -> Self {
        ChannelModel {
            length_km,
            atten_db_per_km: 0.0,
            fixed_loss_db: 0.0,
            delay_ps_per_km: DEFAULT_DELAY_PS_PER_KM,
            residual_dispersion_ps: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("length_km", self.length_km),
            ("atten_db_per_km", self.atten_db_per_km),
            ("fixed_loss_db", self.fixed_loss_db),
            ("delay_ps_per_km", self.delay_ps_per_km),
            ("residual_dispersion_ps", self.residual_dispersion_ps),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SimError::InvalidChannel(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn loss_db(&self) -> f64 {
        self.atten_db_per_km * self.length_km + self.fixed_loss_db
    }

    pub fn survival(&self) -> f64 {
        10f64.powf(-self.loss_db() / 10.0)
    }

    pub fn delay_ps(&self) -> i64 {
        (self.length_km * self.delay_ps_per_km).round() as i64
    }
}

/// A single-photon detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorModel {
    pub efficiency: f64,
    /// Standard deviation of this detector's timing jitter.
    pub jitter_sigma_ps: f64,
    pub dark_rate_cps: f64,
    /// Count rate above which a stream is flagged as saturated.
    pub max_rate_cps: f64,
    /// Non-paralyzable dead time; zero disables it.
    #[serde(default)]
    pub dead_time_ps: i64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        DetectorModel {
            efficiency: 0.8,
            jitter_sigma_ps: 32.0,
            dark_rate_cps: 100.0,
            max_rate_cps: 2.5e7,
            dead_time_ps: 0,
        }
    }
}

impl DetectorModel {
    /// Unit efficiency, no jitter, no dark counts.
    pub fn ideal() -> Self {
        DetectorModel {
            efficiency: 1.0,
            jitter_sigma_ps: 0.0,
            dark_rate_cps: 0.0,
            max_rate_cps: f64::INFINITY,
            dead_time_ps: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(SimError::InvalidDetector(format!("efficiency must be in [0, 1], got {}", self.efficiency)));
        }
        if !(self.jitter_sigma_ps >= 0.0) || !(self.dark_rate_cps >= 0.0) || !(self.max_rate_cps > 0.0) {
            return Err(SimError::InvalidDetector("jitter, dark rate and max rate must be non-negative".into()));
        }
        if self.dead_time_ps < 0 {
            return Err(SimError::InvalidDetector("dead time must be >= 0".into()));
        }
        Ok(())
    }

    /// Detection efficiency expressed as a loss in dB.
    pub fn efficiency_loss_db(&self) -> f64 {
        -10.0 * self.efficiency.log10()
    }
}

/// Sorted detection timestamps of one detector channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeTagStream {
    pub channel_id: u8,
    tags_ps: Vec<i64>,
}

impl TimeTagStream {
    pub fn new(channel_id: u8, tags_ps: Vec<i64>) -> Result<Self, SimError> {
        if let Some(i) = tags_ps.windows(2).position(|w| w[1] < w[0]) {
            return Err(SimError::Unsorted { index: i, value: tags_ps[i] });
        }
        Ok(TimeTagStream { channel_id, tags_ps })
    }

    /// Sorts the tags first.
    pub fn from_unsorted(channel_id: u8, mut tags_ps: Vec<i64>) -> Self {
        tags_ps.sort_unstable();
        TimeTagStream { channel_id, tags_ps }
    }

    pub fn tags(&self) -> &[i64] {
        &self.tags_ps
    }

    pub fn len(&self) -> usize {
        self.tags_ps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags_ps.is_empty()
    }

    pub fn shifted(&self, delta_ps: i64) -> Self {
        TimeTagStream { channel_id: self.channel_id, tags_ps: self.tags_ps.iter().map(|t| t + delta_ps).collect() }
    }

    pub fn into_tags(self) -> Vec<i64> {
        self.tags_ps
    }
}

/// A half-open span of true time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start_ps: i64,
    pub duration_ps: i64,
}

impl Window {
    pub fn from_seconds(start_s: f64, duration_s: f64) -> Self {
        Window { start_ps: (start_s * PS_PER_S).round() as i64, duration_ps: (duration_s * PS_PER_S).round() as i64 }
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_ps as f64 / PS_PER_S
    }

    pub fn shifted(&self, delta_ps: i64) -> Self {
        Window { start_ps: self.start_ps + delta_ps, duration_ps: self.duration_ps }
    }
}

/// Deterministic RNG substream for one (segment, interval) task.
///
/// Every substream is ChaCha8 keyed by the campaign seed, with the stream
/// number `(segment << 48) | interval`. Results therefore do not depend
/// on which worker runs a task or in what order.
pub fn substream(seed: u64, segment: u32, interval: u64) -> ChaCha8Rng {
    assert!(interval < 1 << 48, "interval index exceeds substream layout");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((segment as u64) << 48) | interval);
    rng
}

/// Homogeneous Poisson arrivals in `window`, already sorted.
pub fn poisson_times<R: Rng + ?Sized>(rate_per_s: f64, window: Window, rng: &mut R) -> Vec<i64> {
    if !(rate_per_s > 0.0) || window.duration_ps <= 0 {
        return Vec::new();
    }
    let mean_gap_ps = PS_PER_S / rate_per_s;
    let end = window.duration_ps as f64;
    let mut out = Vec::with_capacity((end / mean_gap_ps * 1.01 + 16.0).min(1e9) as usize);
    let mut t = 0.0f64;
    loop {
        let gap: f64 = rng.sample(Exp1);
        t += gap * mean_gap_ps;
        if t >= end {
            break;
        }
        out.push(window.start_ps + t as i64);
    }
    out
}

/// Pair emission times over `[0, duration_s)` from a fresh seeded generator.
pub fn gen_pair_emissions(rate_pairs_per_s: f64, duration_s: f64, rng_seed: u64) -> Vec<i64> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    poisson_times(rate_pairs_per_s, Window::from_seconds(0.0, duration_s), &mut rng)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma > 0.0 {
        let z: f64 = rng.sample(StandardNormal);
        z * sigma
    } else {
        0.0
    }
}

/// Propagate photons through a channel: loss, delay and dispersion.
pub fn apply_channel<R: Rng + ?Sized>(times: &[i64], channel: &ChannelModel, rng: &mut R) -> Vec<i64> {
    let survival = channel.survival();
    let delay = channel.delay_ps();
    let mut out: Vec<i64> =
        times.iter().filter(|_| survival >= 1.0 || rng.random::<f64>() < survival).map(|&t| t + delay).collect();
    propagate_spread(&mut out, channel.residual_dispersion_ps, rng);
    out
}

fn propagate_spread<R: Rng + ?Sized>(times: &mut [i64], sigma_ps: f64, rng: &mut R) {
    if sigma_ps > 0.0 {
        for t in times.iter_mut() {
            *t += gaussian(rng, sigma_ps).round() as i64;
        }
        times.sort_unstable();
    }
}

/// Output of [`detect`].
#[derive(Debug, Clone)]
pub struct Detection {
    pub stream: TimeTagStream,
    /// The average count rate exceeded the detector's `max_rate_cps`.
    pub saturated: bool,
}

/// Detect photon arrivals: efficiency thinning, jitter, dark counts, and
/// the station clock's reading.
pub fn detect<R: Rng + ?Sized>(
    times: &[i64],
    det: &DetectorModel,
    clk: &ClockModel,
    window: Window,
    channel_id: u8,
    rng: &mut R,
) -> Detection {
    let eff = det.efficiency;
    let kept: Vec<i64> = times.iter().copied().filter(|_| eff >= 1.0 || rng.random::<f64>() < eff).collect();
    register(&kept, det, clk, window, channel_id, rng)
}

/// Stamp already-detected arrivals with the station clock. Efficiency is
/// assumed to have been applied by the caller.
pub(crate) fn register<R: Rng + ?Sized>(
    arrivals: &[i64],
    det: &DetectorModel,
    clk: &ClockModel,
    window: Window,
    channel_id: u8,
    rng: &mut R,
) -> Detection {
    let darks = poisson_times(det.dark_rate_cps, window, rng);
    let mut tags = Vec::with_capacity(arrivals.len() + darks.len());
    for &t in arrivals {
        let noise = gaussian(rng, det.jitter_sigma_ps) + gaussian(rng, clk.white_pm_sigma_ps);
        tags.push(clk.read(t, noise));
    }
    for &t in &darks {
        tags.push(clk.read(t, gaussian(rng, clk.white_pm_sigma_ps)));
    }
    tags.sort_unstable();
    if det.dead_time_ps > 0 {
        apply_dead_time(&mut tags, det.dead_time_ps);
    }
    let rate = tags.len() as f64 / window.duration_s().max(f64::MIN_POSITIVE);
    let saturated = rate > det.max_rate_cps;
    if saturated {
        log::warn!("channel {channel_id}: {rate:.3e} cps exceeds detector limit {:.3e} cps", det.max_rate_cps);
    }
    Detection { stream: TimeTagStream { channel_id, tags_ps: tags }, saturated }
}

fn apply_dead_time(tags: &mut Vec<i64>, dead_time_ps: i64) {
    let mut last: Option<i64> = None;
    tags.retain(|&t| match last {
        Some(l) if t - l < dead_time_ps => false,
        _ => {
            last = Some(t);
            true
        }
    });
}

/// Optical and detection parameters of one simulated segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPhysics {
    /// Pairs emitted per second in each direction.
    pub pair_rate_per_s: f64,
    /// Path of the locally retained photon (no fiber span).
    pub idler: ChannelModel,
    /// Fiber path of the forward-distributed signal photons.
    pub signal_fwd: ChannelModel,
    /// Fiber path of the backward-distributed signal photons.
    pub signal_bwd: ChannelModel,
    pub detector: DetectorModel,
}

impl SegmentPhysics {
    /// Realize a budget with the given detectors.
    ///
    /// Budget losses are end-to-end, so the detector's efficiency is charged
    /// against them and only the remainder becomes channel loss. Detector
    /// jitter is set from the budget's pairwise width: with two detectors
    /// of standard deviation `s` each, the coincidence width is `2s`.
    /// Residual dispersion widths convert to a standard deviation of `w/√2`.
    pub fn from_budget(
        budget: &SegmentBudget,
        detector: &DetectorModel,
        delay_ps_per_km: f64,
    ) -> Result<Self, SimError> {
        budget.validate().map_err(|e| SimError::InvalidChannel(e.to_string()))?;
        detector.validate()?;
        let eff_db = detector.efficiency_loss_db();
        let residual = |loss: f64, name: &str| {
            let r = loss - eff_db;
            if r < -1e-9 {
                Err(SimError::InvalidChannel(format!("{name} of {loss} dB is below the detector's own {eff_db:.3} dB")))
            } else {
                Ok(r.max(0.0))
            }
        };
        let idler = ChannelModel {
            length_km: 0.0,
            atten_db_per_km: 0.0,
            fixed_loss_db: residual(budget.idler_loss_db, "idler loss")?,
            delay_ps_per_km,
            residual_dispersion_ps: 0.0,
        };
        let signal_fixed = residual(budget.signal_fixed_loss_db, "signal fixed loss")?;
        let signal = |width: f64| ChannelModel {
            length_km: budget.fiber_len_km,
            atten_db_per_km: budget.atten_db_per_km,
            fixed_loss_db: signal_fixed,
            delay_ps_per_km,
            residual_dispersion_ps: width / std::f64::consts::SQRT_2,
        };
        let mut detector = detector.clone();
        detector.jitter_sigma_ps = budget.jitter_sigma_ps / 2.0;
        Ok(SegmentPhysics {
            pair_rate_per_s: budget.pair_rate_per_interval / budget.interval_s,
            idler,
            signal_fwd: signal(budget.residual_dispersion_ps_f),
            signal_bwd: signal(budget.residual_dispersion_ps_b),
            detector,
        })
    }

    /// Probability that a pair yields a coincidence (both photons detected).
    pub fn coincidence_probability(&self, signal: &ChannelModel) -> f64 {
        let eff = self.detector.efficiency;
        self.idler.survival() * eff * signal.survival() * eff
    }
}

/// Channel ids of the four streams of one segment.
pub mod channels {
    /// Idler of the forward pairs, at the near station.
    pub const FWD_IDLER: u8 = 0;
    /// Signal of the forward pairs, at the far station.
    pub const FWD_SIGNAL: u8 = 1;
    /// Idler of the backward pairs, at the far station.
    pub const BWD_IDLER: u8 = 2;
    /// Signal of the backward pairs, at the near station.
    pub const BWD_SIGNAL: u8 = 3;
}

/// The four time-tag series recorded by one segment.
#[derive(Debug, Clone)]
pub struct SegmentStreams {
    pub fwd_idler: TimeTagStream,
    pub fwd_signal: TimeTagStream,
    pub bwd_idler: TimeTagStream,
    pub bwd_signal: TimeTagStream,
    pub saturated: bool,
}

impl SegmentStreams {
    pub fn into_vec(self) -> Vec<TimeTagStream> {
        vec![self.fwd_idler, self.fwd_signal, self.bwd_idler, self.bwd_signal]
    }
}

struct DirectionStreams {
    idler: Detection,
    signal: Detection,
}

fn simulate_direction<R: Rng + ?Sized>(
    phys: &SegmentPhysics,
    signal_path: &ChannelModel,
    emitter: &ClockModel,
    receiver: &ClockModel,
    window: Window,
    channel_ids: (u8, u8),
    rng: &mut R,
) -> DirectionStreams {
    let eff = phys.detector.efficiency;
    let p_idler = phys.idler.survival() * eff;
    let p_signal = signal_path.survival() * eff;
    let p_any = p_idler + p_signal - p_idler * p_signal;

    // Pairs with neither photon detected leave no trace, so only the
    // thinned process of pairs with at least one detection is generated.
    let events = poisson_times(phys.pair_rate_per_s * p_any, window, rng);
    let p_both = p_idler * p_signal / p_any;
    let p_idler_given_any = p_idler / p_any;
    let signal_delay = signal_path.delay_ps();

    let mut idlers = Vec::with_capacity((events.len() as f64 * p_idler_given_any * 1.05) as usize + 8);
    let mut signals = Vec::new();
    for &t in &events {
        let u: f64 = rng.random();
        if u < p_idler_given_any {
            idlers.push(t);
            if u < p_both {
                signals.push(t + signal_delay);
            }
        } else {
            signals.push(t + signal_delay);
        }
    }
    propagate_spread(&mut signals, signal_path.residual_dispersion_ps, rng);

    let idler = register(&idlers, &phys.detector, emitter, window, channel_ids.0, rng);
    let signal = register(&signals, &phys.detector, receiver, window.shifted(signal_delay), channel_ids.1, rng);
    DirectionStreams { idler, signal }
}

/// Simulate both directions of one segment over `window`.
///
/// The near station (index k) distributes the forward pairs and the far
/// station (k+1) the backward pairs. Each pair's idler is stamped by the
/// emitting station's clock and its signal by the receiving station's.
pub fn simulate_segment<R: Rng + ?Sized>(
    phys: &SegmentPhysics,
    near: &ClockModel,
    far: &ClockModel,
    window: Window,
    rng: &mut R,
) -> SegmentStreams {
    use channels::*;
    let fwd = simulate_direction(phys, &phys.signal_fwd, near, far, window, (FWD_IDLER, FWD_SIGNAL), rng);
    let bwd = simulate_direction(phys, &phys.signal_bwd, far, near, window, (BWD_IDLER, BWD_SIGNAL), rng);
    let saturated = fwd.idler.saturated || fwd.signal.saturated || bwd.idler.saturated || bwd.signal.saturated;
    SegmentStreams {
        fwd_idler: fwd.idler.stream,
        fwd_signal: fwd.signal.stream,
        bwd_idler: bwd.idler.stream,
        bwd_signal: bwd.signal.stream,
        saturated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_sd(xs: &[f64]) -> f64 {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    }

    #[test]
    fn zero_rate_is_empty() {
        assert!(gen_pair_emissions(0.0, 1.0, 1).is_empty());
    }

    #[test]
    fn poisson_count_band() {
        let times = gen_pair_emissions(1e5, 1.0, 7);
        let n = times.len() as f64;
        assert!((n - 1e5).abs() < 5.0 * 1e5f64.sqrt(), "{n}");
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
        assert!(*times.first().unwrap() >= 0 && *times.last().unwrap() < 1_000_000_000_000);
    }

    #[test]
    fn emissions_are_deterministic() {
        assert_eq!(gen_pair_emissions(1e4, 0.5, 99), gen_pair_emissions(1e4, 0.5, 99));
        assert_ne!(gen_pair_emissions(1e4, 0.5, 99), gen_pair_emissions(1e4, 0.5, 100));
    }

    #[test]
    fn channel_half_survival() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch = ChannelModel { fixed_loss_db: 3.01, ..ChannelModel::lossless(0.0) };
        let times: Vec<i64> = (0..1_000_000).collect();
        let survived = apply_channel(&times, &ch, &mut rng).len() as f64 / 1e6;
        assert!((survived - 0.5).abs() < 0.005, "{survived}");
    }

    #[test]
    fn channel_pure_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch = ChannelModel::lossless(1.0);
        let out = apply_channel(&[0, 10, 20], &ch, &mut rng);
        assert_eq!(out, vec![4_900_000, 4_900_010, 4_900_020]);
        let identity = apply_channel(&[5, 6], &ChannelModel::lossless(0.0), &mut rng);
        assert_eq!(identity, vec![5, 6]);
    }

    #[test]
    fn ideal_detection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let times = vec![1, 1000, 123_456_789];
        let d =
            detect(&times, &DetectorModel::ideal(), &ClockModel::ideal(), Window::from_seconds(0.0, 1.0), 4, &mut rng);
        assert_eq!(d.stream.tags(), &times[..]);
        assert_eq!(d.stream.channel_id, 4);
        assert!(!d.saturated);
    }

    #[test]
    fn skewed_clock_reading() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clk = ClockModel { skew: 1e-6 - 1e-12, ..ClockModel::ideal() };
        let d =
            detect(&[1_000_000_000_000], &DetectorModel::ideal(), &clk, Window::from_seconds(0.0, 2.0), 0, &mut rng);
        assert_eq!(d.stream.tags(), &[1_000_001_000_000 - 1]);
        let exact = ClockModel { skew: 1e-6, ..ClockModel::ideal() };
        assert_eq!(exact.read(1_000_000_000_000, 0.0), 1_000_001_000_000);
    }

    #[test]
    fn jitter_sample_sd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let times: Vec<i64> = (0..10_000).map(|i| i * 1_000_000).collect();
        let det = DetectorModel { jitter_sigma_ps: 64.0, ..DetectorModel::ideal() };
        let d = detect(&times, &det, &ClockModel::ideal(), Window::from_seconds(0.0, 1.0), 0, &mut rng);
        let diffs: Vec<f64> = d.stream.tags().iter().zip(&times).map(|(a, b)| (a - b) as f64).collect();
        let sd = sample_sd(&diffs);
        assert!((sd - 64.0).abs() < 2.0, "{sd}");
    }

    #[test]
    fn efficiency_and_darks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let times: Vec<i64> = (0..100_000).map(|i| i * 1_000_000).collect();
        let det = DetectorModel { efficiency: 0.8, dark_rate_cps: 1000.0, ..DetectorModel::ideal() };
        let d = detect(&times, &det, &ClockModel::ideal(), Window::from_seconds(0.0, 10.0), 0, &mut rng);
        // 80000 ± 126 photons plus 10000 ± 100 darks
        let n = d.stream.len() as f64;
        assert!((n - 90_000.0).abs() < 5.0 * (80_000.0 * 0.2 + 10_000.0f64).sqrt(), "{n}");
    }

    #[test]
    fn dead_time_drops_close_tags() {
        let mut tags = vec![0, 10, 50, 120, 125, 300];
        apply_dead_time(&mut tags, 100);
        assert_eq!(tags, vec![0, 120, 300]);
    }

    #[test]
    fn saturation_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let times: Vec<i64> = (0..1000).collect();
        let det = DetectorModel { max_rate_cps: 100.0, ..DetectorModel::ideal() };
        let d = detect(&times, &det, &ClockModel::ideal(), Window::from_seconds(0.0, 1.0), 0, &mut rng);
        assert!(d.saturated);
        assert_eq!(d.stream.len(), 1000);
    }

    #[test]
    fn retrim_keeps_phase_continuous() {
        let mut clk = ClockModel { offset_ps: 250.0, skew: 35.1e-12, ..ClockModel::ideal() };
        let at = 3_600_000_000_000_000;
        let before = clk.read(at, 0.0);
        clk.retrim(-35.1e-12, at);
        assert_eq!(clk.read(at, 0.0), before);
        assert_eq!(clk.read(at + 1_000_000_000_000, 0.0) - before, 1_000_000_000_000);
    }

    #[test]
    fn clock_validation() {
        assert!(ClockModel { skew: 2e-6, ..ClockModel::ideal() }.validate().is_err());
        assert!(ClockModel::ideal().validate().is_ok());
        assert!(DetectorModel { efficiency: 1.2, ..DetectorModel::ideal() }.validate().is_err());
    }

    #[test]
    fn unsorted_stream_rejected() {
        assert!(TimeTagStream::new(0, vec![3, 1]).is_err());
        assert_eq!(TimeTagStream::from_unsorted(0, vec![3, 1]).tags(), &[1, 3]);
    }

    #[test]
    fn substreams_differ_and_repeat() {
        let a: u64 = substream(1, 0, 5).random();
        let b: u64 = substream(1, 0, 5).random();
        let c: u64 = substream(1, 1, 5).random();
        let d: u64 = substream(1, 0, 6).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn budget_loss_below_detector_efficiency_is_rejected() {
        let mut b = SegmentBudget::reference(100.0);
        b.idler_loss_db = 0.1;
        assert!(SegmentPhysics::from_budget(&b, &DetectorModel::default(), DEFAULT_DELAY_PS_PER_KM).is_err());
    }

    #[test]
    fn physics_coincidence_probability_matches_budget() {
        let b = SegmentBudget::reference(100.0);
        let phys = SegmentPhysics::from_budget(&b, &DetectorModel::default(), DEFAULT_DELAY_PS_PER_KM).unwrap();
        let expected = b.true_pairs() / b.pair_rate_per_interval;
        let got = phys.coincidence_probability(&phys.signal_fwd);
        assert!(((got - expected) / expected).abs() < 1e-12);
        assert_eq!(phys.detector.jitter_sigma_ps, 32.0);
        assert_eq!(phys.pair_rate_per_s, 2.5e5);
    }
}

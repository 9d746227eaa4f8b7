//! Nonlocal coincidence identification between an idler stream recorded at
//! one station and a signal stream recorded at another.
//!
//! The pipeline has three stages: a coarse correlation over a wide lag
//! span locates the peak to within a coarse bin, an exact fine histogram of
//! `remote − local` differences is built around it, and a moment fit over
//! the peak core extracts delay, width, pair count and CAR.

use std::io::Write;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{delay_sd_one_way, Car, DirectionStats};
use crate::timetag::{TimeTagStream, DEFAULT_DELAY_PS_PER_KM};

/// Pair counts below this are too few for a meaningful fit.
pub const MIN_PAIRS: f64 = 16.0;

/// Lags above which the FFT route is considered.
pub const DIRECT_LAG_LIMIT: usize = 1 << 16;

/// Variance of a unit Gaussian truncated to ±3.
const TRUNCATED_VARIANCE_RATIO: f64 = 0.973_344_4;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CoincidenceError {
    #[error("{0} stream is empty")]
    EmptyStream(&'static str),
    #[error("acquisition failed: best coarse bin {max} does not clear background {mean:.3} by 5 sigma")]
    AcquisitionFailed { max: u64, mean: f64 },
    #[error("insufficient statistics: {:.1} background-subtracted pairs", .0.pairs)]
    InsufficientStatistics(Box<CoincidenceSummary>),
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
}

impl CoincidenceError {
    /// The flagged summary carried by an insufficient-statistics error.
    pub fn summary(&self) -> Option<&CoincidenceSummary> {
        match self {
            CoincidenceError::InsufficientStatistics(s) => Some(s),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoincidenceError>;

/// Histogram of `remote − local` tag differences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrelationHistogram {
    pub center_ps: i64,
    /// Left edge of the first bin.
    pub start_ps: i64,
    pub bin_width_ps: i64,
    pub counts: Vec<u64>,
    pub span_ps: i64,
}

impl CorrelationHistogram {
    /// Mean of the integer differences falling in bin `i`.
    pub fn bin_center(&self, i: usize) -> f64 {
        self.start_ps as f64 + (i as i64 * self.bin_width_ps) as f64 + (self.bin_width_ps - 1) as f64 / 2.0
    }

    /// Same as [`bin_center`](Self::bin_center) but relative to `center_ps`.
    fn rel_center(&self, i: usize) -> f64 {
        (self.start_ps - self.center_ps + i as i64 * self.bin_width_ps) as f64 + (self.bin_width_ps - 1) as f64 / 2.0
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bin_center_ps,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(w, "{},{}", crate::runner::output::fmt_f64(self.bin_center(i)), c)?;
        }
        w.flush()
    }
}

/// Fitted coincidence peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceSummary {
    pub delay_ps: f64,
    /// Coincidence width, `√2` times the peak's standard deviation.
    pub width_sigma_ps: f64,
    /// Background-subtracted coincidences.
    pub pairs: f64,
    pub car: Car,
    pub predicted_sd_ps: f64,
}

impl CoincidenceSummary {
    pub fn stats(&self) -> DirectionStats {
        DirectionStats::new(self.width_sigma_ps, self.pairs, self.car)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub coarse_bin_ps: i64,
    pub fine_bin_ps: i64,
    /// Half-width of the fine histogram.
    pub window_ps: i64,
    /// Half-width of the coarse lag search.
    pub search_span_ps: i64,
    /// Remote tags used for coarse acquisition.
    pub acquire_remote_tags: usize,
    /// Fine-histogram re-centering passes.
    pub max_recenter: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            coarse_bin_ps: 1000,
            fine_bin_ps: 1,
            window_ps: 2500,
            search_span_ps: (2.0 * 100.0 * DEFAULT_DELAY_PS_PER_KM) as i64,
            acquire_remote_tags: 2000,
            max_recenter: 8,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoincidenceError::InvalidConfig(m));
        if self.coarse_bin_ps <= 0 || self.fine_bin_ps <= 0 {
            return bad("bin widths must be positive".into());
        }
        if self.window_ps < 20 * self.fine_bin_ps {
            return bad(format!("window {} ps is narrower than 20 fine bins", self.window_ps));
        }
        if self.search_span_ps < self.coarse_bin_ps {
            return bad("search span must cover at least one coarse bin".into());
        }
        if self.acquire_remote_tags == 0 {
            return bad("acquire_remote_tags must be positive".into());
        }
        Ok(())
    }

    /// Search span of twice the nominal delay of a fiber of `length_km`.
    pub fn span_for_fiber(&self, length_km: f64, delay_ps_per_km: f64) -> i64 {
        let span = (2.0 * length_km * delay_ps_per_km).round() as i64;
        span.max(10 * self.coarse_bin_ps).max(2 * self.window_ps)
    }
}

/// Lags per cache tile in the direct route.
const LAG_TILE: i64 = 1 << 15;

/// Exact correlation of binned counts: entry `k + K` counts the pairs whose
/// bin indices differ by `k`, for `|k| ≤ K`.
///
/// The lag axis is walked in tiles from `+K` down to `−K`; each remote tag
/// keeps a cursor into the local tags, which only moves forward because a
/// larger local bin means a smaller lag.
fn correlate_direct(local_bins: &[i64], remote_bins: &[i64], max_lag: i64) -> Vec<u32> {
    let mut corr = vec![0u32; (2 * max_lag + 1) as usize];
    let mut cursor: Vec<usize> =
        remote_bins.iter().map(|&kr| local_bins.partition_point(|&kl| kl < kr - max_lag)).collect();
    let mut k_hi = max_lag;
    while k_hi >= -max_lag {
        let k_lo = (k_hi - LAG_TILE + 1).max(-max_lag);
        for (c, &kr) in cursor.iter_mut().zip(remote_bins) {
            let stop = kr - k_lo;
            while *c < local_bins.len() && local_bins[*c] <= stop {
                corr[(kr - local_bins[*c] + max_lag) as usize] += 1;
                *c += 1;
            }
        }
        k_hi = k_lo - 1;
    }
    corr
}

fn dense_counts(bins: &[i64]) -> (i64, Vec<f64>) {
    let first = bins[0];
    let mut v = vec![0.0; (bins[bins.len() - 1] - first + 1) as usize];
    for &b in bins {
        v[(b - first) as usize] += 1.0;
    }
    (first, v)
}

fn correlate_fft(local_bins: &[i64], remote_bins: &[i64], max_lag: i64) -> Vec<u32> {
    let (l0, l) = dense_counts(local_bins);
    let (r0, r) = dense_counts(remote_bins);
    let n = (l.len() + r.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f64]| {
        let mut out = vec![Complex::new(0.0, 0.0); n];
        for (o, &x) in out.iter_mut().zip(v) {
            o.re = x;
        }
        out
    };
    let mut fl = pad(&l);
    let mut fr = pad(&r);
    fwd.process(&mut fl);
    fwd.process(&mut fr);
    for (a, b) in fr.iter_mut().zip(&fl) {
        *a *= b.conj();
    }
    inv.process(&mut fr);
    let scale = 1.0 / n as f64;
    // circular index m = j − i (remote index minus local index); lag = m + r0 − l0
    let base = r0 - l0;
    let (m_min, m_max) = (-(l.len() as i64 - 1), r.len() as i64 - 1);
    (-max_lag..=max_lag)
        .map(|k| {
            let m = k - base;
            if m < m_min || m > m_max {
                0
            } else {
                (fr[m.rem_euclid(n as i64) as usize].re * scale).round().max(0.0) as u32
            }
        })
        .collect()
}

fn bin_indices(tags: &[i64], bin: i64) -> Vec<i64> {
    tags.iter().map(|t| t.div_euclid(bin)).collect()
}

fn max_run(bins: &[i64]) -> u64 {
    bins.chunk_by(|a, b| a == b).map(|c| c.len() as u64).max().unwrap_or(0)
}

/// Coarse lag correlation; also reports whether the FFT route was used.
/// `None` when a lag count could overflow the 32-bit accumulators.
pub(crate) fn coarse_correlation(
    local: &[i64],
    remote: &[i64],
    search_span_ps: i64,
    coarse_bin_ps: i64,
) -> Option<(Vec<u32>, bool)> {
    let max_lag = search_span_ps.div_euclid(coarse_bin_ps).max(1);
    let lb = bin_indices(local, coarse_bin_ps);
    let rb = bin_indices(remote, coarse_bin_ps);
    // a lag count is at most (remote tags) × (most local tags in one bin)
    if (rb.len() as u64).saturating_mul(max_run(&lb)) > u32::MAX as u64 {
        return None;
    }
    let lags = (2 * max_lag + 1) as usize;
    let use_fft = lags > DIRECT_LAG_LIMIT && {
        let range = (lb[lb.len() - 1] - lb[0] + 1) as f64 + (rb[rb.len() - 1] - rb[0] + 1) as f64;
        let n = range.max(2.0).log2().ceil().exp2();
        let fft_cost = 3.0 * n * n.log2() + lags as f64;
        let local_density = lb.len() as f64 / (lb[lb.len() - 1] - lb[0] + 1) as f64;
        let direct_cost = rb.len() as f64 * (local_density * lags as f64).min(lb.len() as f64) + lags as f64;
        fft_cost < direct_cost
    };
    let corr = if use_fft { correlate_fft(&lb, &rb, max_lag) } else { correlate_direct(&lb, &rb, max_lag) };
    Some((corr, use_fft))
}

/// Locate the correlation peak to within one coarse bin.
///
/// Returns the lag, in picoseconds, of the coarse bin with the most pairs.
/// Ties go to the smallest `|lag|`, then to the negative side.
pub fn coarse_acquire(
    local: &TimeTagStream,
    remote: &TimeTagStream,
    search_span_ps: i64,
    coarse_bin_ps: i64,
) -> Result<i64> {
    if local.is_empty() {
        return Err(CoincidenceError::EmptyStream("local"));
    }
    if remote.is_empty() {
        return Err(CoincidenceError::EmptyStream("remote"));
    }
    if coarse_bin_ps <= 0 || search_span_ps <= 0 {
        return Err(CoincidenceError::InvalidConfig("coarse bin and span must be positive".into()));
    }
    acquire_tags(local.tags(), remote.tags(), search_span_ps, coarse_bin_ps)
}

fn acquire_tags(local: &[i64], remote: &[i64], search_span_ps: i64, coarse_bin_ps: i64) -> Result<i64> {
    let (corr, _) = coarse_correlation(local, remote, search_span_ps, coarse_bin_ps)
        .ok_or_else(|| CoincidenceError::InvalidConfig("coarse bin too wide for the tag density".into()))?;
    let max_lag = (corr.len() as i64 - 1) / 2;
    let mut best_k = 0i64;
    let mut best = 0u32;
    for (idx, &c) in corr.iter().enumerate() {
        let k = idx as i64 - max_lag;
        if c > best || (c == best && (k.abs() < best_k.abs() || (k.abs() == best_k.abs() && k < best_k))) {
            best = c;
            best_k = k;
        }
    }
    let mean = corr.iter().map(|&c| c as u64).sum::<u64>() as f64 / corr.len() as f64;
    if best as f64 <= mean + 5.0 * mean.sqrt() {
        return Err(CoincidenceError::AcquisitionFailed { max: best as u64, mean });
    }
    Ok(best_k * coarse_bin_ps)
}

/// Exact histogram of `remote − local` differences in
/// `[center − window, center + window)`.
pub fn refine_histogram(
    local: &TimeTagStream,
    remote: &TimeTagStream,
    center_ps: i64,
    window_ps: i64,
    fine_bin_ps: i64,
) -> Result<CorrelationHistogram> {
    if fine_bin_ps <= 0 || window_ps < 20 * fine_bin_ps {
        return Err(CoincidenceError::InvalidConfig(format!(
            "window {window_ps} ps must span at least 20 fine bins of {fine_bin_ps} ps"
        )));
    }
    let n_bins = (2 * window_ps + fine_bin_ps - 1) / fine_bin_ps;
    let start = center_ps - window_ps;
    let end = center_ps + window_ps;
    let mut counts = vec![0u64; n_bins as usize];
    let l = local.tags();
    let (mut lo, mut hi) = (0usize, 0usize);
    for &r in remote.tags() {
        // local tags l with r − end < l ≤ r − start
        while lo < l.len() && l[lo] <= r - end {
            lo += 1;
        }
        if hi < lo {
            hi = lo;
        }
        while hi < l.len() && l[hi] <= r - start {
            hi += 1;
        }
        for &t in &l[lo..hi] {
            counts[((r - t - start) / fine_bin_ps) as usize] += 1;
        }
    }
    Ok(CorrelationHistogram {
        center_ps,
        start_ps: start,
        bin_width_ps: fine_bin_ps,
        counts,
        span_ps: n_bins * fine_bin_ps,
    })
}

/// Position where the running sum of `weights` first reaches `target`,
/// interpolated within the bin, in the same relative coordinates as
/// `positions`.
fn quantile(weights: &[f64], positions: &[f64], bin_width: f64, target: f64) -> f64 {
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 && acc + w >= target {
            let frac = (target - acc) / w;
            return positions[i] - bin_width / 2.0 + frac * bin_width;
        }
        acc += w;
    }
    positions[positions.len() - 1]
}

struct CoreMoments {
    sum_excess: f64,
    mean: f64,
    var: f64,
}

fn core_moments(excess: &[f64], x: &[f64], center: f64, half: f64) -> CoreMoments {
    let (mut s0, mut s1) = (0.0, 0.0);
    for (&e, &xi) in excess.iter().zip(x) {
        if (xi - center).abs() <= half {
            s0 += e;
            s1 += e * xi;
        }
    }
    let mean = if s0 > 0.0 { s1 / s0 } else { center };
    let mut s2 = 0.0;
    for (&e, &xi) in excess.iter().zip(x) {
        if (xi - center).abs() <= half {
            s2 += e * (xi - mean).powi(2);
        }
    }
    CoreMoments { sum_excess: s0, mean, var: if s0 > 0.0 { s2 / s0 } else { 0.0 } }
}

/// Moment fit of the coincidence peak in `hist`.
///
/// With fewer than [`MIN_PAIRS`] pairs the summary is still computed and is
/// returned inside [`CoincidenceError::InsufficientStatistics`].
pub fn fit_peak(hist: &CorrelationHistogram) -> Result<CoincidenceSummary> {
    let n = hist.counts.len();
    if n < 16 {
        return Err(CoincidenceError::InvalidConfig(format!("histogram has {n} bins, need at least 16")));
    }
    let bw = hist.bin_width_ps as f64;
    let x: Vec<f64> = (0..n).map(|i| hist.rel_center(i)).collect();
    let c: Vec<f64> = hist.counts.iter().map(|&v| v as f64).collect();

    let side = (n / 4).max(1);
    let background = (c[..side].iter().sum::<f64>() + c[n - side..].iter().sum::<f64>()) / (2 * side) as f64;
    let excess: Vec<f64> = c.iter().map(|v| v - background).collect();

    // Starting point from quantiles of the background-subtracted mass,
    // which the flat background cannot drag toward the window center.
    let total_excess: f64 = excess.iter().sum();
    let min_sd = bw.max(1.0) / 12f64.sqrt();
    let max_sd = n as f64 * bw / 6.0;
    let (mut mu, mut sd) = if total_excess > 0.0 {
        let q = |p: f64| quantile(&excess, &x, bw, p * total_excess);
        let (q1, med, q3) = (q(0.25), q(0.5), q(0.75));
        (med, ((q3 - q1) / 1.349).clamp(bw, max_sd))
    } else {
        (0.0, max_sd / 3.0)
    };

    for _ in 0..2 {
        let m = core_moments(&excess, &x, mu, 3.0 * sd);
        if m.sum_excess <= 0.0 || !(m.var > 0.0) {
            break;
        }
        mu = m.mean;
        sd = (m.var / TRUNCATED_VARIANCE_RATIO).sqrt().clamp(min_sd, max_sd);
    }

    let half = 3.0 * sd;
    let (mut core_sum, mut core_bins, mut excess_sum) = (0.0, 0usize, 0.0);
    for i in 0..n {
        if (x[i] - mu).abs() <= half {
            core_sum += c[i];
            excess_sum += excess[i];
            core_bins += 1;
        }
    }
    let pairs = excess_sum.max(0.0);
    let car = if background * core_bins as f64 >= 1.0 {
        Car::Finite(core_sum / core_bins as f64 / background)
    } else {
        Car::NoAccidentals
    };
    let width = std::f64::consts::SQRT_2 * sd;
    let predicted = delay_sd_one_way(&DirectionStats::new(width, pairs, car)).unwrap_or(f64::NAN);
    let summary = CoincidenceSummary {
        delay_ps: hist.center_ps as f64 + mu,
        width_sigma_ps: width,
        pairs,
        car,
        predicted_sd_ps: predicted,
    };
    if pairs < MIN_PAIRS {
        return Err(CoincidenceError::InsufficientStatistics(Box::new(summary)));
    }
    Ok(summary)
}

fn acquisition_slice<'a>(local: &'a [i64], remote: &'a [i64], n_remote: usize, span: i64) -> (&'a [i64], &'a [i64]) {
    let remote = &remote[..remote.len().min(n_remote)];
    let lo = remote[0] - span;
    let hi = remote[remote.len() - 1] + span;
    let a = local.partition_point(|&t| t < lo);
    let b = local.partition_point(|&t| t <= hi);
    (&local[a..b], remote)
}

/// Full pipeline: coarse acquisition, fine histogram, peak fit.
///
/// The fine histogram is re-centered on the fitted delay until the center
/// stops moving, so the result does not depend on where inside a coarse bin
/// the acquisition landed.
pub fn measure_delay(
    local: &TimeTagStream,
    remote: &TimeTagStream,
    config: &EngineConfig,
) -> Result<CoincidenceSummary> {
    Ok(measure_delay_with_histogram(local, remote, config)?.0)
}

/// [`measure_delay`] that also returns the final fine histogram.
pub fn measure_delay_with_histogram(
    local: &TimeTagStream,
    remote: &TimeTagStream,
    config: &EngineConfig,
) -> Result<(CoincidenceSummary, CorrelationHistogram)> {
    config.validate()?;
    if local.is_empty() {
        return Err(CoincidenceError::EmptyStream("local"));
    }
    if remote.is_empty() {
        return Err(CoincidenceError::EmptyStream("remote"));
    }
    let span = config.search_span_ps + config.coarse_bin_ps;
    let (l, r) = acquisition_slice(local.tags(), remote.tags(), config.acquire_remote_tags, span);
    if l.is_empty() {
        return Err(CoincidenceError::AcquisitionFailed { max: 0, mean: 0.0 });
    }
    let coarse = acquire_tags(l, r, config.search_span_ps, config.coarse_bin_ps)?;

    let mut center = coarse;
    let mut visited = vec![center];
    loop {
        let hist = refine_histogram(local, remote, center, config.window_ps, config.fine_bin_ps)?;
        let fit = fit_peak(&hist);
        let delay = match &fit {
            Ok(s) => s.delay_ps,
            Err(CoincidenceError::InsufficientStatistics(s)) => s.delay_ps,
            Err(_) => return fit.map(|s| (s, hist)),
        };
        let next = delay.round() as i64;
        let settled = next == center || visited.len() > config.max_recenter;
        if settled || (next - coarse).abs() > config.coarse_bin_ps + config.window_ps {
            return fit.map(|s| (s, hist));
        }
        if visited.contains(&next) {
            // two-cycle: settle on the smallest center of the cycle
            let pos = visited.iter().position(|&v| v == next).unwrap();
            let pick = *visited[pos..].iter().min().unwrap();
            let hist = refine_histogram(local, remote, pick, config.window_ps, config.fine_bin_ps)?;
            return fit_peak(&hist).map(|s| (s, hist));
        }
        visited.push(next);
        center = next;
    }
}

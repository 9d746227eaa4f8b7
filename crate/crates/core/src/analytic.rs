//! Closed-form timing precision model for cascaded two-way time transfer.
//!
//! Everything here is a pure function of a [`SegmentBudget`] or of measured
//! [`DirectionStats`]. Widths follow the coincidence-width convention used
//! throughout the crate: a Gaussian peak `exp(-t²/σ²)`, so a width `σ`
//! corresponds to a standard deviation of `σ/√2` and the one-way delay
//! estimate over `P` pairs carries a variance of `σ²/(2P)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Picoseconds per second.
pub const PS_PER_S: f64 = 1e12;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticError {
    #[error("standard deviation undefined: {0}")]
    UndefinedSd(&'static str),
    #[error("cascade needs at least one segment")]
    EmptyCascade,
    #[error("detected pair count {0:e} is out of representable range")]
    OutOfRange(f64),
    #[error("invalid segment budget: {0}")]
    InvalidBudget(String),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
}

pub type Result<T> = std::result::Result<T, AnalyticError>;

/// Which half of a segment's two-way exchange a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Pairs distributed by station k toward station k+1.
    Forward,
    /// Pairs distributed by station k+1 toward station k.
    Backward,
}

impl Direction {
    pub fn suffix(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

/// Physical parameters of one segment of the cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentBudget {
    /// Pairs emitted per measurement interval in each direction.
    pub pair_rate_per_interval: f64,
    /// End-to-end loss of the locally retained photon, detection included.
    pub idler_loss_db: f64,
    /// Non-fiber loss of the transmitted photon, detection included.
    pub signal_fixed_loss_db: f64,
    pub fiber_len_km: f64,
    pub atten_db_per_km: f64,
    /// Pairwise timing jitter, as a coincidence width.
    pub jitter_sigma_ps: f64,
    /// Residual dispersive broadening of the forward pairs after compensation.
    #[serde(default)]
    pub residual_dispersion_ps_f: f64,
    /// Residual dispersive broadening of the backward pairs after compensation.
    #[serde(default)]
    pub residual_dispersion_ps_b: f64,
    /// Accidental coincidences per interval.
    #[serde(default)]
    pub accidental_pairs_per_interval: f64,
    pub interval_s: f64,
    /// Fractional frequency difference between the segment's two clocks.
    #[serde(default)]
    pub skew: f64,
}

impl SegmentBudget {
    /// The parameters behind the distance sweep: 2.5e6 pairs per interval,
    /// 11 dB idler loss, 3 dB + 0.2 dB/km signal loss, 64 ps jitter.
    pub fn reference(fiber_len_km: f64) -> Self {
        SegmentBudget {
            pair_rate_per_interval: 2.5e6,
            idler_loss_db: 11.0,
            signal_fixed_loss_db: 3.0,
            fiber_len_km,
            atten_db_per_km: 0.2,
            jitter_sigma_ps: 64.0,
            residual_dispersion_ps_f: 0.0,
            residual_dispersion_ps_b: 0.0,
            accidental_pairs_per_interval: 0.0,
            interval_s: 10.0,
            skew: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("pair_rate_per_interval", self.pair_rate_per_interval),
            ("idler_loss_db", self.idler_loss_db),
            ("signal_fixed_loss_db", self.signal_fixed_loss_db),
            ("fiber_len_km", self.fiber_len_km),
            ("atten_db_per_km", self.atten_db_per_km),
            ("jitter_sigma_ps", self.jitter_sigma_ps),
            ("residual_dispersion_ps_f", self.residual_dispersion_ps_f),
            ("residual_dispersion_ps_b", self.residual_dispersion_ps_b),
            ("accidental_pairs_per_interval", self.accidental_pairs_per_interval),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(AnalyticError::InvalidBudget(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.interval_s > 0.0) || !self.interval_s.is_finite() {
            return Err(AnalyticError::InvalidBudget(format!("interval_s must be > 0, got {}", self.interval_s)));
        }
        if !self.skew.is_finite() {
            return Err(AnalyticError::InvalidBudget("skew must be finite".into()));
        }
        Ok(())
    }

    /// Total loss in dB between emission and a coincidence, for a given fiber length.
    pub fn total_loss_db(&self, fiber_len_km: f64) -> f64 {
        self.idler_loss_db + self.signal_fixed_loss_db + self.atten_db_per_km * fiber_len_km
    }

    /// Expected true (non-accidental) coincidences per interval.
    pub fn true_pairs(&self) -> f64 {
        true_pairs_at(self, self.fiber_len_km)
    }

    fn residual_dispersion(&self, direction: Direction) -> f64 {
        match direction {
            Direction::Forward => self.residual_dispersion_ps_f,
            Direction::Backward => self.residual_dispersion_ps_b,
        }
    }
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

fn true_pairs_at(budget: &SegmentBudget, fiber_len_km: f64) -> f64 {
    budget.pair_rate_per_interval * db_to_linear(budget.total_loss_db(fiber_len_km))
}

/// Coincidence-to-accidental ratio, with an explicit marker for the
/// background-free limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "f64", into = "f64")]
pub enum Car {
    Finite(f64),
    NoAccidentals,
}

impl Car {
    /// `1/CAR`, zero in the background-free limit.
    pub fn reciprocal(self) -> f64 {
        match self {
            Car::Finite(c) => 1.0 / c,
            Car::NoAccidentals => 0.0,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Car::Finite(c) => c,
            Car::NoAccidentals => f64::INFINITY,
        }
    }

    pub fn from_value(v: f64) -> Car {
        if v.is_infinite() && v > 0.0 {
            Car::NoAccidentals
        } else {
            Car::Finite(v)
        }
    }
}

impl From<f64> for Car {
    fn from(v: f64) -> Car {
        Car::from_value(v)
    }
}

impl From<Car> for f64 {
    fn from(c: Car) -> f64 {
        c.value()
    }
}

impl std::fmt::Display for Car {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Car::Finite(c) => write!(f, "{c}"),
            Car::NoAccidentals => f.write_str("inf"),
        }
    }
}

/// Width, pair count and CAR of one direction's coincidence peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionStats {
    pub width_ps: f64,
    pub pairs: f64,
    pub car: Car,
}

impl DirectionStats {
    pub fn new(width_ps: f64, pairs: f64, car: Car) -> Self {
        DirectionStats { width_ps, pairs, car }
    }
}

/// Per-segment and end-to-end offset standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SdPrediction {
    pub per_segment_sd_ps: Vec<f64>,
    pub total_sd_ps: f64,
}

/// Expected detected coincidences per interval, accidentals included.
pub fn detected_pairs(budget: &SegmentBudget, _direction: Direction) -> f64 {
    budget.true_pairs() + budget.accidental_pairs_per_interval
}

pub fn car_of(budget: &SegmentBudget, direction: Direction) -> Car {
    let accidentals = budget.accidental_pairs_per_interval;
    if accidentals > 0.0 {
        Car::Finite((detected_pairs(budget, direction) - accidentals) / accidentals)
    } else {
        Car::NoAccidentals
    }
}

/// Coincidence width from residual dispersion, detector jitter and the
/// clock-skew walk-off accumulated over one interval.
pub fn coincidence_width(budget: &SegmentBudget, direction: Direction) -> f64 {
    let dispersion = budget.residual_dispersion(direction);
    let clock = budget.skew * budget.interval_s * PS_PER_S;
    (dispersion * dispersion + budget.jitter_sigma_ps * budget.jitter_sigma_ps + clock * clock).sqrt()
}

/// Standard deviation of one measured transmission delay.
pub fn delay_sd_one_way(stats: &DirectionStats) -> Result<f64> {
    if !(stats.pairs > 0.0) {
        return Err(AnalyticError::UndefinedSd("pair count must be positive"));
    }
    let inv_car = stats.car.reciprocal();
    if !(inv_car >= 0.0) || inv_car.is_infinite() {
        return Err(AnalyticError::UndefinedSd("CAR must be positive"));
    }
    if !(stats.width_ps >= 0.0) {
        return Err(AnalyticError::UndefinedSd("width must be non-negative"));
    }
    Ok(stats.width_ps / (2.0 * stats.pairs / (1.0 + inv_car)).sqrt())
}

/// Standard deviation of a segment's two-way offset from its two directions.
pub fn segment_offset_sd(fwd: &DirectionStats, bwd: &DirectionStats) -> Result<f64> {
    let f = delay_sd_one_way(fwd)?;
    let b = delay_sd_one_way(bwd)?;
    Ok(0.5 * f.hypot(b))
}

/// Quadrature sum over mutually independent segments.
pub fn cascade_sd(segments: &[f64]) -> Result<SdPrediction> {
    if segments.is_empty() {
        return Err(AnalyticError::EmptyCascade);
    }
    let total = segments.iter().map(|s| s * s).sum::<f64>().sqrt();
    Ok(SdPrediction { per_segment_sd_ps: segments.to_vec(), total_sd_ps: total })
}

fn single_segment_variance(budget: &SegmentBudget, true_pairs: f64) -> Result<f64> {
    if budget.pair_rate_per_interval <= 0.0 {
        return Err(AnalyticError::UndefinedSd("no pairs are emitted"));
    }
    if !(true_pairs > f64::MIN_POSITIVE) || !true_pairs.is_finite() {
        return Err(AnalyticError::OutOfRange(true_pairs));
    }
    let wf = coincidence_width(budget, Direction::Forward);
    let wb = coincidence_width(budget, Direction::Backward);
    Ok(0.25 * (wf * wf + wb * wb) / (2.0 * true_pairs))
}

/// SD of `n_segments` identical cascaded segments, background-free limit.
pub fn uniform_cascade_sd(n_segments: usize, budget: &SegmentBudget) -> Result<f64> {
    if n_segments == 0 {
        return Err(AnalyticError::EmptyCascade);
    }
    let var = single_segment_variance(budget, budget.true_pairs())?;
    Ok((n_segments as f64).sqrt() * var.sqrt())
}

/// SD of a single segment spanning the whole distance without relays.
pub fn noncascaded_sd(total_len_km: f64, budget: &SegmentBudget) -> Result<f64> {
    if !(total_len_km >= 0.0) {
        return Err(AnalyticError::InvalidBudget(format!("total length must be >= 0, got {total_len_km}")));
    }
    let var = single_segment_variance(budget, true_pairs_at(budget, total_len_km))?;
    Ok(var.sqrt())
}

/// One row of the distance sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceRow {
    pub n_segments: usize,
    pub total_km: f64,
    pub sd_ps: f64,
}

/// Offset SD versus total distance for each cascade depth in `n_list`.
///
/// Each curve splits the total distance into equal segments. The
/// non-cascaded curve is the `n_segments = 1` curve and is always emitted
/// first, whether or not `n_list` contains 1.
pub fn sweep_distance(n_list: &[usize], budget: &SegmentBudget, km_grid: &[f64]) -> Result<Vec<DistanceRow>> {
    budget.validate()?;
    if n_list.contains(&0) {
        return Err(AnalyticError::InvalidSweep("segment counts must be >= 1".into()));
    }
    if km_grid.iter().any(|k| !(*k >= 0.0) || !k.is_finite()) {
        return Err(AnalyticError::InvalidSweep("distances must be finite and >= 0".into()));
    }
    if km_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(AnalyticError::InvalidSweep("distance grid must be non-decreasing".into()));
    }
    let mut depths = vec![1usize];
    depths.extend(n_list.iter().copied().filter(|&n| n != 1));

    let mut rows = Vec::with_capacity(depths.len() * km_grid.len());
    for &n in &depths {
        for &total_km in km_grid {
            let mut seg = budget.clone();
            seg.fiber_len_km = total_km / n as f64;
            rows.push(DistanceRow { n_segments: n, total_km, sd_ps: uniform_cascade_sd(n, &seg)? });
        }
    }
    Ok(rows)
}

/// How the CAR responds to skew broadening in [`sweep_skew`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CarModel {
    /// CAR and pair count stay at their zero-skew values.
    #[default]
    Frozen,
    /// CAR scales as `σ₀/σ(Δu)`: a wider peak integrates more background.
    Degrading,
}

/// Measured forward/backward statistics of one segment at zero skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentStats {
    pub fwd: DirectionStats,
    pub bwd: DirectionStats,
}

impl SegmentStats {
    pub fn offset_sd(&self) -> Result<f64> {
        segment_offset_sd(&self.fwd, &self.bwd)
    }
}

/// The three-station CRC measurement: A↔R then R↔B.
pub fn measured_reference_stats() -> Vec<SegmentStats> {
    vec![
        SegmentStats {
            fwd: DirectionStats::new(74.90, 1258.0, Car::Finite(31.3)),
            bwd: DirectionStats::new(73.66, 857.0, Car::Finite(22.6)),
        },
        SegmentStats {
            fwd: DirectionStats::new(124.74, 373.0, Car::Finite(2.8)),
            bwd: DirectionStats::new(119.82, 940.0, Car::Finite(8.8)),
        },
    ]
}

/// One skew value of the skew sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkewRow {
    pub skew: f64,
    pub per_segment_sd_ps: Vec<f64>,
    pub total_sd_ps: f64,
}

fn broaden(stats: &DirectionStats, clock_ps: f64, model: CarModel) -> DirectionStats {
    let width = stats.width_ps.hypot(clock_ps);
    let car = match (model, stats.car) {
        (CarModel::Degrading, Car::Finite(c)) if width > 0.0 => Car::Finite(c * stats.width_ps / width),
        (_, car) => car,
    };
    DirectionStats { width_ps: width, pairs: stats.pairs, car }
}

/// Offset SDs versus clock skew, starting from zero-skew measured statistics.
pub fn sweep_skew(
    measured: &[SegmentStats],
    skew_grid: &[f64],
    interval_s: f64,
    model: CarModel,
) -> Result<Vec<SkewRow>> {
    if measured.is_empty() {
        return Err(AnalyticError::EmptyCascade);
    }
    if !(interval_s > 0.0) {
        return Err(AnalyticError::InvalidSweep("interval must be > 0".into()));
    }
    skew_grid
        .iter()
        .map(|&skew| {
            let clock_ps = skew * interval_s * PS_PER_S;
            let per_segment = measured
                .iter()
                .map(|s| segment_offset_sd(&broaden(&s.fwd, clock_ps, model), &broaden(&s.bwd, clock_ps, model)))
                .collect::<Result<Vec<_>>>()?;
            let total = cascade_sd(&per_segment)?.total_sd_ps;
            Ok(SkewRow { skew, per_segment_sd_ps: per_segment, total_sd_ps: total })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn detected_pairs_examples() {
        let b = SegmentBudget::reference(100.0);
        assert!((detected_pairs(&b, Direction::Forward) - 995.4).abs() < 0.5);
        let b50 = SegmentBudget::reference(50.0);
        assert!((detected_pairs(&b50, Direction::Backward) - 9954.0).abs() < 5.0);
        let mut off = SegmentBudget::reference(100.0);
        off.pair_rate_per_interval = 0.0;
        off.accidental_pairs_per_interval = 7.0;
        assert_eq!(detected_pairs(&off, Direction::Forward), 7.0);
    }

    #[test]
    fn car_examples() {
        let mut b = SegmentBudget::reference(100.0);
        b.accidental_pairs_per_interval = 10.0;
        let Car::Finite(c) = car_of(&b, Direction::Forward) else { panic!("expected finite CAR") };
        assert!((c - 99.54).abs() < 0.05, "{c}");

        b.pair_rate_per_interval = 0.0;
        assert_eq!(car_of(&b, Direction::Forward), Car::Finite(0.0));

        let clean = SegmentBudget::reference(100.0);
        assert_eq!(car_of(&clean, Direction::Forward), Car::NoAccidentals);
        assert_eq!(car_of(&clean, Direction::Forward).reciprocal(), 0.0);
    }

    #[test]
    fn width_examples() {
        let mut b = SegmentBudget::reference(100.0);
        assert_eq!(coincidence_width(&b, Direction::Forward), 64.0);
        b.skew = 1.9e-11;
        assert!((coincidence_width(&b, Direction::Forward) - 200.5).abs() < 0.05);
        b.skew = 0.0;
        b.residual_dispersion_ps_f = 39.0;
        assert!((coincidence_width(&b, Direction::Forward) - 74.9).abs() < 0.05);
        assert_eq!(coincidence_width(&b, Direction::Backward), 64.0);
    }

    #[test]
    fn one_way_examples() {
        let clean = DirectionStats::new(64.0, 995.0, Car::NoAccidentals);
        assert!((delay_sd_one_way(&clean).unwrap() - 64.0 / 1990f64.sqrt()).abs() < 1e-12);
        assert!((delay_sd_one_way(&clean).unwrap() - 1.435).abs() < 5e-4);
        let ar = DirectionStats::new(74.90, 1258.0, Car::Finite(31.3));
        assert!((delay_sd_one_way(&ar).unwrap() - 1.517).abs() < 5e-4);
        let empty = DirectionStats::new(64.0, 0.0, Car::NoAccidentals);
        assert!(matches!(delay_sd_one_way(&empty), Err(AnalyticError::UndefinedSd(_))));
    }

    #[test]
    fn measured_segment_sds() {
        let stats = measured_reference_stats();
        assert!((stats[0].offset_sd().unwrap() - 1.18).abs() < 0.01);
        // Evaluates to 3.034 ps; the quoted 3.00 ps is 1.1% lower.
        assert!((stats[1].offset_sd().unwrap() - 3.00).abs() < 0.05);
        let sym = DirectionStats::new(64.0, 995.0, Car::NoAccidentals);
        assert!((segment_offset_sd(&sym, &sym).unwrap() - 1.014).abs() < 1e-3);
    }

    #[test]
    fn cascade_examples() {
        assert!((cascade_sd(&[1.18, 3.00]).unwrap().total_sd_ps - 3.22).abs() < 0.005);
        assert_eq!(cascade_sd(&[2.5]).unwrap().total_sd_ps, 2.5);
        assert!((cascade_sd(&[1.014; 10]).unwrap().total_sd_ps - 3.21).abs() < 0.005);
        assert_eq!(cascade_sd(&[]), Err(AnalyticError::EmptyCascade));
    }

    #[test]
    fn distance_anchor_points() {
        let b100 = SegmentBudget::reference(100.0);
        let b50 = SegmentBudget::reference(50.0);
        assert!(rel(uniform_cascade_sd(1, &b100).unwrap(), 1.01) < 0.01);
        assert!(rel(uniform_cascade_sd(10, &b100).unwrap(), 3.21) < 0.01);
        assert!(rel(uniform_cascade_sd(1, &b50).unwrap(), 0.32) < 0.01);
        assert!(rel(uniform_cascade_sd(20, &b50).unwrap(), 1.43) < 0.01);
    }

    #[test]
    fn noncascaded_examples() {
        let b = SegmentBudget::reference(100.0);
        assert_eq!(noncascaded_sd(100.0, &b).unwrap(), uniform_cascade_sd(1, &b).unwrap());
        let at_200 = noncascaded_sd(200.0, &b).unwrap();
        assert!(rel(at_200, 10.0 * uniform_cascade_sd(1, &b).unwrap()) < 1e-9);
        assert!((at_200 - 10.14).abs() < 0.01);
        assert!(matches!(noncascaded_sd(1e6, &b), Err(AnalyticError::OutOfRange(_))));
        assert!(noncascaded_sd(-1.0, &b).is_err());
    }

    #[test]
    fn zero_pairs_is_an_error() {
        let mut b = SegmentBudget::reference(100.0);
        b.pair_rate_per_interval = 0.0;
        assert!(uniform_cascade_sd(1, &b).is_err());
        assert!(uniform_cascade_sd(0, &SegmentBudget::reference(1.0)).is_err());
    }

    #[test]
    fn distance_sweep_rows() {
        let b = SegmentBudget::reference(0.0);
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 * 10.0).collect();
        let rows = sweep_distance(&[2, 10], &b, &grid).unwrap();
        assert_eq!(rows.len(), 3 * grid.len());
        let at = |n: usize, km: f64| rows.iter().find(|r| r.n_segments == n && r.total_km == km).unwrap().sd_ps;
        assert!(rel(at(10, 1000.0), 3.21) < 0.01);
        assert!((at(1, 0.0) - 0.1014).abs() < 1e-4);
        assert!(rel(at(1, 100.0), 1.01) < 0.01);
        for n in [1, 2, 10] {
            let curve: Vec<f64> = rows.iter().filter(|r| r.n_segments == n).map(|r| r.sd_ps).collect();
            assert!(curve.windows(2).all(|w| w[1] >= w[0]));
        }
        assert!(sweep_distance(&[1], &b, &[]).unwrap().is_empty());
        assert!(sweep_distance(&[1], &b, &[10.0, 5.0]).is_err());
        assert!(sweep_distance(&[0], &b, &[10.0]).is_err());
    }

    #[test]
    fn skew_sweep_reconstruction() {
        let stats = measured_reference_stats();
        let rows = sweep_skew(&stats, &[0.0, 1.9e-11, 3.26e-11, 35.1e-12], 10.0, CarModel::Frozen).unwrap();
        assert!((rows[0].total_sd_ps - 3.26).abs() < 0.06);
        assert!((rows[1].total_sd_ps - 6.44).abs() < 0.05);
        assert!(rows[2].total_sd_ps >= 10.0);
        assert!((rows[3].total_sd_ps - 10.7).abs() < 0.15);
        assert_eq!(rows[0].per_segment_sd_ps.len(), 2);
    }

    #[test]
    fn degrading_car_is_worse_than_frozen() {
        let stats = measured_reference_stats();
        let frozen = sweep_skew(&stats, &[2e-11], 10.0, CarModel::Frozen).unwrap();
        let degrading = sweep_skew(&stats, &[2e-11], 10.0, CarModel::Degrading).unwrap();
        assert!(degrading[0].total_sd_ps > frozen[0].total_sd_ps);
        let zero = sweep_skew(&stats, &[0.0], 10.0, CarModel::Degrading).unwrap();
        assert_eq!(zero[0].total_sd_ps, sweep_skew(&stats, &[0.0], 10.0, CarModel::Frozen).unwrap()[0].total_sd_ps);
    }

    #[test]
    fn budget_validation() {
        let mut b = SegmentBudget::reference(100.0);
        assert!(b.validate().is_ok());
        b.idler_loss_db = -1.0;
        assert!(b.validate().is_err());
        let mut b = SegmentBudget::reference(100.0);
        b.interval_s = 0.0;
        assert!(b.validate().is_err());
    }
}

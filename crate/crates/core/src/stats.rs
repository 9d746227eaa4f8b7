//! Post-processing of offset time series: sample SD, time deviation and
//! polynomial drift fits.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} samples, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("polynomial degree must be 1 or 2, got {0}")]
    InvalidDegree(usize),
    #[error("abscissae are degenerate for a degree-{0} fit")]
    RankDeficient(usize),
    #[error("sampling interval must be positive, got {0}")]
    InvalidInterval(f64),
    #[error("abscissa and ordinate lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Uniformly sampled phase offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetSeries {
    pub tau0_s: f64,
    pub values_ps: Vec<f64>,
}

impl OffsetSeries {
    pub fn new(tau0_s: f64, values_ps: Vec<f64>) -> Result<Self> {
        if !(tau0_s > 0.0) || !tau0_s.is_finite() {
            return Err(StatsError::InvalidInterval(tau0_s));
        }
        Ok(OffsetSeries { tau0_s, values_ps })
    }

    pub fn len(&self) -> usize {
        self.values_ps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values_ps.is_empty()
    }

    pub fn times_s(&self) -> Vec<f64> {
        (0..self.len()).map(|i| i as f64 * self.tau0_s).collect()
    }

    pub fn demeaned(&self) -> OffsetSeries {
        let m = mean(&self.values_ps);
        OffsetSeries { tau0_s: self.tau0_s, values_ps: self.values_ps.iter().map(|v| v - m).collect() }
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn mean(xs: &[f64]) -> f64 {
    let mut s = CompensatedSum::default();
    xs.iter().for_each(|&x| s.add(x));
    s.value() / xs.len() as f64
}

/// Unbiased standard deviation.
pub fn sample_sd(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(StatsError::TooShort { need: 2, got: values.len() });
    }
    let m = mean(values);
    let mut s = CompensatedSum::default();
    values.iter().for_each(|&x| s.add((x - m) * (x - m)));
    Ok((s.value() / (values.len() - 1) as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdevPoint {
    pub tau_s: f64,
    pub tdev_ps: f64,
    pub n_terms: usize,
}

/// Averaging factors `1, 2, 4, …` up to a quarter of the series length.
pub fn octave_grid(n: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |m| m.checked_mul(2)).take_while(|&m| m <= n / 4).collect()
}

/// Overlapping time deviation at each averaging factor in `m_list`.
///
/// Factors with fewer than `3m + 1` samples available are skipped with a
/// warning.
pub fn tdev(series: &OffsetSeries, m_list: &[usize]) -> Vec<TdevPoint> {
    let x = &series.values_ps;
    let n = x.len();
    let mut out = Vec::with_capacity(m_list.len());
    for &m in m_list {
        if m == 0 || n < 3 * m + 1 {
            log::warn!("tdev: skipping m = {m}, series of {n} samples needs at least {}", 3 * m + 1);
            continue;
        }
        // second differences, then their length-m moving sums via a
        // compensated prefix
        let d: Vec<f64> = (0..n - 2 * m).map(|j| x[j + 2 * m] - 2.0 * x[j + m] + x[j]).collect();
        let mut prefix = Vec::with_capacity(d.len() + 1);
        let mut acc = CompensatedSum::default();
        prefix.push(acc);
        for &v in &d {
            acc.add(v);
            prefix.push(acc);
        }
        let n_terms = n - 3 * m + 1;
        let mut sq = CompensatedSum::default();
        for i in 0..n_terms {
            let (a, b) = (prefix[i + m], prefix[i]);
            let s = (a.sum - b.sum) + (a.comp - b.comp);
            sq.add(s * s);
        }
        let var = sq.value() / (6.0 * (m * m) as f64 * n_terms as f64);
        out.push(TdevPoint { tau_s: m as f64 * series.tau0_s, tdev_ps: var.max(0.0).sqrt(), n_terms });
    }
    out
}

/// Least-squares polynomial fit, coefficients in ascending powers of time.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub residual_sd: f64,
}

impl DriftFit {
    /// Linear coefficient, in ordinate units per abscissa unit.
    pub fn slope(&self) -> f64 {
        self.coefficients[1]
    }

    pub fn slope_std_error(&self) -> f64 {
        self.std_errors[1]
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Fit `y ≈ Σ cᵢ tⁱ` for degree 1 or 2.
///
/// The regression runs on centered, scaled abscissae and centered ordinates
/// for conditioning; coefficients and covariance are mapped back afterwards.
pub fn fit_drift(t: &[f64], y: &[f64], degree: usize) -> Result<DriftFit> {
    if !(1..=2).contains(&degree) {
        return Err(StatsError::InvalidDegree(degree));
    }
    if t.len() != y.len() {
        return Err(StatsError::LengthMismatch(t.len(), y.len()));
    }
    let n = t.len();
    let p = degree + 1;
    if n <= p {
        return Err(StatsError::TooShort { need: p + 1, got: n });
    }
    let center = mean(t);
    let half_range = t.iter().map(|v| (v - center).abs()).fold(0.0, f64::max);
    if !(half_range > 0.0) {
        return Err(StatsError::RankDeficient(degree));
    }
    let a = DMatrix::from_fn(n, p, |i, j| ((t[i] - center) / half_range).powi(j as i32));
    let y_mean = mean(y);
    let yv = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let qr = a.clone().qr();
    let r = qr.r();
    let rmax = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * rmax) {
        return Err(StatsError::RankDeficient(degree));
    }
    let qty = qr.q().transpose() * &yv;
    let coef_u = r.solve_upper_triangular(&qty).ok_or(StatsError::RankDeficient(degree))?;
    let resid = &yv - &a * &coef_u;
    let rss = resid.norm_squared();
    let sigma2 = rss / (n - p) as f64;
    let r_inv = r.clone().try_inverse().ok_or(StatsError::RankDeficient(degree))?;
    let cov_u = &r_inv * r_inv.transpose() * sigma2;

    // y = Σ_j a_j ((t − c)/s)^j = Σ_i b_i t^i, with
    // b_i = Σ_{j≥i} a_j C(j,i) (−c)^{j−i} / s^j
    let transform = DMatrix::from_fn(p, p, |i, j| {
        if j < i {
            0.0
        } else {
            binomial(j, i) * (-center).powi((j - i) as i32) / half_range.powi(j as i32)
        }
    });
    let mut coef = &transform * coef_u;
    coef[0] += y_mean;
    let cov = &transform * cov_u * transform.transpose();
    Ok(DriftFit {
        coefficients: coef.iter().copied().collect(),
        std_errors: (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        residual_sd: sigma2.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn white(n: usize, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn sample_sd_examples() {
        assert_eq!(sample_sd(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((sample_sd(&[-1.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(sample_sd(&[1.0]).is_err());
    }

    #[test]
    fn tdev_of_constant_and_ramp_is_zero() {
        let s = OffsetSeries::new(10.0, vec![5.0; 64]).unwrap();
        assert!(tdev(&s, &octave_grid(64)).iter().all(|p| p.tdev_ps == 0.0));
        let ramp = OffsetSeries::new(10.0, (0..64).map(|i| 3.0 + 0.25 * i as f64).collect()).unwrap();
        assert!(tdev(&ramp, &octave_grid(64)).iter().all(|p| p.tdev_ps < 1e-12));
    }

    #[test]
    fn tdev_white_pm() {
        let s = OffsetSeries::new(1.0, white(4096, 10.0, 1)).unwrap();
        let pts = tdev(&s, &[1]);
        assert!((pts[0].tdev_ps - 10.0).abs() < 1.0, "{}", pts[0].tdev_ps);
        assert_eq!(pts[0].n_terms, 4094);
    }

    #[test]
    fn tdev_skips_short() {
        let s = OffsetSeries::new(1.0, white(10, 1.0, 2)).unwrap();
        let pts = tdev(&s, &[1, 3, 4]);
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1].tau_s, 3.0);
    }

    #[test]
    fn octave_grid_bounds() {
        assert_eq!(octave_grid(4096).last(), Some(&1024));
        assert_eq!(octave_grid(16), vec![1, 2, 4]);
        assert!(octave_grid(3).is_empty());
    }

    #[test]
    fn line_fit() {
        let f = fit_drift(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0], 1).unwrap();
        assert!((f.slope() - 1.0).abs() < 1e-12);
        assert!(f.coefficients[0].abs() < 1e-12);
        assert!(f.slope_std_error() < 1e-12);
    }

    #[test]
    fn quadratic_fit_is_exact() {
        let t: Vec<f64> = (0..6).map(|i| 10.0 * i as f64).collect();
        let y: Vec<f64> = t.iter().map(|t| 2.0 - 0.5 * t + 3e-3 * t * t).collect();
        let f = fit_drift(&t, &y, 2).unwrap();
        for (got, want) in f.coefficients.iter().zip([2.0, -0.5, 3e-3]) {
            assert!(((got - want) / want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn degenerate_abscissae() {
        assert_eq!(fit_drift(&[1.0; 4], &[0.0, 1.0, 2.0, 3.0], 1), Err(StatsError::RankDeficient(1)));
        assert!(fit_drift(&[0.0, 1.0], &[0.0, 1.0], 1).is_err());
        assert!(fit_drift(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0], 3).is_err());
    }

    #[test]
    fn slope_error_matches_ols_formula() {
        let t: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let noise = white(100, 1.0, 3);
        let y: Vec<f64> = t.iter().zip(&noise).map(|(t, e)| 0.1 * t + e).collect();
        let f = fit_drift(&t, &y, 1).unwrap();
        let tm = mean(&t);
        let sxx: f64 = t.iter().map(|v| (v - tm).powi(2)).sum();
        let expect = f.residual_sd / sxx.sqrt();
        assert!(((f.slope_std_error() - expect) / expect).abs() < 1e-9);
    }
}

//! CSV emission and atomic file writes.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::analytic::{Car, DistanceRow, SkewRow};
use crate::cascade::{CampaignResult, ControllerLogRow};
use crate::coincidence::{CoincidenceError, CoincidenceSummary};
use crate::stats::TdevPoint;

/// Shortest round-trip decimal; scientific outside `[1e-3, 1e9)`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e9) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn fmt_car(c: Car) -> String {
    fmt_f64(c.value())
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp: PathBuf = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn distance_csv(rows: &[DistanceRow]) -> String {
    let mut s = String::from("n_segments,total_km,sd_ps\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.n_segments, fmt_f64(r.total_km), fmt_f64(r.sd_ps));
    }
    s
}

/// One row per segment plus a `total` row for every skew value.
pub fn skew_csv(rows: &[SkewRow]) -> String {
    let mut s = String::from("skew,segment,sd_ps\n");
    for r in rows {
        for (k, sd) in r.per_segment_sd_ps.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", fmt_f64(r.skew), k, fmt_f64(*sd));
        }
        let _ = writeln!(s, "{},total,{}", fmt_f64(r.skew), fmt_f64(r.total_sd_ps));
    }
    s
}

pub fn tdev_csv(points: &[TdevPoint]) -> String {
    let mut s = String::from("tau_s,tdev_ps,n_terms\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", fmt_f64(p.tau_s), fmt_f64(p.tdev_ps), p.n_terms);
    }
    s
}

pub fn campaign_header(n_segments: usize) -> String {
    let mut s = String::from("interval_index,t_s");
    for k in 0..n_segments {
        let _ = write!(s, ",seg{k}_offset_ps");
    }
    s.push_str(",total_offset_ps,total_sd_ps,flag\n");
    s
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-interval offsets. With `demean`, each column has the mean of its
/// valid entries removed.
pub fn campaign_csv(result: &CampaignResult, demean: bool) -> String {
    let n_seg = result.intervals.first().map_or(0, |r| r.segments.len());
    let seg_means: Vec<f64> = (0..n_seg)
        .map(|k| if demean { mean_of(result.segment_offsets(k).into_iter().map(|p| p.1)) } else { 0.0 })
        .collect();
    let total_mean = if demean { mean_of(result.total_offsets().into_iter().map(|p| p.1)) } else { 0.0 };
    let mut s = campaign_header(n_seg);
    for iv in &result.intervals {
        let _ = write!(s, "{},{}", iv.interval_index, fmt_f64(iv.t_s));
        for (k, m) in iv.segments.iter().enumerate() {
            let v = m.estimate.as_ref().map_or(f64::NAN, |e| e.offset_ps - seg_means[k]);
            let _ = write!(s, ",{}", fmt_f64(v));
        }
        let (total, sd) =
            iv.record.as_ref().map_or((f64::NAN, f64::NAN), |r| (r.total_offset_ps - total_mean, r.total_sd_ps));
        let _ = writeln!(s, ",{},{},{}", fmt_f64(total), fmt_f64(sd), iv.flag());
    }
    s
}

pub const MEASUREMENT_HEADER: &str = "interval_index,direction,delay_ps,sigma_ps,pairs,car,predicted_sd_ps\n";

/// One measurement row; failures without a fitted peak are all-NaN.
pub fn measurement_row(
    out: &mut String,
    interval: u64,
    direction: &str,
    r: &Result<CoincidenceSummary, CoincidenceError>,
) {
    let s = match r {
        Ok(s) => Some(s),
        Err(e) => e.summary(),
    };
    match s {
        Some(s) => {
            let _ = writeln!(
                out,
                "{interval},{direction},{},{},{},{},{}",
                fmt_f64(s.delay_ps),
                fmt_f64(s.width_sigma_ps),
                fmt_f64(s.pairs),
                fmt_car(s.car),
                fmt_f64(s.predicted_sd_ps)
            );
        }
        None => {
            let _ = writeln!(out, "{interval},{direction},NaN,NaN,NaN,NaN,NaN");
        }
    }
}

pub fn measurements_csv(result: &CampaignResult) -> String {
    let mut s = String::from(MEASUREMENT_HEADER);
    for iv in &result.intervals {
        for (k, m) in iv.segments.iter().enumerate() {
            measurement_row(&mut s, iv.interval_index, &format!("seg{k}_fwd"), &m.fwd);
            measurement_row(&mut s, iv.interval_index, &format!("seg{k}_bwd"), &m.bwd);
        }
    }
    s
}

/// Controller log. Chains with several relays log one row per relay per
/// epoch, in station order.
pub fn controller_csv(rows: &[ControllerLogRow]) -> String {
    let mut s = String::from("epoch,estimated_skew,trim_applied,effective_skew\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.epoch,
            fmt_f64(r.estimated_skew),
            fmt_f64(r.trim_applied),
            fmt_f64(r.effective_skew)
        );
    }
    s
}

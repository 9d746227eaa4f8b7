//! Command implementations behind the `chronoq` binary.

pub mod config;
pub mod manifest;
pub mod output;

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::analytic::{cascade_sd, sweep_distance, sweep_skew, uniform_cascade_sd, AnalyticError};
use crate::cascade::{run_campaign, CampaignResult, TagSink};
use crate::coincidence::{measure_delay_with_histogram, EngineConfig};
use crate::stats::{fit_drift, octave_grid, sample_sd, tdev, OffsetSeries};
use crate::timetag::io::{read_binary, read_csv, write_binary, write_csv, CSV_HEADER};
use crate::timetag::TimeTagStream;

use config::{ConfigError, ExperimentConfig, SweepKind, TagFormat};
use manifest::{RunManifest, MANIFEST_NAME};
use output::{fmt_f64, write_atomic};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "CHRONOQ_THREADS";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("{0}")]
    Runtime(String),
}

impl RunnerError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Usage(_) | RunnerError::Config(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

pub type Result<T> = std::result::Result<T, RunnerError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io { path: path.to_path_buf(), source }
}

/// Worker count requested through [`THREADS_ENV`], if any.
pub fn threads_from_env() -> std::result::Result<Option<usize>, RunnerError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(RunnerError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::from_toml_str("")?),
        Some(p) => {
            // an unreadable config is the caller's mistake, not a runtime failure
            let unreadable = |e: std::io::Error| RunnerError::Usage(format!("{}: {e}", p.display()));
            if p.extension().is_some_and(|e| e == "json") {
                let m = RunManifest::read(p).map_err(unreadable)?;
                return Ok(ExperimentConfig::from_toml_str(&m.config)?);
            }
            let text = fs::read_to_string(p).map_err(unreadable)?;
            Ok(ExperimentConfig::from_toml_str(&text)?)
        }
    }
}

struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Outputs { dir, written: Vec::new() })
    }

    fn put(&mut self, rel: &str, content: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        write_atomic(&path, content).map_err(io_err(&path))?;
        self.written.push(rel.to_string());
        Ok(())
    }

    fn finish(self, command: &str, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
        let mut m = RunManifest::new(command, cfg.seed, cfg.to_toml_string());
        m.record(self.dir, &self.written).map_err(io_err(self.dir))?;
        m.write(self.dir).map_err(io_err(self.dir))?;
        let mut paths: Vec<PathBuf> = self.written.iter().map(|r| self.dir.join(r)).collect();
        paths.push(self.dir.join(MANIFEST_NAME));
        Ok(paths)
    }
}

fn distance_plot_script(n_list: &[usize]) -> String {
    let mut depths = vec![1usize];
    depths.extend(n_list.iter().copied().filter(|&n| n != 1));
    let names: Vec<String> = depths.iter().map(|n| n.to_string()).collect();
    format!(
        "set datafile separator ','\nset key autotitle columnhead\nset logscale y\n\
         set xlabel 'total distance (km)'\nset ylabel 'offset SD (ps)'\n\
         plot for [n in \"{}\"] 'distance_sweep.csv' using 2:(strcol(1) eq n ? $3 : 1/0) with lines title 'N = '.n\n",
        names.join(" ")
    )
}

fn skew_plot_script() -> String {
    "set datafile separator ','\nset xlabel 'clock skew'\nset ylabel 'offset SD (ps)'\n\
     plot 'skew_sweep.csv' using 1:(strcol(2) eq 'total' ? $3 : 1/0) with linespoints title 'total'\n"
        .to_string()
}

fn analytic_err(e: AnalyticError) -> RunnerError {
    match e {
        AnalyticError::InvalidSweep(_) | AnalyticError::InvalidBudget(_) => RunnerError::Usage(e.to_string()),
        _ => RunnerError::Runtime(e.to_string()),
    }
}

/// Analytic sweeps: distance sweep from the first segment's budget and skew
/// sweep from the configured zero-skew statistics.
pub fn cmd_predict(cfg: &ExperimentConfig, out_dir: &Path, sweep: Option<SweepKind>) -> Result<Vec<PathBuf>> {
    let sweep = sweep.unwrap_or(cfg.predict.sweep);
    let p = &cfg.predict;
    let mut out = Outputs::new(out_dir)?;
    if matches!(sweep, SweepKind::Distance | SweepKind::Both) {
        let budget = cfg.budgets()[0].clone();
        let rows = sweep_distance(&p.n_list, &budget, &p.km_grid).map_err(analytic_err)?;
        out.put("distance_sweep.csv", output::distance_csv(&rows).as_bytes())?;
        if cfg.output.plot_script {
            out.put("distance_sweep.gp", distance_plot_script(&p.n_list).as_bytes())?;
        }
    }
    if matches!(sweep, SweepKind::Skew | SweepKind::Both) {
        let rows = if p.skew_grid.is_empty() {
            Vec::new()
        } else {
            sweep_skew(&p.measured, &p.skew_grid, p.skew_interval_s, p.car_model).map_err(analytic_err)?
        };
        out.put("skew_sweep.csv", output::skew_csv(&rows).as_bytes())?;
        if cfg.output.plot_script {
            out.put("skew_sweep.gp", skew_plot_script().as_bytes())?;
        }
    }
    out.finish("predict", cfg)
}

pub fn tag_file_name(interval: u64, segment: usize, format: TagFormat) -> String {
    format!("interval_{interval:06}_seg{segment}.{}", format.extension())
}

fn parse_tag_file_name(name: &str) -> Option<(u64, usize)> {
    let stem = name.strip_prefix("interval_")?;
    let (stem, _ext) = stem.rsplit_once('.')?;
    let (i, k) = stem.split_once("_seg")?;
    Some((i.parse().ok()?, k.parse().ok()?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateReport {
    pub paths: Vec<PathBuf>,
    pub n_intervals: usize,
    pub n_flagged: usize,
    pub total_sd_ps: Option<f64>,
    pub predicted_sd_ps: Option<f64>,
}

/// Background-free prediction of the total offset SD for the configured
/// chain, ignoring clock skew.
pub fn predicted_total_sd(cfg: &ExperimentConfig) -> Option<f64> {
    let per: Vec<f64> =
        cfg.budgets().iter().map(|b| uniform_cascade_sd(1, b)).collect::<std::result::Result<_, _>>().ok()?;
    cascade_sd(&per).ok().map(|p| p.total_sd_ps)
}

pub fn run_simulation(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<CampaignResult> {
    let campaign = cfg.campaign();
    let format = cfg.output.tag_format;
    let tag_dir = out_dir.map(|d| d.join("tags"));
    if let (true, Some(dir)) = (cfg.output.write_tags, &tag_dir) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let sink = |interval: u64, segment: usize, s: &crate::timetag::SegmentStreams| -> std::io::Result<()> {
        let dir = tag_dir.as_ref().expect("tag sink only installed with an output dir");
        let streams: Vec<TimeTagStream> = s
            .clone()
            .into_vec()
            .into_iter()
            .map(|mut st| {
                st.channel_id += 4 * segment as u8;
                st
            })
            .collect();
        let mut buf = Vec::new();
        match format {
            TagFormat::Csv => write_csv(&streams, &mut buf)?,
            TagFormat::Binary => write_binary(&streams, &mut buf).map_err(|e| std::io::Error::other(e.to_string()))?,
        }
        write_atomic(&dir.join(tag_file_name(interval, segment, format)), &buf)
    };
    let sink_ref: Option<&TagSink> = if cfg.output.write_tags && out_dir.is_some() { Some(&sink) } else { None };
    if cfg.segments.len() * 4 > 256 {
        return Err(RunnerError::Usage("tag files support at most 64 segments".into()));
    }
    run_campaign(&campaign, sink_ref).map_err(|e| RunnerError::Runtime(e.to_string()))
}

/// Full pipeline run plus CSV outputs and manifest.
pub fn cmd_simulate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SimulateReport> {
    let mut out = Outputs::new(out_dir)?;
    let result = run_simulation(cfg, Some(out_dir))?;
    if cfg.output.write_tags {
        let n_seg = cfg.segments.len();
        for iv in &result.intervals {
            for k in 0..n_seg {
                out.written.push(format!("tags/{}", tag_file_name(iv.interval_index, k, cfg.output.tag_format)));
            }
        }
    }
    out.put("campaign.csv", output::campaign_csv(&result, cfg.output.demean).as_bytes())?;
    out.put("campaign_raw.csv", output::campaign_csv(&result, false).as_bytes())?;
    out.put("measurements.csv", output::measurements_csv(&result).as_bytes())?;
    out.put("controller.csv", output::controller_csv(&result.controller_log).as_bytes())?;
    let n_flagged = result.intervals.iter().filter(|r| r.record.is_none()).count();
    let totals: Vec<f64> = result.total_offsets().into_iter().map(|p| p.1).collect();
    let paths = out.finish("simulate", cfg)?;
    Ok(SimulateReport {
        paths,
        n_intervals: result.intervals.len(),
        n_flagged,
        total_sd_ps: sample_sd(&totals).ok(),
        predicted_sd_ps: predicted_total_sd(cfg),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnalyzeOptions {
    /// Write a de-meaned copy of campaign inputs.
    pub demean: bool,
    /// Polynomial degree of the drift fit.
    pub drift_degree: usize,
    /// Campaign column for the TDEV; the total offset by default.
    pub tdev_column: Option<String>,
    /// Dump every fine histogram of re-measured tag files.
    pub histograms: bool,
}

enum Input {
    Tags(PathBuf),
    Campaign(PathBuf),
}

fn classify(path: &Path) -> Result<Input> {
    if path.extension().is_some_and(|e| e == "bin") {
        return Ok(Input::Tags(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let header = text.lines().next().unwrap_or("");
    if header == CSV_HEADER {
        Ok(Input::Tags(path.to_path_buf()))
    } else if header.starts_with("interval_index,t_s,") {
        Ok(Input::Campaign(path.to_path_buf()))
    } else {
        Err(RunnerError::Parse { path: path.to_path_buf(), msg: format!("line 1: unrecognized header `{header}`") })
    }
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<(Vec<Input>, Option<PathBuf>)> {
    let mut out = Vec::new();
    let mut manifest = None;
    for p in inputs {
        if p.is_dir() {
            if p.join(MANIFEST_NAME).is_file() && manifest.is_none() {
                manifest = Some(p.join(MANIFEST_NAME));
            }
            let campaign = p.join("campaign_raw.csv");
            if campaign.is_file() {
                out.push(Input::Campaign(campaign));
            }
            let tag_dir = if p.join("tags").is_dir() { p.join("tags") } else { p.clone() };
            let mut files: Vec<PathBuf> = fs::read_dir(&tag_dir)
                .map_err(io_err(&tag_dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.file_name().and_then(|n| n.to_str()).and_then(parse_tag_file_name).is_some())
                .collect();
            files.sort();
            out.extend(files.into_iter().map(Input::Tags));
        } else {
            if manifest.is_none() {
                for anc in p.ancestors().skip(1).take(2) {
                    if anc.join(MANIFEST_NAME).is_file() {
                        manifest = Some(anc.join(MANIFEST_NAME));
                        break;
                    }
                }
            }
            out.push(classify(p)?);
        }
    }
    Ok((out, manifest))
}

fn read_tags(path: &Path) -> Result<Vec<TimeTagStream>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let parsed = if path.extension().is_some_and(|e| e == "bin") {
        read_binary(BufReader::new(f))
    } else {
        read_csv(BufReader::new(f))
    };
    parsed.map_err(|e| RunnerError::Parse { path: path.to_path_buf(), msg: e.to_string() })
}

fn segment_engine(cfg: &ExperimentConfig, segment: usize) -> EngineConfig {
    let base = cfg.engine.engine();
    let len = cfg.segments.get(segment).map_or(0.0, |s| s.fiber_len_km);
    let span = cfg.engine.search_span_ps.unwrap_or_else(|| base.span_for_fiber(len, cfg.delay_ps_per_km));
    EngineConfig { search_span_ps: span, ..base }
}

struct CampaignColumns {
    names: Vec<String>,
    t_s: Vec<f64>,
    columns: Vec<Vec<f64>>,
    raw_lines: Vec<String>,
    header: String,
}

fn read_campaign(path: &Path) -> Result<CampaignColumns> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").to_string();
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() < 5 || fields[0] != "interval_index" || fields[1] != "t_s" || fields[fields.len() - 1] != "flag" {
        return Err(RunnerError::Parse { path: path.into(), msg: "line 1: not a campaign CSV header".into() });
    }
    let names: Vec<String> = fields[2..fields.len() - 1].iter().map(|s| s.to_string()).collect();
    let mut cols = vec![Vec::new(); names.len()];
    let mut t_s = Vec::new();
    let mut raw_lines = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |msg: String| RunnerError::Parse { path: path.into(), msg: format!("line {}: {msg}", i + 2) };
        if f.len() != fields.len() {
            return Err(bad(format!("expected {} fields, found {}", fields.len(), f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        t_s.push(num(f[1])?);
        for (c, col) in cols.iter_mut().enumerate() {
            col.push(num(f[2 + c])?);
        }
        raw_lines.push(line.to_string());
    }
    Ok(CampaignColumns { names, t_s, columns: cols, raw_lines, header })
}

fn demeaned_campaign(c: &CampaignColumns) -> String {
    let means: Vec<f64> = c
        .columns
        .iter()
        .map(|col| {
            let v: Vec<f64> = col.iter().copied().filter(|x| x.is_finite()).collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .collect();
    let n_off = c.names.len() - 1; // total_sd_ps is not an offset
    let mut s = c.header.clone();
    s.push('\n');
    for (r, line) in c.raw_lines.iter().enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let mut row: Vec<String> = vec![f[0].to_string(), f[1].to_string()];
        for (k, col) in c.columns.iter().enumerate() {
            row.push(if k < n_off { fmt_f64(col[r] - means[k]) } else { f[2 + k].to_string() });
        }
        row.push(f[f.len() - 1].to_string());
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn analyze_campaign(c: &CampaignColumns, opts: &AnalyzeOptions, out: &mut Outputs) -> Result<()> {
    let degree = if opts.drift_degree == 0 { 1 } else { opts.drift_degree };
    let n_off = c.names.len() - 1;
    let mut sd_csv = String::from("series,n,sd_ps\n");
    let mut drift_csv = String::from("series,degree,c0_ps,c1_ps_per_s,c2_ps_per_s2,c1_sd_ps_per_s,skew\n");
    for k in 0..n_off {
        let (t, v): (Vec<f64>, Vec<f64>) =
            c.t_s.iter().zip(&c.columns[k]).filter(|(_, v)| v.is_finite()).map(|(t, v)| (*t, *v)).unzip();
        let name = c.names[k].trim_end_matches("_ps");
        let sd = sample_sd(&v).map_or(f64::NAN, |x| x);
        sd_csv.push_str(&format!("{name},{},{}\n", v.len(), fmt_f64(sd)));
        match fit_drift(&t, &v, degree) {
            Ok(f) => {
                let c2 = f.coefficients.get(2).copied().unwrap_or(f64::NAN);
                drift_csv.push_str(&format!(
                    "{name},{degree},{},{},{},{},{}\n",
                    fmt_f64(f.coefficients[0]),
                    fmt_f64(f.slope()),
                    fmt_f64(c2),
                    fmt_f64(f.slope_std_error()),
                    fmt_f64(f.slope() * 1e-12)
                ));
            }
            Err(e) => {
                log::warn!("drift fit of {name} skipped: {e}");
                drift_csv.push_str(&format!("{name},{degree},NaN,NaN,NaN,NaN,NaN\n"));
            }
        }
    }
    out.put("sd.csv", sd_csv.as_bytes())?;
    out.put("drift.csv", drift_csv.as_bytes())?;

    let column = opts.tdev_column.clone().unwrap_or_else(|| "total_offset_ps".into());
    let k =
        c.names.iter().position(|n| *n == column || n.trim_end_matches("_ps") == column).ok_or_else(|| {
            RunnerError::Usage(format!("no campaign column `{column}` (have {})", c.names.join(", ")))
        })?;
    let (t, v): (Vec<f64>, Vec<f64>) =
        c.t_s.iter().zip(&c.columns[k]).filter(|(_, v)| v.is_finite()).map(|(t, v)| (*t, *v)).unzip();
    if v.len() < c.t_s.len() {
        log::warn!("tdev: {} flagged intervals dropped; sampling treated as uniform", c.t_s.len() - v.len());
    }
    let points = if t.len() >= 2 {
        let tau0 = (c.t_s[c.t_s.len() - 1] - c.t_s[0]) / (c.t_s.len() - 1) as f64;
        let series = OffsetSeries::new(tau0, v).map_err(|e| RunnerError::Runtime(e.to_string()))?;
        tdev(&series, &octave_grid(series.len()))
    } else {
        Vec::new()
    };
    out.put("tdev.csv", output::tdev_csv(&points).as_bytes())?;
    if opts.demean {
        out.put("campaign_demeaned.csv", demeaned_campaign(c).as_bytes())?;
    }
    Ok(())
}

fn find_stream(streams: &[TimeTagStream], channel: u8) -> TimeTagStream {
    streams
        .iter()
        .find(|s| s.channel_id == channel)
        .cloned()
        .unwrap_or_else(|| TimeTagStream::from_unsorted(channel, Vec::new()))
}

/// Re-measure stored tag files and/or post-process campaign CSVs.
pub fn cmd_analyze(
    inputs: &[PathBuf],
    cfg: Option<&ExperimentConfig>,
    opts: &AnalyzeOptions,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(RunnerError::Usage("analyze needs at least one input".into()));
    }
    if opts.drift_degree > 2 {
        return Err(RunnerError::Usage(format!("drift degree must be 1 or 2, got {}", opts.drift_degree)));
    }
    let (items, manifest) = expand_inputs(inputs)?;
    let cfg = match (cfg, manifest) {
        (Some(c), _) => c.clone(),
        (None, Some(m)) => load_config(Some(&m))?,
        (None, None) => load_config(None)?,
    };
    let mut out = Outputs::new(out_dir)?;

    let mut tag_files: BTreeMap<(u64, usize), PathBuf> = BTreeMap::new();
    let mut campaigns = Vec::new();
    for item in items {
        match item {
            Input::Tags(p) => {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                let key = parse_tag_file_name(&name).unwrap_or((tag_files.len() as u64, 0));
                tag_files.insert(key, p);
            }
            Input::Campaign(p) => campaigns.push(p),
        }
    }

    if !tag_files.is_empty() {
        let mut rows = String::from(output::MEASUREMENT_HEADER);
        for (&(interval, k), path) in &tag_files {
            let streams = read_tags(path)?;
            let engine = segment_engine(&cfg, k);
            let base = 4 * k as u8;
            for (dir, local, remote) in [("fwd", base, base + 1), ("bwd", base + 2, base + 3)] {
                let l = find_stream(&streams, local);
                let r = find_stream(&streams, remote);
                let measured = measure_delay_with_histogram(&l, &r, &engine);
                let summary = measured.as_ref().map(|(s, _)| s.clone()).map_err(Clone::clone);
                output::measurement_row(&mut rows, interval, &format!("seg{k}_{dir}"), &summary);
                if opts.histograms {
                    if let Ok((_, h)) = &measured {
                        let mut buf = Vec::new();
                        h.write_csv(&mut buf).map_err(io_err(out_dir))?;
                        out.put(&format!("histograms/interval_{interval:06}_seg{k}_{dir}.csv"), &buf)?;
                    }
                }
            }
        }
        out.put("measurements.csv", rows.as_bytes())?;
    }

    match campaigns.len() {
        0 => {}
        1 => analyze_campaign(&read_campaign(&campaigns[0])?, opts, &mut out)?,
        _ => return Err(RunnerError::Usage("analyze takes at most one campaign CSV".into())),
    }
    out.finish("analyze", &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_names_round_trip() {
        let n = tag_file_name(42, 1, TagFormat::Binary);
        assert_eq!(n, "interval_000042_seg1.bin");
        assert_eq!(parse_tag_file_name(&n), Some((42, 1)));
        assert_eq!(parse_tag_file_name("campaign.csv"), None);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(RunnerError::Usage("x".into()).exit_code(), 2);
        assert_eq!(RunnerError::Runtime("x".into()).exit_code(), 3);
        assert_eq!(RunnerError::Config(ConfigError::Invalid("x".into())).exit_code(), 2);
    }

    #[test]
    fn predict_writes_requested_sweeps() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::preset(config::Preset::Paper2025);
        let paths = cmd_predict(&cfg, dir.path(), Some(SweepKind::Skew)).unwrap();
        let names: Vec<String> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["skew_sweep.csv", "skew_sweep.gp", "manifest.json"]);
    }

    #[test]
    fn predicted_total_for_two_hundred_km() {
        let cfg = ExperimentConfig::preset(config::Preset::Paper2025);
        let p = predicted_total_sd(&cfg).unwrap();
        assert!((p - 1.0143 * 2f64.sqrt()).abs() < 1e-3, "{p}");
    }
}

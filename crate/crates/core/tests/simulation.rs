use chronoq::analytic::SegmentBudget;
use chronoq::cascade::{
    controller_step, effective_skew, estimate_skew, run_campaign, segment_offset, total_offset, ControllerConfig,
    ControllerState, Scenario,
};
use chronoq::coincidence::{measure_delay, CoincidenceSummary, EngineConfig};
use chronoq::runner::config::{ExperimentConfig, Preset};
use chronoq::stats::{fit_drift, sample_sd};
use chronoq::timetag::{
    simulate_segment, substream, ChannelModel, ClockModel, DetectorModel, SegmentPhysics, TimeTagStream, Window,
    DEFAULT_DELAY_PS_PER_KM,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KM: f64 = 100.0;

fn desk_budget() -> SegmentBudget {
    SegmentBudget { interval_s: 0.1, ..SegmentBudget::reference(KM) }
}

fn physics(b: &SegmentBudget) -> SegmentPhysics {
    SegmentPhysics::from_budget(b, &DetectorModel::default(), DEFAULT_DELAY_PS_PER_KM).unwrap()
}

fn engine() -> EngineConfig {
    EngineConfig {
        search_span_ps: EngineConfig::default().span_for_fiber(KM, DEFAULT_DELAY_PS_PER_KM),
        ..Default::default()
    }
}

fn fiber_delay() -> f64 {
    KM * DEFAULT_DELAY_PS_PER_KM
}

fn measure_pair(
    phys: &SegmentPhysics,
    near: &ClockModel,
    far: &ClockModel,
    window: Window,
    seed: u64,
) -> (CoincidenceSummary, CoincidenceSummary) {
    let mut rng = substream(seed, 0, 0);
    let s = simulate_segment(phys, near, far, window, &mut rng);
    let e = engine();
    (measure_delay(&s.fwd_idler, &s.fwd_signal, &e).unwrap(), measure_delay(&s.bwd_idler, &s.bwd_signal, &e).unwrap())
}

#[test]
fn lossless_jitterless_differences_equal_delay() {
    let phys = SegmentPhysics {
        pair_rate_per_s: 1e5,
        idler: ChannelModel::lossless(0.0),
        signal_fwd: ChannelModel::lossless(KM),
        signal_bwd: ChannelModel::lossless(KM),
        detector: DetectorModel::ideal(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s =
        simulate_segment(&phys, &ClockModel::ideal(), &ClockModel::ideal(), Window::from_seconds(0.0, 0.1), &mut rng);
    assert!(s.fwd_idler.len() > 9_000);
    assert_eq!(s.fwd_idler.len(), s.fwd_signal.len());
    let d = phys.signal_fwd.delay_ps();
    assert_eq!(d, fiber_delay() as i64);
    assert!(s.fwd_idler.tags().iter().zip(s.fwd_signal.tags()).all(|(i, sig)| sig - i == d));
    assert!(s.bwd_idler.tags().iter().zip(s.bwd_signal.tags()).all(|(i, sig)| sig - i == d));
}

#[test]
fn far_offset_sign_convention() {
    let phys = physics(&desk_budget());
    let far = ClockModel::with_offset(100.0);
    let (fwd, bwd) = measure_pair(&phys, &ClockModel::ideal(), &far, Window::from_seconds(0.0, 0.1), 4);
    assert!((fwd.delay_ps - (fiber_delay() + 100.0)).abs() < 3.0 * fwd.predicted_sd_ps, "{fwd:?}");
    assert!((bwd.delay_ps - (fiber_delay() - 100.0)).abs() < 3.0 * bwd.predicted_sd_ps, "{bwd:?}");
}

/// The literal rate scaling: 2.5e6 pairs per 10 s become 2.5e4 per 0.1 s,
/// so 995.4 · 0.01 pairs are expected per interval. Aggregated over 100
/// intervals to make the Poisson band informative.
#[test]
fn detected_pairs_at_literal_desk_scaling() {
    let b = SegmentBudget { pair_rate_per_interval: 2.5e4, ..desk_budget() };
    let detector = DetectorModel { dark_rate_cps: 0.0, ..DetectorModel::default() };
    let phys = SegmentPhysics::from_budget(&b, &detector, DEFAULT_DELAY_PS_PER_KM).unwrap();
    let d = phys.signal_fwd.delay_ps();
    let mut total = 0usize;
    for i in 0..100u64 {
        let mut rng = substream(21, 0, i);
        let s = simulate_segment(
            &phys,
            &ClockModel::ideal(),
            &ClockModel::ideal(),
            Window::from_seconds(0.0, 0.1),
            &mut rng,
        );
        let sig = s.fwd_signal.tags();
        for &t in s.fwd_idler.tags() {
            let lo = sig.partition_point(|&x| x < t + d - 2_000);
            let hi = sig.partition_point(|&x| x < t + d + 2_000);
            total += hi - lo;
        }
    }
    let expect = 995.4 * 0.01 * 100.0;
    assert!((total as f64 - expect).abs() < 5.0 * expect.sqrt(), "{total} vs {expect}");
}

#[test]
fn delay_estimator_is_calibrated() {
    let phys = physics(&desk_budget());
    let e = engine();
    let mut delays = Vec::new();
    let mut predicted = 0.0;
    for seed in 0..120u64 {
        let mut rng = substream(seed, 0, 0);
        let s = simulate_segment(
            &phys,
            &ClockModel::ideal(),
            &ClockModel::ideal(),
            Window::from_seconds(0.0, 0.1),
            &mut rng,
        );
        let fit = measure_delay(&s.fwd_idler, &s.fwd_signal, &e).unwrap();
        delays.push(fit.delay_ps);
        predicted += fit.predicted_sd_ps;
    }
    predicted /= delays.len() as f64;
    let mean = delays.iter().sum::<f64>() / delays.len() as f64;
    let ratio = sample_sd(&delays).unwrap() / predicted;
    assert!((0.7..=1.5).contains(&ratio), "ratio {ratio}");
    assert!(
        (mean - fiber_delay()).abs() < 4.0 * predicted / (delays.len() as f64).sqrt(),
        "bias {}",
        mean - fiber_delay()
    );
}

#[test]
fn injected_offset_is_recovered() {
    let phys = physics(&desk_budget());
    let (fwd, bwd) =
        measure_pair(&phys, &ClockModel::ideal(), &ClockModel::with_offset(250.0), Window::from_seconds(0.0, 0.1), 9);
    let est = segment_offset(0, fwd, bwd);
    assert!((est.offset_ps - 250.0).abs() < 3.0 * est.sd_ps, "{} ± {}", est.offset_ps, est.sd_ps);
}

#[test]
fn fiber_delay_cancels() {
    let mut short = physics(&desk_budget());
    let long = short.clone();
    for ch in [&mut short.signal_fwd, &mut short.signal_bwd] {
        ch.delay_ps_per_km *= 0.7;
    }
    let far = ClockModel::with_offset(-37.0);
    let w = Window::from_seconds(0.0, 0.1);
    let (a_f, a_b) = measure_pair(&long, &ClockModel::ideal(), &far, w, 3);
    let (b_f, b_b) = measure_pair(&short, &ClockModel::ideal(), &far, w, 3);
    let shift = (long.signal_fwd.delay_ps() - short.signal_fwd.delay_ps()) as f64;
    assert!((a_f.delay_ps - b_f.delay_ps - shift).abs() < 1e-6);
    let (a, b) = (segment_offset(0, a_f, a_b), segment_offset(0, b_f, b_b));
    assert!((a.offset_ps - b.offset_ps).abs() < 1e-6, "{} vs {}", a.offset_ps, b.offset_ps);
}

#[test]
fn two_segment_offsets_add() {
    let phys = physics(&desk_budget());
    let w = Window::from_seconds(0.0, 0.1);
    let stations = [ClockModel::ideal(), ClockModel::with_offset(300.0), ClockModel::with_offset(-120.0)];
    let mut segs = Vec::new();
    for k in 0..2 {
        let mut rng = substream(17, k as u32, 0);
        let s = simulate_segment(&phys, &stations[k], &stations[k + 1], w, &mut rng);
        let e = engine();
        let fwd = measure_delay(&s.fwd_idler, &s.fwd_signal, &e).unwrap();
        let bwd = measure_delay(&s.bwd_idler, &s.bwd_signal, &e).unwrap();
        segs.push(segment_offset(0, fwd, bwd));
    }
    assert!((segs[0].offset_ps - 300.0).abs() < 3.0 * segs[0].sd_ps);
    assert!((segs[1].offset_ps + 420.0).abs() < 3.0 * segs[1].sd_ps);
    let rec = total_offset(segs).unwrap();
    assert!((rec.total_offset_ps + 120.0).abs() < 3.0 * rec.total_sd_ps, "{rec:?}");
}

/// A clock running fast by `u` against its partner spreads the peak
/// uniformly over `u·T`, adding `(uT)²/12` to each direction's variance.
#[test]
fn skew_broadens_width_by_uniform_smear() {
    let b = SegmentBudget { interval_s: 10.0, ..SegmentBudget::reference(KM) };
    let phys = physics(&b);
    let u = 1.9e-11;
    let far = ClockModel { skew: u, ..ClockModel::ideal() };
    let (fwd, bwd) = measure_pair(&phys, &ClockModel::ideal(), &far, Window::from_seconds(0.0, 10.0), 6);
    let smear = u * 10.0 * 1e12;
    let oracle = (64f64.powi(2) + 2.0 * smear * smear / 12.0).sqrt();
    for fit in [&fwd, &bwd] {
        assert!((fit.width_sigma_ps / oracle - 1.0).abs() < 0.1, "{} vs {oracle}", fit.width_sigma_ps);
    }
    // the reading drifts by uT over the interval, so each peak sits at its midpoint
    let est = segment_offset(0, fwd, bwd);
    assert!((est.offset_ps - smear / 2.0).abs() < 3.0 * est.sd_ps, "{}", est.offset_ps);
}

#[test]
fn background_lowers_car_not_width() {
    let phys = physics(&desk_budget());
    let mut rng = substream(12, 0, 0);
    let w = Window::from_seconds(0.0, 0.1);
    let s = simulate_segment(&phys, &ClockModel::ideal(), &ClockModel::ideal(), w, &mut rng);
    let e = engine();
    let clean = measure_delay(&s.fwd_idler, &s.fwd_signal, &e).unwrap();
    let mut noisy = s.fwd_signal.tags().to_vec();
    let shift = phys.signal_fwd.delay_ps();
    noisy.extend((0..20_000).map(|_| shift + rng.random_range(0..w.duration_ps)));
    let noisy = TimeTagStream::from_unsorted(s.fwd_signal.channel_id, noisy);
    let dirty = measure_delay(&s.fwd_idler, &noisy, &e).unwrap();
    assert!(dirty.car.value() < clean.car.value(), "{:?} vs {:?}", dirty.car, clean.car);
    let spread = clean.width_sigma_ps / (2.0 * clean.pairs).sqrt() * 4.0;
    assert!(
        (dirty.width_sigma_ps - clean.width_sigma_ps).abs() < spread.max(3.0),
        "{} vs {}",
        dirty.width_sigma_ps,
        clean.width_sigma_ps
    );
}

#[test]
fn irc_slope_is_recovered() {
    let mut cfg = ExperimentConfig::preset(Preset::DeskScale);
    cfg.scenario = Scenario::Irc;
    cfg.duration_s = 10.0;
    cfg.seed = 5;
    let result = run_campaign(&cfg.campaign(), None).unwrap();
    assert_eq!(result.intervals.len(), 100);
    let series = result.segment_offsets(0);
    assert_eq!(series.len(), 100);
    let est = estimate_skew(&series).unwrap();
    assert!((est.skew - 35.1e-12).abs() < 0.5e-12, "{est:?}");
    let (t, y): (Vec<f64>, Vec<f64>) = series.iter().copied().unzip();
    let fit = fit_drift(&t, &y, 1).unwrap();
    assert!((fit.slope() * 1e-12 - 35.1e-12).abs() < 0.5e-12);
    // the relay's rate error cancels in the end-to-end offset
    let total = estimate_skew(&result.total_offsets()).unwrap();
    assert!(total.skew.abs() < 0.5e-12, "{total:?}");
}

/// Estimates carry noise comparable to what a desk-scale epoch sees.
#[test]
fn noisy_loop_settles_below_bound() {
    let cfg = ControllerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let native = 35.1e-12;
    let mut state = ControllerState::new(&cfg);
    let mut history = Vec::new();
    for _ in 0..40 {
        let eff = effective_skew(native, state.trim_applied, 0.0, cfg.residual_floor);
        let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * 1.5e-12;
        state = controller_step(&state, eff + noise);
        history.push(effective_skew(native, state.trim_applied, 0.0, cfg.residual_floor).abs());
    }
    let first = history.iter().position(|&e| e <= 5e-12).unwrap();
    assert!(first < 10, "{history:?}");
    assert!(history[first..].iter().all(|&e| e <= 5e-12), "{history:?}");
}

#[test]
fn noiseless_loop_converges_over_gain_and_skew_grid() {
    for &gain in &[0.5, 0.65, 0.8, 0.9, 1.0] {
        for &native in &[5e-11, 3.51e-11, 1e-11, -2e-11, -5e-11] {
            let cfg = ControllerConfig { gain, ..ControllerConfig::default() };
            let mut state = ControllerState::new(&cfg);
            for _ in 0..10 {
                let eff = effective_skew(native, state.trim_applied, 0.0, cfg.residual_floor);
                state = controller_step(&state, eff);
            }
            let eff = effective_skew(native, state.trim_applied, 0.0, cfg.residual_floor);
            assert!(eff.abs() <= 5e-12, "gain {gain} skew {native}: {eff}");
        }
    }
}

#[test]
fn scenarios_order_at_ten_second_intervals() {
    let mut sd = Vec::new();
    let mut widths = Vec::new();
    for scenario in [Scenario::Crc, Scenario::IrcFc, Scenario::Irc] {
        let mut cfg = ExperimentConfig::preset(Preset::Paper2025);
        cfg.scenario = scenario;
        cfg.duration_s = 400.0;
        cfg.seed = 3;
        let r = run_campaign(&cfg.campaign(), None).unwrap();
        assert!(r.intervals.iter().all(|i| i.record.is_some()), "{scenario:?} has flagged intervals");
        sd.push(r.total_sd_from(0).unwrap());
        let w: Vec<f64> = r.intervals.iter().map(|i| i.segments[0].fwd.as_ref().unwrap().width_sigma_ps).collect();
        widths.push(w.iter().sum::<f64>() / w.len() as f64);
    }
    assert!(sd[0] <= sd[1] && sd[1] <= sd[2], "CRC, IRC-FC, IRC: {sd:?}");
    let smear = 35.1e-12 * 10.0 * 1e12;
    let oracle = (64f64.powi(2) + 2.0 * smear * smear / 12.0).sqrt();
    assert!((widths[2] / oracle - 1.0).abs() < 0.05, "IRC width {} vs {oracle}", widths[2]);
    assert!((widths[0] / 64.0 - 1.0).abs() < 0.05, "CRC width {}", widths[0]);
}

use std::f64::consts::PI;

use syncgrid::simcore::{RngStream, TimeGrid};
use syncgrid::tcl::*;

fn hybrid_nominal(t_s: f64, hours: f64, dt: f64) -> (TclParams, syncgrid::simcore::TimeSeries) {
    let p = TclParams { t_s, ..TclParams::nominal() };
    let grid = TimeGrid::span(0.0, hours, dt).unwrap();
    let ts = simulate_hybrid(&p, p.t_s, 0, &grid).unwrap();
    (p, ts)
}

/// Mean spacing of OFF→ON transitions after the first one.
fn measured_period(ts: &syncgrid::simcore::TimeSeries) -> f64 {
    let s = ts.channel("s").unwrap();
    let ons: Vec<f64> = (1..s.len()).filter(|&k| s[k] > 0.5 && s[k - 1] < 0.5).map(|k| ts.times[k]).collect();
    (ons[ons.len() - 1] - ons[0]) / (ons.len() - 1) as f64
}

#[test]
fn heaviside_sin_examples() {
    assert_eq!(heaviside_sin(0.5), 1);
    assert_eq!(heaviside_sin(0.0), 1);
    assert_eq!(heaviside_sin(-0.1), 0);
}

#[test]
fn bias_examples() {
    assert!(duty_bias(0.5).unwrap().abs() < 1e-15);
    let s0 = duty_bias(0.43).unwrap();
    assert!((s0 - (0.07 * PI).sin()).abs() < 1e-15);
    assert!((s0 - 0.21814).abs() < 1e-5);
    assert!((on_fraction(s0) - 0.43).abs() < 1e-12);
    assert!((duty_bias(1.0 - 1e-9).unwrap() + 1.0).abs() < 1e-12);
    assert!(duty_bias(1.0).is_err());
}

#[test]
fn xor_equals_modulus_exhaustively() {
    for a in 0u8..2 {
        for b in 0u8..2 {
            assert_eq!((a as i8 - b as i8).unsigned_abs(), a ^ b);
        }
    }
    // and the model's pairwise counts agree with the XOR form
    let phis = [0.3, 2.0, 3.5, 5.9, 1.1];
    let alpha = [0.1, 1.7, 0.0, 2.2, 4.0];
    let mut per_unit = [0.0; 5];
    interaction_counts(&phis, &AlphaSpec::PerUnit(alpha.to_vec()), &mut per_unit);
    let pairwise = AlphaSpec::Pairwise((0..5).map(|i| vec![alpha[i]; 5]).collect());
    let mut pair = [0.0; 5];
    interaction_counts(&phis, &pairwise, &mut pair);
    for i in 0..5 {
        let xor: u32 = (0..5)
            .filter(|&j| j != i)
            .map(|j| (heaviside_sin(phis[j]) ^ heaviside_sin(phis[i] + alpha[i])) as u32)
            .sum();
        assert_eq!(per_unit[i], xor as f64);
        assert_eq!(pair[i], xor as f64);
    }
}

#[test]
fn single_unit_and_in_phase_fleet_free_run() {
    let one = PhaseFleet { omega: vec![0.55], k: 0.267, alpha: AlphaSpec::uniform(1, 1.0) };
    let mut out = [0.0];
    phase_oscillator_rhs(&[2.0], &one, &mut out);
    assert_eq!(out[0], 0.55);
    let many = PhaseFleet { omega: vec![0.1, 0.2, 0.3], k: 0.4, alpha: AlphaSpec::uniform(3, 0.0) };
    let mut out = [0.0; 3];
    phase_oscillator_rhs(&[1.0; 3], &many, &mut out);
    assert_eq!(out, [0.1, 0.2, 0.3]);
}

#[test]
fn four_units_settle_into_antipodal_pairs() {
    let cfg = PhaseEnsembleConfig {
        n: 4,
        omega: Some(0.27),
        heterogeneity: 0.0,
        k: 0.267,
        alpha: PhaseAlpha::TwoPiOverN,
        duty: Some(0.5),
        thermal: TclParams { p: 12.0, ..TclParams::nominal() },
        dt: 1e-3,
        t_end: 4000.0,
        record_every: 100,
        trace_units: 4,
        steady_fraction: 0.1,
        seed: 1,
    };
    let run = simulate_phase_ensemble(&cfg).unwrap();
    let mut ph: Vec<f64> = run.final_phases.iter().map(|p| p.rem_euclid(2.0 * PI)).collect();
    ph.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // every unit has a partner half a turn away, so the ON set always holds exactly two units;
    // the equi-spaced square is one member of this family but the flow does not single it out
    for k in 0..2 {
        let opp = (ph[k + 2] - ph[k]).rem_euclid(2.0 * PI);
        assert!((opp - PI).abs() < 0.02, "phases {ph:?}");
    }
    // exactly two units on away from switch instants
    let p = run.series.channel("P_agg").unwrap();
    let tail = &p[tail_start(p.len(), 0.1)..];
    let at_24 = tail.iter().filter(|v| (**v - 24.0).abs() < 1e-9).count();
    assert!(at_24 as f64 >= 0.99 * tail.len() as f64);
}

#[test]
fn hybrid_period_matches_closed_form() {
    for t_s in [20.0, 24.0] {
        let (p, ts) = hybrid_nominal(t_s, 60.0, 1e-4);
        let w = natural_frequency(&p).unwrap();
        let period = measured_period(&ts);
        assert!(((2.0 * PI / w) - period).abs() / period < 0.01, "T_s = {t_s}: {period} vs {}", 2.0 * PI / w);
    }
}

#[test]
fn hybrid_duty_matches_log_ratio() {
    let (p, ts) = hybrid_nominal(20.0, 100.0, 1e-4);
    let s = ts.channel("s").unwrap();
    let measured = measured_duty(&s[s.len() / 10..]);
    // ON and OFF durations of the exponential segments, computed by hand
    let on = p.r * p.c * ((p.t_max() - p.t_a + p.p * p.r) / (p.t_min() - p.t_a + p.p * p.r)).ln();
    let off = p.r * p.c * ((p.t_a - p.t_min()) / (p.t_a - p.t_max())).ln();
    assert!((p.duty().unwrap() - on / (on + off)).abs() < 1e-12);
    assert!((measured - on / (on + off)).abs() < 0.005, "{measured}");
}

#[test]
fn hybrid_stays_in_band_after_first_switch() {
    let (p, ts) = hybrid_nominal(20.0, 30.0, 1e-3);
    let t = ts.channel("T").unwrap();
    let s = ts.channel("s").unwrap();
    let first = (1..s.len()).find(|&k| s[k] != s[k - 1]).unwrap();
    let rate = [hybrid_tcl_rhs(p.t_min(), 1, &p), hybrid_tcl_rhs(p.t_max(), 0, &p)]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let eps = 1e-3 * rate;
    assert!(t[first..].iter().all(|v| *v >= p.t_min() - eps && *v <= p.t_max() + eps));
}

#[test]
fn thermal_rest_point() {
    let p = TclParams::nominal();
    assert_eq!(hybrid_tcl_rhs(p.t_a, 0, &p), 0.0);
}

#[test]
fn no_cooling_possible_is_an_error() {
    // ambient inside the dead band: the OFF segment never reaches T_max
    let p = TclParams { t_a: 20.0, ..TclParams::nominal() };
    assert!(matches!(natural_frequency(&p), Err(TclError::ThermalRegime(_))));
    // power too small to pull below T_min
    let weak = TclParams { p: 1e-9, ..TclParams::nominal() };
    assert!(natural_frequency(&weak).is_err());
}

#[test]
fn frequency_scales_inversely_with_rc() {
    let p = TclParams::nominal();
    let w = natural_frequency(&p).unwrap();
    let slow = TclParams { c: 2.0 * p.c, ..p.clone() };
    assert!((natural_frequency(&slow).unwrap() - w / 2.0).abs() < 1e-12);
    // scaling R with P·R held fixed also halves ω
    let wide = TclParams { r: 2.0 * p.r, p: p.p / 2.0, ..p };
    assert!((natural_frequency(&wide).unwrap() - w / 2.0).abs() < 1e-12);
}

#[test]
fn backsolve_without_coupling_returns_target() {
    let f = PhaseFleet { omega: vec![0.0; 3], k: 0.0, alpha: AlphaSpec::uniform(3, 0.5) };
    assert_eq!(omega_backsolve(1.87, &[0.1, 2.0, 4.0], &f), vec![1.87; 3]);
}

#[test]
fn weight_matrices() {
    let w = averaging_weight_matrix(2, 1.0);
    assert_eq!(w.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
    assert_eq!(averaging_weight_matrix(1, 0.3).as_slice(), &[0.0]);
    let w4 = averaging_weight_matrix(4, 0.06);
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(w4[(i, j)], if i == j { 0.0 } else { 0.06 });
        }
    }
}

#[test]
fn averaging_rhs_agrees_with_matrix_form_and_is_quiet_at_consensus() {
    let f = [0.0029, 0.0031, 0.0033, 0.003];
    let mut a = [0.0; 4];
    let mut b = [0.0; 4];
    dist_averaging_rhs(&f, 0.06, &mut a);
    dist_averaging_rhs_matrix(&f, &averaging_weight_matrix(4, 0.06), &mut b);
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-18));
    dist_averaging_rhs(&[0.003; 4], 0.06, &mut a);
    assert!(a.iter().all(|v| *v == 0.0));
}

#[test]
fn averaging_flow_conserves_and_converges() {
    let mut rng = RngStream::new(8);
    let mut f: Vec<f64> = (0..50).map(|_| rng.uniform_range(0.0029, 0.0033)).collect();
    let sum0: f64 = f.iter().sum();
    let mean0 = sum0 / 50.0;
    for _ in 0..100 {
        averaging_exact_step(&mut f, 0.06, 1.0);
        let s: f64 = f.iter().sum();
        assert!((s - sum0).abs() / sum0 < 1e-12);
    }
    assert!(f.iter().all(|v| (v - mean0).abs() / mean0 < 1e-6));
}

#[test]
fn aggregate_examples() {
    assert_eq!(aggregate_power(&[1; 4], &[12.0; 4], &[1.0; 4]), 48.0);
    assert_eq!(aggregate_power(&[0; 4], &[12.0; 4], &[1.0; 4]), 0.0);
}

#[test]
fn equispaced_half_duty_overlap_is_exactly_two() {
    // sin(θ + iπ/2) ≥ 0 for exactly two of four i unless θ sits on a switching edge
    let mut rng = RngStream::new(77);
    for _ in 0..10_000 {
        let th = rng.uniform_range(0.0, 2.0 * PI);
        let edge = (th / (PI / 2.0) - (th / (PI / 2.0)).round()).abs() < 1e-9;
        if edge {
            continue;
        }
        let s: Vec<u8> = (0..4).map(|i| heaviside((th + i as f64 * PI / 2.0).sin() - 0.0)).collect();
        assert_eq!(aggregate_power(&s, &[12.0; 4], &[1.0; 4]), 24.0);
    }
}

fn two_unit_fleet(duty: f64, f: f64) -> AveragingFleet {
    let s0 = duty_bias(duty).unwrap();
    AveragingFleet {
        f0: vec![f; 2],
        s0: vec![s0; 2],
        duty: vec![duty; 2],
        offsets: vec![0.0; 2],
        p: vec![1.0; 2],
        eta: vec![1.0; 2],
    }
}

#[test]
fn delay_map_extremes_for_two_units() {
    let half = delayc_build(&two_unit_fleet(0.5, 0.01), 0.01, 400).unwrap();
    assert_eq!(*half.alphas.last().unwrap(), PI);
    // α = 0 in phase: rms = capacity·sqrt(duty); α = π anti-phase at 50%: exactly one unit on.
    // Samples landing on a switching edge see both units on (3 of 1200 here), worth ≈ 2e-3.
    assert!((half.rms_fraction[0] - 0.5f64.sqrt()).abs() < 1e-2);
    assert!((half.rms_fraction.last().unwrap() - 0.5).abs() < 2.5e-3);
    // the in-phase end is the peak, up to sample-grid jitter
    assert!(half.max_fraction() - half.rms_fraction[0] <= MAP_TOL);
    assert!(half.monotone);

    // 43%, f = 1/2π: in-phase sqrt(0.43), fully separated pulses sqrt(0.86)/2 (flat bottom of the U)
    let d43 = delayc_build(&two_unit_fleet(0.43, 1.0 / (2.0 * PI)), 0.01, 1000).unwrap();
    assert!((d43.rms_fraction[0] - 0.43f64.sqrt()).abs() < 5e-3);
    assert!((d43.min_fraction() - 0.86f64.sqrt() / 2.0).abs() < 5e-3);
    assert!(d43.monotone);
}

#[test]
fn antiphase_pair_has_zero_ripple() {
    let fleet = AveragingFleet { offsets: vec![0.0, PI], ..two_unit_fleet(0.5, 0.01) };
    let cfg = AveragingConfig {
        n: 2,
        f: Range::fixed(0.01),
        duty: Range::fixed(0.5),
        p: 1.0,
        eta: 1.0,
        w: 0.06,
        coupled: true,
        offsets: OffsetMode::Explicit(vec![0.0, PI]),
        dt: 0.37,
        t_end: 1000.0,
        trace_units: 2,
        thermal: None,
        seed: 0,
    };
    let run = simulate_averaging_fleet(&cfg, fleet, |_, _| None).unwrap();
    let p = run.series.channel("P_agg").unwrap();
    let off_edge: Vec<f64> = p
        .iter()
        .zip(&run.series.times)
        .filter(|(_, t)| ((*t * 0.01 * 2.0) - (*t * 0.01 * 2.0).round()).abs() > 1e-6)
        .map(|(v, _)| *v)
        .collect();
    assert!(off_edge.iter().all(|v| *v == 1.0));
}

#[test]
fn follow_step_behaviour() {
    let map = delayc_build(&two_unit_fleet(0.5, 0.01), 0.01, 400).unwrap();
    let mut st = FollowState::default();
    // full demand sits above the in-phase rms, so it clamps to α = 0
    let a = load_following_step(&mut st, Some(100.0), None, &map, 0.5, 0.3);
    assert_eq!(a, 0.0);
    assert!(st.clamped);
    // a reachable demand is met from the map
    let a = load_following_step(&mut st, Some(60.0), None, &map, 0.5, 0.3);
    assert!(!st.clamped && a > 0.0 && a < PI);
    let k = map.alphas.iter().position(|x| *x >= a).unwrap();
    assert!((map.rms_fraction[k] - 0.6).abs() < 0.01);
    // loss of signal falls back to equal spacing (α = π, phase step 2π/N)
    let a = load_following_step(&mut st, None, Some(0.6), &map, 0.5, 0.3);
    assert_eq!(a, PI);
    assert!(st.signal_lost);
    let off = spread_offsets(4, a);
    assert!((off[1] - off[0] - 2.0 * PI / 4.0).abs() < 1e-15);
}

#[test]
fn metric_trivia() {
    assert_eq!(metric_p_norm(10.0, 10.0), 0.0);
    assert_eq!(metric_p_norm(10.0, 5.0), 50.0);
    assert_eq!(metric_p_red(3.0, 3.0), 0.0);
    let t: Vec<f64> = (0..11).map(|k| k as f64).collect();
    let r = vec![100.0; 11];
    assert_eq!(metric_rmse(&t, &r, &r, 100.0), 0.0);
    let off: Vec<f64> = r.iter().map(|v| v - 10.0).collect();
    assert!((metric_rmse(&t, &r, &off, 100.0) - 10.0).abs() < 1e-12);
    assert!(metric_relative_error(&r, &r).iter().all(|v| *v == 0.0));
    assert!((steady_relative_error(&r, &off, 0.1) - 10.0).abs() < 1e-12);
}

#[test]
fn utility_signal_rejects_out_of_range() {
    assert!(UtilitySignal::new(vec![(0.0, Some(120.0))]).is_err());
    let u = UtilitySignal::new(vec![(0.0, Some(100.0)), (10.0, None), (20.0, Some(50.0))]).unwrap();
    assert_eq!(u.value(5.0), Some(100.0));
    assert_eq!(u.value(15.0), None);
    assert_eq!(u.value(25.0), Some(50.0));
}

#[test]
fn calibrated_unit_reproduces_duty_and_period() {
    let tpl = TclParams { deadband: 3.0, t_s: 27.0, ..TclParams::nominal() };
    let p = calibrate_thermal(&tpl, 0.45, 1.0 / 0.0031).unwrap();
    assert!((p.duty().unwrap() - 0.45).abs() < 1e-9);
    assert!((2.0 * PI / natural_frequency(&p).unwrap() - 1.0 / 0.0031).abs() < 1e-6);
    assert_eq!((p.t_s, p.deadband, p.t_a), (tpl.t_s, tpl.deadband, tpl.t_a));
}

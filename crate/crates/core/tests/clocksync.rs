use std::collections::BTreeMap;

use skyfix::atmosphere::AtmosphereModel;
use skyfix::clocksync::{
    alpha_beta_track, correct_timestamps, fit_core_network, pairwise_offset_series, select_core, AlphaBetaParams,
    CoreFitOptions, SensorNoiseModel,
};
use skyfix::dataio::{MeasurementSet, Reception, SensorId};
use skyfix::exec::Execution;
use skyfix::pipeline::{self, PipelineConfig};
use skyfix::synth::{generate_scenario, Scenario, ScenarioConfig};

fn small_gps_scenario(seed: u64) -> Scenario {
    generate_scenario(&ScenarioConfig {
        seed,
        n_sensors: 16,
        n_flights: 6,
        fraction_gps: 1.0,
        gps_offset_ns: 0.0,
        sigma_ns: 0.0,
        duration_s: 900.0,
        flight_duration_range_s: (600.0, 900.0),
        reception_probability: 0.8,
        ..ScenarioConfig::default()
    })
    .unwrap()
}

/// Adds `shift(true arrival seconds)` nanoseconds to every timestamp of `sensor`.
fn skew(sc: &Scenario, sensor: SensorId, shift: impl Fn(f64) -> f64) -> MeasurementSet {
    let mut set = sc.set.clone();
    for rec in &mut set.records {
        for rx in rec.receptions.iter_mut().filter(|r| r.sensor_id == sensor) {
            let a = sc.truth.true_arrival(sensor, rx.toa_ns).unwrap();
            rx.toa_ns += shift(a).round() as i64;
        }
    }
    set
}

fn busiest_pair(set: &MeasurementSet) -> (SensorId, SensorId) {
    let mut counts: BTreeMap<(SensorId, SensorId), usize> = BTreeMap::new();
    for rec in &set.records {
        for a in &rec.receptions {
            for b in &rec.receptions {
                if a.sensor_id < b.sensor_id {
                    *counts.entry((a.sensor_id, b.sensor_id)).or_default() += 1;
                }
            }
        }
    }
    counts.into_iter().max_by_key(|(k, c)| (*c, std::cmp::Reverse(*k))).unwrap().0
}

fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

#[test]
fn pairwise_series_is_affine_in_time() {
    let sc = small_gps_scenario(3);
    let (i, j) = busiest_pair(&sc.set);
    let set = skew(&sc, i, |a| 1000.0 + 1e-7 * a * 1e9);
    let series = pairwise_offset_series(&set, i, j, &sc.truth.atmosphere).unwrap();
    assert!(series.len() > 200, "{} common records", series.len());
    let (_, slope) = linear_fit(&series);
    assert!((slope - 1e-7).abs() < 1e-9, "slope {slope}");
    let (c, s) = linear_fit(&series);
    let worst = series.iter().map(|(t, y)| (y - c - s * t).abs()).fold(0.0, f64::max);
    // The time axis is server time, which trails emission by a random 0.05-0.3 s
    // latency; at this drift that alone moves points up to 25 ns off the line.
    let bound = 1e-7 * 0.25 + 2e-9;
    assert!(worst < bound, "worst deviation from the line {worst}");
}

#[test]
fn alpha_beta_learns_linear_drift() {
    let series: Vec<(f64, f64)> = (0..100).map(|k| (k as f64, 1e-6 + 1e-7 * k as f64)).collect();
    let tr = alpha_beta_track(&series, &AlphaBetaParams::default()).unwrap();
    let f0 = tr.last().unwrap().f0;
    assert!((f0 - 1e-7).abs() < 0.05 * 1e-7, "drift {f0}");
}

#[test]
fn core_fit_recovers_offsets_and_positions() {
    let sc = small_gps_scenario(5);
    let core = select_core(&sc.set, 6).unwrap();
    let injected: BTreeMap<SensorId, f64> = core.iter().zip([0.0, 50.0, -30.0, 0.0, 0.0, 0.0]).map(|(id, o)| (*id, o)).collect();
    let mut set = sc.set.clone();
    for rec in &mut set.records {
        for rx in &mut rec.receptions {
            if let Some(o) = injected.get(&rx.sensor_id) {
                rx.toa_ns += *o as i64;
            }
        }
    }
    let fit = fit_core_network(
        &set,
        &core,
        &SensorNoiseModel::new(20.0).unwrap(),
        &CoreFitOptions {
            max_records: 1500,
            ..CoreFitOptions::default()
        },
        Execution::Parallel,
    )
    .unwrap();
    let reference = fit.sensor_ids[0];
    for id in &core {
        let rel = injected[id] - injected[&reference];
        assert!((fit.offsets_ns[id] - rel).abs() < 1.0, "sensor {id}: {} vs {rel}", fit.offsets_ns[id]);
        let truth = sc.truth.true_positions[id].to_ecef().unwrap();
        let d = fit.positions[id].distance(&truth);
        assert!(d < 1.0, "sensor {id} moved {d} m");
    }
}

#[test]
fn propagated_clocks_follow_the_generator() {
    let sigma = 20.0;
    let sc = generate_scenario(&ScenarioConfig {
        seed: 9,
        n_sensors: 30,
        n_flights: 10,
        fraction_gps: 0.2,
        b0_range_s: 2e-3,
        f0_range: 5e-8,
        rw_amplitude_ns: 100.0,
        sigma_ns: sigma,
        duration_s: 1200.0,
        flight_duration_range_s: (800.0, 1200.0),
        atmosphere: AtmosphereModel::new(3.2e-4, 1.3e-4).unwrap(),
        ..ScenarioConfig::default()
    })
    .unwrap();
    let cfg = PipelineConfig {
        sigma_ns: sigma,
        ..PipelineConfig::default()
    };
    let (state, report) = pipeline::run_sync(&sc.set, &cfg, Execution::Parallel).unwrap();
    assert!(report.synchronized >= 27, "{report:?}");

    // Noise-free clock readings of every reception, corrected by the fitted
    // model, against the true arrival. The common timebase offset is free.
    let atm = sc.truth.atmosphere;
    let gps_ref = report.core[0];
    let mut errors: BTreeMap<(u64, SensorId), f64> = BTreeMap::new();
    for rec in &sc.set.records {
        let emit = sc.truth.emission_s[&rec.record_id];
        let target = rec.truth.unwrap();
        let target_ecef = target.to_ecef().unwrap();
        for rx in &rec.receptions {
            if !state.is_synchronized(rx.sensor_id) {
                continue;
            }
            let p = sc.truth.true_positions[&rx.sensor_id];
            let arrival = emit + atm.propagation_time(target_ecef.distance(&p.to_ecef().unwrap()), p.altitude, target.altitude);
            let reading = sc.truth.origin_ns as f64 + sc.truth.clocks[&rx.sensor_id].measured(arrival) * 1e9;
            let mut r = rec.clone();
            r.receptions = vec![Reception {
                toa_ns: reading.round() as i64,
                ..*rx
            }];
            if let Some((_, t)) = correct_timestamps(&r, &state).toas.first() {
                errors.insert((rec.record_id, rx.sensor_id), (t - arrival) * 1e9);
            }
        }
    }
    let mut all: Vec<f64> = errors.values().copied().collect();
    all.sort_by(f64::total_cmp);
    let offset = all[all.len() / 2];
    let drifting: Vec<f64> = errors
        .iter()
        .filter(|((_, id), _)| !sc.truth.clocks[id].gps)
        .map(|(_, e)| (e - offset).abs())
        .collect();
    let within = drifting.iter().filter(|e| **e < 3.0 * sigma).count();
    assert!(
        within as f64 >= 0.99 * drifting.len() as f64,
        "{within}/{} drifting-sensor timestamps within 3 sigma",
        drifting.len()
    );

    // TDoA of each drifting sensor against the reference GPS sensor
    let tdoa: Vec<f64> = errors
        .iter()
        .filter(|((_, id), _)| !sc.truth.clocks[id].gps)
        .filter_map(|((rec, _), e)| errors.get(&(*rec, gps_ref)).map(|r| (e - r).abs()))
        .collect();
    assert!(tdoa.len() > 100);
    let within = tdoa.iter().filter(|e| **e < 3.0 * sigma).count();
    assert!(within as f64 >= 0.99 * tdoa.len() as f64, "{within}/{} TDoAs within 3 sigma", tdoa.len());
}

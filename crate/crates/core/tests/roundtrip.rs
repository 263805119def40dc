use skyfix::dataio;
use skyfix::synth::{self, generate_scenario, ScenarioConfig, TruthClocks};

fn small() -> ScenarioConfig {
    ScenarioConfig {
        n_sensors: 15,
        n_flights: 4,
        duration_s: 300.0,
        flight_duration_range_s: (150.0, 300.0),
        ..ScenarioConfig::default()
    }
}

#[test]
fn generated_files_read_back_identically() {
    let sc = generate_scenario(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    synth::write_scenario(&sc, dir.path()).unwrap();
    let sensors = dataio::load_sensors(dir.path().join(synth::SENSORS_FILE)).unwrap();
    assert_eq!(sensors, sc.set.sensors);
    let loaded = dataio::load_measurements(dir.path().join(synth::MEASUREMENTS_FILE), &sensors).unwrap();
    assert_eq!(loaded.dropped_receptions, 0);
    assert_eq!(loaded.set, sc.set);
    let text = std::fs::read_to_string(dir.path().join(synth::TRUTH_CLOCKS_FILE)).unwrap();
    let truth: TruthClocks = serde_json::from_str(&text).unwrap();
    assert_eq!(truth.clocks, sc.truth.clocks);
    assert_eq!(truth.emission_s, sc.truth.emission_s);
}

#[test]
fn masked_files_and_truth_rebuild_the_set() {
    let sc = generate_scenario(&small()).unwrap();
    let (masked, truth) = dataio::mask_flights(&sc.set, 0.3, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("masked.csv");
    let t = dir.path().join("truth.csv");
    dataio::write_measurements(&masked, &m).unwrap();
    dataio::write_predictions(&truth, &t).unwrap();
    let masked2 = dataio::load_measurements(&m, &sc.set.sensors).unwrap().set;
    let truth2 = dataio::read_submission(&t).unwrap();
    assert_eq!(masked2, masked);
    assert_eq!(truth2, truth);
    let mut rebuilt = masked2;
    for r in &mut rebuilt.records {
        if let Some(p) = truth2.get(r.record_id) {
            r.truth = Some(*p);
        }
    }
    assert_eq!(rebuilt, sc.set);
}

#[test]
fn missing_output_directory_writes_nothing() {
    let sc = generate_scenario(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("absent");
    assert!(synth::write_scenario(&sc, &target).is_err());
    assert!(!target.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

use underreport::reconstruction::{reconstruct, ReconstructionRule};
use underreport::simulate::simulate_replicate;
use underreport::{fit, FitOptions, ModelConfig, ModelParams, SimScenario};

fn separated() -> ModelParams {
    ModelParams {
        alpha0: 0.0,
        alpha1: 1.0,
        beta: [15.0, -1.0, 2.0, 1.0, -0.5, 1.0, 0.5],
        q: 0.5,
        sigma: 1.0,
    }
}

#[test]
fn flags_are_recovered_under_strong_separation() {
    let sim = simulate_replicate(&SimScenario::new(separated(), 96, 21), 0).unwrap();
    let f = fit(&sim.series, &FitOptions::default()).unwrap();
    let rec = reconstruct(
        &sim.series,
        &f.params,
        &ModelConfig::default(),
        ReconstructionRule::Map,
    )
    .unwrap();
    let hits = rec
        .flags()
        .iter()
        .zip(&sim.flags)
        .filter(|(a, b)| a == b)
        .count();
    assert!(
        hits as f64 / sim.flags.len() as f64 >= 0.95,
        "{hits}/{}",
        sim.flags.len()
    );

    let latent_err: f64 = rec
        .latent()
        .iter()
        .zip(&sim.latent)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / sim.latent.len() as f64;
    assert!(latent_err < 0.2, "mean latent error {latent_err}");
}

#[test]
fn reconstruction_never_lowers_a_value() {
    let sim = simulate_replicate(&SimScenario::new(separated(), 48, 22), 0).unwrap();
    for rule in [ReconstructionRule::Map, ReconstructionRule::Expected] {
        let rec = reconstruct(&sim.series, &separated(), &ModelConfig::default(), rule).unwrap();
        for r in &rec.records {
            assert!(r.latent_x >= r.registered);
            if rule == ReconstructionRule::Map {
                assert_eq!(r.latent_x == r.registered, !r.flagged);
            }
        }
    }
}

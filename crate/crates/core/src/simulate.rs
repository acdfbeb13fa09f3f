//! Synthetic registered series with known latent truth.
//!
//! Draws use ChaCha20 seeded from the scenario seed, with the replicate index
//! selecting the ChaCha stream, so replicate `k` is the same whether it is
//! generated alone, serially or in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    DesignRow, ModelConfig, ModelParams, Observation, ObservationSeries, StratumKey,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub params: ModelParams,
    pub t_max: u32,
    pub strata: Vec<StratumKey>,
    pub seed: u64,
    pub replicate_count: usize,
    #[serde(default)]
    pub config: ModelConfig,
}

impl SimScenario {
    /// Four strata, one replicate, default model configuration.
    pub fn new(params: ModelParams, t_max: u32, seed: u64) -> Self {
        Self {
            params,
            t_max,
            strata: StratumKey::all().to_vec(),
            seed,
            replicate_count: 1,
            config: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.t_max < 2 {
            return Err(Error::InvalidParameter(format!(
                "t_max = {} but a scenario needs at least 2 months",
                self.t_max
            )));
        }
        if self.strata.is_empty() {
            return Err(Error::InvalidParameter("scenario has no strata".into()));
        }
        let mut seen = self.strata.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.strata.len() {
            return Err(Error::InvalidParameter(
                "duplicate stratum in scenario".into(),
            ));
        }
        Ok(())
    }
}

/// One simulated replicate. `latent` and `flags` align with
/// `series.records()`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub series: ObservationSeries,
    pub latent: Vec<f64>,
    pub flags: Vec<bool>,
    /// Number of negative latent draws that were set to 0.
    pub truncated: usize,
}

pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Replicate 0 of the scenario.
pub fn simulate(scenario: &SimScenario) -> Result<SimOutput> {
    simulate_replicate(scenario, 0)
}

pub fn simulate_replicate(scenario: &SimScenario, replicate: u64) -> Result<SimOutput> {
    scenario.validate()?;
    let mut rng = replicate_rng(scenario.seed, replicate);
    let p = &scenario.params;
    let cfg = scenario.config;

    let n = scenario.strata.len() * scenario.t_max as usize;
    let mut records = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut truncated = 0;

    for &stratum in &scenario.strata {
        for month in 1..=scenario.t_max {
            let row = DesignRow::new(month, scenario.t_max, stratum);
            let mu = crate::model::mean_mu1(p, &row);
            let omega = cfg.omega(p, &row);
            let z: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            let mut x = mu + p.sigma * z;
            if x < 0.0 {
                x = 0.0;
                truncated += 1;
            }
            let flag = u < omega;
            let y = if flag { p.q * x } else { x };
            records.push(Observation {
                month,
                stratum,
                rate: y,
                population: None,
            });
            truth.push((stratum, month, x, flag));
        }
    }

    let series = ObservationSeries::new(records)?;
    // The series sorts by (stratum, month); realign the truth vectors.
    truth.sort_by_key(|t| (t.0, t.1));
    Ok(SimOutput {
        series,
        latent: truth.iter().map(|t| t.2).collect(),
        flags: truth.iter().map(|t| t.3).collect(),
        truncated,
    })
}

/// All `replicate_count` replicates, generated in parallel.
pub fn simulate_all(scenario: &SimScenario) -> Result<Vec<SimOutput>> {
    scenario.validate()?;
    (0..scenario.replicate_count as u64)
        .into_par_iter()
        .map(|k| simulate_replicate(scenario, k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn reference_params() -> ModelParams {
        ModelParams {
            alpha0: 2.99,
            alpha1: -4.31,
            beta: [13.76, 0.36, -13.53, -1.60, 3.25, 4.16, 0.52],
            q: 0.75,
            sigma: 2.0,
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let sc = SimScenario::new(reference_params(), 96, 7);
        assert_eq!(simulate(&sc).unwrap(), simulate(&sc).unwrap());
        let other = SimScenario::new(reference_params(), 96, 8);
        assert_ne!(simulate(&sc).unwrap(), simulate(&other).unwrap());
    }

    #[test]
    fn parallel_and_serial_replicates_agree() {
        let mut sc = SimScenario::new(reference_params(), 24, 3);
        sc.replicate_count = 6;
        let par = simulate_all(&sc).unwrap();
        for (k, out) in par.iter().enumerate() {
            assert_eq!(out, &simulate_replicate(&sc, k as u64).unwrap());
        }
    }

    #[test]
    fn q_one_returns_latent_series() {
        let mut p = reference_params();
        p.q = 1.0;
        let out = simulate(&SimScenario::new(p, 48, 1)).unwrap();
        assert_eq!(out.series.rates(), out.latent);
    }

    #[test]
    fn forced_underreporting_shrinks_every_record() {
        let mut p = reference_params();
        p.alpha0 = 30.0;
        p.alpha1 = 0.0;
        let out = simulate(&SimScenario::new(p, 48, 2)).unwrap();
        assert!(out.flags.iter().all(|&f| f));
        for (y, x) in out.series.rates().iter().zip(&out.latent) {
            assert_eq!(*y, p.q * x);
        }
    }

    #[test]
    fn flagged_records_are_shrunk_exactly() {
        let out = simulate(&SimScenario::new(reference_params(), 96, 11)).unwrap();
        for ((y, x), f) in out.series.rates().iter().zip(&out.latent).zip(&out.flags) {
            if *f {
                assert_eq!(*y, 0.75 * x);
            } else {
                assert_eq!(y, x);
            }
        }
    }

    #[test]
    fn no_truncation_far_from_zero() {
        let p = ModelParams {
            alpha0: 0.0,
            alpha1: 0.0,
            beta: [30.0, 1.0, -5.0, 2.0, 0.0, 1.0, 1.0],
            q: 0.6,
            sigma: 2.0,
        };
        let out = simulate(&SimScenario::new(p, 96, 5)).unwrap();
        assert_eq!(out.truncated, 0);
    }

    #[test]
    fn rejects_short_horizon() {
        assert!(simulate(&SimScenario::new(reference_params(), 1, 0)).is_err());
    }
}

use underreport::model::{expit, mean_mu1};
use underreport::simulate::simulate_replicate;
use underreport::{AgeBand, DesignRow, ModelParams, Sex, SimScenario, StratumKey};

fn reference_params() -> ModelParams {
    ModelParams {
        alpha0: 2.99,
        alpha1: -4.31,
        beta: [13.76, 0.36, -13.53, -1.60, 3.25, 4.16, 0.52],
        q: 0.75,
        sigma: 2.0,
    }
}

#[test]
fn flag_frequency_tracks_omega() {
    let t_max = 96;
    let mut freq = vec![0.0; t_max as usize];
    let mut count = 0.0;
    for seed in 0..50 {
        let out = simulate_replicate(&SimScenario::new(reference_params(), t_max, seed), 0).unwrap();
        for (rec, flag) in out.series.records().iter().zip(&out.flags) {
            freq[rec.month as usize - 1] += f64::from(u8::from(*flag));
        }
        count += 4.0;
    }
    let mad: f64 = freq
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let tau = i as f64 / (t_max as f64 - 1.0);
            (f / count - expit(2.99 - 4.31 * tau)).abs()
        })
        .sum::<f64>()
        / t_max as f64;
    assert!(mad < 0.05, "mean absolute deviation {mad}");
}

#[test]
fn flagged_to_unflagged_mean_ratio_is_q() {
    // Strata well above zero, so truncation does not bias the ratio.
    let strata = vec![
        StratumKey::new(Sex::Female, AgeBand::Young),
        StratumKey::new(Sex::Male, AgeBand::Young),
    ];
    let (mut sf, mut nf, mut su, mut nu) = (0.0, 0.0, 0.0, 0.0);
    for seed in 0..50 {
        let mut sc = SimScenario::new(reference_params(), 96, seed);
        sc.strata = strata.clone();
        let out = simulate_replicate(&sc, 0).unwrap();
        for (rec, flag) in out.series.records().iter().zip(&out.flags) {
            if *flag {
                sf += rec.rate;
                nf += 1.0;
            } else {
                su += rec.rate;
                nu += 1.0;
            }
        }
    }
    let ratio = (sf / nf) / (su / nu);
    assert!((ratio - 0.75).abs() <= 0.03, "ratio {ratio}");
}

#[test]
fn marginal_mean_matches_mixture_mean() {
    let p = reference_params();
    let k = StratumKey::new(Sex::Male, AgeBand::Young);
    let t_max = 24;
    let reps = 2000;
    let mut sc = SimScenario::new(p, t_max, 77);
    sc.strata = vec![k];
    let mut sum = vec![0.0; t_max as usize];
    let mut sum2 = vec![0.0; t_max as usize];
    for r in 0..reps {
        let out = simulate_replicate(&sc, r).unwrap();
        for rec in out.series.records() {
            let i = rec.month as usize - 1;
            sum[i] += rec.rate;
            sum2[i] += rec.rate * rec.rate;
        }
    }
    let n = reps as f64;
    for m in 1..=t_max {
        let i = m as usize - 1;
        let row = DesignRow::new(m, t_max, k);
        let w = expit(p.alpha0 + p.alpha1 * row.tau);
        let want = (1.0 - w * (1.0 - p.q)) * mean_mu1(&p, &row);
        let mean = sum[i] / n;
        let se = ((sum2[i] / n - mean * mean) / n).sqrt();
        assert!(
            (mean - want).abs() <= 3.0 * se + 1e-9,
            "month {m}: {mean} vs {want} (se {se})"
        );
    }
}

use std::f64::consts::PI;

use proptest::prelude::*;
use underreport::model::{log_likelihood, mixture_density, omega_at};
use underreport::{DesignRow, ModelParams, Observation, ObservationSeries, StratumKey};

fn pdf(x: f64, m: f64, s: f64) -> f64 {
    ln_pdf(x, m, s).exp()
}

fn ln_pdf(x: f64, m: f64, s: f64) -> f64 {
    -0.5 * ((x - m) / s).powi(2) - (s * (2.0 * PI).sqrt()).ln()
}

fn ln_sum(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn arb_params() -> impl Strategy<Value = ModelParams> {
    (
        -4.0..4.0f64,
        -4.0..4.0f64,
        prop::array::uniform7(-5.0..20.0f64),
        0.05..1.0f64,
        0.2..5.0f64,
    )
        .prop_map(|(alpha0, alpha1, beta, q, sigma)| ModelParams {
            alpha0,
            alpha1,
            beta,
            q,
            sigma,
        })
}

fn arb_row() -> impl Strategy<Value = DesignRow> {
    (1..=96u32, 0..4usize).prop_map(|(m, k)| DesignRow::new(m, 96, StratumKey::all()[k]))
}

fn mu1(p: &ModelParams, row: &DesignRow) -> f64 {
    p.beta
        .iter()
        .zip(row.covariates())
        .map(|(b, x)| b * x)
        .sum()
}

proptest! {
    // Beyond |η| ≈ 36 the logistic rounds to exactly 1 in f64.
    #[test]
    fn omega_strictly_inside_unit_interval(a0 in -18.0..18.0f64, a1 in -18.0..18.0f64, t in 0.0..1.0f64) {
        let w = omega_at(a0, a1, t).unwrap();
        prop_assert!(w > 0.0 && w < 1.0);
    }

    #[test]
    fn omega_monotone_in_tau(a0 in -300.0..300.0f64, a1 in -300.0..300.0f64, t in 0.0..1.0f64) {
        let w = omega_at(a0, a1, t).unwrap();
        prop_assert!((0.0..=1.0).contains(&w));
        let w2 = omega_at(a0, a1, (t + 0.1).min(1.0)).unwrap();
        if a1 > 0.0 {
            prop_assert!(w2 >= w);
        } else if a1 < 0.0 {
            prop_assert!(w2 <= w);
        }
    }

    #[test]
    fn density_at_weight_extremes(p in arb_params(), row in arb_row(), y in -5.0..25.0f64) {
        let m = mu1(&p, &row);
        let none = ModelParams { alpha0: -800.0, alpha1: 0.0, ..p };
        let all = ModelParams { alpha0: 800.0, alpha1: 0.0, ..p };
        let d0 = mixture_density(y, &none, &row).unwrap().density;
        let d1 = mixture_density(y, &all, &row).unwrap().density;
        prop_assert!((d0 - pdf(y, m, p.sigma)).abs() <= 1e-12);
        prop_assert!((d1 - pdf(y, p.q * m, p.q * p.sigma)).abs() <= 1e-12);
    }

    #[test]
    fn density_is_weighted_component_sum(p in arb_params(), row in arb_row(), y in -5.0..25.0f64) {
        let m = mu1(&p, &row);
        let w = 1.0 / (1.0 + (-(p.alpha0 + p.alpha1 * row.tau)).exp());
        let want = (1.0 - w) * pdf(y, m, p.sigma) + w * pdf(y, p.q * m, p.q * p.sigma);
        let got = mixture_density(y, &p, &row).unwrap().density;
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn density_integrates_to_one(p in arb_params(), row in arb_row()) {
        let m = mu1(&p, &row);
        let lo = m.min(p.q * m) - 12.0 * p.sigma;
        let hi = m.max(p.q * m) + 12.0 * p.sigma;
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let f = |y: f64| mixture_density(y, &p, &row).unwrap().density;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        prop_assert!((s * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn loglik_matches_pointwise_oracle(
        p in arb_params(),
        ys in prop::collection::vec(0.01..30.0f64, 8),
    ) {
        let t_max = 2;
        let mut records = Vec::new();
        let mut want = 0.0;
        for (i, y) in ys.iter().enumerate() {
            let stratum = StratumKey::all()[i / 2];
            let month = (i % 2) as u32 + 1;
            let row = DesignRow::new(month, t_max, stratum);
            let m = mu1(&p, &row);
            let w = 1.0 / (1.0 + (-(p.alpha0 + p.alpha1 * row.tau)).exp());
            want += ln_sum(
                (1.0 - w).ln() + ln_pdf(*y, m, p.sigma),
                w.ln() + ln_pdf(*y, p.q * m, p.q * p.sigma),
            );
            records.push(Observation { month, stratum, rate: *y, population: None });
        }
        prop_assume!(want.is_finite());
        let data = ObservationSeries::new(records).unwrap();
        let got = log_likelihood(&p, &data).unwrap();
        prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
    }
}

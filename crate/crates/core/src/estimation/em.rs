//! EM for a two-component univariate normal mixture, used to seed the
//! structured fit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normal_ln_pdf, ModelParams};

/// Summary of the pooled two-component fit and the starting values derived
/// from it. Component 1 has the larger mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSummary {
    pub mix_means: (f64, f64),
    pub mix_sds: (f64, f64),
    /// Weight of component 2, the shrunken one.
    pub mix_weight: f64,
    pub derived_q0: f64,
    pub derived_omega0: f64,
    /// `m2/m1` was outside `(0.01, 1)` and got clipped.
    pub q_clipped: bool,
}

impl InitSummary {
    pub fn from_components(means: (f64, f64), sds: (f64, f64), weight2: f64) -> Self {
        let (m1, m2) = means;
        let ratio = m2 / m1;
        let (derived_q0, q_clipped) = if m1 > 0.0 && ratio.is_finite() {
            let c = ratio.clamp(0.01, 1.0);
            (c, c != ratio || ratio >= 1.0)
        } else {
            (f64::NAN, true)
        };
        Self {
            mix_means: means,
            mix_sds: sds,
            mix_weight: weight2,
            derived_q0,
            derived_omega0: weight2,
            q_clipped,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOutcome {
    pub summary: InitSummary,
    /// Observed-data log-likelihood after each iteration, starting with the
    /// initial configuration.
    pub loglik_path: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Mixture {
    means: [f64; 2],
    vars: [f64; 2],
    weights: [f64; 2],
}

impl Mixture {
    fn ln_joint(&self, y: f64) -> [f64; 2] {
        [0, 1].map(|k| self.weights[k].ln() + normal_ln_pdf(y, self.means[k], self.vars[k].sqrt()))
    }

    fn loglik(&self, ys: &[f64]) -> f64 {
        ys.iter()
            .map(|&y| {
                let [a, b] = self.ln_joint(y);
                let hi = a.max(b);
                hi + ((a - hi).exp() + (b - hi).exp()).ln()
            })
            .sum()
    }
}

/// Fits `w1·N(m1, s1²) + w2·N(m2, s2²)` by EM, starting from a split of the
/// sorted sample into lower and upper halves. Variances are floored at
/// `1e-6` times the sample variance, which keeps each step a constrained
/// maximizer and the likelihood path monotone.
pub fn em_two_component(ys: &[f64], tol: f64, max_iter: usize) -> Result<EmOutcome> {
    if ys.len() < 2 {
        return Err(Error::EmptyInput(format!(
            "two-component EM needs at least 2 observations, got {}",
            ys.len()
        )));
    }
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::InvalidParameter(
            "EM needs tol > 0 and max_iter >= 1".into(),
        ));
    }
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidParameter("non-finite observation".into()));
    }
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::SinglePoint(ys.len()));
    }
    let floor = 1e-6 * var;

    let mut sorted = ys.to_vec();
    sorted.sort_by(f64::total_cmp);
    let half = sorted.len() / 2;
    let lower = &sorted[..half];
    let upper = &sorted[half..];
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;

    let mut mix = Mixture {
        means: [avg(upper), avg(lower)],
        vars: [var, var],
        weights: [0.5, 0.5],
    };

    let mut ll = mix.loglik(ys);
    let mut path = vec![ll];
    let mut resp = vec![[0.0; 2]; ys.len()];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;

        for (r, &y) in resp.iter_mut().zip(ys) {
            let [a, b] = mix.ln_joint(y);
            let hi = a.max(b);
            let (ea, eb) = ((a - hi).exp(), (b - hi).exp());
            *r = [ea / (ea + eb), eb / (ea + eb)];
        }

        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk <= f64::MIN_POSITIVE {
                // Empty component: keep its previous location and scale.
                mix.weights[k] = f64::MIN_POSITIVE;
                continue;
            }
            let mk = resp.iter().zip(ys).map(|(r, y)| r[k] * y).sum::<f64>() / nk;
            let vk = resp
                .iter()
                .zip(ys)
                .map(|(r, y)| r[k] * (y - mk).powi(2))
                .sum::<f64>()
                / nk;
            mix.means[k] = mk;
            mix.vars[k] = vk.max(floor);
            mix.weights[k] = nk / n;
        }

        let next = mix.loglik(ys);
        debug_assert!(
            next >= ll - 1e-9 * (1.0 + ll.abs()),
            "EM log-likelihood decreased: {ll} -> {next}"
        );
        path.push(next);
        let delta = next - ll;
        ll = next;
        if delta.abs() <= tol * (1.0 + ll.abs()) {
            converged = true;
            break;
        }
    }

    let (hi, lo) = if mix.means[0] >= mix.means[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    let summary = InitSummary::from_components(
        (mix.means[hi], mix.means[lo]),
        (mix.vars[hi].sqrt(), mix.vars[lo].sqrt()),
        mix.weights[lo],
    );
    Ok(EmOutcome {
        summary,
        loglik_path: path,
        iterations,
        converged,
    })
}

/// Maps a pooled mixture fit onto the structured model: intercept and scale
/// from the upper component, shrinkage from the ratio of means, constant
/// under-reporting probability from the lower component's weight.
pub fn initial_params(init: &InitSummary) -> Result<ModelParams> {
    let q = init.derived_q0;
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidInit(format!(
            "derived q0 = {q} is outside (0, 1] (component means {:?})",
            init.mix_means
        )));
    }
    let w = init.mix_weight.clamp(1e-3, 1.0 - 1e-3);
    let sigma = init.mix_sds.0;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInit(format!(
            "component sd {sigma} is not positive"
        )));
    }
    let p = ModelParams {
        alpha0: crate::model::logit(w),
        alpha1: 0.0,
        beta: [init.mix_means.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        q,
        sigma,
    };
    p.validate()
        .map_err(|e| Error::InvalidInit(e.to_string()))?;
    Ok(p)
}

//! Maximum-likelihood fitting of the mixture model.
//!
//! The optimizer works on an unconstrained vector: `q` enters through its
//! logit and `σ` through its log, every other parameter as is. Standard
//! errors come from the inverse numeric Hessian of the negative
//! log-likelihood on that scale, and confidence intervals are built there
//! and mapped back.

pub mod em;
pub mod optim;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use em::{em_two_component, initial_params, EmOutcome, InitSummary};

use crate::error::{Error, Result};
use crate::model::{
    build_design, expit, logit, DesignRow, ModelConfig, ModelParams, ObservationSeries, IDX_ALPHA0,
    IDX_ALPHA1, IDX_Q, IDX_SIGMA, N_PARAMS, PARAM_NAMES,
};
use crate::simulate::replicate_rng;
use optim::{minimize_bfgs, numeric_hessian, BfgsOptions};

const Z_95: f64 = 1.96;

/// Which parameters are estimated. Parameters left out are held at their
/// starting value (zero for the dropped mean terms).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    Full,
    /// β1 = 0.
    NoTrend,
    /// β6 = 0: a single periodic term.
    OneHarmonic,
    /// β5 = β6 = 0.
    NoSeasonality,
    Custom([bool; N_PARAMS]),
}

impl ModelVariant {
    pub fn name(&self) -> String {
        match self {
            ModelVariant::Full => "full".into(),
            ModelVariant::NoTrend => "no-trend".into(),
            ModelVariant::OneHarmonic => "one-harmonic".into(),
            ModelVariant::NoSeasonality => "no-seasonality".into(),
            ModelVariant::Custom(mask) => {
                let free: Vec<&str> = PARAM_NAMES
                    .iter()
                    .zip(mask)
                    .filter(|(_, &f)| f)
                    .map(|(n, _)| *n)
                    .collect();
                format!("custom({})", free.join(","))
            }
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "full" => Some(ModelVariant::Full),
            "no-trend" => Some(ModelVariant::NoTrend),
            "one-harmonic" => Some(ModelVariant::OneHarmonic),
            "no-seasonality" => Some(ModelVariant::NoSeasonality),
            _ => None,
        }
    }

    pub fn free_mask(&self) -> [bool; N_PARAMS] {
        let mut m = [true; N_PARAMS];
        match self {
            ModelVariant::Full => {}
            ModelVariant::NoTrend => m[3] = false,
            ModelVariant::OneHarmonic => m[8] = false,
            ModelVariant::NoSeasonality => {
                m[7] = false;
                m[8] = false;
            }
            ModelVariant::Custom(mask) => m = *mask,
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Relative step for finite-difference gradients.
    pub gradient_step: f64,
    /// Relative step for the numeric Hessian behind the standard errors.
    pub hessian_step: f64,
    /// Gradient max-norm tolerance.
    pub convergence_tol: f64,
    /// Relative log-likelihood change tolerance.
    pub rel_tol: f64,
    pub config: ModelConfig,
    pub variant: ModelVariant,
    /// Seeds the jitter of the restarts.
    pub seed: u64,
    pub restarts: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_step: 1e-5,
            hessian_step: 1e-4,
            convergence_tol: 1e-5,
            rel_tol: 1e-8,
            config: ModelConfig::default(),
            variant: ModelVariant::Full,
            seed: 0,
            restarts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub variant: String,
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Estimates on the optimizer's scale (`logit q`, `ln σ`).
    pub transformed: [f64; N_PARAMS],
    pub free: [bool; N_PARAMS],
    /// Natural-scale standard errors (delta method); `None` for fixed
    /// parameters or when the Hessian is not positive definite.
    pub se: [Option<f64>; N_PARAMS],
    pub se_transformed: [Option<f64>; N_PARAMS],
    pub ci95: [Option<(f64, f64)>; N_PARAMS],
    pub ci95_transformed: [Option<(f64, f64)>; N_PARAMS],
    pub loglik: f64,
    pub n_params: usize,
    pub n_obs: usize,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_max_norm: f64,
    pub init_used: InitSummary,
    pub data_digest: String,
}

impl FitResult {
    pub fn aic(&self) -> f64 {
        2.0 * self.n_params as f64 - 2.0 * self.loglik
    }
}

pub fn to_transformed(p: &ModelParams) -> [f64; N_PARAMS] {
    let mut v = p.to_array();
    v[IDX_Q] = logit(p.q);
    v[IDX_SIGMA] = p.sigma.ln();
    v
}

pub fn from_transformed(v: &[f64; N_PARAMS]) -> ModelParams {
    let mut w = *v;
    w[IDX_Q] = expit(v[IDX_Q]);
    w[IDX_SIGMA] = v[IDX_SIGMA].exp();
    ModelParams::from_array(&w)
}

fn to_natural(i: usize, t: f64) -> f64 {
    match i {
        IDX_Q => expit(t),
        IDX_SIGMA => t.exp(),
        _ => t,
    }
}

/// `d natural / d transformed` at the transformed value `t`.
fn jacobian(i: usize, t: f64) -> f64 {
    match i {
        IDX_Q => {
            let q = expit(t);
            q * (1.0 - q)
        }
        IDX_SIGMA => t.exp(),
        _ => 1.0,
    }
}

pub fn data_digest(data: &ObservationSeries) -> String {
    let mut h = Sha256::new();
    h.update(data.t_max().to_le_bytes());
    for r in data.records() {
        h.update(r.month.to_le_bytes());
        h.update(r.stratum.sex.code().as_bytes());
        h.update(r.stratum.age_band.code().as_bytes());
        h.update(r.rate.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Negative log-likelihood over the free coordinates of the transformed
/// vector, with the fixed ones taken from `base`.
struct Objective<'a> {
    config: ModelConfig,
    rows: &'a [DesignRow],
    data: &'a ObservationSeries,
    base: [f64; N_PARAMS],
    free: Vec<usize>,
}

impl Objective<'_> {
    fn full(&self, x: &[f64]) -> [f64; N_PARAMS] {
        let mut v = self.base;
        for (&i, &xi) in self.free.iter().zip(x) {
            v[i] = xi;
        }
        v
    }

    fn params(&self, x: &[f64]) -> ModelParams {
        self.natural(&self.full(x))
    }

    fn natural(&self, v: &[f64; N_PARAMS]) -> ModelParams {
        let mut w = *v;
        if self.free.contains(&IDX_Q) {
            w[IDX_Q] = expit(v[IDX_Q]);
        }
        if self.free.contains(&IDX_SIGMA) {
            w[IDX_SIGMA] = v[IDX_SIGMA].exp();
        }
        ModelParams::from_array(&w)
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let p = self.params(x);
        if !(p.sigma > 0.0 && p.q > 0.0 && p.q <= 1.0) {
            return f64::INFINITY;
        }
        -self
            .config
            .log_likelihood_rows(&p, self.rows, self.data.records())
    }

    fn start(&self, p: &ModelParams) -> Vec<f64> {
        let t = self.encode(p);
        self.free.iter().map(|&i| t[i]).collect()
    }

    fn encode(&self, p: &ModelParams) -> [f64; N_PARAMS] {
        let mut v = p.to_array();
        if self.free.contains(&IDX_Q) {
            v[IDX_Q] = logit(p.q);
        }
        if self.free.contains(&IDX_SIGMA) {
            v[IDX_SIGMA] = p.sigma.ln();
        }
        v
    }
}

fn free_indices(mask: &[bool; N_PARAMS]) -> Vec<usize> {
    (0..N_PARAMS).filter(|&i| mask[i]).collect()
}

/// Free mask after removing mean terms whose covariate is zero on every
/// record (for instance the sex and age terms of a single-stratum series).
fn effective_mask(variant: &ModelVariant, rows: &[DesignRow]) -> [bool; N_PARAMS] {
    let mut mask = variant.free_mask();
    for j in 0..7 {
        if rows.iter().all(|r| r.covariates()[j] == 0.0) {
            mask[2 + j] = false;
        }
    }
    mask
}

/// Least-squares coefficients of the rates on the free mean covariates.
fn regression_betas(rows: &[DesignRow], ys: &[f64], mask: &[bool; N_PARAMS]) -> [f64; 7] {
    let cols: Vec<usize> = (0..7).filter(|&j| mask[2 + j]).collect();
    let mut beta = [0.0; 7];
    if cols.is_empty() {
        return beta;
    }
    let x = DMatrix::from_fn(rows.len(), cols.len(), |i, k| rows[i].covariates()[cols[k]]);
    let y = DMatrix::from_column_slice(ys.len(), 1, ys);
    let svd = x.svd(true, true);
    if let Ok(b) = svd.solve(&y, 1e-10) {
        for (k, &j) in cols.iter().enumerate() {
            beta[j] = b[(k, 0)];
        }
    }
    beta
}

/// Mean terms from the least-squares fit inflated by the average shrinkage
/// `1 − w(1 − q)`, with the given `q`, `ω` and `σ`.
fn shrunk_start(
    template: &ModelParams,
    ols: &[f64; 7],
    mask: &[bool; N_PARAMS],
    q: f64,
    w: f64,
    sigma: f64,
) -> Option<ModelParams> {
    let shrink = 1.0 - w * (1.0 - q);
    let mut p = *template;
    for j in 0..7 {
        if mask[2 + j] {
            p.beta[j] = ols[j] / shrink;
        }
    }
    if mask[IDX_Q] {
        p.q = q;
    }
    if mask[IDX_ALPHA0] {
        p.alpha0 = logit(w);
    }
    if mask[IDX_SIGMA] {
        p.sigma = sigma;
    }
    p.validate().ok()?;
    Some(p)
}

/// Starting values from a two-component EM on `y / ŷ`, where `ŷ` is the
/// least-squares fit of the design. Under the model these ratios cluster
/// around `1/k` and `q/k` (`k` the average shrinkage), so the component
/// means give `q` directly and the lower weight gives `ω`. Only records in
/// the upper half of the fitted range are used, where the ratio is not
/// dominated by noise. Splits where either component holds under 5% of the
/// weight are rejected.
fn ratio_start(
    template: &ModelParams,
    ols: &[f64; 7],
    fitted: &[f64],
    ys: &[f64],
    mask: &[bool; N_PARAMS],
    sigma: f64,
) -> Option<(ModelParams, InitSummary)> {
    let top = fitted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(top > 0.0) {
        return None;
    }
    let ratios: Vec<f64> = fitted
        .iter()
        .zip(ys)
        .filter(|(f, _)| **f >= 0.5 * top)
        .map(|(f, y)| y / f)
        .collect();
    if ratios.len() < 4 {
        return None;
    }
    let em = em_two_component(&ratios, 1e-8, 1000).ok()?;
    let s = em.summary;
    if !(s.derived_q0 > 0.0) || !(0.05..=0.95).contains(&s.mix_weight) {
        return None;
    }
    let p = shrunk_start(
        template,
        ols,
        mask,
        s.derived_q0.min(0.99),
        s.mix_weight,
        sigma,
    )?;
    Some((p, s))
}

fn validate_fit_input(data: &ObservationSeries, options: &FitOptions) -> Result<()> {
    if data.t_max() < 2 {
        return Err(Error::InvalidSeries(format!(
            "fitting needs at least 2 months, series has {}",
            data.t_max()
        )));
    }
    if data.len() < 10 {
        return Err(Error::InvalidSeries(format!(
            "fitting needs at least 10 records, series has {}",
            data.len()
        )));
    }
    if options.max_iterations == 0
        || !(options.convergence_tol > 0.0)
        || !(options.rel_tol > 0.0)
        || !(options.gradient_step > 0.0)
        || !(options.hessian_step > 0.0)
    {
        return Err(Error::InvalidParameter(
            "max_iterations must be >= 1 and tolerances/steps > 0".into(),
        ));
    }
    Ok(())
}

/// Fits the model starting from the pooled two-component EM solution.
///
/// Starting points tried, best final log-likelihood wins (ties go to the
/// earlier start):
/// 1. the EM-derived values from [`initial_params`];
/// 2. least-squares mean terms inflated by the average shrinkage, with `q`
///    and `ω` from an EM on the ratios of data to fitted values;
/// 3. the same at `q = 0.5` and `q = 0.8` with even odds;
/// 4. `options.restarts` jittered copies of the best of 2–3.
pub fn fit(data: &ObservationSeries, options: &FitOptions) -> Result<FitResult> {
    validate_fit_input(data, options)?;
    let em = em_two_component(&data.rates(), 1e-8, 1000)?;
    let init = em.summary;
    let em_start = initial_params(&init)?;
    let rows = build_design(data)?;
    let mask = effective_mask(&options.variant, &rows);

    let mut em_start = em_start;
    // logit(1) is unbounded; start strictly inside when q is estimated.
    if mask[IDX_Q] {
        em_start.q = em_start.q.min(0.99);
    }
    for j in 0..7 {
        if !mask[2 + j] && j != 0 {
            em_start.beta[j] = 0.0;
        }
    }

    let ys = data.rates();
    let ols = regression_betas(&rows, &ys, &mask);
    let fitted: Vec<f64> = rows
        .iter()
        .map(|r| r.covariates().iter().zip(&ols).map(|(x, b)| x * b).sum())
        .collect();
    let top = fitted.iter().cloned().fold(0.0, f64::max);
    let resid_sd = (fitted
        .iter()
        .zip(&ys)
        .map(|(f, y)| (y - f).powi(2))
        .sum::<f64>()
        / ys.len() as f64)
        .sqrt()
        .max(1e-3 * top)
        .max(f64::MIN_POSITIVE);

    let obj = Objective {
        config: options.config,
        rows: &rows,
        data,
        base: to_transformed_masked(&em_start, &mask),
        free: free_indices(&mask),
    };

    // Regression-based starts: the ratio EM when it gives a usable split,
    // then a fixed grid of shrinkage levels at even odds.
    let mut reg_starts = Vec::new();
    let mut ratio_init = None;
    if let Some((p, s)) = ratio_start(&em_start, &ols, &fitted, &ys, &mask, resid_sd) {
        reg_starts.push(p);
        ratio_init = Some(s);
    }
    for q0 in [0.5, 0.8] {
        let q0 = if mask[IDX_Q] { q0 } else { em_start.q };
        if let Some(p) = shrunk_start(&em_start, &ols, &mask, q0, 0.5, resid_sd) {
            reg_starts.push(p);
        }
    }

    let mut starts = vec![obj.start(&em_start)];
    starts.extend(reg_starts.iter().map(|p| obj.start(p)));
    let base = starts
        .iter()
        .skip(1)
        .min_by(|a, b| obj.eval(a).total_cmp(&obj.eval(b)))
        .unwrap_or(&starts[0])
        .clone();
    let init = ratio_init.unwrap_or(init);
    let mut rng = replicate_rng(options.seed, 0);
    for _ in 0..options.restarts {
        let jittered = base
            .iter()
            .map(|&v| v + 0.1 * v.abs().max(1.0) * rng.sample::<f64, _>(StandardNormal))
            .collect();
        starts.push(jittered);
    }

    fit_from_starts(data, &rows, options, &obj, &starts, init, mask)
}

fn to_transformed_masked(p: &ModelParams, mask: &[bool; N_PARAMS]) -> [f64; N_PARAMS] {
    let mut v = p.to_array();
    if mask[IDX_Q] {
        v[IDX_Q] = logit(p.q);
    }
    if mask[IDX_SIGMA] {
        v[IDX_SIGMA] = p.sigma.ln();
    }
    v
}

/// Single local optimization from `start`; parameters the variant does not
/// estimate keep the values in `start`.
pub fn fit_from(
    data: &ObservationSeries,
    start: &ModelParams,
    options: &FitOptions,
) -> Result<FitResult> {
    validate_fit_input(data, options)?;
    start.validate()?;
    let rows = build_design(data)?;
    let mask = effective_mask(&options.variant, &rows);
    let mut start = *start;
    if mask[IDX_Q] && start.q >= 1.0 {
        start.q = 0.99;
    }
    let obj = Objective {
        config: options.config,
        rows: &rows,
        data,
        base: to_transformed_masked(&start, &mask),
        free: free_indices(&mask),
    };
    let init = InitSummary::from_components(
        (start.beta[0], start.q * start.beta[0]),
        (start.sigma, start.q * start.sigma),
        expit(start.alpha0),
    );
    let starts = vec![obj.start(&start)];
    fit_from_starts(data, &rows, options, &obj, &starts, init, mask)
}

fn fit_from_starts(
    data: &ObservationSeries,
    rows: &[DesignRow],
    options: &FitOptions,
    obj: &Objective<'_>,
    starts: &[Vec<f64>],
    init: InitSummary,
    mask: [bool; N_PARAMS],
) -> Result<FitResult> {
    let bfgs = BfgsOptions {
        max_iterations: options.max_iterations,
        gradient_step: options.gradient_step,
        grad_tol: options.convergence_tol,
        rel_tol: options.rel_tol,
    };
    let f = |x: &[f64]| obj.eval(x);

    let mut best: Option<optim::OptimOutcome> = None;
    for s in starts {
        if !f(s).is_finite() {
            continue;
        }
        let out = minimize_bfgs(&f, s, &bfgs);
        if best.as_ref().is_none_or(|b| out.value < b.value) {
            best = Some(out);
        }
    }
    let best = best
        .ok_or_else(|| Error::DegenerateFit("no starting point has a finite likelihood".into()))?;

    let params = obj.params(&best.x);
    let scale = {
        let ys = data.rates();
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64).sqrt()
    };
    if params.sigma < 1e-6 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateFit(format!(
            "sigma collapsed to {:e}",
            params.sigma
        )));
    }
    params
        .validate()
        .map_err(|e| Error::DegenerateFit(e.to_string()))?;

    let se_t = transformed_se(obj, &best.x, options.hessian_step);
    let full_t = obj.full(&best.x);
    let mut se = [None; N_PARAMS];
    let mut se_transformed = [None; N_PARAMS];
    let mut ci95 = [None; N_PARAMS];
    let mut ci95_transformed = [None; N_PARAMS];
    for (k, &i) in obj.free.iter().enumerate() {
        if let Some(s) = se_t[k] {
            let t = full_t[i];
            se_transformed[i] = Some(s);
            se[i] = Some(s * jacobian(i, t));
            let (lo, hi) = (t - Z_95 * s, t + Z_95 * s);
            ci95_transformed[i] = Some((lo, hi));
            ci95[i] = Some((to_natural(i, lo), to_natural(i, hi)));
        }
    }

    let loglik = options
        .config
        .log_likelihood_rows(&params, rows, data.records());

    Ok(FitResult {
        variant: options.variant.name(),
        config: options.config,
        params,
        transformed: obj.encode(&params),
        free: mask,
        se,
        se_transformed,
        ci95,
        ci95_transformed,
        loglik,
        n_params: obj.free.len(),
        n_obs: data.len(),
        converged: best.converged,
        iterations: best.iterations,
        gradient_max_norm: best.grad.iter().fold(0.0, |m, g| m.max(g.abs())),
        init_used: init,
        data_digest: data_digest(data),
    })
}

fn transformed_se(obj: &Objective<'_>, x: &[f64], step: f64) -> Vec<Option<f64>> {
    let n = x.len();
    let f = |v: &[f64]| obj.eval(v);
    let h = numeric_hessian(&f, x, step);
    let m = DMatrix::from_row_slice(n, n, &h);
    if m.iter().any(|v| !v.is_finite()) {
        return vec![None; n];
    }
    match m.cholesky() {
        Some(ch) => {
            let inv = ch.inverse();
            (0..n)
                .map(|i| {
                    let v = inv[(i, i)];
                    (v > 0.0 && v.is_finite()).then(|| v.sqrt())
                })
                .collect()
        }
        None => vec![None; n],
    }
}

/// Standard errors of `params` on the transformed scale, from the inverse
/// numeric Hessian of the negative log-likelihood over the parameters marked
/// free in `free`. Entries are `None` for fixed parameters, and for all
/// parameters when the Hessian is not positive definite.
pub fn standard_errors(
    params: &ModelParams,
    data: &ObservationSeries,
    config: &ModelConfig,
    free: &[bool; N_PARAMS],
    step: f64,
) -> Result<[Option<f64>; N_PARAMS]> {
    params.validate()?;
    if free[IDX_Q] && params.q >= 1.0 {
        return Err(Error::InvalidParameter(
            "q = 1 is on the boundary; fix q to compute standard errors".into(),
        ));
    }
    let rows = build_design(data)?;
    let obj = Objective {
        config: *config,
        rows: &rows,
        data,
        base: to_transformed_masked(params, free),
        free: free_indices(free),
    };
    let x = obj.start(params);
    let se = transformed_se(&obj, &x, step);
    let mut out = [None; N_PARAMS];
    for (k, &i) in obj.free.iter().enumerate() {
        out[i] = se[k];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub rank: usize,
    pub variant: String,
    pub loglik: f64,
    pub n_params: usize,
    pub aic: f64,
}

/// AIC table, best (lowest) first. Ties keep input order.
pub fn compare_models(fits: &[FitResult]) -> Result<Vec<ComparisonRow>> {
    if let Some(first) = fits.first() {
        if fits.iter().any(|f| f.data_digest != first.data_digest) {
            return Err(Error::DatasetMismatch);
        }
    }
    let mut rows: Vec<ComparisonRow> = fits
        .iter()
        .map(|f| ComparisonRow {
            rank: 0,
            variant: f.variant.clone(),
            loglik: f.loglik,
            n_params: f.n_params,
            aic: f.aic(),
        })
        .collect();
    rows.sort_by(|a, b| a.aic.total_cmp(&b.aic));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(rows)
}

/// Free mask for the plain intercept-and-scale model used in tests and
/// sanity checks: `β0` and `σ` only.
pub fn intercept_only_mask() -> [bool; N_PARAMS] {
    let mut m = [false; N_PARAMS];
    m[2] = true;
    m[IDX_SIGMA] = true;
    m
}

/// Mask with the under-reporting mechanism switched off (`q`, `α0`, `α1`
/// fixed): a normal regression on the full design.
pub fn regression_only_mask() -> [bool; N_PARAMS] {
    let mut m = [true; N_PARAMS];
    m[IDX_ALPHA0] = false;
    m[IDX_ALPHA1] = false;
    m[IDX_Q] = false;
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgeBand, Observation, Sex, StratumKey};
    use crate::simulate::{simulate, SimScenario};
    use proptest::prelude::*;

    fn reference_params() -> ModelParams {
        ModelParams {
            alpha0: 2.99,
            alpha1: -4.31,
            beta: [13.76, 0.36, -13.53, -1.60, 3.25, 4.16, 0.52],
            q: 0.75,
            sigma: 2.0,
        }
    }

    proptest! {
        #[test]
        fn transform_round_trip(
            a0 in -10.0..10.0f64, b0 in -50.0..50.0f64,
            q in 0.01..0.999f64, sigma in 0.01..100.0f64,
        ) {
            let p = ModelParams { alpha0: a0, alpha1: -a0, beta: [b0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0], q, sigma };
            let back = from_transformed(&to_transformed(&p)).to_array();
            for (x, y) in back.iter().zip(p.to_array()) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn aic_prefers_fewer_parameters_on_ties() {
        let sim = simulate(&SimScenario::new(reference_params(), 24, 1)).unwrap();
        let base = fit(&sim.series, &FitOptions::default()).unwrap();
        let mut a = base.clone();
        a.variant = "ten".into();
        a.n_params = 10;
        let mut b = base.clone();
        b.variant = "nine".into();
        b.n_params = 9;
        let table = compare_models(&[a, b]).unwrap();
        assert_eq!(table[0].variant, "nine");
        assert_eq!(table[0].rank, 1);

        let single = compare_models(std::slice::from_ref(&base)).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].rank, 1);
        assert_eq!(
            single[0].aic,
            2.0 * base.n_params as f64 - 2.0 * base.loglik
        );
    }

    #[test]
    fn comparison_rejects_mixed_data() {
        let a = simulate(&SimScenario::new(reference_params(), 24, 1)).unwrap();
        let b = simulate(&SimScenario::new(reference_params(), 24, 2)).unwrap();
        let fa = fit(&a.series, &FitOptions::default()).unwrap();
        let fb = fit(&b.series, &FitOptions::default()).unwrap();
        assert!(matches!(
            compare_models(&[fa, fb]),
            Err(Error::DatasetMismatch)
        ));
    }

    #[test]
    fn ci_width_is_exact_on_transformed_scale() {
        let sim = simulate(&SimScenario::new(reference_params(), 96, 4)).unwrap();
        let r = fit(&sim.series, &FitOptions::default()).unwrap();
        for i in 0..N_PARAMS {
            if let (Some(se), Some((lo, hi))) = (r.se_transformed[i], r.ci95_transformed[i]) {
                let t = r.transformed[i];
                assert_eq!(lo, t - 1.96 * se);
                assert_eq!(hi, t + 1.96 * se);
            }
        }
    }

    #[test]
    fn rejects_tiny_inputs() {
        let rec = |month| Observation {
            month,
            stratum: StratumKey::new(Sex::Female, AgeBand::Young),
            rate: month as f64,
            population: None,
        };
        let short = ObservationSeries::new((1..=5).map(rec).collect()).unwrap();
        assert!(fit(&short, &FitOptions::default()).is_err());
    }

    #[test]
    fn variant_masks() {
        assert_eq!(
            ModelVariant::Full
                .free_mask()
                .iter()
                .filter(|&&b| b)
                .count(),
            11
        );
        assert!(!ModelVariant::NoTrend.free_mask()[3]);
        assert!(!ModelVariant::OneHarmonic.free_mask()[8]);
        let ns = ModelVariant::NoSeasonality.free_mask();
        assert!(!ns[7] && !ns[8]);
        for v in ["full", "no-trend", "one-harmonic", "no-seasonality"] {
            assert_eq!(ModelVariant::parse(v).unwrap().name(), v);
        }
    }
}

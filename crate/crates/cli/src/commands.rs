use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use underreport::diagnostics::{self, DiagnosticsOptions, DiagnosticsReport};
use underreport::estimation::{compare_models, ModelVariant};
use underreport::ingest::{self, AgeBands, StudyWindow};
use underreport::reconstruction::{
    case_counts, cost_impact, project_population, reconstruct, summarize_incidence,
    uniform_coverage, ProjectionReport, StratumCounts, SummaryScope,
};
use underreport::{fit, FitOptions, ModelConfig, ModelParams, Observation, ObservationSeries};
use underreport::{SimScenario, StratumKey};

use crate::config::{
    AggregateConfig, DiagnoseConfig, FitConfig, ParamSource, ReconstructConfig, ReportConfig,
    RunConfig, SimulateConfig,
};
use crate::files::{self, write_csv, write_json};
use crate::InputError;

struct Ctx<'a> {
    out: &'a Path,
    quiet: bool,
}

impl Ctx<'_> {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn num(x: f64) -> String {
    x.to_string()
}

pub fn run(cfg: &RunConfig) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("cannot create output directory {}", cfg.out_dir.display()))?;

    // Parameters read from a fit file carry the model settings they were
    // fitted under.
    let source = cfg
        .reconstruct
        .as_ref()
        .map(|r| &r.source)
        .or(cfg.diagnose.as_ref().map(|d| &d.source))
        .cloned();
    let fitted = match &source {
        Some(src) => Some(load_params(src, &mut cfg.model)?),
        None => None,
    };

    let manifest = cfg.out_dir.join("run_config.toml");
    std::fs::write(&manifest, cfg.to_toml()?)
        .with_context(|| format!("cannot write {}", manifest.display()))?;

    let ctx = Ctx {
        out: &cfg.out_dir,
        quiet: cfg.quiet,
    };
    if let Some(s) = &cfg.simulate {
        simulate(&ctx, s, cfg.seed, cfg.model)
    } else if let Some(f) = &cfg.fit {
        fit_cmd(&ctx, f, cfg.seed, cfg.model)
    } else if let Some(r) = &cfg.reconstruct {
        reconstruct_cmd(&ctx, r, &fitted.expect("loaded above"), cfg.model)
    } else if let Some(d) = &cfg.diagnose {
        diagnose_cmd(&ctx, d, &fitted.expect("loaded above"), cfg.model)
    } else if let Some(r) = &cfg.report {
        report_cmd(&ctx, r)
    } else if let Some(a) = &cfg.aggregate {
        aggregate_cmd(&ctx, a)
    } else {
        Err(InputError::new("no command given").into())
    }
}

fn load_params(src: &ParamSource, model: &mut ModelConfig) -> anyhow::Result<ModelParams> {
    match src {
        ParamSource::Fit(path) => {
            let (p, m) = files::read_fit(path)?;
            *model = m;
            Ok(p)
        }
        ParamSource::Params(path) => files::read_params(path)?.into_params(None),
    }
}

fn load_series(path: &Path) -> anyhow::Result<ObservationSeries> {
    ingest::parse_series_csv(path).with_context(|| format!("reading series {}", path.display()))
}

fn simulate(ctx: &Ctx, s: &SimulateConfig, seed: u64, model: ModelConfig) -> anyhow::Result<()> {
    let params = files::read_params(&s.params)?.into_params(s.sigma)?;
    let mut scenario = SimScenario::new(params, s.months, seed);
    scenario.config = model;
    let out = underreport::simulate(&scenario)?;

    let series = match s.population {
        Some(pm) => {
            let recs: Vec<Observation> = out
                .series
                .records()
                .iter()
                .map(|r| Observation {
                    population: Some(pm),
                    ..*r
                })
                .collect();
            ObservationSeries::new(recs)?
        }
        None => out.series.clone(),
    };
    let path = ctx.out.join("series.csv");
    ingest::write_series_csv(&series, BufWriter::new(File::create(&path)?))?;

    let rows: Vec<Vec<String>> = series
        .records()
        .iter()
        .zip(out.latent.iter().zip(&out.flags))
        .map(|(r, (x, f))| {
            vec![
                r.month.to_string(),
                r.stratum.sex.code().to_string(),
                r.stratum.age_band.code().to_string(),
                num(r.rate),
                num(*x),
                f.to_string(),
            ]
        })
        .collect();
    write_csv(
        &ctx.out.join("truth.csv"),
        &[
            "month",
            "sex",
            "age_band",
            "registered",
            "latent_x",
            "flagged",
        ],
        &rows,
    )?;
    ctx.note(format!(
        "simulated {} records ({} latent values truncated at 0) into {}",
        series.len(),
        out.truncated,
        ctx.out.display()
    ));
    Ok(())
}

fn fit_cmd(ctx: &Ctx, f: &FitConfig, seed: u64, model: ModelConfig) -> anyhow::Result<()> {
    let data = load_series(&f.data)?;
    if f.variants.is_empty() {
        return Err(InputError::new("no model variants requested").into());
    }
    let variants = f
        .variants
        .iter()
        .map(|v| {
            ModelVariant::parse(v)
                .ok_or_else(|| InputError::new(format!("unknown model variant `{v}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut fits = Vec::new();
    for variant in variants {
        let options = FitOptions {
            max_iterations: f.max_iterations,
            restarts: f.restarts,
            convergence_tol: f.convergence_tol,
            gradient_step: f.gradient_step,
            config: model,
            variant,
            seed,
            ..FitOptions::default()
        };
        let r =
            fit(&data, &options).with_context(|| format!("fitting variant {}", variant.name()))?;
        ctx.note(format!(
            "{}: loglik {:.4}, AIC {:.4}, converged {}",
            r.variant,
            r.loglik,
            r.aic(),
            r.converged
        ));
        fits.push(r);
    }

    write_json(&ctx.out.join("fit.json"), &fits[0])?;
    if fits.len() > 1 {
        for r in &fits {
            write_json(&ctx.out.join(format!("fit_{}.json", r.variant)), r)?;
        }
        let rows: Vec<Vec<String>> = compare_models(&fits)?
            .iter()
            .map(|c| {
                vec![
                    c.rank.to_string(),
                    c.variant.clone(),
                    num(c.loglik),
                    c.n_params.to_string(),
                    num(c.aic),
                ]
            })
            .collect();
        write_csv(
            &ctx.out.join("comparison.csv"),
            &["rank", "variant", "loglik", "n_params", "aic"],
            &rows,
        )?;
    }
    Ok(())
}

fn coverage_for(
    path: Option<&Path>,
    default: f64,
) -> anyhow::Result<std::collections::BTreeMap<StratumKey, f64>> {
    match path {
        Some(p) => files::read_coverage(p),
        None => Ok(uniform_coverage(default)),
    }
}

#[derive(Serialize)]
struct CostLine {
    projected_registered: u64,
    projected_estimated: u64,
    gap_cases: i64,
    gap_pct: f64,
    unit_cost: f64,
    cost: f64,
}

fn write_projection(ctx: &Ctx, report: &ProjectionReport, unit_cost: f64) -> anyhow::Result<()> {
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let (sex, age) = r.scope.labels();
            // Sex rows of a projection are sums, not averages.
            let age = match r.scope {
                SummaryScope::SexAverage(_) => "Total",
                _ => age,
            };
            vec![
                sex.to_string(),
                age.to_string(),
                r.registered_count.to_string(),
                r.estimated_count.to_string(),
                r.projected_registered.to_string(),
                r.projected_estimated.to_string(),
                r.coverage.map(num).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(
        &ctx.out.join("projection.csv"),
        &[
            "sex",
            "age_band",
            "registered",
            "estimated",
            "projected_registered",
            "projected_estimated",
            "coverage",
        ],
        &rows,
    )?;

    let g = report.global();
    let (reg, est) = (g.projected_registered as f64, g.projected_estimated as f64);
    let line = CostLine {
        projected_registered: g.projected_registered,
        projected_estimated: g.projected_estimated,
        gap_cases: g.projected_estimated as i64 - g.projected_registered as i64,
        gap_pct: 100.0 * (est - reg) / reg,
        unit_cost,
        cost: cost_impact(est, reg, unit_cost),
    };
    let mut w = csv::Writer::from_path(ctx.out.join("cost.csv"))?;
    w.serialize(&line)?;
    w.flush()?;
    ctx.note(format!(
        "projected registered {}, estimated {}, gap {} cases ({:.1}%), cost {}",
        line.projected_registered,
        line.projected_estimated,
        line.gap_cases,
        line.gap_pct,
        line.cost
    ));
    Ok(())
}

fn reconstruct_cmd(
    ctx: &Ctx,
    r: &ReconstructConfig,
    params: &ModelParams,
    model: ModelConfig,
) -> anyhow::Result<()> {
    let data = load_series(&r.data)?;
    let recon = reconstruct(&data, params, &model, r.rule)?;

    let rows: Vec<Vec<String>> = recon
        .records
        .iter()
        .map(|x| {
            vec![
                x.month.to_string(),
                x.stratum.sex.code().to_string(),
                x.stratum.age_band.code().to_string(),
                num(x.registered),
                num(x.posterior_p),
                num(x.latent_x),
                x.flagged.to_string(),
                x.underflow.to_string(),
            ]
        })
        .collect();
    write_csv(
        &ctx.out.join("reconstruction.csv"),
        &[
            "month",
            "sex",
            "age_band",
            "registered",
            "posterior_p",
            "latent_x",
            "flagged",
            "underflow",
        ],
        &rows,
    )?;
    let underflows = recon.records.iter().filter(|x| x.underflow).count();
    if underflows > 0 {
        ctx.note(format!(
            "warning: {underflows} posterior(s) underflowed and were set to 0.5"
        ));
    }

    let summary = summarize_incidence(&data, &recon, None)?;
    for w in &summary.warnings {
        ctx.note(format!("warning: {w}"));
    }
    let rows: Vec<Vec<String>> = summary
        .rows
        .iter()
        .map(|s| {
            let (sex, age) = s.scope.labels();
            vec![
                sex.to_string(),
                age.to_string(),
                num(s.registered_mean),
                num(s.estimated_mean),
                num(s.pct_diff),
            ]
        })
        .collect();
    write_csv(
        &ctx.out.join("summary.csv"),
        &[
            "sex",
            "age_band",
            "registered_mean",
            "estimated_mean",
            "pct_diff",
        ],
        &rows,
    )?;

    if data.records().iter().all(|o| o.population.is_some()) {
        let counts = case_counts(&data, &recon)?;
        let coverage = coverage_for(r.coverage.as_deref(), r.default_coverage)?;
        let report = project_population(&counts, &coverage)?;
        write_projection(ctx, &report, r.unit_cost)?;
    } else {
        ctx.note("series has no population column; projection and cost skipped");
    }
    Ok(())
}

#[derive(Serialize)]
struct DiagnosticsFile<'a> {
    n: usize,
    max_lag: usize,
    standardized: bool,
    /// How expected values were formed.
    expected_value: &'static str,
    report: &'a DiagnosticsReport,
}

fn diagnose_cmd(
    ctx: &Ctx,
    d: &DiagnoseConfig,
    params: &ModelParams,
    model: ModelConfig,
) -> anyhow::Result<()> {
    let data = load_series(&d.data)?;
    let total = diagnostics::total_residuals(&data, params, &model)?;
    let options = DiagnosticsOptions {
        max_lag: d.max_lag,
        dof_adjust: d.dof_adjust,
        standardized: d.standardized,
    };
    let series = if d.standardized {
        total.standardized()
    } else {
        total.residuals.clone()
    };
    let report = diagnostics::diagnose_series(&series, &options)?;

    let std_res = total.standardized();
    let rows: Vec<Vec<String>> = (0..total.months.len())
        .map(|t| {
            vec![
                total.months[t].to_string(),
                num(total.observed[t]),
                num(total.expected[t]),
                num(total.residuals[t]),
                num(total.sd[t]),
                num(std_res[t]),
            ]
        })
        .collect();
    write_csv(
        &ctx.out.join("residuals.csv"),
        &[
            "month",
            "observed",
            "expected",
            "residual",
            "sd",
            "standardized",
        ],
        &rows,
    )?;

    let mut rows = Vec::new();
    for (k, r) in diagnostics::stratum_residuals(&data, params, &model)? {
        for t in 0..r.months.len() {
            rows.push(vec![
                k.sex.code().to_string(),
                k.age_band.code().to_string(),
                r.months[t].to_string(),
                num(r.observed[t]),
                num(r.expected[t]),
                num(r.residuals[t]),
            ]);
        }
    }
    write_csv(
        &ctx.out.join("residuals_by_stratum.csv"),
        &[
            "sex", "age_band", "month", "observed", "expected", "residual",
        ],
        &rows,
    )?;

    let rows: Vec<Vec<String>> = report
        .acf
        .iter()
        .zip(&report.pacf)
        .enumerate()
        .map(|(i, (a, p))| {
            vec![
                (i + 1).to_string(),
                num(*a),
                num(*p),
                num(-report.band),
                num(report.band),
            ]
        })
        .collect();
    write_csv(
        &ctx.out.join("acf.csv"),
        &["lag", "acf", "pacf", "band_low", "band_high"],
        &rows,
    )?;

    let pm = report.portmanteau;
    write_csv(
        &ctx.out.join("portmanteau.csv"),
        &[
            "statistic",
            "dof",
            "p_value",
            "lags_outside_band",
            "pacf_lags_outside_band",
        ],
        &[vec![
            num(pm.statistic),
            pm.dof.to_string(),
            num(pm.p_value),
            report.lags_outside_band.to_string(),
            report.pacf_lags_outside_band.to_string(),
        ]],
    )?;
    write_json(
        &ctx.out.join("diagnostics.json"),
        &DiagnosticsFile {
            n: series.len(),
            max_lag: report.acf.len(),
            standardized: d.standardized,
            expected_value: "sum over strata of (1 - omega(1 - q)) * mu1, with mu1 the full fitted linear predictor including the seasonal terms",
            report: &report,
        },
    )?;
    ctx.note(format!(
        "Ljung-Box Q = {:.4} on {} dof, p = {:.4}; {} of {} ACF lags outside the band",
        pm.statistic,
        pm.dof,
        pm.p_value,
        report.lags_outside_band,
        report.acf.len()
    ));
    Ok(())
}

fn report_cmd(ctx: &Ctx, r: &ReportConfig) -> anyhow::Result<()> {
    let counts: std::collections::BTreeMap<StratumKey, StratumCounts> =
        files::read_counts(&r.counts)?;
    let coverage = coverage_for(r.coverage.as_deref(), r.default_coverage)?;
    let report = project_population(&counts, &coverage)?;
    write_projection(ctx, &report, r.unit_cost)
}

#[derive(Serialize)]
struct EpisodeSummary {
    records: usize,
    incident_episodes: usize,
    /// Records the looser reading of the gap rule (measured from the last
    /// incident episode) would also count.
    rule_disagreements: usize,
    counted_in_window: u64,
}

fn aggregate_cmd(ctx: &Ctx, a: &AggregateConfig) -> anyhow::Result<()> {
    let cases = ingest::parse_cases_csv(&a.cases)
        .with_context(|| format!("reading cases {}", a.cases.display()))?;
    let population = ingest::parse_population_csv(&a.population)
        .with_context(|| format!("reading population {}", a.population.display()))?;
    let window = StudyWindow::from_year_month(&a.start, a.months)?;
    let bands = AgeBands::default();

    let episodes = ingest::incident_episodes(&cases, a.window_months);
    let events = ingest::filter_age(&episodes, bands.min, bands.max)?;
    let counts = ingest::monthly_counts(&events, &window, &bands)?;
    let series = ingest::monthly_rates(&counts, &population)?;

    let path = ctx.out.join("series.csv");
    ingest::write_series_csv(&series, BufWriter::new(File::create(&path)?))?;
    let summary = EpisodeSummary {
        records: cases.len(),
        incident_episodes: episodes.len(),
        rule_disagreements: ingest::episode_rule_disagreements(&cases, a.window_months),
        counted_in_window: counts.values().sum(),
    };
    write_json(&ctx.out.join("episodes.json"), &summary)?;
    ctx.note(format!(
        "{} records, {} incident episodes, {} counted in the study window",
        summary.records, summary.incident_episodes, summary.counted_in_window
    ));
    Ok(())
}

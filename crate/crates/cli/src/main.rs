mod commands;
mod config;
mod files;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{
    AggregateConfig, DiagnoseConfig, ParamSource, ReconstructConfig, ReportConfig, RunConfig,
    SimulateConfig, DEFAULT_MONTHS, DEFAULT_UNIT_COST,
};
use underreport::model::{Link, VarianceMode, ZeroHandling};
use underreport::reconstruction::ReconstructionRule;

/// Bad user input: missing files, malformed tables, invalid options.
#[derive(Debug)]
pub struct InputError(String);

impl InputError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

#[derive(Parser, Debug)]
#[command(
    name = "underreport",
    version,
    about = "Under-reporting in registered incidence series"
)]
struct Cli {
    /// Run configuration (TOML). Command-line values override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    quiet: bool,
    #[arg(long, global = true, value_enum)]
    link: Option<LinkArg>,
    #[arg(long, global = true, value_enum)]
    variance: Option<VarianceArg>,
    #[arg(long, global = true, value_enum)]
    zeros: Option<ZerosArg>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LinkArg {
    Logit,
    ClampedLog,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VarianceArg {
    Scaled,
    Shared,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ZerosArg {
    Censored,
    Density,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RuleArg {
    Map,
    Expected,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic registered series with its latent truth.
    Simulate {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        months: Option<u32>,
        /// Person-months attached to every record, for case counts downstream.
        #[arg(long)]
        population: Option<f64>,
    },
    /// Fit one or more model variants to a series.
    Fit {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated: full, no-trend, one-harmonic, no-seasonality.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long)]
        max_iterations: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// Reconstruct the latent series and build summary, projection and cost tables.
    Reconstruct {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, value_enum)]
        rule: Option<RuleArg>,
        /// CSV `sex,age_band,coverage`.
        #[arg(long)]
        coverage: Option<PathBuf>,
        #[arg(long)]
        default_coverage: Option<f64>,
        #[arg(long)]
        unit_cost: Option<f64>,
    },
    /// Residuals, ACF/PACF and the Ljung-Box test.
    Diagnose {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        max_lag: Option<usize>,
        #[arg(long)]
        dof_adjust: Option<usize>,
        #[arg(long)]
        standardized: bool,
    },
    /// Projection and cost from stratum case counts.
    Report {
        /// CSV `sex,age_band,registered,estimated`.
        #[arg(long)]
        counts: Option<PathBuf>,
        #[arg(long)]
        coverage: Option<PathBuf>,
        #[arg(long)]
        default_coverage: Option<f64>,
        #[arg(long)]
        unit_cost: Option<f64>,
    },
    /// Turn person-level cases and a population table into a rate series.
    Aggregate {
        #[arg(long)]
        cases: Option<PathBuf>,
        #[arg(long)]
        population: Option<PathBuf>,
        /// First study month, YYYY-MM.
        #[arg(long)]
        start: Option<String>,
        #[arg(long)]
        months: Option<u32>,
        #[arg(long)]
        window_months: Option<u32>,
    },
}

#[derive(Args, Debug, Default)]
struct SourceArgs {
    /// `fit.json` from the fit command; its model settings take precedence.
    #[arg(long, conflicts_with = "params")]
    fit: Option<PathBuf>,
    /// Parameter JSON (alpha0, alpha1, beta, q, sigma).
    #[arg(long)]
    params: Option<PathBuf>,
}

fn required<T>(value: Option<T>, what: &str) -> anyhow::Result<T> {
    value.ok_or_else(|| InputError::new(format!("missing required option --{what}")).into())
}

fn source(args: SourceArgs, previous: Option<ParamSource>) -> anyhow::Result<ParamSource> {
    match (args.fit, args.params, previous) {
        (Some(f), _, _) => Ok(ParamSource::Fit(f)),
        (None, Some(p), _) => Ok(ParamSource::Params(p)),
        (None, None, Some(s)) => Ok(s),
        _ => Err(InputError::new("one of --fit or --params is required").into()),
    }
}

fn resolve(cli: Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    if cfg.out_dir.as_os_str().is_empty() {
        cfg.out_dir = PathBuf::from(".");
    }
    cfg.quiet |= cli.quiet;
    if let Some(l) = cli.link {
        cfg.model.link = match l {
            LinkArg::Logit => Link::Logit,
            LinkArg::ClampedLog => Link::ClampedLog,
        };
    }
    if let Some(v) = cli.variance {
        cfg.model.variance = match v {
            VarianceArg::Scaled => VarianceMode::Scaled,
            VarianceArg::Shared => VarianceMode::Shared,
        };
    }
    if let Some(z) = cli.zeros {
        cfg.model.zeros = match z {
            ZerosArg::Censored => ZeroHandling::Censored,
            ZerosArg::Density => ZeroHandling::Density,
        };
    }

    let Some(command) = cli.command else {
        if cfg.sections() != 1 {
            return Err(InputError::new(
                "no subcommand given and the config does not hold exactly one command section",
            )
            .into());
        }
        return Ok(cfg);
    };

    match command {
        Command::Simulate {
            params,
            sigma,
            months,
            population,
        } => {
            let prev = cfg.simulate.take();
            cfg.clear_commands();
            cfg.simulate = Some(SimulateConfig {
                params: required(params.or(prev.as_ref().map(|p| p.params.clone())), "params")?,
                sigma: sigma.or(prev.as_ref().and_then(|p| p.sigma)),
                months: months
                    .or(prev.as_ref().map(|p| p.months))
                    .unwrap_or(DEFAULT_MONTHS),
                population: population.or(prev.as_ref().and_then(|p| p.population)),
            });
        }
        Command::Fit {
            data,
            variants,
            max_iterations,
            restarts,
        } => {
            let mut f = cfg.fit.take().unwrap_or_default();
            if let Some(d) = data {
                f.data = d;
            }
            if f.data.as_os_str().is_empty() {
                return Err(InputError::new("missing required option --data").into());
            }
            if let Some(v) = variants {
                f.variants = v;
            }
            if let Some(m) = max_iterations {
                f.max_iterations = m;
            }
            if let Some(r) = restarts {
                f.restarts = r;
            }
            cfg.clear_commands();
            cfg.fit = Some(f);
        }
        Command::Reconstruct {
            data,
            source: src,
            rule,
            coverage,
            default_coverage,
            unit_cost,
        } => {
            let prev = cfg.reconstruct.take();
            cfg.clear_commands();
            cfg.reconstruct = Some(ReconstructConfig {
                data: required(data.or(prev.as_ref().map(|p| p.data.clone())), "data")?,
                source: source(src, prev.as_ref().map(|p| p.source.clone()))?,
                rule: match rule {
                    Some(RuleArg::Map) => ReconstructionRule::Map,
                    Some(RuleArg::Expected) => ReconstructionRule::Expected,
                    None => prev.as_ref().map(|p| p.rule).unwrap_or_default(),
                },
                coverage: coverage.or(prev.as_ref().and_then(|p| p.coverage.clone())),
                default_coverage: default_coverage
                    .or(prev.as_ref().map(|p| p.default_coverage))
                    .unwrap_or_else(config::default_coverage),
                unit_cost: unit_cost
                    .or(prev.as_ref().map(|p| p.unit_cost))
                    .unwrap_or(DEFAULT_UNIT_COST),
            });
        }
        Command::Diagnose {
            data,
            source: src,
            max_lag,
            dof_adjust,
            standardized,
        } => {
            let prev = cfg.diagnose.take();
            cfg.clear_commands();
            cfg.diagnose = Some(DiagnoseConfig {
                data: required(data.or(prev.as_ref().map(|p| p.data.clone())), "data")?,
                source: source(src, prev.as_ref().map(|p| p.source.clone()))?,
                max_lag: max_lag.or(prev.as_ref().and_then(|p| p.max_lag)),
                dof_adjust: dof_adjust
                    .or(prev.as_ref().map(|p| p.dof_adjust))
                    .unwrap_or(0),
                standardized: standardized || prev.as_ref().is_some_and(|p| p.standardized),
            });
        }
        Command::Report {
            counts,
            coverage,
            default_coverage,
            unit_cost,
        } => {
            let prev = cfg.report.take();
            cfg.clear_commands();
            cfg.report = Some(ReportConfig {
                counts: required(counts.or(prev.as_ref().map(|p| p.counts.clone())), "counts")?,
                coverage: coverage.or(prev.as_ref().and_then(|p| p.coverage.clone())),
                default_coverage: default_coverage
                    .or(prev.as_ref().map(|p| p.default_coverage))
                    .unwrap_or_else(config::default_coverage),
                unit_cost: unit_cost
                    .or(prev.as_ref().map(|p| p.unit_cost))
                    .unwrap_or(DEFAULT_UNIT_COST),
            });
        }
        Command::Aggregate {
            cases,
            population,
            start,
            months,
            window_months,
        } => {
            let prev = cfg.aggregate.take();
            cfg.clear_commands();
            cfg.aggregate = Some(AggregateConfig {
                cases: required(cases.or(prev.as_ref().map(|p| p.cases.clone())), "cases")?,
                population: required(
                    population.or(prev.as_ref().map(|p| p.population.clone())),
                    "population",
                )?,
                start: required(start.or(prev.as_ref().map(|p| p.start.clone())), "start")?,
                months: required(months.or(prev.as_ref().map(|p| p.months)), "months")?,
                window_months: window_months
                    .or(prev.as_ref().map(|p| p.window_months))
                    .unwrap_or(underreport::ingest::DEFAULT_WINDOW_MONTHS),
            });
        }
    }
    Ok(cfg)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<InputError>()
            || cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
            || cause.is::<csv::Error>()
        {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<underreport::Error>() {
            return if e.is_input_error() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(cli).and_then(|cfg| commands::run(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

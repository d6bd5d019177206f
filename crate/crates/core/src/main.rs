use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use causal_panel::cli::{
    run_bootstrap, run_diagnose, run_estimate, run_pipeline, run_simulate, PipelineError, RunConfig,
};

#[derive(Parser, Debug)]
#[command(name = "causal-panel", version, about = "Additive treatment effects on binary outcomes from unit panels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic panel with known ground truth
    Simulate {
        #[command(flatten)]
        common: Common,
        /// also write the pre-flow cohort and its sample flow
        #[arg(long)]
        cohort: bool,
    },
    /// Sample flow, group summary, propensity scores, weights and balance
    Diagnose(Common),
    /// G-estimation plus the weighted marginal structural model
    Estimate(Common),
    /// BCa interval for the G-estimate
    Bootstrap(Common),
    /// Everything, into one report.json
    Report(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// flat `key = value` file; flags given on the command line win
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    input: Option<String>,
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    #[arg(long, value_name = "COL")]
    unit: Option<String>,
    #[arg(long, value_name = "COL")]
    treatment: Option<String>,
    #[arg(long, value_name = "COL")]
    outcome: Option<String>,
    /// comma-separated
    #[arg(long, value_name = "COLS")]
    covariates: Option<String>,
    /// drop rows with missing values instead of failing
    #[arg(long)]
    drop_missing: bool,
    /// `name | column OP value | reason`, repeatable
    #[arg(long, value_name = "SPEC")]
    filter: Vec<String>,
    /// LO,HI,STEP (default 0.0,0.5,0.005)
    #[arg(long, value_name = "LO,HI,STEP", allow_hyphen_values = true)]
    grid: Option<String>,
    /// weight truncation percentile (default 99)
    #[arg(long, value_name = "PCT")]
    truncate_pct: Option<String>,
    /// truncate both tails
    #[arg(long)]
    two_sided: bool,
    /// unweighted | weighted
    #[arg(long, value_name = "KIND")]
    smd_variance: Option<String>,
    /// bootstrap resamples, 0 = off (default 0)
    #[arg(long, value_name = "B")]
    bootstrap: Option<String>,
    #[arg(long, value_name = "G")]
    jack_groups: Option<String>,
    #[arg(long)]
    level: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, value_name = "W")]
    boot_half_width: Option<String>,
    #[arg(long, value_name = "STEP")]
    boot_step: Option<String>,
    /// histogram bins (default 50)
    #[arg(long)]
    bins: Option<String>,
    /// preset sample size
    #[arg(long)]
    n: Option<String>,
    /// preset true effect
    #[arg(long)]
    psi_true: Option<String>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// worker threads for the bootstrap (0 = serial)
    #[arg(long)]
    threads: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let opts = [
            ("input", &self.input),
            ("preset", &self.preset),
            ("unit", &self.unit),
            ("treatment", &self.treatment),
            ("outcome", &self.outcome),
            ("covariates", &self.covariates),
            ("grid", &self.grid),
            ("truncate-pct", &self.truncate_pct),
            ("smd-variance", &self.smd_variance),
            ("bootstrap", &self.bootstrap),
            ("jack-groups", &self.jack_groups),
            ("level", &self.level),
            ("seed", &self.seed),
            ("boot-half-width", &self.boot_half_width),
            ("boot-step", &self.boot_step),
            ("bins", &self.bins),
            ("n", &self.n),
            ("psi-true", &self.psi_true),
            ("threads", &self.threads),
        ];
        for (k, v) in opts {
            if let Some(v) = v {
                cfg.apply(k, v)?;
            }
        }
        for f in &self.filter {
            cfg.apply("filter", f)?;
        }
        if self.drop_missing {
            cfg.drop_missing = true;
        }
        if self.two_sided {
            cfg.two_sided = true;
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<String, PipelineError> {
    match cli.command {
        Command::Simulate { common, cohort } => {
            let t = run_simulate(&common.resolve()?, cohort)?;
            Ok(format!("simulated n={} psi_true={} treated_fraction={:.4}", t.n, t.psi_true, t.treated_fraction))
        }
        Command::Diagnose(c) => {
            let r = run_diagnose(&c.resolve()?)?;
            let rows: Vec<String> =
                r.balance.rows.iter().map(|d| format!("{}: {} ({})", d.check, d.value, d.assessment)).collect();
            Ok(rows.join("\n"))
        }
        Command::Estimate(c) => {
            let r = run_estimate(&c.resolve()?)?;
            Ok(format!(
                "gest psi_hat={:.4}  iptw rd={:.4} (se {:.4})  discrepancy={:.2} pp",
                r.gest.psi_hat, r.msm.risk_difference, r.msm.alpha1_se, r.triangulation.discrepancy_pp
            ))
        }
        Command::Bootstrap(c) => {
            let b = run_bootstrap(&c.resolve()?)?;
            Ok(format!(
                "estimate={:.4}  {:.0}% BCa [{:.4}, {:.4}]  se={:.4}  failures={}",
                b.estimate,
                b.level * 100.0,
                b.ci.0,
                b.ci.1,
                b.boot_se,
                b.failures
            ))
        }
        Command::Report(c) => {
            let r = run_pipeline(&c.resolve()?)?;
            let ci = r.bootstrap.as_ref().map_or(String::new(), |b| format!("  CI [{:.4}, {:.4}]", b.summary.ci.0, b.summary.ci.1));
            Ok(format!(
                "gest psi_hat={:.4}{ci}  iptw rd={:.4}  discrepancy={:.2} pp",
                r.gest.psi_hat, r.msm.risk_difference, r.triangulation.discrepancy_pp
            ))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

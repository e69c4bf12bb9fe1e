use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use skillfb::pipeline::{EvalRow, PipelineConfig, Workspace};

/// Segment demonstrations, learn orientation primitives and their feedback
/// models, refine the models by RL and evaluate them on the simulated
/// tilt board.
#[derive(Parser, Debug)]
#[command(name = "skillfb", version)]
struct Cli {
    /// TOML pipeline configuration; every key is optional except `seed`
    /// (which `--seed` may supply instead).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Keep going when single demonstrations fail to segment.
    #[arg(long, global = true)]
    lenient: bool,

    /// Output directory that relative paths are resolved against.
    #[arg(long, global = true, default_value = "skillfb-run")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic demonstration corpus.
    Generate,
    /// Segment the demonstrations into primitives.
    Segment,
    /// Fit primitives and their expected sensor traces.
    LearnDmp,
    /// Record corrected demonstrations and train feedback models.
    LearnFb,
    /// Refine feedback models by reinforcement learning.
    Rl,
    /// Write the evaluation table (CSV).
    Eval,
    /// Execute all primitives at one setting and save the trajectories.
    Unroll {
        /// Board roll in degrees.
        #[arg(long, default_value_t = 10.0)]
        roll: f64,
    },
    /// Every phase from `generate` through `eval`.
    Run,
    /// Print the effective configuration as TOML.
    Config,
}

/// Overlays `user` onto `base` key by key, so a partial nested table keeps
/// the pipeline defaults of the keys it leaves out.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Keys of `user` that the parsed configuration does not carry.
fn unknown_keys(user: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in user {
        let path = format!("{prefix}{k}");
        match (known.get(k), v) {
            (None, _) => out.push(path),
            (Some(toml::Value::Table(kt)), toml::Value::Table(ut)) => unknown_keys(ut, kt, &format!("{path}."), out),
            _ => {}
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let (mut config, has_seed) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let table: toml::Table = text.parse().with_context(|| format!("parsing {}", p.display()))?;
            let has_seed = table.contains_key("seed");
            let mut merged = toml::Table::try_from(PipelineConfig::default())?;
            merge(&mut merged, table.clone());
            let config: PipelineConfig = merged
                .try_into()
                .with_context(|| format!("invalid configuration in {}", p.display()))?;
            let mut unknown = Vec::new();
            unknown_keys(&table, &toml::Table::try_from(&config)?, "", &mut unknown);
            if !unknown.is_empty() {
                bail!("unknown configuration keys in {}: {}", p.display(), unknown.join(", "));
            }
            (config, has_seed)
        }
        None => (PipelineConfig::default(), false),
    };
    match seed {
        Some(s) => config.seed = s,
        None if !has_seed => bail!("a seed is required: pass --seed or set `seed` in the configuration"),
        None => {}
    }
    config.validate()?;
    Ok(config)
}

fn print_table(rows: &[EvalRow]) {
    let stat = |s: &Option<skillfb::testbed::EvalStats>| match s {
        Some(s) => format!("{:.4} ± {:.4}", s.mean, s.std),
        None => "-".into(),
    };
    println!("{:<9} {:>6}  {:<18} {:<18} {:<18}", "primitive", "roll", "no fb", "fb", "fb after RL");
    for r in rows {
        println!(
            "{:<9} {:>6}  {:<18} {:<18} {:<18}",
            r.primitive + 1,
            r.setting.roll_deg,
            format!("{:.4} ± {:.4}", r.no_fb.mean, r.no_fb.std),
            stat(&r.fb),
            stat(&r.rl),
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref(), cli.seed)?;
    if let Command::Config = cli.command {
        print!("{}", toml::to_string_pretty(&config)?);
        return Ok(());
    }
    log::info!("seed {}, output {}", config.seed, cli.out.display());
    let mut ws = Workspace::new(&cli.out, config)?;
    ws.lenient = cli.lenient;
    match cli.command {
        Command::Generate => {
            let files = ws.generate()?;
            println!("wrote {} demonstrations to {}", files.len(), ws.demo_dir().display());
        }
        Command::Segment => {
            let report = ws.segment()?;
            println!(
                "segmented {} demonstrations into {} primitives ({} dropped)",
                report.demos.len() + 1,
                report.reference_spans.len(),
                report.failures.len()
            );
        }
        Command::LearnDmp => {
            let models = ws.learn_dmp()?;
            for (k, m) in models.iter().enumerate() {
                println!("primitive {}: tau {:.3} s", k + 1, m.params.tau);
            }
        }
        Command::LearnFb => {
            for (k, outcome) in ws.learn_fb()? {
                let r = &outcome.report;
                println!(
                    "primitive {}: NMSE train {:.4}, validation {:.4}, test {:.4}",
                    k + 1,
                    r.train_nmse,
                    r.validation_nmse,
                    r.test_nmse
                );
            }
        }
        Command::Rl => {
            for (k, report) in ws.rl()? {
                let last = report.iterations.last().map_or(report.initial_cost_norm, |i| i.cost_norm);
                println!(
                    "primitive {}: |J| {:.4} -> {:.4} after {} iterations ({:?})",
                    k + 1,
                    report.initial_cost_norm,
                    last,
                    report.iterations.len(),
                    report.stop
                );
            }
        }
        Command::Eval => print_table(&ws.eval()?),
        Command::Unroll { roll } => {
            for p in ws.unroll(roll)? {
                println!("{}", p.display());
            }
        }
        Command::Run => print_table(&ws.run_all()?),
        Command::Config => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

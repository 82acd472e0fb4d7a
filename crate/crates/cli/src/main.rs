mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;

#[derive(Parser)]
#[command(name = "fewshot", version, about = "Two-stage few-shot adaptation of a small dual encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pretraining universe, pretrain and write a checkpoint.
    Pretrain(Common),
    /// Two-stage adaptation over the seed list.
    Adapt(AdaptArgs),
    /// Stage-one-only adaptation with breakpoint detection.
    SingleStage(AdaptArgs),
    /// Sweep alpha or the per-shot budget M.
    Sweep(SweepArgs),
    /// Synthetic data utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Summarize the run record in an output directory.
    Report {
        /// directory holding run.json (defaults to the configured output directory)
        dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write the downstream universe and the task of the first seed.
    Gen(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long, short)]
    config: PathBuf,
    /// output directory (overrides `output_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    profile: Option<String>,
    /// any config key, e.g. `--set data.lex_noise=0.4`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    common: Common,
    /// pretrained checkpoint (defaults to `<out>/pretrained.ckpt`)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    peft: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    adapt: AdaptArgs,
    /// `alpha` or `budget`
    #[arg(long)]
    param: String,
    /// `start:stop:step` or a comma list; defaults to 0.2:0.8:0.1 for alpha and 100,300,500 for budget
    #[arg(long)]
    grid: Option<String>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>, Failure> {
        let mut o = Vec::new();
        if let Some(out) = &self.out {
            o.push(("output_dir".into(), toml_string(&out.to_string_lossy())));
        }
        if let Some(s) = &self.seeds {
            o.push(("seeds".into(), format!("{s:?}")));
        }
        if let Some(p) = &self.protocol {
            o.push(("protocol".into(), toml_string(p)));
        }
        if let Some(p) = &self.profile {
            o.push(("data.profile".into(), toml_string(p)));
        }
        for s in &self.set {
            o.push(config::parse_override(s).map_err(Failure::Usage)?);
        }
        Ok(o)
    }
}

impl AdaptArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, Failure> {
        let mut o = self.common.overrides()?;
        let num = [
            ("adapt.M", self.m.map(|v| v.to_string())),
            ("adapt.k", self.k.map(|v| v.to_string())),
            ("adapt.alpha", self.alpha.map(float)),
            ("adapt.lr", self.lr.map(float)),
            ("adapt.wd", self.wd.map(float)),
            ("adapt.batch", self.batch.map(|v| v.to_string())),
            ("adapt.eval_interval", self.eval_interval.map(|v| v.to_string())),
            ("adapt.peft", self.peft.as_deref().map(toml_string)),
        ];
        o.extend(num.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        Ok(o)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// TOML float literal; `1` would otherwise parse as an integer.
fn float(v: f64) -> String {
    format!("{v:?}")
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pretrain(c) => commands::pretrain(&commands::load(&c.config, &c.overrides()?)?),
        Command::Adapt(a) => commands::adapt(&commands::load(&a.common.config, &a.overrides()?)?, a.checkpoint.as_deref(), false),
        Command::SingleStage(a) => commands::adapt(&commands::load(&a.common.config, &a.overrides()?)?, a.checkpoint.as_deref(), true),
        Command::Sweep(s) => {
            let cfg = commands::load(&s.adapt.common.config, &s.adapt.overrides()?)?;
            commands::sweep(&cfg, s.adapt.checkpoint.as_deref(), &s.param, s.grid.as_deref())
        }
        Command::Data { command: DataCommand::Gen(c) } => commands::data_gen(&commands::load(&c.config, &c.overrides()?)?),
        Command::Report { dir } => commands::report(dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sedeg_core::checkpoint::write_atomic;
use sedeg_core::harness::{
    default_out_dir, report, report_curves_csv, report_summary_csv, report_table, summary_table, sweep, RunSettings,
    OUT_DIR_ENV,
};
use sedeg_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sedeg", version, about = "Class-incremental training with two-stage encoder enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method over a task stream and write its metrics.
    Run(RunArgs),
    /// Run every cell of a key=value grid file.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, env = OUT_DIR_ENV)]
        out: Option<PathBuf>,
    },
    /// Aggregate finished runs over seeds.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value file; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    num_tasks: Option<usize>,
    #[arg(long)]
    memory: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    class_order_seed: Option<u64>,
    #[arg(long)]
    no_aux: bool,
    #[arg(long)]
    no_ted: bool,
    #[arg(long)]
    no_balanced_ce: bool,
    #[arg(long)]
    no_feature_kd: bool,
    #[arg(long)]
    no_balanced_kd: bool,
    #[arg(long)]
    distill_full: bool,
    /// sedeg | dytox | finetune
    #[arg(long)]
    method: Option<String>,
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Any other setting, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn settings(&self) -> Result<RunSettings> {
        let mut s = match &self.config {
            Some(path) => RunSettings::from_file(path)?,
            None => RunSettings::default(),
        };
        let mut pairs: Vec<(&str, String)> = Vec::new();
        if let Some(v) = &self.dataset {
            pairs.push(("dataset", v.clone()));
        }
        if let Some(v) = &self.data_dir {
            pairs.push(("data_dir", v.display().to_string()));
        }
        if let Some(v) = self.num_tasks {
            pairs.push(("num_tasks", v.to_string()));
        }
        if let Some(v) = self.memory {
            pairs.push(("memory", v.to_string()));
        }
        if let Some(v) = self.seed {
            pairs.push(("seed", v.to_string()));
        }
        if let Some(v) = self.class_order_seed {
            pairs.push(("class_order_seed", v.to_string()));
        }
        if let Some(v) = &self.method {
            pairs.push(("method", v.clone()));
        }
        for (on, key) in [
            (self.no_aux, "no_aux"),
            (self.no_ted, "no_ted"),
            (self.no_balanced_ce, "no_balanced_ce"),
            (self.no_feature_kd, "no_feature_kd"),
            (self.no_balanced_kd, "no_balanced_kd"),
            (self.distill_full, "distill_full"),
        ] {
            if on {
                pairs.push((key, "true".into()));
            }
        }
        for (k, v) in &pairs {
            s.apply(k, v)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            s.apply(k, v)?;
        }
        Ok(s)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let settings = args.settings()?;
            let out = args.out.clone().unwrap_or_else(default_out_dir);
            let record = settings.run(Some(&out))?;
            println!(
                "{} AVG {:.2} LAST {:.2} ({} stages) -> {}",
                settings.method,
                record.avg()?,
                record.last()?,
                record.rows.len(),
                out.display()
            );
        }
        Command::Sweep { grid, out } => {
            let text = fs::read_to_string(&grid).map_err(|e| Error::io(&grid, e))?;
            let out = out.unwrap_or_else(default_out_dir);
            let results = sweep(&text, &out)?;
            print!("{}", summary_table(&results));
        }
        Command::Report { input } => {
            let groups = report(&input)?;
            write_atomic(&input.join("report_summary.csv"), &report_summary_csv(&groups)?)?;
            write_atomic(&input.join("report_curves.csv"), &report_curves_csv(&groups)?)?;
            print!("{}", report_table(&groups));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}

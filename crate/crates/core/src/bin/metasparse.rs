use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use metasparse::harness::{apply_override, collect_records, exit_code, report, run, Checkpoint, RunConfig};
use metasparse::{Error, Result};

#[derive(Parser)]
#[command(name = "metasparse", version, about = "Meta-learned group sparsity for multi-task networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config and write its artifacts.
    Run(RunArgs),
    /// Aggregate run records into a comparison table and a profile chart.
    Report {
        /// Run directories (searched recursively for record.json).
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Print the mask and zero groups stored in a checkpoint.
    InspectMask {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root directory for run artifacts.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    mode: Option<String>,
    /// Replaces the seed list; repeat for several seeds.
    #[arg(long)]
    seed: Vec<u64>,
    #[arg(long)]
    sparsity_mode: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    regrow_prob: Option<f64>,
    #[arg(long)]
    task: Option<usize>,
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    mask_strategy: Option<String>,
    /// A percentage or `meta_achieved`.
    #[arg(long)]
    budget: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    prune_interval: Option<usize>,
    #[arg(long)]
    dense_checkpoint: Option<PathBuf>,
    #[arg(long)]
    meta_checkpoint: Option<PathBuf>,
    /// Any other key, dotted for sections: `--set train.lr_backbone=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn config_from(args: &RunArgs) -> Result<RunConfig> {
    let mut table = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?
        }
        None => toml::Table::new(),
    };
    let mut put = |key: &str, value: toml::Value| {
        table.insert(key.to_string(), value);
    };
    let s = |v: &String| toml::Value::String(v.clone());
    let path = |p: &PathBuf| toml::Value::String(p.display().to_string());
    if let Some(v) = &args.mode {
        put("mode", s(v));
    }
    if !args.seed.is_empty() {
        put("seeds", toml::Value::Array(args.seed.iter().map(|&x| toml::Value::Integer(x as i64)).collect()));
    }
    if let Some(v) = &args.sparsity_mode {
        put("sparsity_mode", s(v));
    }
    if let Some(v) = args.lambda {
        put("lambda", toml::Value::Float(v));
    }
    if let Some(v) = args.regrow_prob {
        put("regrow_prob", toml::Value::Float(v));
    }
    if let Some(v) = args.task {
        put("task", toml::Value::Integer(v as i64));
    }
    if let Some(v) = &args.regime {
        put("regime", s(v));
    }
    if let Some(v) = &args.schedule {
        put("schedule", s(v));
    }
    if let Some(v) = &args.mask_strategy {
        put("mask_strategy", s(v));
    }
    if let Some(v) = &args.budget {
        put("budget", v.parse::<f64>().map(toml::Value::Float).unwrap_or_else(|_| s(v)));
    }
    if let Some(v) = args.steps {
        put("steps", toml::Value::Integer(v as i64));
    }
    if let Some(v) = args.prune_interval {
        put("prune_interval", toml::Value::Integer(v as i64));
    }
    if let Some(v) = &args.dense_checkpoint {
        put("dense_checkpoint", path(v));
    }
    if let Some(v) = &args.meta_checkpoint {
        put("meta_checkpoint", path(v));
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
        apply_override(&mut table, k.trim(), v.trim())?;
    }
    RunConfig::from_table(table)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let config = config_from(&args)?;
            let outcome = run(&config, &args.out)?;
            let s = &outcome.summary;
            println!("{}", outcome.dir.display());
            println!(
                "{}: parameter sparsity {:.2} ± {:.2}%, group sparsity {:.2} ± {:.2}%, mean test loss {:.4} ± {:.4}",
                s.label, s.parameter_sparsity.mean, s.parameter_sparsity.std, s.group_sparsity.mean, s.group_sparsity.std, s.mean_test_loss.mean, s.mean_test_loss.std
            );
        }
        Command::Report { runs, out } => {
            let records = collect_records(&runs)?;
            let r = report(&records)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("report.csv"), &r.csv)?;
            std::fs::write(out.join("profile.svg"), &r.svg)?;
            print!("{}", r.csv);
        }
        Command::InspectMask { checkpoint } => {
            let ck = Checkpoint::read(&checkpoint)?;
            let model = ck.to_model()?;
            println!("config hash {}", ck.config_hash_hex());
            println!("lambda_raw {}", ck.lambda_raw);
            for layer in model.governed_layers() {
                let id = layer.partition.parameter_id();
                let zeros = layer.partition.zero_groups(layer.data);
                let idx: Vec<usize> = zeros.iter().enumerate().filter(|z| *z.1).map(|z| z.0).collect();
                let masked = ck.masks.get(id).map(|m| m.iter().filter(|&&b| !b).count());
                println!(
                    "{id}: {}/{} groups zero {:?}, {} masked entries",
                    idx.len(),
                    zeros.len(),
                    idx,
                    masked.map_or("no".to_string(), |m| m.to_string())
                );
            }
            let sp = model.sparsity();
            println!("parameter sparsity {:.2}%, group sparsity {:.2}%", sp.parameter_sparsity_percent, sp.group_sparsity_percent);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

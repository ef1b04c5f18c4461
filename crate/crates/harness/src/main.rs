use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use kmevo_harness::checks::verify_theory;
use kmevo_harness::config::ExperimentConfig;
use kmevo_harness::ecdf::{compute_ecdf, default_targets};
use kmevo_harness::experiment::{params_hash, run_ablation, run_eval, suite_jobs, train, Variant};
use kmevo_harness::record::{hex_digest, load_records, write_run};
use kmevo_harness::HarnessError;
use kmevo_tensor::checkpoint;

#[derive(Parser)]
#[command(name = "kmevo", version, about = "Learned fixed-point evolutionary optimizer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train the operator and save a checkpoint.
    MetaTrain {
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Evaluate solvers on the config's suite, one run directory per job.
    Evaluate {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Train and evaluate an ablation variant against the full model (`all` runs every variant).
    Ablate {
        variant: String,
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run the theory checks.
    VerifyTheory {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-solver ECDF over the records in a directory.
    Ecdf { records: PathBuf },
}

/// Outcome of a subcommand that ran to completion.
enum Status {
    Ok,
    ChecksFailed,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn meta_train(config: &Path, out: &Path) -> anyhow::Result<Status> {
    let cfg = ExperimentConfig::load(config)?;
    let text = cfg.to_text();
    let id = &hex_digest(text.as_bytes())[..16];
    let dir = out.join(format!("train-{id}"));
    fs::create_dir_all(&dir)?;
    let result = train(&cfg.meta)?;
    let ckpt = dir.join("params.ckpt");
    checkpoint::save(&ckpt, &result.params, id)?;
    fs::write(dir.join("config.txt"), &text)?;
    write_json(&dir.join("train.json"), &result.record)?;
    let first = result.record.meta_loss.first().copied().unwrap_or(f64::NAN);
    let last = result.record.meta_loss.last().copied().unwrap_or(f64::NAN);
    println!("meta-loss {first:.4} -> {last:.4} over {} iterations", cfg.meta.iterations);
    println!("checkpoint {}", ckpt.display());
    Ok(Status::Ok)
}

fn evaluate(ckpt: &Path, config: &Path, out: &Path) -> anyhow::Result<Status> {
    let cfg = ExperimentConfig::load(config)?;
    let (store, _) = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let runs = run_eval(&cfg, Some(&store), &suite_jobs(&cfg))?;
    let mut by_solver: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &runs {
        write_run(out, &r.record, &r.trajectory)?;
        by_solver.entry(r.record.solver.to_string()).or_default().push(r.record.final_error);
    }
    for (solver, errs) in &by_solver {
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        println!("{solver:<14} {} runs, mean final error {mean:.4e}", errs.len());
    }
    println!("params {} -> {}", &params_hash(&store)[..16], out.display());
    Ok(Status::Ok)
}

fn ablate(variant: &str, config: &Path, out: &Path) -> anyhow::Result<Status> {
    let cfg = ExperimentConfig::load(config)?;
    let variants = if variant == "all" {
        Variant::ALL.to_vec()
    } else {
        vec![variant.parse::<Variant>()?]
    };
    let table = run_ablation(&cfg, &variants)?;
    print!("{}", table.render());
    fs::create_dir_all(out)?;
    let id = &hex_digest(format!("{}\0{variant}", cfg.to_text()).as_bytes())[..16];
    let path = out.join(format!("ablation-{id}.json"));
    write_json(&path, &table)?;
    println!("table {}", path.display());
    Ok(Status::Ok)
}

fn theory(config: &Path, ckpt: Option<&Path>) -> anyhow::Result<Status> {
    let cfg = ExperimentConfig::load(config)?;
    let store = ckpt.map(checkpoint::load).transpose()?.map(|(s, _)| s);
    let checks = verify_theory(&cfg, store.as_ref())?;
    for c in &checks {
        println!("{}", c.line());
    }
    Ok(if checks.iter().all(|c| c.pass) {
        Status::Ok
    } else {
        Status::ChecksFailed
    })
}

fn ecdf(dir: &Path) -> anyhow::Result<Status> {
    let records = load_records(dir)?;
    let mut groups: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for r in records {
        groups.entry(r.solver.to_string()).or_default().push(r);
    }
    if groups.is_empty() {
        return Err(HarnessError::Contract(format!("no records under {}", dir.display())).into());
    }
    let targets = default_targets();
    let mut curves = BTreeMap::new();
    for (solver, recs) in &groups {
        let c = compute_ecdf(recs, &targets)?;
        println!(
            "{solver:<14} {} runs: {:.3} at 10%, {:.3} at 100% of budget {}",
            recs.len(),
            c.at_fraction(0.1),
            c.at_fraction(1.0),
            c.budget
        );
        curves.insert(solver.clone(), c);
    }
    let path = dir.join("ecdf.json");
    write_json(&path, &curves)?;
    println!("curves {}", path.display());
    Ok(Status::Ok)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<HarnessError>() {
        Some(e) if e.is_config() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::MetaTrain { config, out } => meta_train(config, out),
        Command::Evaluate { checkpoint, config, out } => evaluate(checkpoint, config, out),
        Command::Ablate { variant, config, out } => ablate(variant, config, out),
        Command::VerifyTheory { config, checkpoint } => theory(config, checkpoint.as_deref()),
        Command::Ecdf { records } => ecdf(records),
    };
    match outcome {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::ChecksFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

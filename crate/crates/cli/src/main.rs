use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use iern_core::causal::oracle_checks;
use iern_core::error::LabError;
use iern_core::experiment::{compare, evaluate, ExperimentConfig};
use iern_core::iern::gradcheck_tiny;
use iern_core::runner::train_method;
use iern_core::store::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_json};
use iern_core::Result;
use numcore::NumError;

#[derive(Parser)]
#[command(name = "iern", version, about = "Interventional emotion recognition lab")]
struct Cli {
    /// TOML experiment config; `compare` accepts several.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Prints the effective config (defaults filled in) and exits.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the train and test datasets under `<out>/train` and `<out>/test`.
    Gen,
    /// Trains the configured method; writes a checkpoint and a JSON-lines log.
    Train,
    /// Evaluates a checkpoint on a dataset and writes `<out>/report.json`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Trains and evaluates every configured method over several seeds.
    Compare,
    /// Runs the causal-oracle fixtures.
    Oracle,
    /// Finite-difference check of every loss term on a tiny model.
    Gradcheck,
}

fn load_configs(cli: &Cli) -> Result<Vec<ExperimentConfig>> {
    let mut configs = if cli.config.is_empty() {
        vec![ExperimentConfig::default()]
    } else {
        cli.config.iter().map(|p| ExperimentConfig::load(p)).collect::<Result<Vec<_>>>()?
    };
    for c in &mut configs {
        if let Some(s) = cli.seed {
            c.seed = s;
        }
        if let Some(o) = &cli.out {
            c.out = o.clone();
        }
    }
    Ok(configs)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| LabError::Io { path: dir.display().to_string(), source })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| LabError::Io { path: path.display().to_string(), source })
}

fn print_counts(name: &str, counts: &[Vec<usize>]) {
    println!("{name}: rows are emotions, columns confounders");
    for (e, row) in counts.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|n| format!("{n:5}")).collect();
        println!("  e{e}: {}", cells.join(""));
    }
}

fn cmd_gen(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let (train, test) = cfg.data.realize(cfg.seed)?;
    for (name, data) in [("train", &train), ("test", &test)] {
        let dir = cfg.out.join(name);
        let m = save_dataset(&dir, data)?;
        print_counts(&format!("{name} ({} samples) -> {}", m.n_samples, dir.display()), &m.counts);
    }
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let (train, _) = cfg.data.realize(cfg.seed)?;
    let arch = cfg.architecture(&train)?;
    let trained = train_method(cfg.method, &arch, &train, &cfg.settings(cfg.seed))?;
    create_dir(&cfg.out)?;
    let mut log = String::new();
    for rec in &trained.log {
        log.push_str(&serde_json::to_string(rec).map_err(|e| LabError::Format { path: "log".into(), reason: e.to_string() })?);
        log.push('\n');
    }
    write_text(&cfg.out.join("train_log.jsonl"), &log)?;
    write_text(&cfg.out.join("config.toml"), &cfg.to_toml()?)?;
    save_checkpoint(&cfg.out.join("checkpoint"), &trained, &arch, cfg.seed)?;
    if let Some(last) = trained.log.last() {
        println!(
            "{} trained for {} epochs ({} steps): total {:.5}, train accuracy {:.4}",
            cfg.method,
            trained.log.len(),
            trained.steps,
            last.total,
            last.train_acc
        );
    }
    println!("checkpoint -> {}", cfg.out.join("checkpoint").display());
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, dataset: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let data = load_dataset(dataset)?;
    if data.is_empty() {
        return Err(LabError::Validation(format!("dataset {} is empty", dataset.display())));
    }
    let arch = &ck.manifest.architecture;
    let shape = data.samples[0].x.shape();
    if shape != arch.input.as_slice() || data.n_emotions() != arch.n_emotions || data.n_confounders() != arch.n_confounders {
        return Err(LabError::Compatibility(format!(
            "checkpoint expects {:?} with {} emotions and {} confounders; dataset has {:?}, {}, {}",
            arch.input,
            arch.n_emotions,
            arch.n_confounders,
            shape,
            data.n_emotions(),
            data.n_confounders()
        )));
    }
    let trained = iern_core::runner::Trained { method: ck.manifest.method, model: ck.model, log: Vec::new(), steps: ck.manifest.step };
    let mut report = evaluate(&trained, &data)?;
    report.split = Some(format!("{:?}", data.split).to_lowercase());
    create_dir(&cfg.out)?;
    let path = cfg.out.join("report.json");
    write_json(&path, &report)?;
    println!("mean accuracy {:.4} over {} samples -> {}", report.mean_acc, report.total(), path.display());
    Ok(())
}

fn cmd_compare(configs: &[ExperimentConfig]) -> Result<()> {
    let out = configs[0].out.clone();
    let result = compare(configs, |line| eprintln!("{line}"))?;
    let reports = out.join("reports");
    create_dir(&reports)?;
    for row in &result.rows {
        for (seed, r) in row.seeds.iter().zip(&row.reports) {
            write_json(&reports.join(format!("{}_l2_{:e}_seed{seed}.json", row.method, row.lambda2)), r)?;
        }
    }
    write_json(&out.join("comparison.json"), &result)?;
    let table = result.table();
    write_text(&out.join("comparison.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_oracle(cfg: &ExperimentConfig, write: bool) -> Result<()> {
    let checks = oracle_checks(cfg.seed, 50, 1_000_000)?;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if write {
        create_dir(&cfg.out)?;
        write_json(&cfg.out.join("oracle.json"), &checks)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(LabError::Validation(format!("oracle checks failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &ExperimentConfig, write: bool) -> Result<()> {
    let report = gradcheck_tiny(cfg.seed)?;
    for r in &report {
        println!("{:6} max relative error {:.3e} over {} coordinates", r.term, r.max_rel_error, r.coordinates);
    }
    let worst = report.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("max {worst:.3e}");
    if write {
        create_dir(&cfg.out)?;
        write_json(&cfg.out.join("gradcheck.json"), &report)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let configs = load_configs(cli)?;
    let cfg = &configs[0];
    if cli.print_config {
        for c in &configs {
            print!("{}", c.to_toml()?);
        }
        return Ok(());
    }
    cfg.validate_settings()?;
    match &cli.command {
        None => Err(LabError::Config("no command given; see --help".into())),
        Some(Command::Gen) => cmd_gen(cfg),
        Some(Command::Train) => cmd_train(cfg),
        Some(Command::Eval { checkpoint, dataset }) => cmd_eval(cfg, checkpoint, dataset),
        Some(Command::Compare) => cmd_compare(&configs),
        Some(Command::Oracle) => cmd_oracle(cfg, cli.out.is_some()),
        Some(Command::Gradcheck) => cmd_gradcheck(cfg, cli.out.is_some()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let user_error = matches!(
                e,
                LabError::Validation(_)
                    | LabError::Config(_)
                    | LabError::Io { .. }
                    | LabError::Format { .. }
                    | LabError::Compatibility(_)
                    | LabError::Num(NumError::Config(_))
            );
            ExitCode::from(if user_error { 2 } else { 1 })
        }
    }
}

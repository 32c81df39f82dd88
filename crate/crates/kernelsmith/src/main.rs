use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use kernelsmith::config::{GeneratorKind, RunConfig};
use kernelsmith::generator::{
    GeneratorBackend, RemoteChatGenerator, ScriptedGenerator,
};
use kernelsmith::memory::{MemoryBank, SharedBank};
use kernelsmith::metrics::summarize_distribution;
use kernelsmith::orchestrator::{
    run_pass_at_k, run_refinement_baseline, run_suite, OrchestratorConfig, SharedValueState,
    SuiteReport, Task,
};
use kernelsmith::simenv::{
    build_world, run_ablation, synthetic_section_schema, AblationReport, SyntheticGenerator,
    SyntheticVerifier,
};
use kernelsmith::valuation::{QTable, StepMode};
use kernelsmith::verifier::{HackRuleSet, SubprocessBackend};

#[derive(Parser)]
#[command(name = "kernelsmith", about = "Iterative kernel synthesis over a value-scored memory bank")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the episode loop over a task file with the configured backends.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the configured mode over the synthetic world.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Paired value-driven vs heuristic retrieval comparison.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-render CSV/JSON summaries from an existing report directory.
    Report { report_dir: PathBuf },
    /// Inspect a persisted memory bank.
    Memory {
        #[command(subcommand)]
        command: MemoryCommand,
    },
    /// Budget-matched baselines.
    Baseline {
        #[command(subcommand)]
        command: BaselineCommand,
    },
}

#[derive(Subcommand)]
enum MemoryCommand {
    /// List entries with kind, tags, and learned values.
    Ls {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        q_table: Option<PathBuf>,
    },
    /// Print one entry in full.
    Show {
        id: String,
        #[arg(long)]
        bank: PathBuf,
    },
}

#[derive(Subcommand)]
enum BaselineCommand {
    /// k stateless generations per task, no memory, no values.
    PassAtK {
        #[arg(long)]
        config: PathBuf,
    },
    /// Two-phase loop with memory restricted to each task's own history.
    Refine {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Simulate { config } => cmd_simulate(&config),
        Command::Ablate { config } => cmd_ablate(&config),
        Command::Report { report_dir } => cmd_report(&report_dir),
        Command::Memory { command } => cmd_memory(command),
        Command::Baseline { command } => cmd_baseline(command),
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn suite_csv(report: &SuiteReport) -> String {
    let mut out = String::from("iteration,cumulative_CR,cumulative_Acc\n");
    for p in &report.metrics.per_iteration {
        out.push_str(&format!("{},{},{}\n", p.iteration, p.cumulative_cr, p.cumulative_acc));
    }
    out
}

fn write_suite_report(dir: &Path, report: &SuiteReport) -> Result<()> {
    let episodes_dir = dir.join("episodes");
    std::fs::create_dir_all(&episodes_dir)?;
    std::fs::write(dir.join("suite.json"), serde_json::to_string_pretty(report)? + "\n")?;
    std::fs::write(dir.join("suite.csv"), suite_csv(report))?;
    for episode in &report.episodes {
        std::fs::write(
            episodes_dir.join(format!("{}.json", episode.task_id)),
            serde_json::to_string_pretty(episode)? + "\n",
        )?;
    }
    Ok(())
}

fn print_suite_summary(report: &SuiteReport) {
    println!(
        "tasks: {}  final CR: {:.3}  final Acc: {:.3}",
        report.episodes.len(),
        report.metrics.final_cr,
        report.metrics.final_acc
    );
    let speedups: Vec<f64> = report.episodes.iter().filter_map(|e| e.speedup).collect();
    if let Some(s) = summarize_distribution(&speedups) {
        println!("speedup median: {:.2}x  IQR: {:.2}-{:.2}x", s.median, s.q1, s.q3);
    }
}

fn cmd_run(config_path: &Path) -> Result<()> {
    let cfg = load_config(config_path)?;
    let tasks_file = cfg
        .paths
        .tasks_file
        .as_ref()
        .context("run requires paths.tasks_file (a JSON array of tasks)")?;
    let tasks: Vec<Task> = serde_json::from_str(&std::fs::read_to_string(tasks_file)?)
        .with_context(|| format!("parsing tasks from {}", tasks_file.display()))?;
    if tasks.is_empty() {
        bail!("task list in {} is empty", tasks_file.display());
    }
    if cfg.verifier.backend_command.is_empty() {
        bail!("run requires verifier.backend_command");
    }

    let bank = if cfg.paths.bank_file.exists() {
        MemoryBank::load(&cfg.paths.bank_file)?
    } else {
        MemoryBank::new()
    };
    let bank = SharedBank::new(bank);
    let values = SharedValueState::default();

    let generator: Box<dyn GeneratorBackend> = match cfg.generator.kind {
        GeneratorKind::Scripted => Box::new(ScriptedGenerator::new(cfg.generator.default_response.clone())),
        GeneratorKind::Remote => Box::new(RemoteChatGenerator::new(cfg.generator.remote.clone())?),
        GeneratorKind::Synthetic => bail!("synthetic generator is only valid for simulate/ablate"),
    };
    let backend = SubprocessBackend::new(
        cfg.verifier.backend_command[0].clone(),
        cfg.verifier.backend_command[1..].to_vec(),
        // subprocess ceiling leaves headroom over the in-protocol timeout
        std::time::Duration::from_secs_f64(cfg.verifier.timeout_s + 30.0),
    );

    let oc = cfg.orchestrator();
    let report = run_suite(&tasks, &bank, &values, generator.as_ref(), &backend, &oc, cfg.seed)?;
    write_suite_report(&cfg.paths.report_dir, &report)?;
    bank.snapshot().persist(&cfg.paths.bank_file)?;
    values.lock().q.persist(&cfg.paths.q_table_file)?;
    print_suite_summary(&report);
    Ok(())
}

fn synthetic_cfg(cfg: &RunConfig) -> OrchestratorConfig {
    let mut oc = cfg.orchestrator();
    oc.section_schema = synthetic_section_schema();
    oc.hack_rules = HackRuleSet::default();
    oc
}

fn build_synthetic(cfg: &RunConfig) -> Result<(Vec<Task>, SharedBank, SyntheticVerifier)> {
    let (world, tasks, bank) = build_world(&cfg.world, cfg.seed)?;
    let backend = SyntheticVerifier::new(Arc::new(world), cfg.seed);
    Ok((tasks, SharedBank::new(bank), backend))
}

fn cmd_simulate(config_path: &Path) -> Result<()> {
    let cfg = load_config(config_path)?;
    let (tasks, bank, backend) = build_synthetic(&cfg)?;
    let values = SharedValueState::default();
    let oc = synthetic_cfg(&cfg);
    let report = run_suite(&tasks, &bank, &values, &SyntheticGenerator, &backend, &oc, cfg.seed)?;
    write_suite_report(&cfg.paths.report_dir, &report)?;
    print_suite_summary(&report);
    Ok(())
}

fn cmd_ablate(config_path: &Path) -> Result<()> {
    let cfg = load_config(config_path)?;
    let report = run_ablation(&cfg.world, cfg.trials, cfg.seed, cfg.budget_t)?;
    std::fs::create_dir_all(&cfg.paths.report_dir)?;
    std::fs::write(
        cfg.paths.report_dir.join("ablation.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    std::fs::write(cfg.paths.report_dir.join("ablation.csv"), report.to_csv())?;
    println!(
        "trials: {}  value wins: {}  mean delta: {:.3}",
        report.trials.len(),
        report.value_wins,
        report.mean_delta
    );
    Ok(())
}

fn cmd_report(report_dir: &Path) -> Result<()> {
    let mut rendered = false;
    let suite_path = report_dir.join("suite.json");
    if suite_path.exists() {
        let report: SuiteReport = serde_json::from_str(&std::fs::read_to_string(&suite_path)?)?;
        std::fs::write(report_dir.join("suite.csv"), suite_csv(&report))?;
        print_suite_summary(&report);
        rendered = true;
    }
    let ablation_path = report_dir.join("ablation.json");
    if ablation_path.exists() {
        let report: AblationReport = serde_json::from_str(&std::fs::read_to_string(&ablation_path)?)?;
        std::fs::write(report_dir.join("ablation.csv"), report.to_csv())?;
        println!(
            "ablation trials: {}  value wins: {}  mean delta: {:.3}",
            report.trials.len(),
            report.value_wins,
            report.mean_delta
        );
        rendered = true;
    }
    if !rendered {
        bail!("no suite.json or ablation.json under {}", report_dir.display());
    }
    Ok(())
}

fn cmd_memory(command: MemoryCommand) -> Result<()> {
    match command {
        MemoryCommand::Ls { bank, q_table } => {
            let bank = MemoryBank::load(&bank)?;
            let table = match q_table {
                Some(path) => Some(QTable::load(&path, StepMode::Constant(0.1), 0.0)?),
                None => None,
            };
            for entry in bank.entries() {
                let tags: Vec<&str> = entry.tags.iter().map(String::as_str).collect();
                let values = table
                    .as_ref()
                    .map(|t| {
                        use kernelsmith::valuation::{QKey, Stage};
                        format!(
                            "  q_draft={:.3} q_refine={:.3}",
                            t.q_of(&QKey::new(Stage::Draft, entry.id.clone())),
                            t.q_of(&QKey::new(Stage::Refine, entry.id.clone()))
                        )
                    })
                    .unwrap_or_default();
                println!("{}\t{:?}\t[{}]{}", entry.id, entry.kind, tags.join(","), values);
            }
        }
        MemoryCommand::Show { id, bank } => {
            let bank = MemoryBank::load(&bank)?;
            match bank.get(&id) {
                Some(entry) => println!("{}", serde_json::to_string_pretty(entry)?),
                None => bail!("no entry with id {id}"),
            }
        }
    }
    Ok(())
}

fn cmd_baseline(command: BaselineCommand) -> Result<()> {
    match command {
        BaselineCommand::PassAtK { config } => {
            let cfg = load_config(&config)?;
            let (tasks, _bank, backend) = build_synthetic(&cfg)?;
            let oc = synthetic_cfg(&cfg);
            let mut episodes = Vec::new();
            for task in &tasks {
                episodes.push(run_pass_at_k(task, &SyntheticGenerator, &backend, &oc, cfg.pass_k, cfg.seed)?);
            }
            let metrics = kernelsmith::metrics::compute_suite_metrics(&episodes);
            let report = SuiteReport { episodes, metrics };
            write_suite_report(&cfg.paths.report_dir, &report)?;
            print_suite_summary(&report);
        }
        BaselineCommand::Refine { config } => {
            let cfg = load_config(&config)?;
            let (tasks, bank, backend) = build_synthetic(&cfg)?;
            let oc = synthetic_cfg(&cfg);
            let mut episodes = Vec::new();
            for task in &tasks {
                episodes.push(run_refinement_baseline(task, &bank, &SyntheticGenerator, &backend, &oc, cfg.seed)?);
            }
            let metrics = kernelsmith::metrics::compute_suite_metrics(&episodes);
            let report = SuiteReport { episodes, metrics };
            write_suite_report(&cfg.paths.report_dir, &report)?;
            print_suite_summary(&report);
        }
    }
    Ok(())
}

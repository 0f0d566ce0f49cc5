//! Command-line front end: attack sweeps, defense sweeps, table presets,
//! and report aggregation over previously recorded runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pacol::data::AttackKind;
use pacol::harness::{
    aggregate, defense_table, emit_outputs, evaluate_defenses, prepare_defense_setting,
    run_scenario, AttackSetting, ExperimentConfig, LearnerId, ResultTable, RunRecord, Scale,
    StreamId, DEFENSE_VICTIM_ITERS,
};
use pacol::attack::ThreatKind;
use pacol::{Error, Result};

#[derive(Parser)]
#[command(name = "pacol", about = "Poisoning testbed for continual learners", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Base seed; per-run seeds are base + run index.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hyperparameter scale preset.
    #[arg(long, default_value = "paper")]
    scale: Scale,
    /// Output directory for records and tables.
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the attack scenario described by a TOML config file.
    Attack {
        /// Path to the experiment config.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Sweep sanitization defenses over removal budgets on the 0-1 subset.
    Defend {
        /// Attack whose poisons the filters must catch.
        #[arg(long, value_parser = parse_attack_kind)]
        attack: AttackKind,
        /// Poisoned fraction of the carrier task.
        #[arg(long, default_value_t = 0.01)]
        ratio: f64,
        /// Removal budgets to evaluate (fractions).
        #[arg(long, num_args = 1.., default_values_t = vec![0.01, 0.02, 0.03, 0.04, 0.05])]
        budget: Vec<f64>,
        /// Number of seeded victim runs to average over.
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run a preset sweep matching one of the published tables.
    Reproduce {
        /// One of: table1, table2, table3.
        table: String,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Aggregate previously written run records into tables.
    Report {
        /// Directory holding per-config record subdirectories.
        #[arg(long, default_value = "results")]
        records: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn parse_attack_kind(s: &str) -> std::result::Result<AttackKind, String> {
    match s {
        "label-flip" => Ok(AttackKind::LabelFlip),
        "pacol" => Ok(AttackKind::Pacol),
        other => Err(format!("unknown attack {other:?}, expected label-flip or pacol")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Attack { config, common } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            cfg.base_seed = common.seed;
            cfg.scale = common.scale;
            cfg.output_dir = common.out;
            let row = execute_config(&cfg)?;
            let table = ResultTable { rows: vec![row] };
            let files = emit_outputs(&table, &cfg.output_dir.join("tables"), &cfg.hash(), true)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Defend {
            attack,
            ratio,
            budget,
            runs,
            common,
        } => {
            let runs = common.scale.repetitions(runs);
            let victim_iters = match common.scale {
                Scale::Paper => DEFENSE_VICTIM_ITERS,
                Scale::Desk => DEFENSE_VICTIM_ITERS / 5,
            };
            let label = match attack {
                AttackKind::LabelFlip => "label-flip",
                AttackKind::Pacol => "pacol",
            };
            let mut all_rows = Vec::with_capacity(runs);
            for run in 0..runs {
                let setting = prepare_defense_setting(attack, ratio, run, common.seed, victim_iters)?;
                all_rows.push(evaluate_defenses(&setting, label, &budget)?);
                println!("defense run {}/{runs} complete", run + 1);
            }
            let table = defense_table(&all_rows)?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join(format!("defense_{label}.tsv"));
            std::fs::write(&path, table)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Reproduce { table, common } => reproduce(&table, &common),
        Command::Report { records, common } => report(&records, &common.out),
    }
}

/// Run all repetitions of a config, persisting each record, and aggregate.
fn execute_config(cfg: &ExperimentConfig) -> Result<pacol::harness::TableRow> {
    let reps = cfg.effective_repetitions();
    let run_dir = cfg.output_dir.join(cfg.hash());
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(
        run_dir.join("config.json"),
        serde_json::to_string_pretty(cfg).map_err(Error::from)?,
    )?;
    let mut records = Vec::with_capacity(reps);
    for run in 0..reps {
        let record = match run_scenario(cfg, run) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("run {run} failed: {e}");
                RunRecord::failed(run, cfg.base_seed.wrapping_add(run as u64), &e)
            }
        };
        let dir = run_dir.join(format!("run{run}"));
        std::fs::create_dir_all(&dir)?;
        std::fs::write(
            dir.join("record.json"),
            serde_json::to_string(&record).map_err(Error::from)?,
        )?;
        println!(
            "{} {} run {}/{} done in {:.1}s",
            cfg.learner,
            cfg.attack_label(),
            run + 1,
            reps,
            record.wall_seconds
        );
        records.push(record);
    }
    aggregate(cfg, &records)
}

fn attack_grid() -> Vec<Option<AttackSetting>> {
    let mut grid = vec![None];
    for ratio in [0.01, 0.03, 0.05] {
        grid.push(Some(AttackSetting {
            kind: AttackKind::LabelFlip,
            threat: ThreatKind::White,
            ratio,
        }));
        for threat in [ThreatKind::White, ThreatKind::Gray, ThreatKind::Black] {
            grid.push(Some(AttackSetting {
                kind: AttackKind::Pacol,
                threat,
                ratio,
            }));
        }
    }
    grid
}

fn reproduce(table: &str, common: &CommonOpts) -> Result<()> {
    let sweeps: Vec<(StreamId, LearnerId)> = match table {
        "table1" => vec![
            (StreamId::RotationMnist, LearnerId::Ewc),
            (StreamId::RotationMnist, LearnerId::OnlineEwc),
            (StreamId::RotationMnist, LearnerId::Si),
        ],
        "table2" => vec![
            (StreamId::RotationMnist, LearnerId::Dgr),
            (StreamId::SplitMnist, LearnerId::Dgr),
        ],
        "table3" => {
            for attack in [AttackKind::LabelFlip, AttackKind::Pacol] {
                let label = match attack {
                    AttackKind::LabelFlip => "label-flip",
                    AttackKind::Pacol => "pacol",
                };
                let runs = common.scale.repetitions(10);
                let mut all_rows = Vec::new();
                for run in 0..runs {
                    let setting = prepare_defense_setting(
                        attack,
                        0.01,
                        run,
                        common.seed,
                        DEFENSE_VICTIM_ITERS,
                    )?;
                    all_rows.push(evaluate_defenses(
                        &setting,
                        label,
                        &[0.01, 0.02, 0.03, 0.04, 0.05],
                    )?);
                }
                let text = defense_table(&all_rows)?;
                std::fs::create_dir_all(&common.out)?;
                let path = common.out.join(format!("table3_{label}.tsv"));
                std::fs::write(&path, text)?;
                println!("wrote {}", path.display());
            }
            return Ok(());
        }
        "table4" => {
            return Err(Error::Config(
                "table4 needs the natural-image datasets, which this build does not ship; \
                 only the MNIST-based tables are reproducible here"
                    .into(),
            ))
        }
        other => {
            return Err(Error::Config(format!(
                "unknown table {other:?}; expected table1, table2, or table3"
            )))
        }
    };
    let mut rows = Vec::new();
    for (stream, learner) in sweeps {
        for attack in attack_grid() {
            let cfg = ExperimentConfig {
                stream,
                learner,
                attack,
                repetitions: 10,
                base_seed: common.seed,
                output_dir: common.out.clone(),
                scale: common.scale,
                solver_iterations: None,
                generator_iterations: None,
                train_cap: None,
                rotation_max_deg: None,
            };
            rows.push(execute_config(&cfg)?);
        }
    }
    let table_out = ResultTable { rows };
    let files = emit_outputs(&table_out, &common.out.join("tables"), table, true)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn report(records: &PathBuf, out: &PathBuf) -> Result<()> {
    let mut rows = Vec::new();
    for entry in std::fs::read_dir(records)? {
        let dir = entry?.path();
        let config_path = dir.join("config.json");
        if !config_path.is_file() {
            continue;
        }
        let cfg: ExperimentConfig =
            serde_json::from_str(&std::fs::read_to_string(&config_path)?).map_err(Error::from)?;
        let mut recs = Vec::new();
        for run_entry in std::fs::read_dir(&dir)? {
            let record_path = run_entry?.path().join("record.json");
            if record_path.is_file() {
                let rec: RunRecord =
                    serde_json::from_str(&std::fs::read_to_string(&record_path)?)
                        .map_err(Error::from)?;
                recs.push(rec);
            }
        }
        match aggregate(&cfg, &recs) {
            Ok(row) => rows.push(row),
            Err(e) => eprintln!("skipping {}: {e}", dir.display()),
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "no aggregatable run records under {}",
            records.display()
        )));
    }
    rows.sort_by(|a, b| {
        (&a.learner, &a.attack)
            .cmp(&(&b.learner, &b.attack))
            .then(a.ratio.partial_cmp(&b.ratio).unwrap())
    });
    let table = ResultTable { rows };
    let files = emit_outputs(&table, &out.join("tables"), "report", true)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

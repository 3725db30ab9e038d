//! Command-line harness: dataset generation, training runs, ablation
//! grids, and the verification suite.
//!
//! Exit codes: 0 success, 1 failed verification, 2 configuration error,
//! 3 runtime/divergence error. `MCL_LOG=debug` turns on progress chatter.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use mcl::config::RunConfig;
use mcl::data::export_csv;
use mcl::model::save_checkpoint;
use mcl::trainer::{
    self, ablation_cells, metrics_to_csv, run_ablation_cell, GridKind, TrainOutcome,
    ABLATION_CSV_HEADER,
};
use mcl::verify::{self, VerifyOptions};
use mcl::Error;

#[derive(Parser)]
#[command(name = "mcl", version, about = "Semi-supervised domain adaptation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark and write `<out>_source.csv` / `<out>_target.csv`.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output path prefix.
        #[arg(long)]
        out: PathBuf,
        /// Repeatable `key=value` settings that beat the file.
        #[arg(long = "override")]
        overrides: Vec<String>,
    },
    /// Train and write metrics.csv, final.ckpt, and summary.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "override")]
        overrides: Vec<String>,
        /// Comma-separated seed list; runs one training per seed and adds an
        /// aggregate summary.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Run the ablation grid and write ablation.csv.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "override")]
        overrides: Vec<String>,
        #[arg(long)]
        seeds: Option<String>,
        /// Which grid: tab4, tab5, or all.
        #[arg(long, default_value = "all")]
        grid: String,
        /// Grid cells run in parallel; outputs are merged deterministically.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the property suite; exit 0 only if every group passes.
    Verify {
        /// Negative control: inject a wrong backward rule that the suite
        /// must catch.
        #[arg(long, hide = true)]
        inject_grad_bug: bool,
    },
}

fn debug_enabled() -> bool {
    std::env::var("MCL_LOG").map(|v| v == "debug").unwrap_or(false)
}

fn log_debug(msg: &str) {
    if debug_enabled() {
        eprintln!("[mcl] {msg}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> mcl::Result<ExitCode> {
    match cli.command {
        Command::Generate {
            config,
            out,
            overrides,
        } => cmd_generate(&config, &out, &overrides),
        Command::Train {
            config,
            out,
            overrides,
            seeds,
        } => cmd_train(&config, &out, &overrides, seeds.as_deref()),
        Command::Ablate {
            config,
            out,
            overrides,
            seeds,
            grid,
            jobs,
        } => cmd_ablate(&config, &out, &overrides, seeds.as_deref(), &grid, jobs),
        Command::Verify { inject_grad_bug } => cmd_verify(inject_grad_bug),
    }
}

fn load_config(path: &Path, overrides: &[String]) -> mcl::Result<RunConfig> {
    let mut cfg = RunConfig::parse_file(path)?;
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn parse_seeds(arg: Option<&str>, default: u64) -> mcl::Result<Vec<u64>> {
    match arg {
        None => Ok(vec![default]),
        Some(list) => {
            let seeds: Vec<u64> = list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad seed {s:?} in --seeds")))
                })
                .collect::<mcl::Result<_>>()?;
            if seeds.is_empty() {
                return Err(Error::Config("--seeds must list at least one seed".into()));
            }
            Ok(seeds)
        }
    }
}

fn write_file(path: &Path, contents: &str) -> mcl::Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn ensure_dir(path: &Path) -> mcl::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn cmd_generate(config: &Path, out: &Path, overrides: &[String]) -> mcl::Result<ExitCode> {
    let cfg = load_config(config, overrides)?;
    let (source, target) = cfg.datasets_at(cfg.seed)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    let stem = out.to_string_lossy();
    let source_path = PathBuf::from(format!("{stem}_source.csv"));
    let target_path = PathBuf::from(format!("{stem}_target.csv"));
    export_csv(&source, &source_path)?;
    export_csv(&target, &target_path)?;
    println!(
        "wrote {} ({} rows) and {} ({} rows)",
        source_path.display(),
        source.len(),
        target_path.display(),
        target.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_one_training(cfg: &RunConfig, seed: u64) -> mcl::Result<TrainOutcome> {
    let (source, target) = cfg.datasets_at(seed)?;
    let mut train_cfg = cfg.train_config();
    train_cfg.seed = seed;
    log_debug(&format!(
        "training seed {seed} for {} iterations",
        train_cfg.iterations
    ));
    trainer::train_run(&train_cfg, &source, &target)
}

fn summary_text(cfg: &RunConfig, outcome: &TrainOutcome) -> String {
    let mut out = String::new();
    match &outcome.final_eval {
        Some(eval) => {
            out.push_str(&format!("final_accuracy_overall = {:.6}\n", eval.overall));
            out.push_str(&format!("final_accuracy_mca = {:.6}\n", eval.mca));
            if !eval.excluded_classes.is_empty() {
                out.push_str(&format!(
                    "warning: classes {:?} had no evaluation samples and were excluded from the MCA\n",
                    eval.excluded_classes
                ));
            }
        }
        None => {
            out.push_str("final_accuracy_overall = nan\n");
            out.push_str("final_accuracy_mca = nan\n");
        }
    }
    if let Some(d) = &outcome.divergence {
        out.push_str(&format!(
            "diverged = true (non-finite {} at iteration {})\n",
            d.context, d.iteration
        ));
    }
    out.push_str("\n# resolved configuration\n");
    out.push_str(&cfg.echo());
    out
}

fn cmd_train(
    config: &Path,
    out: &Path,
    overrides: &[String],
    seeds: Option<&str>,
) -> mcl::Result<ExitCode> {
    let cfg = load_config(config, overrides)?;
    let seeds = parse_seeds(seeds, cfg.seed)?;
    ensure_dir(out)?;

    let multi = seeds.len() > 1;
    let mut finals = Vec::new();
    let mut diverged = false;
    for &seed in &seeds {
        let outcome = run_one_training(&cfg, seed)?;
        let (metrics_name, ckpt_name) = if multi {
            (
                format!("metrics_seed{seed}.csv"),
                format!("final_seed{seed}.ckpt"),
            )
        } else {
            ("metrics.csv".to_string(), "final.ckpt".to_string())
        };
        write_file(&out.join(metrics_name), &metrics_to_csv(&outcome.metrics))?;
        save_checkpoint(
            &out.join(ckpt_name),
            &outcome.state.params,
            &outcome.state.bank,
        )?;
        if outcome.divergence.is_some() {
            diverged = true;
        }
        if let Some(eval) = &outcome.final_eval {
            log_debug(&format!(
                "seed {seed}: overall {:.4}, mca {:.4}",
                eval.overall, eval.mca
            ));
        }
        finals.push((seed, outcome));
    }

    let mut summary = String::new();
    if multi {
        for (seed, outcome) in &finals {
            match &outcome.final_eval {
                Some(eval) => summary.push_str(&format!(
                    "seed {seed}: overall = {:.6}, mca = {:.6}\n",
                    eval.overall, eval.mca
                )),
                None => summary.push_str(&format!("seed {seed}: diverged\n")),
            }
        }
        let overall: Vec<f64> = finals
            .iter()
            .filter_map(|(_, o)| o.final_eval.as_ref().map(|e| e.overall))
            .collect();
        let mca: Vec<f64> = finals
            .iter()
            .filter_map(|(_, o)| o.final_eval.as_ref().map(|e| e.mca))
            .collect();
        if !overall.is_empty() {
            summary.push_str(&format!(
                "mean_overall = {:.6}, std_overall = {:.6}\n",
                mean(&overall),
                std_dev(&overall)
            ));
            summary.push_str(&format!(
                "mean_mca = {:.6}, std_mca = {:.6}\n",
                mean(&mca),
                std_dev(&mca)
            ));
        }
        summary.push_str("\n# resolved configuration (per-seed runs override `seed`)\n");
        summary.push_str(&cfg.echo());
    } else {
        summary = summary_text(&cfg, &finals[0].1);
    }
    write_file(&out.join("summary.txt"), &summary)?;

    if diverged {
        eprintln!("error: training diverged; last finite metrics preserved");
        return Ok(ExitCode::from(3));
    }
    println!(
        "{}",
        summary.lines().take(2).collect::<Vec<_>>().join("\n")
    );
    Ok(ExitCode::SUCCESS)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn cmd_ablate(
    config: &Path,
    out: &Path,
    overrides: &[String],
    seeds: Option<&str>,
    grid: &str,
    jobs: usize,
) -> mcl::Result<ExitCode> {
    let cfg = load_config(config, overrides)?;
    let seeds = parse_seeds(seeds, cfg.seed)?;
    let grid = GridKind::parse(grid)?;
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    ensure_dir(out)?;

    let base = cfg.train_config();
    let cells = ablation_cells(grid);
    let tasks: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..seeds.len()).map(move |s| (c, s)))
        .collect();

    // Cells run in parallel, results land in task order, so the CSV never
    // depends on scheduling.
    let results: Vec<Mutex<Option<mcl::Result<trainer::AblationRow>>>> =
        tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = jobs.min(tasks.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let t = next.fetch_add(1, Ordering::Relaxed);
                if t >= tasks.len() {
                    break;
                }
                let (ci, si) = tasks[t];
                let cell = &cells[ci];
                let seed = seeds[si];
                let data = |s: u64| cfg.datasets_at(s);
                let row = run_ablation_cell(&base, cell, seed, &data);
                if let Ok(r) = &row {
                    log_debug(&format!(
                        "{} seed {}: overall {:.4}",
                        r.config_id, r.seed, r.acc_overall
                    ));
                }
                *results[t].lock().unwrap() = Some(row);
            });
        }
    });

    let mut csv = String::from(ABLATION_CSV_HEADER);
    csv.push('\n');
    for cell in results {
        let row = cell.into_inner().unwrap().expect("every task ran")?;
        csv.push_str(&row.to_csv_row());
        csv.push('\n');
    }
    let path = out.join("ablation.csv");
    write_file(&path, &csv)?;
    println!(
        "wrote {} ({} configurations x {} seeds)",
        path.display(),
        cells.len(),
        seeds.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(inject_grad_bug: bool) -> mcl::Result<ExitCode> {
    let report = verify::run(&VerifyOptions {
        inject_gradient_fault: inject_grad_bug,
    })?;
    print!("{}", report.render());
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

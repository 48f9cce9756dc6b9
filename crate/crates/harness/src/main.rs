use clap::{Parser, Subcommand};
use jenga_core::perception::{parse_mask_file, MaskImage};
use jenga_harness::bench::{
    bench_force_profiles, bench_segmentation_eval, bench_servo, bench_tracking, force_rows, synthetic_segmentation_set,
};
use jenga_harness::config::GameMode;
use jenga_harness::montecarlo::monte_carlo;
use jenga_harness::output::{to_csv, to_jsonl, write_file};
use jenga_harness::{run_game, HarnessError, RunConfig};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "jenga", version, about = "Simulated vision- and force-guided Jenga robot")]
struct Cli {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for output files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Print the result summary as JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Play one game.
    Game {
        /// Override the approach mode from the config.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<GameMode>,
    },
    /// Play many games and aggregate their outcomes.
    MonteCarlo {
        #[arg(long, default_value_t = 18)]
        runs: usize,
    },
    /// Force-versus-time traces of blocks across the tower.
    ForceProfile {
        #[arg(long)]
        blocks: Option<usize>,
    },
    /// Tracking robustness of single-block and group models while the tower turns.
    TrackingBench,
    /// Servo convergence time per level and alignment accuracy.
    ServoBench {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Mask AP at several IoU thresholds.
    SegEval {
        /// Predicted masks; with --gt. Without both, a synthetic set is generated.
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
}

fn parse_mode(s: &str) -> Result<GameMode, String> {
    match s {
        "fast" => Ok(GameMode::Fast),
        "full" => Ok(GameMode::Full),
        _ => Err(format!("unknown mode {s:?} (expected fast or full)")),
    }
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    json: bool,
    hash: String,
}

impl Ctx {
    fn write(&self, name: &str, body: &str) -> Result<(), HarnessError> {
        write_file(&self.out, name, self.seed, &self.hash, body)
    }

    fn report<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
        } else {
            print!("{}", text());
        }
    }
}

fn read_masks(path: &Path) -> Result<Vec<MaskImage>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    parse_mask_file(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut ctx = Ctx {
        hash: cfg.hash(),
        cfg,
        seed: cli.seed,
        out: cli.out,
        json: cli.json,
    };
    match cli.command {
        Command::Game { mode } => {
            if let Some(m) = mode {
                ctx.cfg.game.mode = m;
                ctx.hash = ctx.cfg.hash();
            }
            let log = run_game(&ctx.cfg, ctx.seed)?;
            ctx.write("game.jsonl", &to_jsonl(&log.attempts))?;
            ctx.report(&log, || {
                let t = &log.totals;
                format!(
                    "attempts {}  extracted {}  stuck-correct {}  errors {}  success {:.1}%  end {:?}\n",
                    t.attempts,
                    t.extracted_ok,
                    t.stuck_correct,
                    t.errors,
                    100.0 * t.success_fraction(),
                    log.end
                )
            });
        }
        Command::MonteCarlo { runs } => {
            let mc = monte_carlo(&ctx.cfg, runs, ctx.seed)?;
            ctx.write("runs.csv", &to_csv(&mc.rows)?)?;
            ctx.write("summary.json", &(serde_json::to_string_pretty(&mc.summary).expect("summary serializes") + "\n"))?;
            let s = &mc.summary;
            ctx.report(s, || {
                let mut out = String::from("metric          mean     std     max\n");
                for (name, st) in [
                    ("extracted", s.extracted),
                    ("stuck_correct", s.stuck_correct),
                    ("errors", s.errors),
                    ("attempts", s.attempts),
                    ("correct", s.correct),
                ] {
                    out += &format!("{name:<14} {:>6.2} {:>7.2} {:>7.0}\n", st.mean, st.std, st.max);
                }
                out += &format!("success fraction {:.1}%  collapsed {:.0}%\n", 100.0 * s.success_fraction, 100.0 * s.collapse_fraction);
                out
            });
        }
        Command::ForceProfile { blocks } => {
            let n = blocks.unwrap_or(ctx.cfg.bench.force_blocks);
            let profiles = bench_force_profiles(&ctx.cfg, n, ctx.seed)?;
            ctx.write("force_profiles.csv", &to_csv(&force_rows(&ctx.cfg, &profiles))?)?;
            ctx.report(&profiles, || {
                profiles
                    .iter()
                    .map(|p| {
                        format!(
                            "block {:>3} level {:>2} slot {}  plateau {:.3} N  {}\n",
                            p.block,
                            p.level,
                            p.slot,
                            p.plateau,
                            if p.load_bearing { "loaded" } else { "free" }
                        )
                    })
                    .collect()
            });
        }
        Command::TrackingBench => {
            let rows = bench_tracking(&ctx.cfg, ctx.seed)?;
            ctx.write("tracking.csv", &to_csv(&rows)?)?;
            ctx.report(&rows, || {
                let mut out = String::from("level  omega  single%  group%\n");
                for r in &rows {
                    out += &format!("{:>5} {:>6.1} {:>8.1} {:>7.1}\n", r.level, r.omega, r.single_pct, r.group_pct);
                }
                out
            });
        }
        Command::ServoBench { trials } => {
            let n = trials.unwrap_or(ctx.cfg.bench.servo_trials);
            let b = bench_servo(&ctx.cfg, n, ctx.seed)?;
            ctx.write("servo_trials.csv", &to_csv(&b.trials)?)?;
            ctx.write("servo_levels.csv", &to_csv(&b.levels)?)?;
            ctx.report(&b.accuracy, || {
                let mut out = String::from("level  converged  time mean  time std\n");
                for r in &b.levels {
                    out += &format!("{:>5} {:>6}/{:<3} {:>9.1} {:>9.1}\n", r.level, r.converged, r.trials, r.time_mean_s, r.time_std_s);
                }
                let a = &b.accuracy;
                out += &format!(
                    "err_x {:.3} +- {:.3} mm  err_y {:.3} +- {:.3} mm  max offset {:.2} mm\n",
                    a.err_x_mean_mm, a.err_x_std_mm, a.err_y_mean_mm, a.err_y_std_mm, a.max_offset_mm
                );
                out
            });
        }
        Command::SegEval { pred, gt, thresholds } => {
            let thresholds = thresholds.unwrap_or_else(|| ctx.cfg.bench.iou_thresholds.clone());
            if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
                return Err(HarnessError::Config(format!("IoU threshold {t} outside (0, 1]")));
            }
            let (p, g) = match (pred, gt) {
                (Some(p), Some(g)) => (read_masks(&p)?, read_masks(&g)?),
                _ => {
                    let (g, p) = synthetic_segmentation_set(&ctx.cfg, ctx.cfg.bench.seg_images, ctx.seed)?;
                    (p, g)
                }
            };
            let table = bench_segmentation_eval(&p, &g, &thresholds);
            ctx.write("segmentation_ap.csv", &to_csv(&table.rows)?)?;
            ctx.report(&table, || {
                let mut out = String::new();
                for r in &table.rows {
                    out += &format!("AP{:<3.0} {:>6.2}\n", 100.0 * r.iou, r.ap);
                }
                out += &format!("mean  {:>6.2}\n", table.mean);
                out
            });
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

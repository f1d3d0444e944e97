use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use xgait::gait::{label_table, select_labels};
use xgait::harness::checkpoint::Stage;
use xgait::harness::nav::eval_navigation_metrics;
use xgait::harness::pipeline::{
    bench_log, default_legs, default_start, measure_throughput, run_log, trace_tsv, traverse_log,
    Pipeline, RecordedLog,
};
use xgait::harness::train::load_models;
use xgait::harness::{evaluate, train_stage, Dataset, PipelineConfig, Preset};
use xgait::synth::{gen_dataset, SynthConfig, TerrainSpec};
use xgait::{Error, Result};

#[derive(Parser)]
#[command(
    name = "xgait",
    version,
    about = "Terrain-aware gait adaptation: data, training, evaluation, inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (JSON); overrides --preset
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint directory
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Dataset directory (or a recorded log for `infer`)
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Mae,
    Ts,
    Fusion,
    Head,
    Concat,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, or a recorded traversal with --traverse
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        samples_per_cell: usize,
        /// Four-category dataset whose labels need both modalities
        #[arg(long)]
        xor: bool,
        #[arg(long)]
        traverse: bool,
        /// Seconds per terrain in a traversal
        #[arg(long, default_value_t = 4.0)]
        seconds: f64,
    },
    /// Train one stage (or all of them) into the checkpoint directory
    Train {
        #[arg(value_enum)]
        stage: StageArg,
        #[command(flatten)]
        common: Common,
    },
    /// Select per-terrain gait labels and print the table
    Label {
        #[command(flatten)]
        common: Common,
    },
    /// Probe the learned representations and their ablations
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Stream a recorded log through the pipeline and emit the gait trace
    Infer {
        #[command(flatten)]
        common: Common,
    },
    /// Measure full-loop throughput
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 600)]
        iterations: usize,
    },
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

impl Common {
    fn pipeline_config(&self) -> Result<PipelineConfig> {
        match (&self.config, self.preset) {
            (Some(p), _) => PipelineConfig::load(p),
            (None, Some(PresetArg::Paper)) => Ok(PipelineConfig::preset(Preset::Paper)),
            (None, _) => Ok(PipelineConfig::preset(Preset::Desk)),
        }
    }

    fn data(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| usage("--data DIR is required"))
    }

    /// Where trained checkpoints are read from.
    fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| PathBuf::from("checkpoints"))
    }

    fn emit(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(text.as_bytes())
                    .map_err(|e| Error::io(Path::new("<stdout>"), e))
            }
        }
    }
}

fn synth(
    c: &Common,
    samples_per_cell: usize,
    xor: bool,
    traverse: bool,
    seconds: f64,
) -> Result<()> {
    let cfg = c.pipeline_config()?;
    let out = c
        .out
        .as_deref()
        .ok_or_else(|| usage("--out DIR is required"))?;
    let n = cfg.vision.n_i;
    if traverse {
        let log = traverse_log(
            &TerrainSpec::defaults(),
            &default_legs(seconds),
            c.seed,
            n + n / 4,
            n + n / 2,
        )?;
        log.save(out)?;
        eprintln!(
            "wrote traversal: {} imu, {} joint samples, {} frames -> {}",
            log.imu.len(),
            log.joints.len(),
            log.frames.len(),
            out.display()
        );
        return Ok(());
    }
    let sc = if xor {
        SynthConfig::xor(c.seed, samples_per_cell, n)
    } else {
        SynthConfig::new(c.seed, samples_per_cell, n)
    };
    let m = gen_dataset(&sc, out)?;
    eprintln!(
        "wrote {} samples ({} categories) -> {}",
        m.sample_count,
        m.categories.len(),
        out.display()
    );
    Ok(())
}

fn train(c: &Common, stage: StageArg) -> Result<()> {
    let cfg = c.pipeline_config()?;
    let ds = Dataset::load(c.data()?)?;
    let dir = c
        .checkpoint
        .clone()
        .or_else(|| c.out.clone())
        .unwrap_or_else(|| c.checkpoint_dir());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stages = match stage {
        StageArg::Mae => vec![Stage::Mae],
        StageArg::Ts => vec![Stage::Ts],
        StageArg::Fusion => vec![Stage::Fusion],
        StageArg::Head => vec![Stage::Head],
        StageArg::Concat => vec![Stage::Concat],
        StageArg::All => vec![
            Stage::Mae,
            Stage::Ts,
            Stage::Fusion,
            Stage::Head,
            Stage::Concat,
        ],
    };
    for s in stages {
        let began = Instant::now();
        let (_, r) = train_stage(s, &ds, &cfg, &dir, c.seed)?;
        let losses: Vec<String> = r.epoch_losses.iter().map(|l| format!("{l:.4}")).collect();
        eprintln!("{}: epoch losses [{}]", s.name(), losses.join(", "));
        println!(
            "{}\tinitial {:.6}\tfinal {:.6}\tratio {:.4}\t{:.1} s",
            s.name(),
            r.initial_loss,
            r.final_loss,
            r.ratio(),
            began.elapsed().as_secs_f64()
        );
        for (m, (before, after)) in &r.frozen {
            println!(
                "{}\tfrozen {m}\t{}",
                s.name(),
                if before == after {
                    "unchanged"
                } else {
                    "CHANGED"
                }
            );
        }
    }
    Ok(())
}

fn label(c: &Common) -> Result<()> {
    let cfg = c.pipeline_config()?;
    let ds = Dataset::load(c.data()?)?;
    let ids: Vec<usize> = (0..ds.len()).collect();
    let labels = select_labels(&ds.metric_records(&ids), &cfg.grid, &cfg.weights)?;
    c.emit(&label_table(&labels))
}

fn eval(c: &Common) -> Result<()> {
    let ds = Dataset::load(c.data()?)?;
    let (models, cfg) = load_models(&c.checkpoint_dir())?;
    if models.concat.is_none() {
        eprintln!("note: no concat checkpoint; the mlp fusion row is omitted");
    }
    let table = evaluate(&ds, &models, &cfg, c.seed)?;
    eprintln!(
        "shuffle control {:.2}% (chance {:.2}%)",
        table.shuffle_control.accuracy,
        table.chance()
    );
    c.emit(&table.to_tsv())
}

fn infer(c: &Common) -> Result<()> {
    let log = RecordedLog::load(c.data()?)?;
    let (models, cfg) = load_models(&c.checkpoint_dir())?;
    let mut p = Pipeline::from_models(models, &cfg, default_start())?;
    let rows = run_log(&mut p, &log)?;
    let nav = eval_navigation_metrics(&log.imu, &log.joints);
    eprintln!(
        "{} ticks; cumulative joint effort {:.1}, rms imu energy density {:.3}",
        rows.len(),
        nav.cumulative_joint_effort,
        nav.rms_imu_energy_density
    );
    c.emit(&trace_tsv(&rows))
}

fn bench(c: &Common, iterations: usize) -> Result<()> {
    let targets: Vec<(&str, PipelineConfig)> = match (&c.config, c.preset) {
        (Some(_), _) => vec![("config", c.pipeline_config()?)],
        (None, Some(PresetArg::Paper)) => vec![("paper", PipelineConfig::paper())],
        (None, Some(PresetArg::Desk)) => vec![("desk", PipelineConfig::desk())],
        (None, None) => vec![
            ("desk", PipelineConfig::desk()),
            ("paper", PipelineConfig::paper()),
        ],
    };
    let mut report = String::from("preset\titerations\tseconds\tit_per_s\n");
    for (name, cfg) in targets {
        let mut p = Pipeline::untrained(&cfg, c.seed)?;
        let log = bench_log(&cfg, c.seed)?;
        // The full-size preset manages about one iteration per second on a CPU.
        let n = if cfg.vision.d_e >= 768 {
            iterations.clamp(1, 3)
        } else {
            iterations.max(1)
        };
        measure_throughput(&mut p, &log, 1)?;
        let t = measure_throughput(&mut p, &log, n)?;
        report.push_str(&format!(
            "{name}\t{}\t{:.3}\t{:.2}\n",
            t.iterations, t.seconds, t.per_second
        ));
    }
    c.emit(&report)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            samples_per_cell,
            xor,
            traverse,
            seconds,
        } => synth(&common, samples_per_cell, xor, traverse, seconds),
        Command::Train { stage, common } => train(&common, stage),
        Command::Label { common } => label(&common),
        Command::Eval { common } => eval(&common),
        Command::Infer { common } => infer(&common),
        Command::Bench { common, iterations } => bench(&common, iterations),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Usage(_)) => {
            eprintln!("xgait: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("xgait: {e}");
            ExitCode::from(2)
        }
    }
}

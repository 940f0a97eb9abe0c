//! `poolprobe` command line: synthesise stores, train and evaluate probes,
//! run the hyperparameter search and render reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use poolprobe::embedstore::{generate_synthetic, write_store, Split, StoreHeader, StoreManifest, SynthSpec};
use poolprobe::heads::{load_checkpoint, save_checkpoint, HeadKind};
use poolprobe::hpo::{render_journal, run_hpo, HalvingConfig};
use poolprobe::report::{emit_table, read_cells, win_matrix, write_cells, ResultCell, TableFormat, WinRule};
use poolprobe::trainer::{evaluate, write_run_log, Dataset, Metric, Run, TrainConfig};

#[derive(Parser)]
#[command(name = "poolprobe", version, about = "Pooling probes over cached token maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-event synthetic train/test store pair.
    Synth(SynthArgs),
    /// Train one probe and write its checkpoint and run log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a store.
    Eval(EvalArgs),
    /// Search lr/wd, re-seed the top configurations and test the winner.
    Hpo(HpoArgs),
    /// Render result files as a table or a win matrix.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, env = "POOLPROBE_STORE_DIR", default_value = "stores")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    s_t: usize,
    #[arg(long, default_value_t = 4)]
    s_f: usize,
    #[arg(long, default_value_t = 2)]
    min_labels: usize,
    #[arg(long, default_value_t = 4)]
    max_labels: usize,
    #[arg(long, default_value_t = 1)]
    footprint: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    /// Largest event gain over the background; gains are log-uniform in [1, this].
    #[arg(long, default_value_t = 30.0)]
    event_gain: f64,
    /// Training clips; the test store gets `--test-clips` more.
    #[arg(long, default_value_t = 2000)]
    clips: usize,
    #[arg(long, default_value_t = 500)]
    test_clips: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Map,
    Accuracy,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Map => Metric::Map,
            MetricArg::Accuracy => Metric::Accuracy,
        }
    }
}

#[derive(Args)]
struct ProbeArgs {
    /// One of: linear, mlp, linearc, conv, mhca, ep, simpool, abmilp, proto, protobin.
    #[arg(long)]
    head: String,
    #[arg(long, value_enum, default_value = "map")]
    metric: MetricArg,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    prototypes_per_class: usize,
}

impl ProbeArgs {
    fn config(&self, lr: f64, wd: f64, seed: u64) -> Result<TrainConfig> {
        let kind: HeadKind = self.head.parse()?;
        let mut cfg = TrainConfig::new(kind, lr, wd, seed);
        cfg.metric = self.metric.into();
        cfg.batch_size = self.batch_size;
        cfg.hyper.prototypes_per_class = self.prototypes_per_class;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// Validation store; without one, 20% of the training store is held out.
    #[arg(long)]
    val: Option<PathBuf>,
    #[command(flatten)]
    probe: ProbeArgs,
    #[arg(long)]
    lr: f64,
    #[arg(long)]
    wd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, env = "POOLPROBE_OUT_DIR", default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "map")]
    metric: MetricArg,
}

#[derive(Args)]
struct HpoArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    probe: ProbeArgs,
    /// Master seed shared by every trial.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 25)]
    sobol: usize,
    /// Cumulative epochs at each rung.
    #[arg(long, value_delimiter = ',', default_value = "3,10,30")]
    rungs: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long, default_value = "synthetic")]
    backbone: String,
    #[arg(long, env = "POOLPROBE_OUT_DIR", default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Result CSV files.
    #[arg(required = true)]
    results: Vec<PathBuf>,
    #[arg(long, default_value = "markdown")]
    format: String,
    /// Print the pairwise win matrix instead of the table.
    #[arg(long)]
    win_matrix: bool,
    /// `opponent-sd` (mean_a > mean_b + sd_b) or `own-sd` (mean_a - sd_a > mean_b).
    #[arg(long, default_value = "opponent-sd")]
    rule: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading store {}", path.display()))
}

/// Validation set from `--val`, or a seeded 80/20 split of the training set.
fn train_val(train: &Path, val: Option<&Path>, seed: u64) -> Result<(Dataset, Dataset)> {
    let full = load(train)?;
    match val {
        Some(v) => Ok((full, load(v)?)),
        None => Ok(full.split(0.2, seed)),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        classes: a.classes,
        dim: a.dim,
        s_t: a.s_t,
        s_f: a.s_f,
        min_labels: a.min_labels,
        max_labels: a.max_labels,
        event_footprint: a.footprint,
        noise_sigma: a.noise,
        correlation_rho: a.rho,
        event_gain: a.event_gain,
        num_clips: a.clips + a.test_clips,
        seed: a.seed,
    };
    let records = generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let header = StoreHeader::new(a.dim as u32, a.s_t as u32, a.s_f as u32, a.classes as u32);
    let (train, test) = records.split_at(a.clips);
    for (name, split, recs) in [("train", Split::Train, train), ("test", Split::Test, test)] {
        let path = a.out_dir.join(format!("{name}.pemb"));
        write_store(&path, &header, recs)?;
        StoreManifest::synthetic(&format!("{name}.pemb"), split, &spec).write(&StoreManifest::sidecar_path(&path))?;
        println!("{}: {} clips", path.display(), recs.len());
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = a.probe.config(a.lr, a.wd, a.seed)?;
    cfg.epochs = a.epochs;
    let (tr, va) = train_val(&a.train, a.val.as_deref(), a.seed)?;
    let mut run = Run::new(cfg.clone(), &tr)?;
    run.advance_to(cfg.epochs, &tr, &va)?;
    fs::create_dir_all(&a.out_dir)?;
    let stem = cfg.head.name();
    let ckpt = a.out_dir.join(format!("{stem}.ckpt"));
    save_checkpoint(&ckpt, &run.head)?;
    write_run_log(a.out_dir.join(format!("{stem}.log.csv")), &run.log)?;
    let last = run.per_epoch_val.last().copied().unwrap_or(f64::NAN);
    println!("{stem}: val {} {last:.6} -> {}", cfg.metric.name(), ckpt.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let data = load(&a.store)?;
    if data.dims != ck.head.dims {
        bail!(
            "store {} has dims {:?} but checkpoint {} expects {:?}",
            a.store.display(),
            data.dims,
            a.checkpoint.display(),
            ck.head.dims
        );
    }
    let metric: Metric = a.metric.into();
    let report = evaluate(&ck.head, &data, metric)?;
    println!("{} {}", metric.name(), report.value);
    Ok(())
}

fn hpo_cmd(a: HpoArgs) -> Result<()> {
    let base = a.probe.config(1e-3, 0.0, a.seed)?;
    let (tr, va) = train_val(&a.train, a.val.as_deref(), a.seed)?;
    let test = load(&a.test)?;
    let halving = HalvingConfig {
        n_trials: a.trials,
        n_sobol: a.sobol,
        rungs: a.rungs.clone(),
        keep_divisor: 3,
        master_seed: a.seed,
    };
    let (outcome, head) = run_hpo(&base, &tr, &va, &test, &halving, a.k, a.seeds)?;
    fs::create_dir_all(&a.out_dir)?;
    let stem = base.head.name();
    write_text(&a.out_dir.join(format!("{stem}.journal.csv")), &render_journal(&outcome))?;
    save_checkpoint(a.out_dir.join(format!("{stem}.ckpt")), &head)?;
    let f = &outcome.final_record;
    let cell = ResultCell {
        dataset: a.dataset,
        backbone: a.backbone,
        method: stem.to_string(),
        mean: f.test_mean,
        sd: f.test_sd,
        seeds: f.test_per_seed.len(),
        metric: base.metric.name().to_string(),
    };
    write_text(&a.out_dir.join(format!("{stem}.result.csv")), &write_cells(&[cell])?)?;
    println!(
        "{stem}: trial {} lr {:.3e} wd {:.3e} val {:.4} ± {:.4} test {} {:.4} ± {:.4}",
        f.trial_id,
        f.lr,
        f.wd,
        f.val_mean,
        f.val_sd,
        base.metric.name(),
        f.test_mean,
        f.test_sd
    );
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let mut cells = Vec::new();
    for path in &a.results {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cells.extend(read_cells(&text).with_context(|| format!("parsing {}", path.display()))?);
    }
    let text = if a.win_matrix {
        let rule: WinRule = a.rule.parse()?;
        win_matrix(&cells, rule)?.to_markdown()
    } else {
        let format: TableFormat = a.format.parse()?;
        emit_table(&cells, format)?
    };
    match a.out {
        Some(path) => write_text(&path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Hpo(a) => hpo_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

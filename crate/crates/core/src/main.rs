use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use prformer::analysis::{
    collect_embeddings, host_load, is_linear_ratio, pe_random_trials, scaling_bench, width_bench,
    write_bench_csv, write_embeddings, BenchOptions, BenchRow, BenchTarget,
};
use prformer::config::{LossScale, Precision, RunConfig, Variant};
use prformer::data::{load_csv, split, synthetic_series, write_predictions, SeriesTable, SplitScheme, SynthConfig};
use prformer::model::PrFormer;
use prformer::params::ParamStore;
use prformer::tensor::Real;
use prformer::train::{evaluate, prediction_rows, run_training, write_history, Checkpoint, TrainOptions};
use prformer::{Error, Result};

#[derive(Parser)]
#[command(name = "prformer", version, about = "Pyramidal RNN embedding forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and history
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset
    Evaluate(EvalArgs),
    /// Write the forecasts of a checkpoint over the test split
    Predict(PredictArgs),
    /// Time the embedding or model against lookback and width
    Bench(BenchArgs),
    /// Export per-variable embeddings for external clustering
    InspectEmbeddings(InspectArgs),
    /// Check translation invariance of sinusoidal position dot products
    CheckPe(CheckPeArgs),
    /// Write the synthetic coupled-sinusoid dataset as CSV
    Synth(SynthArgs),
}

/// Flags that override fields of the JSON run configuration.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    pred_len: Option<usize>,
    /// comma-separated, e.g. 24,48,72,144
    #[arg(long, value_delimiter = ',')]
    windows: Option<Vec<usize>>,
    #[arg(long)]
    e_layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    conv_channels: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_from_str::<Variant>)]
    variant: Option<Variant>,
    #[arg(long, value_parser = parse_from_str::<SplitScheme>)]
    split: Option<SplitScheme>,
    #[arg(long)]
    strict_split: bool,
    #[arg(long)]
    strict_dims: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    normalized_loss: bool,
    #[arg(long)]
    clip_grad: Option<f64>,
}

fn parse_from_str<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl Overrides {
    fn apply(&self, mut run: RunConfig) -> RunConfig {
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    run.$target = v;
                }
            )*};
        }
        set!(lookback => lookback, pred_len => pred_len, windows => pyramidal_windows, e_layers => e_layers,
             d_model => d_model, heads => heads, conv_channels => conv_channels, dropout => dropout,
             batch_size => batch_size, lr => lr, temperature => temperature, variant => variant,
             epochs => epochs, patience => patience);
        if self.data.is_some() {
            run.data = self.data.clone();
        }
        if self.d_ff.is_some() {
            run.d_ff = self.d_ff;
        }
        if self.seed.is_some() {
            run.seed = self.seed;
        }
        if self.split.is_some() {
            run.split = self.split;
        }
        if self.clip_grad.is_some() {
            run.clip_grad = self.clip_grad;
        }
        run.strict_split |= self.strict_split;
        run.strict_dims |= self.strict_dims;
        if self.normalized_loss {
            run.loss_scale = LossScale::Normalized;
        }
        match self.precision {
            Some(PrecisionArg::F32) => run.precision = Precision::F32,
            Some(PrecisionArg::F64) => run.precision = Precision::F64,
            None => {}
        }
        run
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with RunConfig fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// start from a published dataset row (ETTh1, ETTh2, ETTm1, ETTm2, Weather, Electricity, Traffic)
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
    /// use only the first N rows of the dataset
    #[arg(long)]
    rows: Option<usize>,
    /// cap on optimizer steps per epoch
    #[arg(long)]
    max_batches: Option<usize>,
    /// build batches on a background thread
    #[arg(long)]
    prefetch: bool,
    /// output directory for model.ckpt, history.csv and metrics.json
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// print the resolved configuration and exit
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// dataset CSV; defaults to the path stored in the checkpoint
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "predictions.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "embeddings.csv")]
    out: PathBuf,
    /// label written in the first column; defaults to the checkpoint file stem
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// number of windows, spread evenly over the split
    #[arg(long, default_value_t = 50)]
    windows: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// template configuration; defaults to a 4-level pyramid with d_model 128
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, value_delimiter = ',', default_value = "720,1440,2880")]
    lookbacks: Vec<usize>,
    /// also time the encoder at these widths
    #[arg(long, value_delimiter = ',')]
    d_models: Option<Vec<usize>>,
    #[arg(long, default_value = "pre", value_parser = parse_from_str::<BenchTarget>)]
    target: BenchTarget,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 7)]
    channels: usize,
    #[arg(long = "bench-batch", default_value_t = 8)]
    bench_batch: usize,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct CheckPeArgs {
    /// fixed width; drawn at random when omitted
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "synthetic.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            if code == 1 {
                eprintln!("\n{}", Cli::command().render_help());
            }
            ExitCode::from(code as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => with_checkpoint(&a.data.checkpoint, |ck| run_evaluate(&a, ck)),
        Command::Predict(a) => with_checkpoint(&a.data.checkpoint, |ck| run_predict(&a, ck)),
        Command::InspectEmbeddings(a) => with_checkpoint(&a.data.checkpoint, |ck| run_inspect(&a, ck)),
        Command::Bench(a) => bench(a),
        Command::CheckPe(a) => check_pe(a),
        Command::Synth(a) => {
            let table = synthetic_series(&SynthConfig { rows: a.rows, seed: a.seed, ..Default::default() })?;
            table.save(&a.out)?;
            println!("wrote {} rows to {}", table.len(), a.out.display());
            Ok(())
        }
    }
}

fn load_table(path: &Path, rows: Option<usize>) -> Result<SeriesTable> {
    let table = load_csv(path)?;
    Ok(match rows {
        Some(n) => table.head(n),
        None => table,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn train(a: TrainArgs) -> Result<()> {
    let base = match (&a.config, &a.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::default(),
    };
    let run = a.overrides.apply(base);
    let warnings = run.validate()?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if a.dry_run {
        println!("{}", run.to_json());
        return Ok(());
    }
    let data = run
        .data
        .clone()
        .ok_or_else(|| Error::Config("no dataset: set `data` in the config or pass --data".into()))?;
    let table = Arc::new(load_table(&data, a.rows)?);
    match run.precision {
        Precision::F32 => train_as::<f32>(&a, &run, table),
        Precision::F64 => train_as::<f64>(&a, &run, table),
    }
}

fn train_as<T: Real + Send + 'static>(a: &TrainArgs, run: &RunConfig, table: Arc<SeriesTable>) -> Result<()> {
    let seed = run.resolved_seed()?;
    let opts = TrainOptions { max_batches_per_epoch: a.max_batches, prefetch: a.prefetch, ..TrainOptions::from_run(run, seed) };
    eprintln!(
        "training {} on {} rows x {} channels, seed {seed}",
        run.variant,
        table.len(),
        table.num_channels()
    );
    let out = run_training::<T>(run, table, Some(opts), |r| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  train_mae {:.5}  val_mae {:.5}  val_mse {:.5}  {:.1}s",
            r.epoch, r.lr, r.train_mae, r.val_mae, r.val_mse, r.seconds
        );
    })?;
    std::fs::create_dir_all(&a.out)?;
    out.checkpoint.save(a.out.join("model.ckpt"))?;
    write_history(create(&a.out.join("history.csv"))?, &out.history)?;
    let summary = serde_json::json!({
        "best_epoch": out.checkpoint.best_epoch,
        "stopped_early": out.stopped_early,
        "val": out.val,
        "test": out.test,
    });
    let mut f = create(&a.out.join("metrics.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&summary)?)?;
    println!(
        "best epoch {}  test mse {:.6}  test mae {:.6}  -> {}",
        out.checkpoint.best_epoch.unwrap_or(0),
        out.test.mse,
        out.test.mae,
        a.out.display()
    );
    Ok(())
}

/// Loads a checkpoint at the width it was trained with.
fn with_checkpoint(path: &Path, f: impl FnOnce(Loaded) -> Result<()>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let (ck, model) = Checkpoint::<f64>::from_bytes(&bytes)?;
    f(match ck.run_config.precision {
        Precision::F32 => Loaded::F32(Checkpoint::from_bytes(&bytes)?.0.params, model, ck.run_config, ck.channels),
        Precision::F64 => Loaded::F64(ck.params, model, ck.run_config, ck.channels),
    })
}

enum Loaded {
    F32(ParamStore<f32>, PrFormer, RunConfig, Vec<String>),
    F64(ParamStore<f64>, PrFormer, RunConfig, Vec<String>),
}

impl Loaded {
    fn run(&self) -> &RunConfig {
        match self {
            Loaded::F32(_, _, r, _) | Loaded::F64(_, _, r, _) => r,
        }
    }

    fn channels(&self) -> &[String] {
        match self {
            Loaded::F32(_, _, _, c) | Loaded::F64(_, _, _, c) => c,
        }
    }
}

/// Table and split range for a checkpointed run.
fn checkpoint_data(args: &DataArgs, ck: &Loaded, which: SplitName) -> Result<(SeriesTable, Range<usize>)> {
    let run = ck.run();
    let path = args
        .data
        .clone()
        .or_else(|| run.data.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data".into()))?;
    let table = load_table(&path, args.rows)?;
    if table.channels != ck.channels() {
        return Err(Error::Data(format!(
            "checkpoint was trained on channels {:?}, {} has {:?}",
            ck.channels(),
            path.display(),
            table.channels
        )));
    }
    let s = split(table.len(), run.split_scheme(), run.lookback, run.pred_len, run.strict_split)?;
    let range = match which {
        SplitName::Train => s.train,
        SplitName::Val => s.val,
        SplitName::Test => s.test,
    };
    Ok((table, range))
}

fn run_evaluate(a: &EvalArgs, ck: Loaded) -> Result<()> {
    let (table, range) = checkpoint_data(&a.data, &ck, a.split)?;
    let m = match &ck {
        Loaded::F32(p, model, ..) => evaluate(model, p, &table, range, a.data.batch_size)?,
        Loaded::F64(p, model, ..) => evaluate(model, p, &table, range, a.data.batch_size)?,
    };
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(())
}

fn run_predict(a: &PredictArgs, ck: Loaded) -> Result<()> {
    let (table, range) = checkpoint_data(&a.data, &ck, SplitName::Test)?;
    let rows = match &ck {
        Loaded::F32(p, model, ..) => prediction_rows(model, p, &table, range, a.data.batch_size)?,
        Loaded::F64(p, model, ..) => prediction_rows(model, p, &table, range, a.data.batch_size)?,
    };
    write_predictions(create(&a.out)?, &rows)?;
    println!("wrote {} forecast values to {}", rows.len(), a.out.display());
    Ok(())
}

fn run_inspect(a: &InspectArgs, ck: Loaded) -> Result<()> {
    let (table, range) = checkpoint_data(&a.data, &ck, a.split)?;
    let rows = match &ck {
        Loaded::F32(p, model, ..) => collect_embeddings(model, p, &table, range, a.windows)?,
        Loaded::F64(p, model, ..) => collect_embeddings(model, p, &table, range, a.windows)?,
    };
    let run_id = a.run_id.clone().unwrap_or_else(|| {
        a.data.checkpoint.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
    });
    write_embeddings(create(&a.out)?, &run_id, &rows)?;
    println!("wrote {} embeddings to {}", rows.len(), a.out.display());
    Ok(())
}

fn bench_template() -> RunConfig {
    RunConfig {
        pyramidal_windows: vec![24, 48, 72, 144],
        d_model: 128,
        e_layers: 2,
        ..RunConfig::default()
    }
}

fn bench(a: BenchArgs) -> Result<()> {
    let base = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => bench_template(),
    };
    let template = a.overrides.apply(base);
    let opts = BenchOptions {
        target: a.target,
        channels: a.channels,
        batch_size: a.bench_batch,
        repetitions: a.reps,
        warmup: a.warmup,
    };
    let mut rows = match template.precision {
        Precision::F32 => scaling_bench::<f32>(&a.lookbacks, &template, &opts)?,
        Precision::F64 => scaling_bench::<f64>(&a.lookbacks, &template, &opts)?,
    };
    print_rows(&rows);
    let contended = rows.iter().any(BenchRow::contended);
    let linear = rows.iter().filter_map(|r| r.ratio).all(is_linear_ratio);
    match (linear, !contended) {
        (true, _) => println!("doubling ratios within [1.5, 2.5]"),
        (false, true) => println!("doubling ratios OUTSIDE [1.5, 2.5] on an idle host"),
        (false, false) => println!(
            "doubling ratios outside [1.5, 2.5] while other processes competed for the cpu \
             (load {:.2} per cpu); not conclusive",
            host_load().unwrap_or(f64::NAN)
        ),
    }
    if let Some(widths) = &a.d_models {
        let enc = BenchOptions { target: BenchTarget::Encoder, ..opts };
        let wide = match template.precision {
            Precision::F32 => width_bench::<f32>(widths, &template, &enc)?,
            Precision::F64 => width_bench::<f64>(widths, &template, &enc)?,
        };
        print_rows(&wide);
        rows.extend(wide);
    }
    write_bench_csv(create(&a.out)?, &rows)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn print_rows(rows: &[BenchRow]) {
    println!(
        "{:>8} {:>8} {:>7} {:>12} {:>12} {:>14} {:>6} {:>7}",
        "target", "L", "D", "median s", "mean s", "flops", "wait", "ratio"
    );
    for r in rows {
        let ratio = r.ratio.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let wait = r.wait_share.map_or_else(|| "-".to_string(), |x| format!("{:.0}%", 100.0 * x));
        println!(
            "{:>8} {:>8} {:>7} {:>12.6} {:>12.6} {:>14} {:>6} {:>7}",
            r.target.to_string(),
            r.lookback,
            r.d_model,
            r.median_seconds,
            r.mean_seconds,
            r.flops,
            wait,
            ratio
        );
    }
}

fn check_pe(a: CheckPeArgs) -> Result<()> {
    let s = pe_random_trials(a.trials, a.d_model, a.seed)?;
    let (d, t, u, dt) = s.worst;
    println!("trials {}  max deviation {:.3e}", s.trials, s.max_deviation);
    println!("worst draw: d_model={d} t={t} s={u} dt={dt}");
    Ok(())
}

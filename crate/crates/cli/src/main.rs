//! `vitprobe`: command-line front end for layer × module probing of vision
//! transformers.

mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use vitprobe::corrupt::{CorruptionKind, CorruptionSpec};
use vitprobe::data::{load_dataset, save_dataset, split_80_20, synth_generate, DatasetSpec};
use vitprobe::grad::{finetune, write_train_log, TrainConfig};
use vitprobe::io::{
    init_toy, load_features, load_weights, save_features, save_probes, save_weights,
};
use vitprobe::probe::{evaluate_accuracy, fit_probe, FitConfig};
use vitprobe::sweep::{
    best_per_module, best_per_module_table, depth_profile_svg, extract_features,
    ood_signature, read_report_csv, run_sweep, write_best_table_csv, write_report_csv,
    SweepPlan, OOD_TAU,
};
use vitprobe::vit::parse_tap_selection;
use vitprobe::{Error, ModelConfig, Module, Result, TapId};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "vitprobe", version, about = "Linear probing of every block and module of a vision transformer")]
struct Cli {
    /// Worker threads; 0 uses one per core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write randomly initialized weights for a model config.
    InitToy(InitToyArgs),
    /// Generate a synthetic dataset from a JSON spec.
    GenData(GenDataArgs),
    /// Write a corrupted copy of a dataset.
    Corrupt(CorruptArgs),
    /// Fine-tune a model over a learning-rate grid and keep the best checkpoint.
    Train(TrainArgs),
    /// Capture CLS features at a set of taps.
    Extract(ExtractArgs),
    /// Fit one linear probe per tap and report test accuracy.
    Probe(ProbeArgs),
    /// Extract, fit and evaluate probes at every tap in one run.
    Sweep(SweepArgs),
    /// Summarize sweep reports.
    Report(ReportArgs),
}

#[derive(Args, Serialize)]
struct InitToyArgs {
    /// Preset name (toy, reference, base) or path to a JSON model config.
    #[arg(long, default_value = "toy")]
    config: String,
    /// Seeds the truncated-normal initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output weights file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    /// JSON dataset spec: name, num_classes, num_samples, image_size, seed.
    #[arg(long)]
    spec: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Also split 80/20 (seeded by the spec) into <out>/train and <out>/test.
    #[arg(long, default_value_t = false)]
    split: bool,
}

#[derive(Args, Serialize)]
struct CorruptArgs {
    /// Input dataset directory.
    #[arg(long = "in")]
    input: PathBuf,
    /// Corruption kind: contrast, gaussian_noise, speckle_noise, motion_blur, snow.
    #[arg(long)]
    kind: String,
    /// Severity, 1 to 5.
    #[arg(long)]
    severity: u8,
    /// Seeds the noise and blur directions.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Starting weights.
    #[arg(long)]
    weights: PathBuf,
    /// Training dataset directory; its last part is held out for validation.
    #[arg(long)]
    data: PathBuf,
    /// Base learning rates, one run each.
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.003,0.01,0.03")]
    lr_grid: Vec<f64>,
    /// Optimizer steps per learning rate.
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Validation accuracy is measured every this many steps and at the end.
    #[arg(long, default_value_t = 50)]
    eval_interval: usize,
    /// SGD momentum.
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// L2 weight decay, added to the gradient before clipping.
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Global gradient-norm clip.
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f64,
    /// Fraction of --data held out for checkpoint selection.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// Seeds batch order and augmentation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output weights of the best checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Per-step training log (CSV).
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args, Serialize)]
struct ExtractArgs {
    /// Model weights.
    #[arg(long)]
    weights: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// "all", a module name such as RC2, or a list such as 0.RC2,5.Act.
    #[arg(long, default_value = "all")]
    taps: String,
    /// Output features file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct FitArgs {
    /// L2 penalty on probe weights.
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    /// L-BFGS gradient tolerance.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// L-BFGS iteration cap.
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
}

impl FitArgs {
    fn config(&self) -> FitConfig {
        FitConfig {
            l2: self.l2,
            tol: self.tol,
            max_iter: self.max_iter,
            ..FitConfig::default()
        }
    }
}

#[derive(Args, Serialize)]
struct ProbeArgs {
    /// Training features file.
    #[arg(long)]
    train: PathBuf,
    /// Test features file.
    #[arg(long)]
    test: PathBuf,
    /// "all" (every tap in the training file) or a list such as 0.RC2,5.Act.
    #[arg(long, default_value = "all")]
    taps: String,
    #[command(flatten)]
    fit: FitArgs,
    /// Output probes file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    /// Model weights.
    #[arg(long)]
    weights: PathBuf,
    /// Dataset directory the probes are fitted on.
    #[arg(long)]
    train_data: PathBuf,
    /// Dataset directory the probes are scored on.
    #[arg(long)]
    test_data: PathBuf,
    /// "all", a module name such as RC2, or a list such as 0.RC2,5.Act.
    #[arg(long, default_value = "all")]
    taps: String,
    #[command(flatten)]
    fit: FitArgs,
    /// Recorded in every report row.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output report (CSV, one row per tap).
    #[arg(long)]
    report: PathBuf,
    /// Depth-profile plot (SVG); skipped when absent.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Directory to keep the extracted train/test features in; skipped when absent.
    #[arg(long)]
    features_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Table {
    /// Best accuracy and its layer for every (dataset, corruption, module).
    BestPerModule,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// Sweep report CSVs.
    #[arg(long, value_delimiter = ',', required = true)]
    inputs: Vec<PathBuf>,
    /// Table to produce.
    #[arg(long, value_enum, default_value_t = Table::BestPerModule)]
    table: Table,
    /// Output table (CSV).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprint!("CONFIG: {}", text.strip_prefix("error: ").unwrap_or(&text));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("--threads: {e}")))
        .and_then(|()| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("{category}: {e}");
            ExitCode::from(match category {
                vitprobe::Category::Config => 2,
                vitprobe::Category::Data => 3,
                vitprobe::Category::Io => 4,
                vitprobe::Category::Numeric => 5,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::InitToy(a) => init_toy_cmd(a),
        Command::GenData(a) => gen_data(a),
        Command::Corrupt(a) => corrupt_cmd(a),
        Command::Train(a) => train(a),
        Command::Extract(a) => extract(a),
        Command::Probe(a) => probe(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Storage {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn init_toy_cmd(a: InitToyArgs) -> Result<()> {
    let cfg = match ModelConfig::preset(&a.config) {
        Some(cfg) => cfg,
        None if Path::new(&a.config).is_file() => read_json(Path::new(&a.config))?,
        None => {
            return Err(Error::Config(format!(
                "--config: {:?} is neither a preset (toy, reference, base) nor a file",
                a.config
            )))
        }
    };
    cfg.validate()?;
    save_weights(&a.out, &init_toy(&cfg, a.seed), &cfg)?;
    let mut m = RunManifest::new("init-toy", &a, Some(a.seed));
    if Path::new(&a.config).is_file() {
        m.input(&a.config)?;
    }
    m.output(&a.out)?.finish()
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec: DatasetSpec = read_json(&a.spec)?;
    spec.validate()?;
    let data = synth_generate(&spec)?;
    save_dataset(&a.out, &data)?;
    let mut m = RunManifest::new("gen-data", &a, Some(spec.seed));
    m.input(&a.spec)?;
    if a.split {
        let (train, test) = split_80_20(&data, spec.seed)?;
        let (tr, te) = (a.out.join("train"), a.out.join("test"));
        save_dataset(&tr, &train)?;
        save_dataset(&te, &test)?;
        m.output(&tr)?.output(&te)?;
        println!("train {} / test {} samples", train.len(), test.len());
    }
    m.output(&a.out)?.finish()
}

fn corrupt_cmd(a: CorruptArgs) -> Result<()> {
    let kind: CorruptionKind = a.kind.parse()?;
    let spec = CorruptionSpec::new(kind, a.severity, a.seed)?;
    let data = load_dataset(&a.input)?;
    save_dataset(&a.out, &data.corrupted(&spec)?)?;
    RunManifest::new("corrupt", &a, Some(a.seed))
        .input(&a.input)?
        .output(&a.out)?
        .finish()
}

fn train(a: TrainArgs) -> Result<()> {
    let (w0, cfg) = load_weights(&a.weights)?;
    let data = load_dataset(&a.data)?;
    let tc = TrainConfig {
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        total_steps: a.steps,
        eval_interval: a.eval_interval,
        clip_norm: a.clip_norm,
        val_fraction: a.val_fraction,
        seed: a.seed,
        lr_grid: a.lr_grid.clone(),
        ..TrainConfig::default()
    };
    let result = finetune(&data.batch, &w0, &cfg, &tc)?;
    save_weights(&a.out, &result.best.weights, &cfg)?;
    write_train_log(&a.log, result.log())?;
    let best = &result.best;
    println!(
        "best: lr {} step {} val_accuracy {:.4}",
        best.lr, best.step, best.val_accuracy
    );
    RunManifest::new("train", &a, Some(a.seed))
        .input(&a.weights)?
        .input(&a.data)?
        .output(&a.out)?
        .output(&a.log)?
        .finish()
}

fn extract(a: ExtractArgs) -> Result<()> {
    let (w, cfg) = load_weights(&a.weights)?;
    let data = load_dataset(&a.data)?;
    let taps = parse_tap_selection(&a.taps, &cfg)?;
    let set = extract_features(&data, &w, &cfg, &taps)?;
    let source = serde_json::json!({
        "dataset": data.manifest.name,
        "corruption": data.manifest.corruption,
        "split": data.manifest.split,
    });
    save_features(&a.out, &set, source)?;
    println!("{} taps × {} samples", set.features.len(), set.labels.len());
    RunManifest::new("extract", &a, None)
        .input(&a.weights)?
        .input(&a.data)?
        .output(&a.out)?
        .finish()
}

fn probe(a: ProbeArgs) -> Result<()> {
    let fit = a.fit.config();
    fit.validate()?;
    let train = load_features(&a.train)?;
    let test = load_features(&a.test)?;
    let taps: Vec<TapId> = if a.taps == "all" {
        train.features.keys().copied().collect()
    } else {
        a.taps
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_>>()?
    };
    let fitted = taps
        .par_iter()
        .map(|tap| {
            let model = fit_probe(&train.matrix(tap)?, &fit)?;
            let acc = evaluate_accuracy(&model, &test.matrix(tap)?)?;
            Ok((model, acc))
        })
        .collect::<Result<Vec<_>>>()?;
    println!("tap,accuracy,converged");
    for (tap, (model, acc)) in taps.iter().zip(&fitted) {
        println!("{tap},{acc},{}", model.meta.converged);
    }
    let probes: Vec<_> = fitted.into_iter().map(|(m, _)| m).collect();
    save_probes(&a.out, &probes)?;
    RunManifest::new("probe", &a, None)
        .input(&a.train)?
        .input(&a.test)?
        .output(&a.out)?
        .finish()
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (_, cfg) = load_weights(&a.weights)?;
    let plan = SweepPlan {
        weights: a.weights.clone(),
        train_data: a.train_data.clone(),
        test_data: a.test_data.clone(),
        taps: Some(parse_tap_selection(&a.taps, &cfg)?),
        fit: a.fit.config(),
        seed: a.seed,
        feature_dir: a.features_dir.clone(),
    };
    let report = run_sweep(&plan)?;
    write_report_csv(&a.report, &report.rows())?;
    let mut m = RunManifest::new("sweep", &a, Some(a.seed));
    m.input(&a.weights)?
        .input(&a.train_data)?
        .input(&a.test_data)?
        .output(&a.report)?;
    if let Some(plot) = &a.plot {
        let title = match &report.corruption {
            Some(c) => format!("{} ({} s{})", report.dataset, c.kind, c.severity),
            None => report.dataset.clone(),
        };
        let svg = depth_profile_svg(&report.matrix, &title);
        vitprobe::io::write_atomic(plot, svg.as_bytes())?;
        m.output(plot)?;
    }
    if let Some(dir) = &a.features_dir {
        m.output(dir)?;
    }

    let best: BTreeMap<Module, (f64, usize)> = best_per_module(&report.matrix);
    println!("module,best_accuracy,best_layer,final_accuracy");
    for (module, (acc, layer)) in &best {
        let last = report.matrix.get(cfg.num_blocks - 1, *module).unwrap_or(f64::NAN);
        println!("{module},{acc},{layer},{last}");
    }
    if let Some(sig) = ood_signature(&report.matrix, Module::RC2, OOD_TAU) {
        println!(
            "RC2 signature: {:?} (best layer {}, gap {:.4})",
            sig.verdict, sig.best_layer, sig.gap
        );
    }
    m.finish()
}

fn report(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &a.inputs {
        rows.extend(read_report_csv(path)?);
    }
    match a.table {
        Table::BestPerModule => {
            let table = best_per_module_table(&rows)?;
            write_best_table_csv(&a.out, &table)?;
            println!("{} rows", table.len());
        }
    }
    let mut m = RunManifest::new("report", &a, None);
    for path in &a.inputs {
        m.input(path)?;
    }
    m.output(&a.out)?.finish()
}

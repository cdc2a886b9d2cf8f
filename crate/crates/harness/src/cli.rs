//! Command-line front end. Every subcommand reads a TOML config, takes a
//! seed, and writes its artifacts into an output directory.
//!
//! Exit status: 0 on success, 1 when evaluation failed, 2 on a bad config.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use xbar_core::datagen::{generate_samples, label_with_fr, label_with_scalers, CrossbarDataset};
use xbar_core::surrogate::{benchmark_rmse, train, SurrogateModel};

use crate::config::Config;
use crate::container;
use crate::digits;
use crate::error::{HarnessError, Result};
use crate::experiment::{self, EvalContext, SweepPoint};
use crate::model::{Layer, ModelBundle, QuantModel};
use crate::train::{default_graph, CnnTrainSpec, FloatNet};

#[derive(Debug, Parser)]
#[command(
    name = "xbar",
    version,
    about = "Crossbar non-ideality emulation and accuracy studies"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample crossbar instances and label them with a circuit solver.
    GenDataset(Common),
    /// Fit the surrogate network to a labeled dataset.
    TrainSurrogate(Common),
    /// Compare surrogate and linear-model error against solver labels.
    BenchSurrogate(Common),
    /// Train the float CNN on procedural digits.
    TrainModel(Common),
    /// Validate an external model container and copy it into the output.
    ImportModel {
        #[command(flatten)]
        common: Common,
        /// Container to import.
        #[arg(long)]
        model: PathBuf,
    },
    /// Accuracy at the single design point of the config.
    Eval(Common),
    /// Accuracy over the cartesian product of the `[sweep]` axes.
    Sweep(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// What a finished command reports back.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct Outcome {
    /// Points whose evaluation failed.
    pub failures: usize,
}

const VAL_SEED_SALT: u64 = 0x0BAD_5EED_FACE_F00D;

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::GenDataset(c) => gen_dataset(&c),
        Command::TrainSurrogate(c) => train_surrogate(&c),
        Command::BenchSurrogate(c) => bench_surrogate(&c),
        Command::TrainModel(c) => train_model(&c),
        Command::ImportModel { common, model } => import_model(&common, &model),
        Command::Eval(c) => eval(&c),
        Command::Sweep(c) => sweep(&c),
    }
}

/// Parse arguments, run, print errors, and map the result to an exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(o) if o.failures == 0 => 0,
        Ok(o) => {
            eprintln!("{} evaluation(s) failed", o.failures);
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn setup(c: &Common) -> Result<Config> {
    let cfg = Config::load(&c.config)?;
    std::fs::create_dir_all(&c.out).map_err(|e| HarnessError::io(&c.out, e))?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| HarnessError::io(path, e))
}

fn gen_dataset(c: &Common) -> Result<Outcome> {
    let cfg = setup(c)?;
    let xbar = cfg.crossbar.to_config()?;
    let d = &cfg.dataset;
    let train_spec = d.sampling(xbar.n_rows, d.train_samples_per_level, c.seed);
    let val_spec = d.sampling(xbar.n_rows, d.val_samples_per_level, c.seed ^ VAL_SEED_SALT);
    train_spec
        .validate()
        .map_err(|e| HarnessError::Config(format!("[dataset] {e}")))?;
    let train_ds = label_with_fr(&generate_samples(&train_spec, &xbar)?, &xbar, d.solver)?;
    let val_ds = label_with_scalers(&generate_samples(&val_spec, &xbar)?, &xbar, d.solver, train_ds.scalers)?;
    train_ds.save(c.out.join("train.xbds"))?;
    val_ds.save(c.out.join("val.xbds"))?;
    let path = c.out.join("dataset.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["split", "samples", "failures", "masked_columns", "fr_min", "fr_max"])?;
    for (name, ds) in [("train", &train_ds), ("val", &val_ds)] {
        let masked: usize = ds.records.iter().map(|r| r.mask.iter().filter(|m| !**m).count()).sum();
        w.write_record([
            name.to_string(),
            ds.len().to_string(),
            ds.failures.to_string(),
            masked.to_string(),
            ds.scalers.f_r.0.to_string(),
            ds.scalers.f_r.1.to_string(),
        ])?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;
    eprintln!(
        "labeled {} training and {} validation samples",
        train_ds.len(),
        val_ds.len()
    );
    Ok(Outcome::default())
}

fn load_dataset(cfg: &Config, p: &Option<PathBuf>, key: &str) -> Result<CrossbarDataset> {
    let path = cfg.require(p, key)?;
    CrossbarDataset::load(&path).map_err(|e| match e {
        xbar_core::Error::Io(io) => HarnessError::io(&path, io),
        e => e.into(),
    })
}

fn train_surrogate(c: &Common) -> Result<Outcome> {
    let cfg = setup(c)?;
    let train_ds = load_dataset(&cfg, &cfg.surrogate.train_data, "[surrogate] train_data")?;
    let val_ds = match &cfg.surrogate.val_data {
        Some(_) => Some(load_dataset(&cfg, &cfg.surrogate.val_data, "[surrogate] val_data")?),
        None => None,
    };
    let mut spec = cfg.train.clone();
    spec.seed = c.seed;
    spec.validate()
        .map_err(|e| HarnessError::Config(format!("[train] {e}")))?;
    let (model, history) = train(&train_ds, val_ds.as_ref(), &spec)?;
    model.save(c.out.join("surrogate.xbnn"))?;
    let path = c.out.join("history.csv");
    let f = std::fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    history.write_csv(f).map_err(|e| HarnessError::io(&path, e))?;
    if let Some(v) = history.final_validation() {
        eprintln!("final validation loss {v:.4e}");
    }
    Ok(Outcome::default())
}

fn bench_surrogate(c: &Common) -> Result<Outcome> {
    let cfg = setup(c)?;
    let xbar = cfg.crossbar.to_config()?;
    let path = cfg.require(&cfg.surrogate.model, "[surrogate] model")?;
    let model = SurrogateModel::load(&path)?;
    let val = load_dataset(&cfg, &cfg.surrogate.val_data, "[surrogate] val_data")?;
    let report = benchmark_rmse(&model, &val, &xbar)?;
    let path = c.out.join("bench.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "columns",
        "rmse_surrogate",
        "rmse_analytical",
        "ratio",
        "clamped",
        "fallbacks",
    ])?;
    w.write_record([
        report.columns.to_string(),
        report.rmse_surrogate.to_string(),
        report.rmse_analytical.to_string(),
        report.ratio.to_string(),
        report.clamped.to_string(),
        report.fallbacks.to_string(),
    ])?;
    w.flush().map_err(|e| HarnessError::io(&path, e))?;
    eprintln!(
        "surrogate rmse {:.4}, analytical rmse {:.4}, ratio {:.2}",
        report.rmse_surrogate, report.rmse_analytical, report.ratio
    );
    Ok(Outcome::default())
}

fn train_model(c: &Common) -> Result<Outcome> {
    let cfg = setup(c)?;
    let f = cfg.arch.format(cfg.arch.precision)?;
    let n = &cfg.cnn;
    let data = digits::generate(n.train_images, c.seed);
    let mut net = FloatNet::init(default_graph(f, f, n.activation_cap), c.seed);
    let losses = net.train(
        &data,
        &CnnTrainSpec {
            epochs: n.epochs,
            batch_size: n.batch_size,
            learning_rate: n.learning_rate as f32,
            logit_scale: n.logit_scale as f32,
            seed: c.seed,
        },
    )?;
    let bundle = net.to_bundle();
    bundle.save(&c.out.join("model.xbmt"))?;

    let path = c.out.join("history.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["epoch", "train_loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;

    let test = digits::generate(cfg.experiment.images, digits::test_seed(c.seed));
    let float_acc = 100.0 * net.accuracy(&test);
    let q = QuantModel::new(&bundle, f, f)?;
    let y = q.reference_forward(&q.quantize_input(test.images.view()))?;
    let correct = y
        .rows()
        .into_iter()
        .zip(&test.labels)
        .filter(|(r, &l)| crate::model::argmax(r.iter().copied()) == l as usize)
        .count();
    let text = format!(
        "parameters: {}\nfloat accuracy: {float_acc:.2}%\n{}-bit integer accuracy: {:.2}%\nquantization saturations: {}\n",
        bundle.num_params(),
        f.total_bits,
        100.0 * correct as f64 / test.len().max(1) as f64,
        q.saturations
    );
    write_text(&c.out.join("summary.txt"), &text)?;
    eprint!("{text}");
    Ok(Outcome::default())
}

fn import_model(c: &Common, model: &Path) -> Result<Outcome> {
    setup(c)?;
    let bundle = ModelBundle::from_blocks(container::load(model)?)?;
    bundle.save(&c.out.join("model.xbmt"))?;
    let path = c.out.join("layers.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["index", "op", "name", "weight_shape", "parameters"])?;
    for (i, l) in bundle.graph.layers.iter().enumerate() {
        let (op, name) = match l {
            Layer::Conv { name, .. } => ("conv", name.as_str()),
            Layer::Linear { name, .. } => ("linear", name.as_str()),
            Layer::Relu { .. } => ("relu", ""),
            Layer::Flatten => ("flatten", ""),
        };
        let (shape, params) = if name.is_empty() {
            (String::new(), 0)
        } else {
            let wt = bundle.tensor(&format!("{name}.weight"));
            let b = bundle.tensor(&format!("{name}.bias"));
            (
                wt.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"),
                wt.data.len() + b.data.len(),
            )
        };
        w.write_record([i.to_string(), op.into(), name.into(), shape, params.to_string()])?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;
    eprintln!(
        "imported {} layers, {} parameters",
        bundle.graph.layers.len(),
        bundle.num_params()
    );
    Ok(Outcome::default())
}

fn evaluate(c: &Common, points: Vec<SweepPoint>, file: &str) -> Result<Outcome> {
    let cfg = setup(c)?;
    let ctx = EvalContext::load(&cfg, c.seed)?;
    let csv_path = c.out.join(file);
    let rows = experiment::run_sweep(&ctx, &points, &csv_path, |r, reused| {
        let tag = if reused { " (reused)" } else { "" };
        match r.accuracy {
            Some(a) => eprintln!("{} size {}: {a:.2}%{tag}", r.backend, r.size),
            None => eprintln!("{} size {}: {}", r.backend, r.size, r.status),
        }
    })?;
    let text = experiment::summary(&rows, Some(ctx.float_accuracy()?));
    write_text(&c.out.join("summary.txt"), &text)?;
    Ok(Outcome {
        failures: rows.iter().filter(|r| !r.is_ok()).count(),
    })
}

fn eval(c: &Common) -> Result<Outcome> {
    let cfg = Config::load(&c.config)?;
    evaluate(c, vec![SweepPoint::from_config(&cfg)], "eval.csv")
}

fn sweep(c: &Common) -> Result<Outcome> {
    let cfg = Config::load(&c.config)?;
    evaluate(c, experiment::sweep_points(&cfg), "sweep.csv")
}

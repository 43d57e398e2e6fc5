//! `xqnet`: inspect, verify, train and benchmark ExquisiteNetV2 models.
//!
//! Tables go to stdout as CSV or tab-separated text; progress and
//! diagnostics go to stderr. Usage errors exit with 2, runtime failures
//! with 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use xqnet::autodiff::gradcheck::Precision;
use xqnet::autodiff::GradCheckCfg;
use xqnet::bench::{bench_throughput, BenchConfig};
use xqnet::blocks::GateKind;
use xqnet::data::{load_cifar10, synth_dataset, Dataset};
use xqnet::model::{self, format_extent, shape_trace, Model, ModelSpec};
use xqnet::train::{evaluate, train_loop_with, History, TrainConfig};
use xqnet::verify::{conv_oracle, eve_retention, pool_oracle, run_suite, KERNEL_TOLERANCE};
use xqnet::Shape;

/// Published totals for the 1000-class reference networks.
const LN_REFERENCE_TOTAL: usize = 899_300;
const SE_REFERENCE_TOTAL: usize = 1_028_500;

#[derive(Parser)]
#[command(name = "xqnet", version, about = "ExquisiteNetV2 micro-engine")]
struct Cli {
    /// Seed for initialization, shuffling and dropout.
    #[arg(long, global = true, env = "XQNET_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter counts as CSV.
    Summarize(SummarizeArgs),
    /// Per-layer input extent, operator and output channels.
    Trace(TraceArgs),
    /// Finite-difference gradient checks of every operator and block.
    Gradcheck(GradcheckArgs),
    /// Train on synthetic data or CIFAR-10 and print the loss history.
    Train(TrainArgs),
    /// Accuracy of saved weights on a dataset.
    Eval(EvalArgs),
    /// Inference throughput per batch size.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Ln,
    Se,
    /// Both variants side by side, with the difference.
    Both,
}

#[derive(Args)]
struct ModelArgs {
    /// Gate used in every DFSEBV2 block.
    #[arg(long, value_enum, default_value = "ln")]
    variant: Variant,
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    /// Layer table file; overrides --variant and --classes.
    #[arg(long)]
    spec: Option<PathBuf>,
}

impl ModelArgs {
    fn gate(&self) -> Result<GateKind> {
        match self.variant {
            Variant::Ln => Ok(GateKind::Ln),
            Variant::Se => Ok(GateKind::Se),
            Variant::Both => bail!("--variant both is only valid for summarize"),
        }
    }

    fn model_spec(&self) -> Result<ModelSpec> {
        match &self.spec {
            Some(path) => read_spec(path),
            None => Ok(ModelSpec::exquisitenet_v2(self.gate()?, self.classes)),
        }
    }
}

#[derive(Args)]
struct SummarizeArgs {
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Square input side.
    #[arg(long, default_value_t = 224)]
    input: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Random inputs for the EVE retention check.
    #[arg(long, default_value_t = 100)]
    retention_trials: usize,
    /// Random geometries for each kernel-versus-direct-loop comparison.
    #[arg(long, default_value_t = 50)]
    oracle_configs: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataSource {
    Synth,
    Cifar10,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "synth")]
    data: DataSource,
    /// CIFAR-10 binary directory.
    #[arg(long, env = "XQNET_CIFAR10_DIR")]
    dir: Option<PathBuf>,
    /// Number of samples to use (synthetic: generated; CIFAR-10: drawn
    /// from the split).
    #[arg(long)]
    samples: Option<usize>,
    /// Square image side; CIFAR-10 images are resized when it is not 32.
    #[arg(long, default_value_t = 32)]
    hw: usize,
    /// Classes of the synthetic set.
    #[arg(long, default_value_t = 10)]
    synth_classes: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    target_loss: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Write the trained weights here.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Also report accuracy on the CIFAR-10 test split (or on the training
    /// set for synthetic data).
    #[arg(long)]
    eval: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train --save`.
    #[arg(long)]
    weights: PathBuf,
    /// Layer table the checkpoint was trained with, when it is not one of
    /// the two reference variants.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,10,50")]
    batches: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 32)]
    hw: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn read_spec(path: &Path) -> Result<ModelSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ModelSpec::parse(&text)?)
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

fn summarize(args: &SummarizeArgs, seed: u64) -> Result<String> {
    let m = &args.model;
    if m.variant == Variant::Both && m.spec.is_none() {
        let mut out = String::from("variant,trainable,reference,deviation\n");
        let mut totals = Vec::new();
        for gate in [GateKind::Ln, GateKind::Se] {
            let model = Model::build(ModelSpec::exquisitenet_v2(gate, m.classes), seed)?;
            let total = model.param_count().trainable;
            out.push_str(&format!(
                "{},{}{}\n",
                gate.as_str(),
                total,
                reference_columns(gate, m.classes, total)
            ));
            totals.push(total);
        }
        out.push_str(&format!(
            "delta,{},,\n",
            totals[1] as i64 - totals[0] as i64
        ));
        return Ok(out);
    }
    let spec = m.model_spec()?;
    let model = Model::build(spec.clone(), seed)?;
    let counts = model.param_count();
    let mut out = String::from("row,operator,trainable,buffers\n");
    for l in &counts.layers {
        out.push_str(&format!(
            "{},{},{},{}\n",
            l.row, l.operator, l.trainable, l.buffers
        ));
    }
    out.push_str(&format!("total,,{},{}\n", counts.trainable, counts.buffers));
    if let (Some(gate), Some(classes), None) = (spec.variant(), spec.num_classes(), &m.spec) {
        if let Some(reference) = reference_total(gate, classes) {
            out.push_str(&format!("reference,,{reference},\n"));
            out.push_str(&format!(
                "deviation,,{:.4},\n",
                deviation(counts.trainable, reference)
            ));
        }
    }
    Ok(out)
}

fn reference_total(gate: GateKind, classes: usize) -> Option<usize> {
    (classes == 1000).then_some(match gate {
        GateKind::Ln => LN_REFERENCE_TOTAL,
        GateKind::Se => SE_REFERENCE_TOTAL,
    })
}

fn deviation(total: usize, reference: usize) -> f64 {
    (total as f64 - reference as f64) / reference as f64
}

fn reference_columns(gate: GateKind, classes: usize, total: usize) -> String {
    match reference_total(gate, classes) {
        Some(r) => format!(",{r},{:.4}", deviation(total, r)),
        None => ",,".into(),
    }
}

fn trace(args: &TraceArgs) -> Result<String> {
    let spec = args.model.model_spec()?;
    let rows = shape_trace(&spec, Shape::new(1, 3, args.input, args.input))?;
    let mut out = String::from("input\toperator\tout\n");
    for r in &rows {
        out.push_str(&format!("{r}\n"));
    }
    if let Some(last) = rows.last() {
        out.push_str(&format!("{}\toutput\t-\n", format_extent(last.output)));
    }
    Ok(out)
}

fn gradcheck(args: &GradcheckArgs, seed: u64) -> Result<(String, bool)> {
    let cfg = GradCheckCfg {
        eps: args.eps,
        samples_per_tensor: args.samples,
        seed,
        ..GradCheckCfg::default()
    };
    let mut ok = true;
    let mut out = String::from("check,precision,max_rel_error,tolerance,status\n");
    for r in run_suite(&cfg)? {
        ok &= r.passed();
        out.push_str(&format!(
            "{},{},{:.3e},{:.0e},{}\n",
            r.name,
            precision_name(r.precision),
            r.report.max_rel_error,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    let ret = eve_retention(args.retention_trials, seed)?;
    let retained = ret.non_members == 0 && ret.wrong_pairs == 0;
    ok &= retained;
    out.push_str(&format!(
        "eve_retention,-,{},{},{}\n",
        ret.non_members + ret.wrong_pairs,
        0,
        if retained { "pass" } else { "FAIL" }
    ));
    for (name, rep) in [
        ("conv2d_oracle", conv_oracle(args.oracle_configs, seed)?),
        ("pool2d_oracle", pool_oracle(args.oracle_configs, seed)?),
    ] {
        ok &= rep.passed();
        out.push_str(&format!(
            "{name},f32,{:.3e},{KERNEL_TOLERANCE:.0e},{}\n",
            rep.max_rel_error,
            if rep.passed() { "pass" } else { "FAIL" }
        ));
    }
    Ok((out, ok))
}

/// Training and evaluation sets for `args`.
fn load_data(args: &DataArgs, seed: u64) -> Result<(Dataset, Dataset)> {
    match args.data {
        DataSource::Synth => {
            let n = args.samples.unwrap_or(64);
            let d = synth_dataset(n, args.synth_classes, args.hw, seed)?;
            Ok((d.clone(), d))
        }
        DataSource::Cifar10 => {
            let dir = args
                .dir
                .as_ref()
                .ok_or_else(|| anyhow!("CIFAR-10 needs --dir or XQNET_CIFAR10_DIR"))?;
            let (mut train, mut test) = load_cifar10(dir)?;
            if let Some(n) = args.samples {
                train = train.split(n.min(train.len()), seed)?.0;
                test = test.split(n.min(test.len()), seed)?.0;
            }
            Ok((
                train.resized(args.hw, args.hw)?,
                test.resized(args.hw, args.hw)?,
            ))
        }
    }
}

fn train(args: &TrainArgs, seed: u64) -> Result<String> {
    let mut cfg = match args.data.data {
        DataSource::Synth => TrainConfig::default(),
        DataSource::Cifar10 => TrainConfig::cifar10(),
    };
    cfg.seed = seed;
    cfg.max_epochs = args.epochs.unwrap_or(cfg.max_epochs);
    cfg.batch_size = args.batch_size.unwrap_or(cfg.batch_size);
    cfg.initial_lr = args.lr.unwrap_or(cfg.initial_lr);
    cfg.target_loss = args.target_loss.unwrap_or(cfg.target_loss);
    cfg.momentum = args.momentum.unwrap_or(cfg.momentum);

    let spec = match (&args.model.spec, args.data.data) {
        (Some(p), _) => read_spec(p)?,
        (None, DataSource::Synth) => {
            ModelSpec::exquisitenet_v2(args.model.gate()?, args.data.synth_classes)
        }
        (None, DataSource::Cifar10) => ModelSpec::exquisitenet_v2(args.model.gate()?, 10),
    };
    let (train_set, eval_set) = load_data(&args.data, seed)?;
    let mut model = Model::build(spec, seed)?;
    let history: History = train_loop_with(&mut model, &train_set, &cfg, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  lr {:.0e}  {:.1}s",
            r.epoch, r.loss, r.lr, r.seconds
        );
    })?;
    eprintln!("stopped: {}", history.stop);
    if let Some(path) = &args.save {
        model.save_weights(path)?;
    }
    if args.eval {
        eprintln!("accuracy {:.4}", evaluate(&model, &eval_set, 100)?);
    }
    Ok(history.to_csv())
}

fn eval(args: &EvalArgs, seed: u64) -> Result<String> {
    let ck = model::load_weights(&args.weights)?;
    let spec = match &args.spec {
        Some(p) => read_spec(p)?,
        None => {
            let gate = match ck.variant {
                1 => GateKind::Se,
                2 => GateKind::Ln,
                _ => bail!("checkpoint has a custom layer table; pass --spec"),
            };
            ModelSpec::exquisitenet_v2(gate, ck.num_classes as usize)
        }
    };
    let mut model = Model::build(spec, seed)?;
    model.load_weights(&args.weights)?;
    let (_, eval_set) = load_data(&args.data, seed)?;
    let acc = evaluate(&model, &eval_set, args.batch_size)?;
    Ok(format!("samples,accuracy\n{},{acc:.4}\n", eval_set.len()))
}

fn bench(args: &BenchArgs, seed: u64) -> Result<String> {
    let model = Model::build(args.model.model_spec()?, seed)?;
    let cfg = BenchConfig {
        batch_sizes: args.batches.clone(),
        repeats: args.repeats,
        warmup: args.warmup,
        hw: args.hw,
        threads: args.threads,
        seed,
    };
    Ok(bench_throughput(&model, &cfg)?.to_csv())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let out = match &cli.command {
        Command::Summarize(a) => summarize(a, cli.seed)?,
        Command::Trace(a) => trace(a)?,
        Command::Gradcheck(a) => {
            let (text, ok) = gradcheck(a, cli.seed)?;
            print!("{text}");
            if !ok {
                eprintln!("error: gradient check failed");
                return Ok(ExitCode::FAILURE);
            }
            return Ok(ExitCode::SUCCESS);
        }
        Command::Train(a) => train(a, cli.seed)?,
        Command::Eval(a) => eval(a, cli.seed)?,
        Command::Bench(a) => bench(a, cli.seed)?,
    };
    print!("{out}");
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

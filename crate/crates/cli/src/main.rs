use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rfnet::baselines::Method;
use rfnet::harness::report::LossRow;
use rfnet::harness::{
    emit_report, evaluate, load_checkpoint_model, load_or_generate, make_checkpoint, read_checkpoint, read_dataset,
    run_crossval_on, run_selftest, train_model, with_thread_cap, write_checkpoint, write_dataset, EvalOptions,
    LoadedModel, MetricsReport, Precision, RunConfig,
};
use rfnet::numerics::Scalar;
use rfnet::signal::{build_dataset, default_class_specs, normalize_datasets, Dataset, RadioConfig, RadioVariant};

#[derive(Parser)]
#[command(
    name = "rfnet",
    version,
    about = "One-shot RF activity recognition with metric meta-learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it as an RFDS file.
    Gen(GenArgs),
    /// Train one method on every environment of a dataset file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on few-shot episodes.
    Eval(EvalArgs),
    /// Environment-level cross-validation driven by a config file.
    Crossval(CrossvalArgs),
    /// Run the built-in verification suites.
    Selftest,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "wifi")]
    radio: String,
    #[arg(long, default_value_t = 20)]
    envs: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Observations per environment per class.
    #[arg(long, default_value_t = 8)]
    obs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = rfnet::signal::DESK_K)]
    k: usize,
    #[arg(long, default_value_t = rfnet::signal::DESK_L)]
    l: usize,
    #[arg(long, default_value_t = rfnet::signal::DESK_NR)]
    nr: usize,
    #[arg(long)]
    out: PathBuf,
}

/// `key=value` overrides shared by the config-driven commands.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "rfnet")]
    method: String,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=3))]
    shots: u64,
    /// Defaults to the checkpoint's configured evaluation budget.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CrossvalArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated methods to compare in one run; defaults to the config's `method`.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
}

fn gen(a: &GenArgs) -> Result<()> {
    let variant = RadioVariant::parse(&a.radio).with_context(|| format!("unknown radio {:?}", a.radio))?;
    let radio = RadioConfig::for_variant(variant, a.k, a.l, a.nr);
    let data = build_dataset(&radio, a.envs, &default_class_specs(a.classes), a.obs, a.seed)?;
    write_dataset(&data, &a.out)?;
    println!(
        "wrote {} observations ({} environments, {} classes, {}x{}x{}) to {}",
        data.len(),
        data.environments.len(),
        data.num_classes,
        a.k,
        a.l,
        a.nr,
        a.out.display()
    );
    Ok(())
}

fn train_and_save<T: Scalar>(cfg: &RunConfig, method: Method, data: &Dataset, seed: u64, out: &Path) -> Result<()> {
    let mut train = data.clone();
    let norm = normalize_datasets(&mut train, &mut [])?;
    let (model, trace) = train_model::<T>(cfg, method, &train, seed)?;
    std::fs::create_dir_all(out)?;
    write_checkpoint(&make_checkpoint(cfg, method, &model, norm), &out.join("model.rfck"))?;
    let report = MetricsReport {
        losses: trace
            .into_iter()
            .map(|record| LossRow {
                method,
                fold: 0,
                seed,
                record,
            })
            .collect(),
        ..Default::default()
    };
    std::fs::write(out.join("loss_trace.csv"), report.loss_csv())?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    println!(
        "trained {method} for {} episodes; checkpoint {}",
        report.losses.len(),
        out.join("model.rfck").display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.overrides.load()?;
    cfg.method = a.method.parse()?;
    let data = read_dataset(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    cfg.radio = data.radio.variant();
    [cfg.k, cfg.l, cfg.nr] = data.radio.shape();
    cfg.classes = data.num_classes;
    cfg.data = Some(a.data.clone());
    cfg.validate()?;
    let seed = a.seed.unwrap_or(cfg.seeds[0]);
    match cfg.precision {
        Precision::F32 => train_and_save::<f32>(&cfg, cfg.method, &data, seed, &a.out),
        Precision::F64 => train_and_save::<f64>(&cfg, cfg.method, &data, seed, &a.out),
    }
}

fn eval_loaded<T: Scalar>(loaded: &LoadedModel<T>, data: &mut Dataset, a: &EvalArgs) -> Result<()> {
    if data.radio.shape() != loaded.config.radio_config().shape() || data.num_classes != loaded.config.classes {
        bail!("dataset shape or class count does not match the checkpoint");
    }
    loaded.norm.apply(data);
    let cfg = &loaded.config;
    let opts = EvalOptions {
        n_shots: a.shots as usize,
        n_query: cfg.train.n_query,
        episodes: a.episodes.unwrap_or(cfg.eval_episodes),
        seed: a.seed,
        test_adapt: cfg.train.test_adapt,
        lr_meta: cfg.train.lr_meta,
        ft: cfg.ft,
    };
    let r = evaluate(loaded.method, &loaded.model, data, &opts)?;
    println!(
        "{} {}-shot accuracy {:.4} ({}/{} queries, {} episodes)",
        loaded.method,
        opts.n_shots,
        r.accuracy(),
        r.correct,
        r.total,
        opts.episodes
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ck = read_checkpoint::<f64>(&a.ckpt).with_context(|| format!("reading checkpoint {}", a.ckpt.display()))?;
    let mut data = read_dataset(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let loaded = load_checkpoint_model(&ck)?;
    match loaded.config.precision {
        Precision::F64 => eval_loaded(&loaded, &mut data, a),
        Precision::F32 => {
            let single = LoadedModel {
                model: loaded.model.cast::<f32>(),
                config: loaded.config.clone(),
                method: loaded.method,
                norm: loaded.norm,
            };
            eval_loaded(&single, &mut data, a)
        }
    }
}

fn crossval(a: &CrossvalArgs) -> Result<()> {
    let mut cfg = a.overrides.load()?;
    if let Some(out) = &a.out {
        cfg.out = Some(out.clone());
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("crossval_out"));
    let methods: Vec<Method> = if a.methods.is_empty() {
        vec![cfg.method]
    } else {
        a.methods.iter().map(|m| m.parse()).collect::<rfnet::Result<_>>()?
    };
    let data = load_or_generate(&cfg)?;
    let report = run_crossval_on(&cfg, &methods, &data)?;
    emit_report(&report, &out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    print!("{}", report.summary_text());
    println!("reports written to {}", out.display());
    Ok(())
}

fn selftest() -> Result<bool> {
    let results = run_selftest();
    let mut ok = true;
    for r in &results {
        println!(
            "{} {:<20} {:>8.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.elapsed.as_secs_f64(),
            r.detail
        );
        ok &= r.passed;
    }
    println!(
        "{}/{} suites passed",
        results.iter().filter(|r| r.passed).count(),
        results.len()
    );
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen(a) => gen(&a).map(|_| true),
        Command::Train(a) => train(&a).map(|_| true),
        Command::Eval(a) => eval(&a).map(|_| true),
        Command::Crossval(a) => crossval(&a).map(|_| true),
        Command::Selftest => selftest(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match with_thread_cap(|| run(cli)) {
        Ok(Ok(true)) => ExitCode::SUCCESS,
        Ok(Ok(false)) => ExitCode::FAILURE,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

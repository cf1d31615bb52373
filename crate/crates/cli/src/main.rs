//! `ltvae` command-line driver: `synth`, `train`, `eval`, `sample`.
//!
//! Every command writes into its `--out` directory only, including a
//! `manifest.json` with the configuration, input and output hashes and
//! per-phase timings. Exit status is 0 on success, 1 on usage errors and 2
//! on data errors.

mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{s, Array2};
use serde_json::json;

use ltvae::datagen::{
    ancestral_sample, component_sample, conditional_generate, generate_synthetic, Assignment, SyntheticSpec,
};
use ltvae::evaluation::{elbo_estimate, facet_report, importance_loglik};
use ltvae::io::{read_dataset, write_csv, write_grid};
use ltvae::neural::Head;
use ltvae::rng::{derive_seed, seeded};
use ltvae::search::SearchConfig;
use ltvae::training::{train_from, TrainConfig, TrainState};
use ltvae::{LtvaeModel, NodeId};

use manifest::Manifest;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl From<ltvae::Error> for CliError {
    fn from(e: ltvae::Error) -> Self {
        match e {
            ltvae::Error::InvalidArgument(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "ltvae", version, about = "Latent tree variational autoencoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for every random choice of the command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; 0 uses all cores. `--threads 1` is bit-reproducible.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the two-facet synthetic benchmark.
    Synth(SynthArgs),
    /// Pretrain, then alternate SGD/stepwise EM with structure search.
    Train(TrainArgs),
    /// Facet report and importance-sampled test loglikelihood.
    Eval(EvalArgs),
    /// Draw samples from a trained model.
    Sample(SampleArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    /// Within-cluster variance of each facet coordinate.
    #[arg(long, default_value_t = 0.25)]
    variance: f64,
    /// Distance of the cluster means from the origin along each axis.
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    Bernoulli,
    Gaussian,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Bernoulli => Head::Bernoulli,
            HeadArg::Gaussian => Head::Gaussian,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset (CSV or .npy).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    z_dim: usize,
    /// Hidden layer sizes of the encoder; the decoder mirrors them.
    #[arg(long, value_delimiter = ',', default_value = "64,32")]
    hidden: Vec<usize>,
    #[arg(long, value_enum, default_value_t = HeadArg::Bernoulli)]
    head: HeadArg,
    #[arg(long, default_value_t = 5)]
    epochs_per_round: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    stepwise_eta: f64,
    #[arg(long, default_value_t = 20)]
    max_rounds: usize,
    #[arg(long, default_value_t = 50)]
    pretrain_epochs: usize,
    /// Keep the single latent over all codes fixed.
    #[arg(long)]
    no_structure_search: bool,
    /// Continue from `<out>/checkpoint.json` when present.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Importance samples per datum for `L_k`.
    #[arg(long, default_value_t = 5000)]
    iw_k: usize,
    /// Rows (from the start of the dataset) used for `L_k`; 0 means all.
    #[arg(long, default_value_t = 500)]
    iw_rows: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SampleMode {
    Ancestral,
    Component,
    Conditional,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, value_enum, default_value_t = SampleMode::Ancestral)]
    mode: SampleMode,
    /// Component mode: latent states as `id=state,…`.
    #[arg(long)]
    assign: Option<String>,
    /// Conditional mode: dataset holding the input row.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Conditional mode: index of the input row.
    #[arg(long, default_value_t = 0)]
    row: usize,
    /// Conditional mode: latents kept at their MAP state.
    #[arg(long, value_delimiter = ',')]
    fixed: Vec<u32>,
    /// Conditional mode: latents redrawn given the others.
    #[arg(long, value_delimiter = ',')]
    resample: Vec<u32>,
    /// Render decoded samples as `H×W` images.
    #[arg(long)]
    shape: Option<String>,
    /// Also write a PNG grid.
    #[arg(long)]
    png: bool,
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
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let common = match &cli.command {
        Command::Synth(a) => &a.common,
        Command::Train(a) => &a.common,
        Command::Eval(a) => &a.common,
        Command::Sample(a) => &a.common,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::create_dir_all(&common.out)?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{}: no such file", path.display())))
    }
}

fn synth(a: SynthArgs) -> CliResult<()> {
    if !(a.variance > 0.0) || a.n == 0 {
        return Err(CliError::Usage("--n and --variance must be positive".into()));
    }
    let mut m = Manifest::new("synth", &a.common);
    let t = Instant::now();
    let c = a.separation;
    let spec = SyntheticSpec {
        n_samples: a.n,
        facet_means: [[[-c, -c], [c, c]], [[-c, -c], [c, c]]],
        facet_variance: a.variance,
        seed: a.common.seed,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec);
    m.config = json!({
        "n": a.n, "variance": a.variance, "separation": a.separation,
        "hidden_dim": spec.hidden_dim, "x_dim": spec.x_dim,
    });
    let labels = [data.labels1.as_slice(), data.labels2.as_slice()];
    let x_path = a.common.out.join("x.csv");
    let z_path = a.common.out.join("z.csv");
    write_csv(&x_path, data.x.view(), &labels)?;
    write_csv(&z_path, data.z.view(), &labels)?;
    m.timing("generate", t.elapsed().as_secs_f64());
    m.output(&x_path)?;
    m.output(&z_path)?;
    m.write(&a.common.out)
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        z_dim: a.z_dim,
        hidden: a.hidden.clone(),
        head: a.head.into(),
        epochs_per_round: a.epochs_per_round,
        batch_size: a.batch_size,
        lr: a.lr,
        stepwise_eta: a.stepwise_eta,
        max_rounds: a.max_rounds,
        pretrain_epochs: a.pretrain_epochs,
        structure_search: !a.no_structure_search,
        search: SearchConfig::default(),
        seed: a.common.seed,
        ..TrainConfig::default()
    }
}

fn train(a: TrainArgs) -> CliResult<()> {
    require_file(&a.data)?;
    let config = train_config(&a);
    config.validate()?;
    let mut m = Manifest::new("train", &a.common);
    m.config = json!({
        "data": a.data, "z_dim": config.z_dim, "hidden": config.hidden, "head": config.head.name(),
        "epochs_per_round": config.epochs_per_round, "batch_size": config.batch_size, "lr": config.lr,
        "stepwise_eta": config.stepwise_eta, "max_rounds": config.max_rounds, "elbo_tol": config.elbo_tol,
        "pretrain_epochs": config.pretrain_epochs, "pretrain_restarts": config.pretrain_restarts,
        "mc_samples": config.mc_samples, "structure_search": config.structure_search,
        "search": {
            "screen_restarts": config.search.screen_restarts, "screen_iters": config.search.screen_iters,
            "final_restarts": config.search.final_restarts, "final_iters": config.search.final_iters,
            "max_phase_steps": config.search.max_phase_steps, "max_card": config.search.max_card,
        },
    });
    m.input(&a.data)?;
    let t = Instant::now();
    let dataset = read_dataset(&a.data)?;
    m.timing("load", t.elapsed().as_secs_f64());

    let checkpoint = a.common.out.join("checkpoint.json");
    let resumed = if a.resume && checkpoint.is_file() {
        Some(TrainState::load_checkpoint(&checkpoint)?)
    } else {
        None
    };
    let start_round = resumed.as_ref().map_or(0, |s| s.round);
    let t = Instant::now();
    let mut rounds = Vec::new();
    let mut pretrain_seconds = None;
    let mut last = Instant::now();
    let state = train_from(dataset.x.view(), &config, resumed, Some(&checkpoint), |s, r| {
        if pretrain_seconds.is_none() {
            pretrain_seconds = Some(t.elapsed().as_secs_f64() - s.history.timings.last().map_or(0.0, |x| x.total()));
        }
        let timing = s.history.timings.last().copied().unwrap_or_default();
        eprintln!(
            "round {} elbo {:.4} bic {:.2} -> {:.2} ({:.1}s) {}",
            r.round,
            r.mean_elbo,
            r.bic_before,
            r.bic_after,
            last.elapsed().as_secs_f64(),
            r.structure
        );
        last = Instant::now();
        rounds.push(json!({
            "round": r.round, "sgd_seconds": timing.sgd_seconds,
            "search_seconds": timing.search_seconds, "total_seconds": timing.total(),
        }));
    })?;
    if start_round == 0 {
        m.timing("pretrain", pretrain_seconds.unwrap_or_else(|| t.elapsed().as_secs_f64()));
    }
    m.timing("train", t.elapsed().as_secs_f64());
    let n_rounds = rounds.len();
    let mean_round = rounds
        .iter()
        .map(|r| r["total_seconds"].as_f64().unwrap_or(0.0))
        .sum::<f64>()
        / n_rounds.max(1) as f64;
    m.extra.insert("rounds".into(), json!(rounds));
    m.extra.insert("mean_round_seconds".into(), json!(mean_round));
    m.extra.insert("resumed_from_round".into(), json!(start_round));

    let model_path = a.common.out.join("model.json");
    state.model.save(&model_path)?;
    let history_path = a.common.out.join("history.json");
    std::fs::write(&history_path, serde_json::to_string_pretty(&state.history).expect("history serializes"))?;
    let log_path = a.common.out.join("search_log.txt");
    let log: String = state
        .history
        .rounds
        .iter()
        .flat_map(|r| r.search_log.iter().map(move |l| format!("round={} {l}\n", r.round)))
        .collect();
    std::fs::write(&log_path, log)?;
    for p in [&model_path, &history_path, &log_path, &checkpoint] {
        m.output(p)?;
    }
    m.write(&a.common.out)
}

fn eval(a: EvalArgs) -> CliResult<()> {
    require_file(&a.data)?;
    require_file(&a.model)?;
    if a.iw_k == 0 {
        return Err(CliError::Usage("--iw-k must be at least 1".into()));
    }
    let mut m = Manifest::new("eval", &a.common);
    m.config = json!({ "data": a.data, "model": a.model, "iw_k": a.iw_k, "iw_rows": a.iw_rows });
    m.input(&a.data)?;
    m.input(&a.model)?;
    let dataset = read_dataset(&a.data)?;
    let model = LtvaeModel::load(&a.model)?;
    if dataset.x.ncols() != model.vae.x_dim() {
        return Err(CliError::Data(format!(
            "data has {} columns, model expects {}",
            dataset.x.ncols(),
            model.vae.x_dim()
        )));
    }

    let t = Instant::now();
    let report = facet_report(&model, dataset.x.view(), &dataset.labels)?;
    m.timing("facet_report", t.elapsed().as_secs_f64());

    let rows = if a.iw_rows == 0 {
        dataset.x.nrows()
    } else {
        a.iw_rows.min(dataset.x.nrows())
    };
    let x_iw = dataset.x.slice(s![..rows, ..]);
    let t = Instant::now();
    let mut rng = seeded(derive_seed(a.common.seed, 1));
    let lk = importance_loglik(&model, x_iw, a.iw_k, &mut rng)?;
    m.timing("importance_loglik", t.elapsed().as_secs_f64());
    let mut rng = seeded(derive_seed(a.common.seed, 2));
    let elbo = elbo_estimate(&model, x_iw, &mut rng)?;
    let (lk_mean, lk_se) = mean_se(&lk);
    let (elbo_mean, elbo_se) = mean_se(&elbo);

    let mut tsv = String::new();
    tsv.push_str(&format!("structure\t{}\n", model.structure.describe()));
    tsv.push_str(&format!("n_latents\t{}\n", model.structure.latents.len()));
    tsv.push_str(&format!("iw_k\t{}\niw_rows\t{rows}\n", a.iw_k));
    tsv.push_str(&format!("loglik_iw\t{lk_mean}\nloglik_iw_se\t{lk_se}\n"));
    tsv.push_str(&format!("elbo\t{elbo_mean}\nelbo_se\t{elbo_se}\n\n"));
    tsv.push_str(&report.to_tsv());
    let metrics = a.common.out.join("metrics.tsv");
    std::fs::write(&metrics, tsv)?;
    m.output(&metrics)?;
    m.write(&a.common.out)
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn parse_assignment(text: &str) -> CliResult<Assignment> {
    let mut y = BTreeMap::new();
    for part in text.split(',').filter(|p| !p.is_empty()) {
        let (id, state) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("bad assignment {part:?}, expected id=state")))?;
        let id: u32 = id.trim().parse().map_err(|_| CliError::Usage(format!("bad latent id {id:?}")))?;
        let state: usize = state.trim().parse().map_err(|_| CliError::Usage(format!("bad state {state:?}")))?;
        y.insert(NodeId(id), state);
    }
    Ok(y)
}

fn parse_shape(text: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("bad --shape {text:?}, expected HxW"));
    let (h, w) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
}

fn sample(a: SampleArgs) -> CliResult<()> {
    require_file(&a.model)?;
    let shape = a.shape.as_deref().map(parse_shape).transpose()?;
    let mut m = Manifest::new("sample", &a.common);
    m.config = json!({
        "model": a.model, "n": a.n, "mode": format!("{:?}", a.mode).to_lowercase(),
        "assign": a.assign, "data": a.data, "row": a.row, "fixed": a.fixed, "resample": a.resample,
        "shape": a.shape, "png": a.png,
    });
    m.input(&a.model)?;
    let model = LtvaeModel::load(&a.model)?;
    let mut rng = seeded(derive_seed(a.common.seed, 1));
    let t = Instant::now();
    let samples = match a.mode {
        SampleMode::Ancestral => ancestral_sample(&model, a.n, &mut rng),
        SampleMode::Component => {
            let text = a
                .assign
                .as_deref()
                .ok_or_else(|| CliError::Usage("component mode needs --assign".into()))?;
            component_sample(&model, &parse_assignment(text)?, a.n, &mut rng)?
        }
        SampleMode::Conditional => {
            let data = a
                .data
                .as_ref()
                .ok_or_else(|| CliError::Usage("conditional mode needs --data".into()))?;
            require_file(data)?;
            m.input(data)?;
            let dataset = read_dataset(data)?;
            if a.row >= dataset.x.nrows() {
                return Err(CliError::Usage(format!("--row {} out of range", a.row)));
            }
            let x = dataset.x.row(a.row).to_vec();
            let fixed: Vec<NodeId> = a.fixed.iter().map(|&i| NodeId(i)).collect();
            let resample: Vec<NodeId> = a.resample.iter().map(|&i| NodeId(i)).collect();
            conditional_generate(&model, &x, &fixed, &resample, a.n, &mut rng)?
        }
    };
    m.timing("sample", t.elapsed().as_secs_f64());

    let mut ids: Vec<NodeId> = model.structure.latents.iter().map(|l| l.id).collect();
    ids.sort();
    let states: Vec<Vec<usize>> = ids
        .iter()
        .map(|id| samples.assignments.iter().map(|y| y[id]).collect())
        .collect();
    let state_refs: Vec<&[usize]> = states.iter().map(|v| v.as_slice()).collect();
    let x_path = a.common.out.join("samples.csv");
    let z_path = a.common.out.join("codes.csv");
    write_csv(&x_path, samples.x.view(), &[])?;
    write_csv(&z_path, samples.z.view(), &state_refs)?;
    m.output(&x_path)?;
    m.output(&z_path)?;
    m.extra.insert("code_label_columns".into(), json!(ids));
    if let Some((h, w)) = shape {
        let images: Array2<f64> = samples.x.clone();
        let cols = (a.n as f64).sqrt().ceil() as usize;
        let pgm = a.common.out.join("grid.pgm");
        write_grid(&pgm, images.view(), h, w, cols)?;
        m.output(&pgm)?;
        if a.png {
            let png = a.common.out.join("grid.png");
            write_grid(&png, images.view(), h, w, cols)?;
            m.output(&png)?;
        }
    } else if a.png {
        return Err(CliError::Usage("--png needs --shape".into()));
    }
    m.write(&a.common.out)
}

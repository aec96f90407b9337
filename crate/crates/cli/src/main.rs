mod data;
mod out;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rand::Rng as _;

use slifnet::converter::{convert, fold_avgpool};
use slifnet::data::Split;
use slifnet::model_io::{load_model, load_spiking, save_model, save_spiking};
use slifnet::network::{build_arch, evaluate_static, forward_batch, NetworkModel, NoiseGate, Shape};
use slifnet::neuron::{LifParams, DEFAULT_GAMMA};
use slifnet::rng::substream;
use slifnet::simulator::{evaluate_spiking, record_raster, SimConfig};
use slifnet::synapse::AlphaParams;
use slifnet::trainer::{grad_check, toy_gradcheck_model, train, GammaSchedule, TrainConfig};
use slifnet::{Error, Result};

use data::{default_data_dir, DatasetKind, SplitArg};
use out::{sigma_tag, RunDir};

#[derive(Parser)]
#[command(
    name = "slifnet",
    version,
    about = "Train rate-based image classifiers, convert them to spiking networks, simulate and analyze them"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a classifier and write a run directory
    Train(TrainArgs),
    /// Report a saved model's classification error on a dataset split
    EvalStatic(EvalStaticArgs),
    /// Turn a trained model into a spiking-network file
    Convert(ConvertArgs),
    /// Run a spiking network on a dataset subset; report error and rates
    Simulate(SimulateArgs),
    /// Measure filtered-spike-train variability across input currents
    AnalyzeNoise(AnalyzeNoiseArgs),
    /// Train noise variants, convert and simulate each, tabulate errors
    Ablate(AblateArgs),
    /// Compare backprop gradients against finite differences
    Gradcheck(GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 0 success, 2 usage, 3 I/O, 4 numerical. Flag-syntax errors also exit 2
/// (clap's default).
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidParam(_) | Error::InvalidModel(_) | Error::Shape { .. } => 2,
        Error::Io(_) | Error::Format(_) | Error::Dataset { .. } => 3,
        Error::Diverged { .. } | Error::NonFinite { .. } => 4,
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::EvalStatic(a) => cmd_eval_static(a),
        Cmd::Convert(a) => cmd_convert(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::AnalyzeNoise(a) => cmd_analyze_noise(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GateArg {
    /// Perturb only units whose input current clears threshold
    Current,
    /// Perturb only units already firing
    Rate,
}

impl From<GateArg> for NoiseGate {
    fn from(g: GateArg) -> NoiseGate {
        match g {
            GateArg::Current => NoiseGate::Current,
            GateArg::Rate => NoiseGate::Rate,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    dataset: DatasetKind,
    /// Directory with the dataset files; defaults to data/<dataset>
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// mlp-500-200, mlp-small, or conv-small
    #[arg(long)]
    arch: String,
    /// Training-noise level in spikes/s
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Rate-smoothing width
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    /// Anneal smoothing from --gamma down to this value over the epochs
    #[arg(long)]
    gamma_end: Option<f64>,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: u32,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    /// Per-epoch multiplicative learning-rate decay
    #[arg(long, default_value_t = TrainConfig::default().lr_decay)]
    lr_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    momentum: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    weight_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = GateArg::Current)]
    noise_gate: GateArg,
    /// Draw one noise sample per example and reuse it every epoch
    #[arg(long)]
    freeze_noise: bool,
    /// Run directory to create
    #[arg(long)]
    out: PathBuf,
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let data_dir = a.data_dir.clone().unwrap_or_else(|| default_data_dir(a.dataset));
    let train_set = data::load(a.dataset, &data_dir, Split::Train)?;
    let test_set = data::load(a.dataset, &data_dir, Split::Test)?;

    let gamma = match a.gamma_end {
        Some(end) => GammaSchedule::Anneal { start: a.gamma, end },
        None => GammaSchedule::Constant(a.gamma),
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        lr_decay: a.lr_decay,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        sigma: a.sigma,
        gamma,
        seed: a.seed,
        gate: a.noise_gate.into(),
        freeze_noise: a.freeze_noise,
    };

    let mut model = build_arch(&a.arch, train_set.shape, train_set.n_classes, a.gamma, a.sigma, a.seed)?;
    model.meta.arch = a.arch.clone();
    model.meta.dataset = a.dataset.name().to_string();
    model.meta.input_mean = train_set.images.mean().unwrap_or(0.0);

    eprintln!(
        "training {} on {} ({} examples, {} epochs)",
        a.arch,
        a.dataset.name(),
        train_set.images.nrows(),
        a.epochs
    );
    let started = Instant::now();
    let metrics = train(
        &mut model,
        &train_set.images,
        &train_set.labels,
        &test_set.images,
        &test_set.labels,
        &cfg,
    )?;
    for m in &metrics {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val_error {:.4}  ({:.1}s)",
            m.epoch, m.train_loss, m.val_error, m.wall_time
        );
    }
    eprintln!("trained in {:.1}s", started.elapsed().as_secs_f64());

    let static_error = evaluate_static(&model, &test_set.images, &test_set.labels, a.batch)?;

    let run = RunDir::create(&a.out)?;
    run.write_config(&[
        ("dataset", a.dataset.name().to_string()),
        ("data_dir", data_dir.display().to_string()),
        ("arch", a.arch.clone()),
        ("sigma", a.sigma.to_string()),
        ("gamma", a.gamma.to_string()),
        ("gamma_end", a.gamma_end.map_or("none".to_string(), |g| g.to_string())),
        ("epochs", a.epochs.to_string()),
        ("lr", a.lr.to_string()),
        ("lr_decay", a.lr_decay.to_string()),
        ("momentum", a.momentum.to_string()),
        ("weight_decay", a.weight_decay.to_string()),
        ("batch", a.batch.to_string()),
        ("seed", a.seed.to_string()),
        ("noise_gate", format!("{:?}", a.noise_gate).to_lowercase()),
        ("freeze_noise", a.freeze_noise.to_string()),
    ])?;
    run.write_metrics(&metrics)?;
    save_model(&model, run.path("model.slif"))?;
    let mut report = vec![
        ("dataset", a.dataset.name().to_string()),
        ("arch", a.arch.clone()),
        ("sigma", a.sigma.to_string()),
        ("epochs", a.epochs.to_string()),
        ("static_test_error", static_error.to_string()),
    ];
    if let Some(last) = metrics.last() {
        report.push(("final_train_loss", last.train_loss.to_string()));
    }
    run.write_report(&report)?;

    println!("static_test_error\t{static_error}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct EvalStaticArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    dataset: DatasetKind,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 100)]
    batch: usize,
}

fn cmd_eval_static(a: EvalStaticArgs) -> Result<ExitCode> {
    if a.batch == 0 {
        return Err(Error::InvalidParam("batch must be at least 1".to_string()));
    }
    let model = load_model(&a.model)?;
    let data_dir = a.data_dir.clone().unwrap_or_else(|| default_data_dir(a.dataset));
    let set = data::load(a.dataset, &data_dir, a.split.into())?;
    let err = evaluate_static(&model, &set.images, &set.labels, a.batch)?;
    println!("images\t{}", set.images.nrows());
    println!("static_error\t{err}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    model: PathBuf,
    /// Synapse filter time constant in seconds
    #[arg(long, default_value_t = AlphaParams::default().tau_s)]
    tau_s: f64,
    /// Merge average-pooling stages into the following weight layer first
    #[arg(long)]
    fold_avgpool: bool,
    /// Output spiking-model file
    #[arg(long)]
    out: PathBuf,
}

fn cmd_convert(a: ConvertArgs) -> Result<ExitCode> {
    let mut model = load_model(&a.model)?;
    if a.fold_avgpool {
        model = fold_avgpool(&model)?;
    }
    let net = convert(&model, a.tau_s)?;
    for warning in net.validate() {
        eprintln!("warning: {warning}");
    }
    save_spiking(&net, &a.out)?;
    println!("stages\t{}", net.stages.len());
    println!("tau_s\t{}", net.tau_s);
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct SimulateArgs {
    /// Spiking-model file produced by `convert`
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    dataset: DatasetKind,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Images to draw from the split (clamped to its size)
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    subset_size: u64,
    #[arg(long, default_value_t = 42)]
    subset_seed: u64,
    /// Step size in seconds
    #[arg(long, default_value_t = SimConfig::default().dt)]
    dt: f64,
    /// Presentation time per image in seconds
    #[arg(long, default_value_t = SimConfig::default().t_present)]
    t_present: f64,
    /// Time discarded before readout averaging, in seconds
    #[arg(long, default_value_t = SimConfig::default().t_settle)]
    t_settle: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start membranes at zero instead of seeded uniform draws
    #[arg(long)]
    zero_init_voltages: bool,
    /// Also write raster.tsv with every spike of the first subset image
    #[arg(long)]
    raster: bool,
    /// Run directory to create
    #[arg(long)]
    out: PathBuf,
}

fn cmd_simulate(a: SimulateArgs) -> Result<ExitCode> {
    let net = load_spiking(&a.model)?;
    let data_dir = a.data_dir.clone().unwrap_or_else(|| default_data_dir(a.dataset));
    let set = data::load(a.dataset, &data_dir, a.split.into())?;
    let n = (a.subset_size as usize).min(set.images.nrows());
    if n < a.subset_size as usize {
        eprintln!("note: split has only {n} images; using all of them");
    }
    let sub = set.sample_subset(n, a.subset_seed);

    let cfg = SimConfig {
        dt: a.dt,
        t_present: a.t_present,
        t_settle: a.t_settle,
        seed: a.seed,
        zero_init_voltages: a.zero_init_voltages,
    };

    let steps_per_image = (a.t_present / a.dt).round();
    eprintln!("simulating {n} images ({steps_per_image} steps each)");
    let started = Instant::now();
    let eval = evaluate_spiking(&net, &sub.images, &sub.labels, &cfg)?;
    let elapsed = started.elapsed().as_secs_f64();
    eprintln!("simulated in {elapsed:.1}s ({:.0} image-steps/s)", n as f64 * steps_per_image / elapsed);

    let run = RunDir::create(&a.out)?;
    run.write_config(&[
        ("model", a.model.display().to_string()),
        ("dataset", a.dataset.name().to_string()),
        ("data_dir", data_dir.display().to_string()),
        ("split", format!("{:?}", a.split).to_lowercase()),
        ("subset_size", n.to_string()),
        ("subset_seed", a.subset_seed.to_string()),
        ("dt", a.dt.to_string()),
        ("t_present", a.t_present.to_string()),
        ("t_settle", a.t_settle.to_string()),
        ("seed", a.seed.to_string()),
        ("zero_init_voltages", a.zero_init_voltages.to_string()),
    ])?;
    let mut report = vec![
        ("images", n.to_string()),
        ("error_rate", eval.error_rate.to_string()),
        ("mean_rate", eval.mean_rate.to_string()),
    ];
    let layer_keys: Vec<String> = (0..eval.layer_rates.len()).map(|i| format!("layer_rate_{i}")).collect();
    for (k, r) in layer_keys.iter().zip(&eval.layer_rates) {
        report.push((k.as_str(), r.to_string()));
    }
    let isi = eval.min_isi.map_or("none".to_string(), |v| v.to_string());
    report.push(("min_isi", isi));
    run.write_report(&report)?;

    if a.raster {
        record_raster(&net, sub.images.row(0), &cfg, run.path("raster.tsv"))?;
    }

    println!("error_rate\t{}", eval.error_rate);
    println!("mean_rate\t{}", eval.mean_rate);
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct AnalyzeNoiseArgs {
    /// Synapse filter time constant in seconds
    #[arg(long, default_value_t = AlphaParams::default().tau_s)]
    tau_s: f64,
    /// Smallest input current in the sweep (exclusive)
    #[arg(long, default_value_t = 1.02)]
    grid_min: f64,
    /// Largest input current in the sweep (inclusive)
    #[arg(long, default_value_t = 30.0)]
    grid_max: f64,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    grid_points: u64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Simulated seconds per grid point
    #[arg(long, default_value_t = 5.0)]
    duration: f64,
    /// Run directory to create
    #[arg(long)]
    out: PathBuf,
}

fn cmd_analyze_noise(a: AnalyzeNoiseArgs) -> Result<ExitCode> {
    if !(a.grid_min.is_finite() && a.grid_max.is_finite() && a.grid_max > a.grid_min) {
        return Err(Error::InvalidParam(format!(
            "current sweep needs grid_max > grid_min, got [{}, {}]",
            a.grid_min, a.grid_max
        )));
    }
    if !(a.dt > 0.0 && a.dt < a.tau_s) {
        return Err(Error::InvalidParam(format!(
            "dt must lie in (0, tau_s), got dt {} with tau_s {}",
            a.dt, a.tau_s
        )));
    }
    if a.duration.is_nan() || a.duration < 2.0 {
        return Err(Error::InvalidParam(format!(
            "duration must be at least 2 s for stable statistics, got {}",
            a.duration
        )));
    }

    let p = LifParams::default();
    let n = a.grid_points;
    let grid: Vec<f64> = (1..=n)
        .map(|k| a.grid_min + (a.grid_max - a.grid_min) * k as f64 / n as f64)
        .collect();

    eprintln!("sweeping {} currents, {} s each", grid.len(), a.duration);
    let stats = slifnet::analysis::variability_stats(&grid, &p, a.tau_s, a.dt, a.duration);
    let sigma = stats.iter().map(|s| s.std).sum::<f64>() / stats.len() as f64;

    let run = RunDir::create(&a.out)?;
    run.write_config(&[
        ("tau_s", a.tau_s.to_string()),
        ("grid_min", a.grid_min.to_string()),
        ("grid_max", a.grid_max.to_string()),
        ("grid_points", a.grid_points.to_string()),
        ("dt", a.dt.to_string()),
        ("duration", a.duration.to_string()),
    ])?;
    run.write_figure_data("variability.tsv", &slifnet::analysis::emit_figure_data(&stats))?;
    run.write_report(&[
        ("tau_s", a.tau_s.to_string()),
        ("grid_points", stats.len().to_string()),
        ("sigma_estimate", sigma.to_string()),
    ])?;

    println!("sigma_estimate\t{sigma}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    dataset: DatasetKind,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// mlp-500-200, mlp-small, or conv-small
    #[arg(long)]
    arch: String,
    /// Noise levels to train, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 10.0, 20.0])]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: u32,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch: usize,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synapse filter time constant for the spiking leg
    #[arg(long, default_value_t = AlphaParams::default().tau_s)]
    tau_s: f64,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    subset_size: u64,
    #[arg(long, default_value_t = 42)]
    subset_seed: u64,
    #[arg(long, default_value_t = SimConfig::default().t_present)]
    t_present: f64,
    #[arg(long, default_value_t = SimConfig::default().t_settle)]
    t_settle: f64,
    #[arg(long, default_value_t = SimConfig::default().dt)]
    dt: f64,
    /// Run directory to create
    #[arg(long)]
    out: PathBuf,
}

fn cmd_ablate(a: AblateArgs) -> Result<ExitCode> {
    if a.sigmas.is_empty() {
        return Err(Error::InvalidParam("need at least one sigma".to_string()));
    }
    let data_dir = a.data_dir.clone().unwrap_or_else(|| default_data_dir(a.dataset));
    let train_set = data::load(a.dataset, &data_dir, Split::Train)?;
    let test_set = data::load(a.dataset, &data_dir, Split::Test)?;
    let n = (a.subset_size as usize).min(test_set.images.nrows());
    let sub = test_set.sample_subset(n, a.subset_seed);
    let sim_cfg = SimConfig {
        dt: a.dt,
        t_present: a.t_present,
        t_settle: a.t_settle,
        seed: a.seed,
        zero_init_voltages: false,
    };

    let run = RunDir::create(&a.out)?;
    run.write_config(&[
        ("dataset", a.dataset.name().to_string()),
        ("data_dir", data_dir.display().to_string()),
        ("arch", a.arch.clone()),
        ("sigmas", a.sigmas.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")),
        ("epochs", a.epochs.to_string()),
        ("lr", a.lr.to_string()),
        ("batch", a.batch.to_string()),
        ("gamma", a.gamma.to_string()),
        ("seed", a.seed.to_string()),
        ("tau_s", a.tau_s.to_string()),
        ("subset_size", n.to_string()),
        ("subset_seed", a.subset_seed.to_string()),
        ("t_present", a.t_present.to_string()),
        ("t_settle", a.t_settle.to_string()),
        ("dt", a.dt.to_string()),
    ])?;

    let mut table = String::from("sigma\tstatic_error\tspiking_error\n");
    for &sigma in &a.sigmas {
        eprintln!("ablate: training sigma={sigma}");
        let cfg = TrainConfig {
            epochs: a.epochs,
            batch_size: a.batch,
            lr: a.lr,
            sigma,
            gamma: GammaSchedule::Constant(a.gamma),
            seed: a.seed,
            ..TrainConfig::default()
        };
        let mut model = build_arch(&a.arch, train_set.shape, train_set.n_classes, a.gamma, sigma, a.seed)?;
        model.meta.arch = a.arch.clone();
        model.meta.dataset = a.dataset.name().to_string();
        model.meta.input_mean = train_set.images.mean().unwrap_or(0.0);
        let metrics = train(
            &mut model,
            &train_set.images,
            &train_set.labels,
            &test_set.images,
            &test_set.labels,
            &cfg,
        )?;
        let static_error = evaluate_static(&model, &test_set.images, &test_set.labels, a.batch)?;

        let variant = RunDir::create(&run.path(&format!("sigma-{}", sigma_tag(sigma))))?;
        variant.write_metrics(&metrics)?;
        save_model(&model, variant.path("model.slif"))?;

        let net = convert(&model, a.tau_s)?;
        eprintln!("ablate: simulating sigma={sigma} on {n} images");
        let eval = evaluate_spiking(&net, &sub.images, &sub.labels, &sim_cfg)?;
        table.push_str(&format!("{}\t{}\t{}\n", sigma_tag(sigma), static_error, eval.error_rate));
    }
    std::fs::write(run.path("report.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct GradcheckArgs {
    /// toy, mlp-small, or conv-small
    #[arg(long, default_value = "toy")]
    arch: String,
    /// Check a saved model instead of a fresh architecture
    #[arg(long, conflicts_with = "arch")]
    model: Option<PathBuf>,
    /// Rate-smoothing width; 0 is refused
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to check
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    /// Maximum relative error accepted; conv stacks need a looser bound
    /// than the default because the difference quotient itself carries
    /// O(1e-3) truncation noise there
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

fn gradcheck_model(a: &GradcheckArgs, seed: u64) -> Result<NetworkModel> {
    if let Some(path) = &a.model {
        let m = load_model(path)?;
        if m.meta.gamma == 0.0 {
            return Err(Error::InvalidParam(
                "model was saved with gamma = 0; its rate function has no usable derivative at threshold".to_string(),
            ));
        }
        return Ok(m);
    }
    match a.arch.as_str() {
        "toy" => Ok(toy_gradcheck_model(a.gamma, seed)),
        "mlp-small" => build_arch("mlp-small", Shape::Flat(64), 10, a.gamma, 0.0, seed),
        "conv-small" => build_arch("conv-small", Shape::Image { c: 1, h: 8, w: 8 }, 10, a.gamma, 0.0, seed),
        other => Err(Error::InvalidParam(format!(
            "unknown gradcheck arch {other:?} (expected toy, mlp-small, or conv-small)"
        ))),
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if a.model.is_none() && a.gamma == 0.0 {
        return Err(Error::InvalidParam(
            "gamma = 0 is the hard rate function, whose derivative blows up at threshold; pass gamma > 0".to_string(),
        ));
    }
    if !(a.h > 0.0 && a.h.is_finite()) {
        return Err(Error::InvalidParam(format!("h must be positive, got {}", a.h)));
    }

    let batch = 5;
    let mut worst = 0.0f64;
    let mut params = 0;
    for seed in a.seed..a.seed + a.seeds {
        let mut model = gradcheck_model(&a, seed)?;
        let dims = model.input_shape.len();
        let mut rng = substream(seed, "gradcheck", 0);
        let x = Array2::from_shape_simple_fn((batch, dims), || rng.gen::<f64>());
        let (probs, _) = forward_batch(&model, &x, None)?;
        let classes = probs.ncols();
        let labels: Vec<u8> = (0..batch).map(|i| (i % classes) as u8).collect();

        let report = grad_check(&mut model, &x, &labels, a.h)?;
        println!("seed {seed}\tmax_rel_err {:.3e}\tparams {}", report.max_rel_err, report.params_checked);
        worst = worst.max(report.max_rel_err);
        params += report.params_checked;
    }

    let pass = worst < a.tol;
    println!(
        "gradcheck {}\tworst {:.3e}\ttol {:.1e}\tparams {params}",
        if pass { "PASS" } else { "FAIL" },
        worst,
        a.tol
    );
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(4) })
}

mod failure;
mod plot;
mod train_config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eventsb::events::{
    bin_events, check_supported_bins, generate_day_scene, generate_night_scene, read_histogram, write_histogram,
    write_stream, Domain, EventHistogram, SceneConfig,
};
use eventsb::fsutil::atomic_write;
use eventsb::metrics::{train_extractor, ExtractorTrainConfig, MetricReport, TrainedExtractor};
use eventsb::networks::ExtractorKind;
use eventsb::sb_bridge::{entropic_objective, sinkhorn_plan};
use eventsb::trainer::{train, TrainOutputs, TranslationModel};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use failure::{CliResult, Failure};
use train_config::TrainFlags;

#[derive(Parser, Debug)]
#[command(name = "eventsb", version, about = "Unpaired day-to-night translation of event-camera histograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic event streams (EVS1) and their histograms (EVH1)
    GenData(GenDataArgs),
    /// Train a translation model on directories of EVH1 histograms
    #[command(after_help = train_config::key_table())]
    Train(TrainArgs),
    /// Translate EVH1 histograms with a trained checkpoint
    Translate(TranslateArgs),
    /// Compute event FID / FVD / KID between two histogram sets
    Eval(EvalArgs),
    /// Solve a random entropic transport problem and write the plan as CSV
    ToyOt(ToyOtArgs),
    /// Render loss curves (--loss-csv) or per-bin histogram panels (--histogram) as PNG
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DomainArg {
    Day,
    Night,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, value_enum)]
    domain: DomainArg,
    /// Defaults to $EVENTSB_SEED
    #[arg(long, env = "EVENTSB_SEED", default_value_t = 0)]
    seed: u64,
    /// Temporal bins, one of 1, 3, 8
    #[arg(long, default_value_t = 3)]
    bins: usize,
    /// [key: SceneConfig.height]
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// [key: SceneConfig.width]
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Window length in seconds [key: SceneConfig.window]
    #[arg(long, default_value_t = 0.1)]
    window: f64,
    /// [key: SceneConfig.n_shapes]
    #[arg(long, default_value_t = 4)]
    shapes: usize,
    /// [key: SceneConfig.night_light_count]
    #[arg(long, default_value_t = 3)]
    lights: usize,
    /// Noise events per pixel per window [key: SceneConfig.night_noise_rate]
    #[arg(long, default_value_t = 0.05)]
    noise_rate: f64,
    /// [key: SceneConfig.edge_jitter_sigma]
    #[arg(long, default_value_t = 0.7)]
    jitter: f64,
    /// [key: SceneConfig.polarity_bias]
    #[arg(long, default_value_t = 0.85)]
    polarity_bias: f64,
    /// [key: SceneConfig.light_burst_rate]
    #[arg(long, default_value_t = 1.5)]
    burst_rate: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of day-domain EVH1 files
    #[arg(long)]
    day: PathBuf,
    /// Directory of night-domain EVH1 files
    #[arg(long)]
    night: PathBuf,
    /// Receives config.toml, loss.csv and checkpoints
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// EVH1 file or directory of EVH1 files
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to $EVENTSB_SEED
    #[arg(long, env = "EVENTSB_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum MetricKinds {
    Image,
    Video,
    Both,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// First histogram set (directory)
    #[arg(long)]
    a: PathBuf,
    /// Second histogram set (directory)
    #[arg(long)]
    b: PathBuf,
    /// Report file (key=value lines)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    metrics: MetricKinds,
    /// Saved image extractor; otherwise one is trained
    #[arg(long)]
    extractor_image: Option<PathBuf>,
    /// Saved video extractor; otherwise one is trained
    #[arg(long)]
    extractor_video: Option<PathBuf>,
    /// Day training set for extractors (directory)
    #[arg(long)]
    train_day: Option<PathBuf>,
    /// Night training set for extractors (directory)
    #[arg(long)]
    train_night: Option<PathBuf>,
    /// Write newly trained extractors here
    #[arg(long)]
    save_extractors: Option<PathBuf>,
    /// Refuse unless this earlier report used the same extractors
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Extractor training seed; defaults to $EVENTSB_SEED [key: ExtractorTrainConfig.seed]
    #[arg(long, env = "EVENTSB_SEED", default_value_t = 0)]
    seed: u64,
    /// [key: ExtractorTrainConfig.epochs]
    #[arg(long, default_value_t = 6)]
    epochs: usize,
    /// [key: ExtractorTrainConfig.cap]
    #[arg(long, default_value_t = 10.0)]
    cap: f64,
}

#[derive(Args, Debug)]
struct ToyOtArgs {
    /// Support size of both marginals
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Defaults to $EVENTSB_SEED
    #[arg(long, env = "EVENTSB_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Loss log written by `train`
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// EVH1 files; each gives one panel per bin
    #[arg(long, num_args = 1..)]
    histogram: Vec<PathBuf>,
    /// Output PNG for --loss-csv, output directory for --histogram
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", Failure::usage(e.kind().to_string()).json_line());
            }
            return ExitCode::from(code as u8);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => run_train(&a),
        Command::Translate(a) => translate(&a),
        Command::Eval(a) => eval(&a),
        Command::ToyOt(a) => toy_ot(&a),
        Command::Plot(a) => run_plot(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{f}");
            eprintln!("{}", f.json_line());
            ExitCode::from(f.code)
        }
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

/// EVH1 files in `dir`, sorted by name; a single file is accepted too.
fn histogram_paths(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Failure::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "evh"))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Failure::data(format!("{}: no .evh files", path.display())));
    }
    Ok(out)
}

fn load_histograms(path: &Path) -> CliResult<Vec<EventHistogram>> {
    histogram_paths(path)?
        .iter()
        .map(|p| read_histogram(p).map_err(Failure::from))
        .collect()
}

#[derive(Serialize)]
struct ManifestItem {
    stream: String,
    histogram: String,
    seed: u64,
    domain: &'static str,
}

#[derive(Serialize)]
struct Manifest {
    domain: &'static str,
    bins: usize,
    seed: u64,
    items: Vec<ManifestItem>,
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    check_supported_bins(a.bins)?;
    if a.count == 0 {
        return Err(Failure::usage("--count must be positive"));
    }
    let domain = match a.domain {
        DomainArg::Day => Domain::Day,
        DomainArg::Night => Domain::Night,
    };
    let base = SceneConfig {
        height: a.height,
        width: a.width,
        window: a.window,
        n_shapes: a.shapes,
        night_light_count: a.lights,
        night_noise_rate: a.noise_rate,
        edge_jitter_sigma: a.jitter,
        polarity_bias: a.polarity_bias,
        light_burst_rate: a.burst_rate,
        seed: 0,
    };
    base.validate()?;
    create_dir(&a.out)?;
    let tag = domain.as_str();
    let mut items = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let seed = a.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let cfg = SceneConfig { seed, ..base.clone() };
        let stream = match domain {
            Domain::Night => generate_night_scene(&cfg)?,
            _ => generate_day_scene(&cfg)?,
        };
        let hist = bin_events(&stream, a.bins, domain)?;
        let (s_name, h_name) = (format!("{tag}_{i:05}.evs"), format!("{tag}_{i:05}.evh"));
        write_stream(a.out.join(&s_name), &stream)?;
        write_histogram(a.out.join(&h_name), &hist)?;
        items.push(ManifestItem {
            stream: s_name,
            histogram: h_name,
            seed,
            domain: tag,
        });
    }
    let manifest = Manifest {
        domain: tag,
        bins: a.bins,
        seed: a.seed,
        items,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    atomic_write(&a.out.join("manifest.json"), json.as_bytes())?;
    log::info!("wrote {} {tag} samples to {}", a.count, a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = a.flags.resolve()?;
    let day = load_histograms(&a.day)?;
    let night = load_histograms(&a.night)?;
    create_dir(&a.out)?;
    let toml = toml::to_string_pretty(&cfg).map_err(|e| Failure::usage(format!("config: {e}")))?;
    atomic_write(&a.out.join("config.toml"), toml.as_bytes())?;
    let csv_tmp = a.out.join(".loss.csv.partial");
    let outputs = TrainOutputs {
        loss_csv: Some(csv_tmp.clone()),
        checkpoint_dir: Some(a.out.clone()),
    };
    let outcome = train(&cfg, &day, &night, &outputs)?;
    let csv = a.out.join("loss.csv");
    std::fs::rename(&csv_tmp, &csv).map_err(|e| Failure::io(&csv, e))?;
    outcome.model.save(a.out.join("model.evck"))?;
    log::info!("trained {} iterations; model at {}", cfg.iterations, a.out.join("model.evck").display());
    Ok(())
}

fn translate(a: &TranslateArgs) -> CliResult<()> {
    let model = TranslationModel::load(&a.checkpoint)?;
    let paths = histogram_paths(&a.input)?;
    let inputs: Vec<EventHistogram> = paths
        .iter()
        .map(|p| read_histogram(p).map_err(Failure::from))
        .collect::<CliResult<_>>()?;
    let outputs = model.translate(&inputs, a.seed)?;
    create_dir(&a.out)?;
    for (p, h) in paths.iter().zip(&outputs) {
        let name = p.file_name().expect("histogram path has a file name");
        write_histogram(a.out.join(name), h)?;
    }
    log::info!("translated {} histograms into {}", outputs.len(), a.out.display());
    Ok(())
}

fn extractor(
    a: &EvalArgs,
    kind: ExtractorKind,
    saved: Option<&PathBuf>,
    training: &mut Option<(Vec<EventHistogram>, Vec<EventHistogram>)>,
) -> CliResult<TrainedExtractor> {
    if let Some(p) = saved {
        let ex = TrainedExtractor::load(p)?;
        if ex.extractor.config.kind != kind {
            return Err(Failure::usage(format!("{} holds a {} extractor", p.display(), ex.extractor.config.kind.as_str())));
        }
        return Ok(ex);
    }
    if training.is_none() {
        let (Some(d), Some(n)) = (&a.train_day, &a.train_night) else {
            return Err(Failure::usage(format!(
                "no saved {} extractor: pass --extractor-{} or --train-day and --train-night",
                kind.as_str(),
                kind.as_str()
            )));
        };
        *training = Some((load_histograms(d)?, load_histograms(n)?));
    }
    let (day, night) = training.as_ref().expect("loaded above");
    let cfg = ExtractorTrainConfig {
        epochs: a.epochs,
        cap: a.cap,
        ..ExtractorTrainConfig::new(kind, a.seed)
    };
    let ex = train_extractor(day, night, &cfg)?;
    log::info!("{} extractor certified at accuracy {:.3}", kind.as_str(), ex.fingerprint.accuracy);
    if let Some(dir) = &a.save_extractors {
        create_dir(dir)?;
        ex.save(dir.join(format!("{}.evx", kind.as_str())))?;
    }
    Ok(ex)
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let set_a = load_histograms(&a.a)?;
    let set_b = load_histograms(&a.b)?;
    let mut training = None;
    let image = match a.metrics {
        MetricKinds::Image | MetricKinds::Both => {
            Some(extractor(a, ExtractorKind::Image, a.extractor_image.as_ref(), &mut training)?)
        }
        MetricKinds::Video => None,
    };
    let video = match a.metrics {
        MetricKinds::Video | MetricKinds::Both => {
            Some(extractor(a, ExtractorKind::Video, a.extractor_video.as_ref(), &mut training)?)
        }
        MetricKinds::Image => None,
    };
    let report = MetricReport::compute(image.as_ref(), video.as_ref(), &set_a, &set_b)?;
    if let Some(prev) = &a.compare {
        report.check_comparable(&MetricReport::read(prev)?)?;
    }
    report.write(&a.out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn toy_ot(a: &ToyOtArgs) -> CliResult<()> {
    if a.n == 0 {
        return Err(Failure::usage("--n must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let marginal = |rng: &mut ChaCha8Rng| {
        let w: Vec<f64> = (0..a.n).map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let (p, q) = (marginal(&mut rng), marginal(&mut rng));
    let cost = DMatrix::from_fn(a.n, a.n, |i, j| {
        let d = i as f64 - j as f64;
        d * d / (a.n * a.n) as f64
    });
    let result = sinkhorn_plan(&p, &q, &cost, a.epsilon, a.max_iter, a.tol)?;
    let mut csv = String::new();
    for row in result.plan.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    atomic_write(&a.out, csv.as_bytes())?;
    println!(
        "iterations={} row_residual={:e} col_residual={:e} objective={}",
        result.iterations,
        result.row_residual,
        result.col_residual,
        entropic_objective(&result.plan, &cost, a.epsilon)
    );
    Ok(())
}

fn run_plot(a: &PlotArgs) -> CliResult<()> {
    if a.loss_csv.is_some() == !a.histogram.is_empty() {
        return Err(Failure::usage("pass exactly one of --loss-csv and --histogram"));
    }
    if let Some(csv) = &a.loss_csv {
        let text = std::fs::read_to_string(csv).map_err(|e| Failure::io(csv, e))?;
        let table = plot::parse_loss_csv(&text).map_err(|f| Failure::data(format!("{}: {}", csv.display(), f.message)))?;
        atomic_write(&a.out, &plot::png_bytes(&plot::render_losses(&table)))?;
        return Ok(());
    }
    let hists: Vec<(PathBuf, EventHistogram)> = a
        .histogram
        .iter()
        .map(|p| read_histogram(p).map(|h| (p.clone(), h)).map_err(Failure::from))
        .collect::<CliResult<_>>()?;
    create_dir(&a.out)?;
    for (p, h) in hists {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "histogram".into());
        for (b, img) in plot::render_histogram_bins(&h).iter().enumerate() {
            atomic_write(&a.out.join(format!("{stem}_bin{b}.png")), &plot::png_bytes(img))?;
        }
    }
    Ok(())
}

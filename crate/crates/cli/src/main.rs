use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use labeldiff::checkpoint;
use labeldiff::data::{load_inputs, synth_generate, write_dataset};
use labeldiff::training::eval_noise;
use labeldiff::viz::write_saliency_overlays;
use labeldiff::{
    classify_batch, evaluate, prepare_data, run_ablation, run_experiment, trajectory_viz, Error, F1Average, Image, Result, RunConfig, SynthSpec, Variant,
};

#[derive(Parser, Debug)]
#[command(name = "labeldiff", version, about = "Label-space diffusion classifier with dual-granularity priors")]
struct Cli {
    /// TOML run configuration; the desk preset when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed (or the data seed for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic image-folder dataset with an index CSV and manifest.
    GenData(GenData),
    /// Trains one variant; writes metrics.json, curves.csv, best.dmic, last.dmic.
    Train(Train),
    /// Classifies a PNG file or every PNG in a folder.
    Infer(Infer),
    /// Evaluates a checkpoint on the test split of its configured data.
    Eval(Eval),
    /// Trains all four variants per seed; writes ablation.csv and ablation.txt.
    Ablate(Ablate),
    /// Writes reverse-chain trajectories, scatter.svg and saliency overlays.
    Viz(Viz),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    blur: Option<f64>,
    /// Comma-separated class weights.
    #[arg(long, value_delimiter = ',')]
    imbalance: Option<Vec<f64>>,
    /// Destination folder; defaults to --out-dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Continues from a last.dmic checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Infer {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    votes: usize,
    /// CSV of every reverse step: image, t, y_t and the ŷ0 estimate.
    #[arg(long)]
    trajectory_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    votes: Option<usize>,
}

#[derive(Args, Debug)]
struct Ablate {
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct Viz {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reverse steps to record; defaults to the first, middle and last.
    #[arg(long, value_delimiter = ',')]
    steps_to_record: Option<Vec<usize>>,
    #[arg(long)]
    steps: Option<usize>,
    /// Number of test images to visualize; all when omitted.
    #[arg(long)]
    limit: Option<usize>,
    /// Number of saliency/ROI overlays to write (DCG variants only).
    #[arg(long, default_value_t = 8)]
    overlays: usize,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Runtime(e.to_string()))? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn gen_data(cli: &Cli, args: &GenData) -> Result<()> {
    let cfg = load_config(cli)?;
    let d = &cfg.data;
    let classes = args.classes.unwrap_or(d.classes);
    let imbalance = match &args.imbalance {
        Some(w) => w.clone(),
        None if classes == d.classes => d.imbalance.clone(),
        None => vec![1.0; classes],
    };
    let spec = SynthSpec {
        classes,
        count: args.count.unwrap_or(d.count),
        image_size: args.size.unwrap_or(d.image_size),
        noise_sigma: args.noise.unwrap_or(d.noise_sigma),
        blur_radius: args.blur.unwrap_or(d.blur_radius),
        imbalance,
        seed: cli.seed.unwrap_or(d.data_seed),
    };
    let out = args.out.clone().unwrap_or_else(|| cli.out_dir.clone());
    let ds = synth_generate(&spec)?;
    let manifest = write_dataset(&ds, &spec, &out)?;
    println!("wrote {} images in {} classes to {}", manifest.files.len(), spec.classes, out.display());
    Ok(())
}

fn train(cli: &Cli, args: &Train) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(e) = args.epochs {
        cfg.optim.epochs = e;
    }
    if let Some(w) = args.warmup_epochs {
        cfg.optim.warmup_epochs = w;
    }
    cfg.validate()?;
    let resume = match &args.resume {
        Some(p) => {
            let (model, mut meta) = checkpoint::load(p)?;
            if meta.config.optim.epochs != cfg.optim.epochs {
                let mut stored = meta.config.clone();
                stored.optim.epochs = cfg.optim.epochs;
                if stored == cfg {
                    meta.config = cfg.clone();
                }
            }
            Some((model, meta))
        }
        None => None,
    };
    let (train, test) = prepare_data(&cfg.data)?;
    ensure_dir(&cli.out_dir)?;
    cfg.save(&cli.out_dir.join("config.toml"))?;
    let exp = run_experiment(&cfg, &train, &test, Some(&cli.out_dir), resume)?;
    let r = &exp.report;
    println!(
        "{} seed {}: test accuracy {:.4}, {} F1 {:.4} (best accuracy {:.4} at epoch {})",
        r.variant,
        r.seed,
        r.final_eval.accuracy,
        cfg.eval.f1.name(),
        r.final_f1(&cfg),
        r.best_accuracy,
        r.best_epoch
    );
    Ok(())
}

fn infer(cli: &Cli, args: &Infer) -> Result<()> {
    let (model, meta) = checkpoint::load(&args.checkpoint)?;
    let steps = args.steps.unwrap_or(meta.config.schedule.inference_steps);
    let seed = cli.seed.unwrap_or(meta.config.seed);
    let inputs = load_inputs(&args.input, model.image_size, model.channels)?;
    let images: Vec<&Image> = inputs.iter().map(|(_, im)| im).collect();
    let record = match (&args.trajectory_out, &model.denoiser) {
        (Some(_), Some(_)) => labeldiff::sampler::inference_timesteps(model.schedule.timesteps(), steps)?,
        (Some(_), None) => return Err(Error::Config(format!("variant {} has no reverse trajectory", model.variant))),
        _ => Vec::new(),
    };
    let mut noise: Vec<_> = (0..images.len()).map(|i| eval_noise(seed, i)).collect();
    let results = classify_batch(&images, &model, steps, args.votes, &mut noise, &record)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut header = vec!["path".to_string(), "class".into(), "class_name".into()];
    header.extend((0..model.classes).map(|k| format!("y0_{k}")));
    let _ = writeln!(out, "{}", header.join(","));
    for ((path, _), r) in inputs.iter().zip(&results) {
        let mut row = vec![path.display().to_string(), r.class.to_string(), meta.class_names[r.class].clone()];
        row.extend(r.y0_hat.0.iter().map(|v| format!("{v:.6}")));
        let _ = writeln!(out, "{}", row.join(","));
    }
    if let Some(path) = &args.trajectory_out {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        let mut header = vec!["image".to_string(), "t".into()];
        header.extend((0..model.classes).map(|k| format!("y_t_{k}")));
        header.extend((0..model.classes).map(|k| format!("y0_{k}")));
        w.write_record(&header).map_err(err)?;
        for (i, r) in results.iter().enumerate() {
            for p in &r.trajectory {
                let mut row = vec![i.to_string(), p.t.to_string()];
                row.extend(p.y_t.0.iter().chain(&p.y0_hat.0).map(|v| v.to_string()));
                w.write_record(&row).map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalSummary {
    checkpoint: PathBuf,
    variant: Variant,
    steps: usize,
    votes: usize,
    images: usize,
    accuracy: f64,
    macro_f1: f64,
    weighted_f1: f64,
    confusion: Vec<Vec<u64>>,
}

fn eval(cli: &Cli, args: &Eval) -> Result<()> {
    let (model, meta) = checkpoint::load(&args.checkpoint)?;
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => meta.config.clone(),
    };
    let steps = args.steps.unwrap_or(cfg.schedule.inference_steps);
    let votes = args.votes.unwrap_or(cfg.eval.votes);
    let seed = cli.seed.unwrap_or(cfg.seed);
    let (_, test) = prepare_data(&cfg.data)?;
    let r = evaluate(&model, &test, steps, votes, seed)?;
    let summary = EvalSummary {
        checkpoint: args.checkpoint.clone(),
        variant: model.variant,
        steps,
        votes,
        images: test.len(),
        accuracy: r.accuracy,
        macro_f1: r.macro_f1,
        weighted_f1: r.weighted_f1,
        confusion: r.confusion.counts.clone(),
    };
    ensure_dir(&cli.out_dir)?;
    write_json(&cli.out_dir.join("eval.json"), &summary)?;
    let f1 = match cfg.eval.f1 {
        F1Average::Macro => r.macro_f1,
        F1Average::Weighted => r.weighted_f1,
    };
    println!(
        "{} images: accuracy {:.4}, {} F1 {:.4}",
        test.len(),
        r.accuracy,
        cfg.eval.f1.name(),
        f1
    );
    Ok(())
}

fn ablate(cli: &Cli, args: &Ablate) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(e) = args.epochs {
        cfg.optim.epochs = e;
    }
    cfg.validate()?;
    let (train, test) = prepare_data(&cfg.data)?;
    let report = run_ablation(&cfg, &args.seeds, &train, &test, Some(&cli.out_dir))?;
    print!("{}", report.render_table());
    Ok(())
}

fn viz(cli: &Cli, args: &Viz) -> Result<()> {
    let (model, meta) = checkpoint::load(&args.checkpoint)?;
    let steps = args.steps.unwrap_or(meta.config.schedule.inference_steps);
    let seed = cli.seed.unwrap_or(meta.config.seed);
    let (_, mut test) = prepare_data(&meta.config.data)?;
    if let Some(n) = args.limit {
        let keep: Vec<usize> = (0..n.min(test.len())).collect();
        test = test.subset(&keep);
    }
    let record = match &args.steps_to_record {
        Some(r) => r.clone(),
        None => {
            let sched = labeldiff::sampler::inference_timesteps(model.schedule.timesteps(), steps)?;
            let mut r = vec![sched[0], sched[sched.len() / 2], sched[sched.len() - 1]];
            r.dedup();
            r
        }
    };
    let report = trajectory_viz(&model, &test, &record, steps, seed, Some(&cli.out_dir))?;
    for s in &report.steps {
        println!("t={:<5} silhouette {:.4}", s.t, s.silhouette);
    }
    if model.dcg.is_some() && args.overlays > 0 {
        let imgs: Vec<&Image> = test.images.iter().take(args.overlays).collect();
        write_saliency_overlays(&model, &imgs, &cli.out_dir.join("saliency"))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Ablate(a) => ablate(cli, a),
        Command::Viz(a) => viz(cli, a),
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("E_CONFIG: {}", single_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            eprintln!("{}: {}", kind.tag(), single_line(&e.to_string()));
            ExitCode::from(kind.exit_code() as u8)
        }
    }
}

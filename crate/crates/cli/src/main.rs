use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};
use unipan::checkpoint;
use unipan::config::{PostConfig, RunConfig};
use unipan::data::{read_dataset, write_dataset, SceneSpec};
use unipan::postprocess::render;
use unipan::trainer::{evaluate, train_run_with};
use unipan::Error;

const SEED_ENV: &str = "SPINET_SEED";

#[derive(Parser)]
#[command(
    name = "unipan",
    version,
    about = "Single-shot panoptic segmentation: data, training, evaluation, inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of `.pan` scenes plus a manifest.
    Gen(GenArgs),
    /// Train from a flat JSON config; writes checkpoint, metrics and config under `out`.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write the PQ report.
    Eval(EvalArgs),
    /// Write per-image predictions, optionally with rendered overlays.
    Infer(InferArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    /// JSON scene spec file; the size flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    num_things: Option<usize>,
    #[arg(long)]
    num_stuff: Option<usize>,
    #[arg(long)]
    max_instances: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Further overrides as `key=value`, value parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Train in double precision.
    #[arg(long)]
    double: bool,
    /// Print a progress line every this many iterations (0 = silent).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run config whose post-processing keys are used; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write an image/overlay PNG per scene.
    #[arg(long)]
    render: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
        _ => 2,
    }
}

fn read_json_object(path: &Path) -> unipan::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::Config(format!(
            "{} must hold a JSON object",
            path.display()
        ))),
        Err(e) => Err(Error::Config(format!(
            "{} is not JSON: {e}",
            path.display()
        ))),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> unipan::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn gen(args: GenArgs) -> unipan::Result<()> {
    let mut spec = match &args.spec {
        Some(path) => serde_json::from_value::<SceneSpec>(Value::Object(read_json_object(path)?))
            .map_err(|e| Error::InvalidSpec(e.to_string()))?,
        None => SceneSpec {
            height: 64,
            width: 64,
            num_things: 2,
            num_stuff: 2,
            max_instances: 3,
        },
    };
    spec.height = args.height.unwrap_or(spec.height);
    spec.width = args.width.unwrap_or(spec.width);
    spec.num_things = args.num_things.unwrap_or(spec.num_things);
    spec.num_stuff = args.num_stuff.unwrap_or(spec.num_stuff);
    spec.max_instances = args.max_instances.unwrap_or(spec.max_instances);
    let manifest = write_dataset(&args.out, args.seed, &spec, args.count)?;
    println!(
        "wrote {} scenes to {}",
        manifest.files.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> unipan::Result<()> {
    let file = read_json_object(&args.config)?;
    let mut overrides = Map::new();
    for item in &args.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {item}` is not KEY=VALUE")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        overrides.insert(k.to_string(), value);
    }
    if let Some(d) = args.data {
        overrides.insert("data".into(), Value::String(d));
    }
    if let Some(o) = args.out {
        overrides.insert("out".into(), Value::String(o));
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    match (args.seed, env_seed) {
        (Some(s), _) => {
            overrides.insert("seed".into(), s.into());
        }
        (None, Some(s)) if !file.contains_key("seed") && !overrides.contains_key("seed") => {
            let s: u64 = s
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s} is not an integer")))?;
            overrides.insert("seed".into(), s.into());
        }
        _ => {}
    }
    let run = RunConfig::resolve(&file, &overrides)?;
    let every = args.log_every;
    let log = |r: &unipan::trainer::StepRecord| {
        if every > 0 && r.iteration.is_multiple_of(every) {
            eprintln!(
                "iter {:>6}  lr {:.2e}  loss {:.4}  cls {:.4}  stuff {:.4}  thing {:.4}  grad {:.3}",
                r.iteration,
                r.lr,
                r.loss.total,
                r.loss.cls,
                r.loss.stuff_ce + r.loss.stuff_mcd,
                r.loss.thing_dice,
                r.grad_norm
            );
        }
    };
    let resume = args.resume.as_deref();
    let summary = if args.double {
        train_run_with::<f64>(&run, resume, log)?
    } else {
        train_run_with::<f32>(&run, resume, log)?
    };
    println!(
        "trained to iteration {}; checkpoint {}",
        summary.iterations,
        summary.checkpoint.display()
    );
    Ok(())
}

fn post_config(config: Option<&Path>) -> unipan::Result<PostConfig> {
    match config {
        Some(path) => {
            let mut file = read_json_object(path)?;
            for key in ["data", "out"] {
                file.entry(key).or_insert(Value::String(String::new()));
            }
            Ok(RunConfig::resolve(&file, &Map::new())?.post())
        }
        None => Ok(PostConfig::default()),
    }
}

fn eval(args: EvalArgs) -> unipan::Result<()> {
    let post = post_config(args.config.as_deref())?;
    let model = checkpoint::load::<f64>(&args.checkpoint)?.model;
    let labels: Vec<_> = read_dataset(&args.data)?
        .1
        .into_iter()
        .map(|(_, l)| l)
        .collect();
    for l in &labels {
        model.check_label(l)?;
    }
    let report = evaluate(&model, &labels, &post)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let path = args.out.join("report.json");
    write_json(&path, &report)?;
    println!(
        "pq {:.4}  sq {:.4}  rq {:.4}  pq_thing {:.4}  pq_stuff {:.4}  -> {}",
        report.pq,
        report.sq,
        report.rq,
        report.pq_thing,
        report.pq_stuff,
        path.display()
    );
    Ok(())
}

fn infer(args: InferArgs) -> unipan::Result<()> {
    let post = post_config(args.config.as_deref())?;
    let model = checkpoint::load::<f64>(&args.checkpoint)?.model;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let scenes = read_dataset(&args.data)?.1;
    for (path, label) in &scenes {
        model.check_label(label)?;
        let pred = model.predict(label, &post)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
        write_json(&args.out.join(format!("{stem}.json")), &pred)?;
        if args.render {
            render(&pred, &label.image, &args.out.join(format!("{stem}.png")))?;
        }
    }
    println!(
        "wrote {} predictions to {}",
        scenes.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

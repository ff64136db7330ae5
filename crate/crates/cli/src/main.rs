use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use hiersgg::data::{
    generate_synthetic, load_external_logits, load_params, manifest::load_triplets, parse_vg_annotations, save_params,
    Dataset, DatasetManifest, Split, SyntheticSpec, HIERARCHY_FILE, TEST_FILE,
};
use hiersgg::eval::{export_dot, CandidateRecord, CandidateRegime, ScoreMode, Task};
use hiersgg::gradcheck::{run_suite, GRADCHECK_TOLERANCE};
use hiersgg::pipeline::{evaluate_external, evaluate_split, rank_with_model, EvalOptions};
use hiersgg::train::{save_curve_csv, train, TrainConfig};
use hiersgg::LabelSpace;

#[derive(Parser)]
#[command(name = "hiersgg", version, about = "Hierarchical relationship prediction for scene graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Convert Visual Genome style annotations into a manifest.
    ImportVg(ImportVgArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Compute R@k, mR@k and zero-shot recall.
    Eval(EvalArgs),
    /// Print the top candidates of one image.
    Rank(RankArgs),
    /// Check tape gradients of the training loss against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the top candidates and ground truth of one image as a DOT graph.
    ExportDot(ExportDotArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Generator settings (JSON); omitted fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImportVgArgs {
    #[arg(long)]
    objects: PathBuf,
    #[arg(long)]
    relationships: PathBuf,
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Overrides the dataset's hierarchy.json.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    /// Training settings (JSON); omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path; the curve and resolved config land next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoringArgs {
    /// connectivity-joint, joint or connectivity-super.
    #[arg(long, default_value = "connectivity-joint")]
    score_mode: String,
    /// Keep only the best candidate per node pair.
    #[arg(long)]
    single_per_pair: bool,
}

impl ScoringArgs {
    fn score_mode(&self) -> Result<ScoreMode> {
        Ok(match self.score_mode.as_str() {
            "connectivity-joint" => ScoreMode::ConnectivityJoint,
            "joint" => ScoreMode::Joint,
            "connectivity-super" => ScoreMode::ConnectivitySuper,
            other => bail!("unknown score mode {other:?}"),
        })
    }

    fn regime(&self) -> CandidateRegime {
        if self.single_per_pair {
            CandidateRegime::SinglePerPair
        } else {
            CandidateRegime::PerSuper
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    #[arg(long, conflicts_with = "logits", required_unless_present = "logits")]
    ckpt: Option<PathBuf>,
    /// Per-edge predictions (JSON lines) evaluated without a checkpoint.
    #[arg(long)]
    logits: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "predcls,sgcls,sgdet")]
    tasks: Vec<Task>,
    #[arg(long = "k", value_delimiter = ',', default_value = "20,50,100")]
    ks: Vec<usize>,
    /// Training triplets; enables zero-shot recall.
    #[arg(long)]
    zero_shot: Option<PathBuf>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    scoring: ScoringArgs,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    #[arg(long)]
    image: String,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[arg(long, default_value = "predcls")]
    task: Task,
    /// Emit JSON lines instead of a table.
    #[arg(long)]
    jsonl: bool,
    #[command(flatten)]
    scoring: ScoringArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seeds checked, starting at `seed`.
    #[arg(long, default_value_t = 1)]
    count: u64,
}

#[derive(Args)]
struct ExportDotArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    #[arg(long)]
    image: String,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 5)]
    top: usize,
    #[arg(long, default_value = "predcls")]
    task: Task,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    scoring: ScoringArgs,
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `path` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut spec: SyntheticSpec = read_json(args.spec.as_deref())?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let out = generate_synthetic(&spec)?;
    out.dataset.write_dir(&args.out)?;
    write_json(&args.out.join("synth_spec.json"), &spec)?;
    info!(
        "wrote {} train and {} test images to {}",
        spec.train_images,
        spec.test_images,
        args.out.display()
    );
    Ok(())
}

fn import_vg(args: ImportVgArgs) -> Result<()> {
    let space = LabelSpace::load(&args.hierarchy)?;
    let split: Split = serde_json::from_value(serde_json::Value::String(args.split.clone()))
        .with_context(|| format!("unknown split {:?}", args.split))?;
    let manifest = parse_vg_annotations(&args.objects, &args.relationships, &space, split)?;
    let d = &manifest.dropped;
    info!(
        "{} images, {} relationships; dropped {} (unknown object {}, unknown predicate {}, degenerate box {})",
        manifest.images.len(),
        manifest.edge_count(),
        d.total(),
        d.unknown_object,
        d.unknown_predicate,
        d.degenerate_box
    );
    manifest.save(&args.out)?;
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut config: TrainConfig = read_json(args.config.as_deref())?;
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    let dataset = Dataset::load_dir(&args.data, args.hierarchy.as_deref())?;
    info!("training {:?} head for {} epochs", config.head, config.epochs);
    let outcome = train(&dataset, &config)?;
    let meta = serde_json::json!({ "train_config": config });
    save_params(&outcome.model, &dataset.space, &args.out, meta)?;
    save_curve_csv(&outcome.history, &sibling(&args.out, ".curve.csv"))?;
    write_json(&sibling(&args.out, ".config.json"), &config)?;
    info!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let opts = EvalOptions {
        tasks: args.tasks.clone(),
        ks: args.ks.clone(),
        score_mode: args.scoring.score_mode()?,
        regime: args.scoring.regime(),
        workers: args.workers,
    };
    opts.validate()?;
    let reports = if let Some(logits) = &args.logits {
        // external predictions need no grids, so only the test manifest is read
        let hpath = args.hierarchy.clone().unwrap_or_else(|| args.data.join(HIERARCHY_FILE));
        let space = LabelSpace::load(&hpath)?;
        let manifest = DatasetManifest::load(&args.data.join(TEST_FILE))?;
        let zs = args.zero_shot.as_deref().map(|p| load_triplets(p, &space)).transpose()?;
        let edges = load_external_logits(logits, &space)?;
        info!("{} external edges", edges.len());
        evaluate_external(&edges, &manifest, &space, &opts, zs.as_ref())?
    } else {
        let dataset = Dataset::load_dir(&args.data, args.hierarchy.as_deref())?;
        let ckpt = args.ckpt.as_deref().expect("clap requires --ckpt without --logits");
        let (model, _) = load_params(ckpt, &dataset.space)?;
        let zs = args.zero_shot.as_deref().map(|p| load_triplets(p, &dataset.space)).transpose()?;
        evaluate_split(&model, &dataset, dataset.split(Split::Test)?, &opts, zs.as_ref())?
    };
    for r in &reports {
        for m in &r.metrics {
            info!("{} R@{} = {:?}, mR@{} = {:?}", r.task, m.k, m.recall, m.k, m.mean_recall);
        }
    }
    let doc = serde_json::json!({ "options": opts, "reports": reports });
    match &args.report {
        Some(p) => write_json(p, &doc),
        None => {
            println!("{}", serde_json::to_string_pretty(&doc)?);
            Ok(())
        }
    }
}

fn find_image<'a>(dataset: &'a Dataset, id: &str) -> Result<&'a hiersgg::data::ImageRecord> {
    for m in dataset.train.iter().chain(dataset.test.iter()) {
        if let Ok(img) = m.image(id) {
            return Ok(img);
        }
    }
    bail!("image {id:?} is in neither split")
}

fn rank(args: RankArgs) -> Result<()> {
    let dataset = Dataset::load_dir(&args.data, args.hierarchy.as_deref())?;
    let (model, _) = load_params(&args.ckpt, &dataset.space)?;
    let img = find_image(&dataset, &args.image)?;
    let opts = EvalOptions {
        score_mode: args.scoring.score_mode()?,
        regime: args.scoring.regime(),
        ..EvalOptions::default()
    };
    let result = rank_with_model(&model, img, &dataset, args.task, args.top, &opts)?;
    let space = &dataset.space;
    let mut out = std::io::stdout().lock();
    if !args.jsonl {
        writeln!(out, "{:>4}  {:>10}  {:<24} {:<20} {:<24}", "rank", "score", "subject", "predicate", "object")?;
    }
    for (i, c) in result.ranked.iter().enumerate() {
        let rec = CandidateRecord::new(&img.id, i + 1, c, space);
        if args.jsonl {
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        } else {
            let subject = format!("{}#{}", rec.subject_label, rec.subject);
            let object = format!("{}#{}", rec.object_label, rec.object);
            writeln!(out, "{:>4}  {:>10.6}  {subject:<24} {:<20} {object:<24}", rec.rank, rec.score, rec.predicate)?;
        }
    }
    Ok(())
}

/// Returns whether every case passed.
fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let cases = run_suite(args.seed..args.seed + args.count.max(1))?;
    let worst = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    for c in &cases {
        info!("seed {} {:?}/{:?}: {:.3e} over {} entries", c.seed, c.head, c.mode, c.max_rel_err, c.entries_checked);
    }
    let pass = worst <= GRADCHECK_TOLERANCE;
    let rel = if pass { "<=" } else { ">" };
    println!("max_rel_err {worst:.3e} {rel} {GRADCHECK_TOLERANCE:e}");
    Ok(pass)
}

fn export(args: ExportDotArgs) -> Result<()> {
    let dataset = Dataset::load_dir(&args.data, args.hierarchy.as_deref())?;
    let (model, _) = load_params(&args.ckpt, &dataset.space)?;
    let img = find_image(&dataset, &args.image)?;
    let opts = EvalOptions {
        score_mode: args.scoring.score_mode()?,
        regime: args.scoring.regime(),
        ..EvalOptions::default()
    };
    let result = rank_with_model(&model, img, &dataset, args.task, args.top, &opts)?;
    let dot = export_dot(&result.ranked, &result.gt, args.top, args.task, &dataset.space)?;
    std::fs::write(&args.out, dot).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::ImportVg(a) => import_vg(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Rank(a) => rank(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ExportDot(a) => export(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

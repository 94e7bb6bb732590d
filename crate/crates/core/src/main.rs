use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pairs::aggregate::{
    self, average_predict, beam_search_subsets, gate_predict_all, gate_train, mlp_predict,
    mlp_train, rank_patches, FeatureMatrix, GateNormalization, GateTrainParams, MlpHyperParams,
    Model, ModelMeta, Subset,
};
use pairs::dataset::load_cub;
use pairs::evaluation::{
    difficulty_histogram, histogram_csv, patch_accuracy, pck_report, PckTruth, DEFAULT_PCK_C,
};
use pairs::extract::{extract_all, ExtractOptions, VisibilityPolicy};
use pairs::geometry::{PatchSize, WarpOptions};
use pairs::posetensor::{decode, DecodeOptions, PoseTensor};
use pairs::schema::{enumerate_raw_pairs, merge_symmetric, KeypointSchema};
use pairs::{keypoints_json, ScoreTensor, Split};

#[derive(Parser)]
#[command(
    name = "pairs",
    version,
    about = "Pose-aligned patch tooling for part-based fine-grained recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Schema utilities.
    Schema {
        #[command(subcommand)]
        command: SchemaCommand,
    },
    /// Keypoint-pair patch classes.
    Pairs {
        #[command(subcommand)]
        command: PairsCommand,
    },
    /// Warp every keypoint-pair patch of a CUB-style dataset to PNG files.
    Extract(ExtractArgs),
    /// Decode pose tensors to keypoint JSON.
    Decode(DecodeArgs),
    /// PCK of predicted keypoints against dataset annotations.
    Pck(PckArgs),
    /// Combine per-patch scores into image predictions.
    Aggregate(AggregateArgs),
    /// Histogram of correctly classified patches per image.
    Difficulty(DifficultyArgs),
    /// Accuracy of each patch on its own.
    PatchAccuracy(DifficultyArgs),
}

#[derive(Subcommand)]
enum SchemaCommand {
    /// Validate a schema file and print a summary.
    Check { file: PathBuf },
}

#[derive(Subcommand)]
enum PairsCommand {
    /// List raw (or merged hybrid) patch classes.
    Enumerate {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        merge_symmetric: bool,
    },
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    root: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "512x256")]
    size: String,
    #[arg(long, default_value = "all")]
    policy: String,
    #[arg(long)]
    merge_symmetric: bool,
    /// Use these keypoints instead of the annotated ones.
    #[arg(long)]
    keypoints: Option<PathBuf>,
    /// Value for patch pixels that fall outside the image.
    #[arg(long, default_value_t = 0.5)]
    fill: f32,
}

#[derive(Args)]
struct DecodeArgs {
    /// Pose tensor files; the file stem is the image id.
    #[arg(long, required = true, num_args = 1..)]
    tensor: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Mark keypoints whose peak is below this as invisible.
    #[arg(long)]
    threshold: Option<f32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Tsv,
}

#[derive(Args)]
struct PckArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PCK_C)]
    c: f64,
    #[arg(long, value_enum, default_value = "table")]
    format: ReportFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Avg,
    Beam,
    Gate,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Softmax,
    Sigmoid,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(value_enum)]
    strategy: Strategy,
    #[arg(long)]
    scores: PathBuf,
    /// avg: number of top-ranked patches; gate: number of non-zero weights.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 10)]
    beam_width: usize,
    /// Largest subset size reported by beam search (default: all patches).
    #[arg(long)]
    max_k: Option<usize>,
    /// Split that beam search optimises; `test` is diagnostic only.
    #[arg(long, value_enum, default_value = "train")]
    objective: SplitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    validation_fraction: f64,
    #[arg(long, value_enum, default_value = "softmax")]
    normalization: NormArg,
    /// Per-image gate features as CSV rows (default: the patch scores).
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
struct DifficultyArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<pairs::Error>() {
            return if e.is_constraint_violation() { 3 } else { 2 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Schema {
            command: SchemaCommand::Check { file },
        } => schema_check(&file, &mut out),
        Command::Pairs {
            command:
                PairsCommand::Enumerate {
                    schema,
                    merge_symmetric,
                },
        } => pairs_enumerate(&schema, merge_symmetric, &mut out),
        Command::Extract(args) => extract(args, &mut out),
        Command::Decode(args) => decode_tensors(args, &mut out),
        Command::Pck(args) => pck(args, &mut out),
        Command::Aggregate(args) => aggregate_scores(args, &mut out),
        Command::Difficulty(args) => {
            let scores = load_scores(&args.scores, args.split)?;
            write!(out, "{}", histogram_csv(&difficulty_histogram(&scores)))?;
            Ok(())
        }
        Command::PatchAccuracy(args) => {
            let scores = load_scores(&args.scores, args.split)?;
            writeln!(out, "patch,accuracy")?;
            for (p, acc) in patch_accuracy(&scores).iter().enumerate() {
                writeln!(out, "{p},{acc:.6}")?;
            }
            Ok(())
        }
    }
}

fn schema_check(file: &Path, out: &mut impl Write) -> Result<()> {
    let schema =
        KeypointSchema::load(file).with_context(|| format!("reading schema {}", file.display()))?;
    let raw = enumerate_raw_pairs(&schema);
    let merged = merge_symmetric(&schema, &raw);
    writeln!(out, "keypoints\t{}", schema.len())?;
    writeln!(out, "symmetric_pairs\t{}", schema.symmetric_pairs().len())?;
    for &(a, b) in schema.symmetric_pairs() {
        writeln!(out, "sym\t{}\t{}", schema.name(a), schema.name(b))?;
    }
    writeln!(out, "semantic_parts\t{}", schema.semantics().len())?;
    writeln!(out, "raw_classes\t{}", raw.len())?;
    writeln!(out, "hybrid_classes\t{}", merged.len())?;
    Ok(())
}

fn pairs_enumerate(schema: &Path, merge: bool, out: &mut impl Write) -> Result<()> {
    let schema = KeypointSchema::load(schema)
        .with_context(|| format!("reading schema {}", schema.display()))?;
    let mut classes = enumerate_raw_pairs(&schema);
    if merge {
        classes = merge_symmetric(&schema, &classes);
    }
    writeln!(out, "class\tlabel\tmembers")?;
    for (idx, class) in classes.iter().enumerate() {
        let members: Vec<String> = class
            .member_pairs
            .iter()
            .map(|&(i, j)| format!("{}__{}", schema.name(i), schema.name(j)))
            .collect();
        writeln!(
            out,
            "{idx}\t{}\t{}",
            class.label(&schema),
            members.join(",")
        )?;
    }
    Ok(())
}

fn extract(args: ExtractArgs, out: &mut impl Write) -> Result<()> {
    let size: PatchSize = args.size.parse()?;
    let policy: VisibilityPolicy = args.policy.parse()?;
    let schema = KeypointSchema::load(&args.schema)?;
    let index = load_cub(&args.root)?;
    let keypoints = args
        .keypoints
        .as_ref()
        .map(|p| keypoints_json::load(p).map(|f| keypoints_json::locations(&f)))
        .transpose()?;
    let opts = ExtractOptions {
        size,
        policy,
        merge_symmetric: args.merge_symmetric,
        warp: WarpOptions { fill: args.fill },
        image_dir: args.root.join("images"),
    };
    let manifest = extract_all(&index, &schema, keypoints.as_ref(), &args.out, &opts)?;
    writeln!(out, "images\t{}", manifest.images.len())?;
    writeln!(out, "written\t{}", manifest.written)?;
    writeln!(out, "skipped_degenerate\t{}", manifest.skipped_degenerate)?;
    writeln!(out, "skipped_invisible\t{}", manifest.skipped_invisible)?;
    writeln!(out, "skipped_failed\t{}", manifest.skipped_failed)?;
    writeln!(out, "errors\t{}", manifest.errors)?;
    Ok(())
}

fn decode_tensors(args: DecodeArgs, out: &mut impl Write) -> Result<()> {
    let opts = DecodeOptions {
        visibility_threshold: args.threshold,
    };
    let mut poses = Vec::with_capacity(args.tensor.len());
    for path in &args.tensor {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("cannot derive an image id from {}", path.display()))?
            .to_string();
        let tensor =
            PoseTensor::load(path).with_context(|| format!("reading {}", path.display()))?;
        poses.push((id, decode(&tensor, opts)?));
    }
    let file = keypoints_json::from_decoded(poses.iter().map(|(id, p)| (id.clone(), p)));
    std::fs::write(&args.out, keypoints_json::to_string(&file)?)?;
    writeln!(out, "decoded\t{}", poses.len())?;
    Ok(())
}

fn pck(args: PckArgs, out: &mut impl Write) -> Result<()> {
    let preds = keypoints_json::locations(&keypoints_json::load(&args.pred)?);
    let index = load_cub(&args.gt)?;
    let mut truth = BTreeMap::new();
    for id in preds.keys() {
        let i = index.position(id).ok_or_else(|| {
            pairs::Error::MismatchedIds(format!("prediction for unknown image {id}"))
        })?;
        let rec = &index.records[i];
        truth.insert(
            id.clone(),
            PckTruth {
                pose: index.poses[i].clone(),
                box_w: rec.bbox.w,
                box_h: rec.bbox.h,
            },
        );
    }
    let report = pck_report(&index.part_names, &preds, &truth, args.c)?;
    match args.format {
        ReportFormat::Tsv => write!(out, "{}", report.to_tsv())?,
        ReportFormat::Table => {
            write!(out, "{}", report.table().render("PCK"))?;
            let macro_avg = report
                .overall_macro()
                .map_or("N/A".into(), |v| format!("{v:.1}"));
            writeln!(
                out,
                "Overall (macro average of keypoint columns): {macro_avg}"
            )?;
        }
    }
    Ok(())
}

fn load_scores(path: &Path, split: SplitArg) -> Result<ScoreTensor> {
    let scores =
        ScoreTensor::load(path).with_context(|| format!("reading scores {}", path.display()))?;
    Ok(match split {
        SplitArg::All => scores,
        SplitArg::Train => scores.select(&scores.images_in(Split::Train)),
        SplitArg::Test => scores.select(&scores.images_in(Split::Test)),
    })
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.6}"))
}

fn split_accuracies(predicted: &[usize], scores: &ScoreTensor) -> (Option<f64>, Option<f64>) {
    let acc = |split: Split| {
        let images = scores.images_in(split);
        (!images.is_empty()).then(|| {
            let hits = images
                .iter()
                .filter(|&&i| predicted[i] == scores.label(i))
                .count();
            hits as f64 / images.len() as f64
        })
    };
    (acc(Split::Train), acc(Split::Test))
}

fn read_features(path: &Path, n_images: usize) -> Result<FeatureMatrix> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading features {}", path.display()))?;
    let mut rows = Vec::new();
    for (line_no, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| {
                pairs::Error::Format(format!(
                    "{}:{}: bad feature value",
                    path.display(),
                    line_no + 1
                ))
            })?;
        rows.push(row);
    }
    let n_features = rows.first().map_or(0, Vec::len);
    if rows.len() != n_images || rows.iter().any(|r| r.len() != n_features) {
        bail!(pairs::Error::DimensionMismatch {
            what: "feature rows",
            expected: n_images,
            found: rows.len(),
        });
    }
    Ok(FeatureMatrix { n_features, rows })
}

fn aggregate_scores(args: AggregateArgs, out: &mut impl Write) -> Result<()> {
    let scores = load_scores(&args.scores, SplitArg::All)?;
    let train = scores.images_in(Split::Train);
    match args.strategy {
        Strategy::Avg => {
            let subset = match args.k {
                Some(k) => {
                    if train.is_empty() {
                        return Err(pairs::Error::DegenerateSplit(
                            "ranking patches needs train images".into(),
                        )
                        .into());
                    }
                    let ranked = rank_patches(&scores, &train);
                    if k == 0 || k > ranked.len() {
                        return Err(pairs::Error::InvalidParameter(format!(
                            "k={k} outside 1..={}",
                            ranked.len()
                        ))
                        .into());
                    }
                    Subset::new(ranked[..k].to_vec(), scores.n_patches())?
                }
                None => Subset::all(scores.n_patches())?,
            };
            let preds = average_predict(&scores, &subset)?;
            let (tr, te) = split_accuracies(&preds.predicted, &scores);
            writeln!(out, "strategy\tavg")?;
            writeln!(out, "patches\t{subset}")?;
            writeln!(out, "train_accuracy\t{}", fmt_acc(tr))?;
            writeln!(out, "test_accuracy\t{}", fmt_acc(te))?;
        }
        Strategy::Beam => {
            let objective = match args.objective {
                SplitArg::Test => Split::Test,
                _ => Split::Train,
            };
            let max_k = args.max_k.unwrap_or(scores.n_patches());
            let steps = beam_search_subsets(&scores, args.beam_width, max_k, objective)?;
            if objective == Split::Test {
                writeln!(out, "# diagnostic: subsets chosen on the test split")?;
            }
            writeln!(
                out,
                "k\tsubset\tobjective_accuracy\ttrain_accuracy\ttest_accuracy"
            )?;
            for (k, step) in steps.iter().enumerate() {
                writeln!(
                    out,
                    "{}\t{}\t{:.6}\t{}\t{}",
                    k + 1,
                    step.subset,
                    step.objective_accuracy,
                    fmt_acc(step.train_accuracy),
                    fmt_acc(step.test_accuracy)
                )?;
            }
        }
        Strategy::Gate => {
            let features = match &args.features {
                Some(p) => read_features(p, scores.n_images())?,
                None => FeatureMatrix::from_scores(&scores),
            };
            let mut params = GateTrainParams::with_k(args.k.unwrap_or(scores.n_patches()));
            params.seed = args.seed;
            params.normalization = match args.normalization {
                NormArg::Softmax => GateNormalization::Softmax,
                NormArg::Sigmoid => GateNormalization::Sigmoid,
            };
            if let Some(e) = args.epochs {
                params.epochs = e;
            }
            if let Some(lr) = args.lr {
                params.learning_rate = lr;
            }
            if let Some(b) = args.batch_size {
                params.batch_size = b;
            }
            let model = gate_train(&scores, &features, &params)?;
            let preds = gate_predict_all(&model, &features, &scores)?;
            let (tr, te) = split_accuracies(&preds.predicted, &scores);
            writeln!(out, "strategy\tgate")?;
            writeln!(out, "k\t{}", model.k)?;
            writeln!(out, "train_accuracy\t{}", fmt_acc(tr))?;
            writeln!(out, "test_accuracy\t{}", fmt_acc(te))?;
            if let Some(path) = &args.model_out {
                let meta = ModelMeta {
                    hyperparams: serde_json::to_value(params)?,
                    seed: Some(args.seed),
                };
                aggregate::save_model(&Model::Gate(model), &meta, path)?;
            }
        }
        Strategy::Mlp => {
            let mut hp = MlpHyperParams {
                seed: args.seed,
                validation_fraction: args.validation_fraction,
                ..MlpHyperParams::default()
            };
            if let Some(e) = args.epochs {
                hp.epochs = e;
            }
            if let Some(h) = args.hidden {
                hp.hidden = h;
            }
            if let Some(lr) = args.lr {
                hp.learning_rate = lr;
            }
            if let Some(b) = args.batch_size {
                hp.batch_size = b;
            }
            let trained = mlp_train(&scores, &hp)?;
            let preds = mlp_predict(&trained.model, &scores)?;
            let (tr, te) = split_accuracies(&preds.predicted, &scores);
            writeln!(out, "strategy\tmlp")?;
            writeln!(out, "selected_epoch\t{}", trained.selected_epoch)?;
            if let Some(last) = trained.history.last() {
                writeln!(out, "final_train_loss\t{:.6}", last.train_loss)?;
            }
            writeln!(out, "train_accuracy\t{}", fmt_acc(tr))?;
            writeln!(out, "test_accuracy\t{}", fmt_acc(te))?;
            if let Some(path) = &args.model_out {
                let meta = ModelMeta {
                    hyperparams: serde_json::to_value(hp)?,
                    seed: Some(args.seed),
                };
                aggregate::save_model(&Model::Mlp(trained.model), &meta, path)?;
            }
        }
    }
    Ok(())
}

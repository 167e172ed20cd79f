use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use levk::augment::{augment_dataset, build_instance_bank, AugmentConfig, ClassRequest};
use levk::detect::{
    records_from_scores, uniform_edges, write_confusion_csv, write_metrics_csv, Report, ReportOptions, TaskKind,
};
use levk::io::{read_prediction_csv, read_prediction_set, Manifest, PredictionSet};
use levk::seg_metrics::{class_metrics, confusion_from_predictions, ConfusionMatrix, NllAccumulator};
use levk::taxonomy::table_weights;
use levk::trust::{fit_mahalanobis, MahalanobisModel, Scorer, TrustMethod, DEFAULT_TEMPERATURE};
use levk::ClassTable;

#[derive(Parser)]
#[command(name = "levk", version, about = "LiDAR OOD augmentation and imbalance-aware segmentation evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print effective-number class weights from a table's training counts.
    Weights(WeightsArgs),
    /// Transplant auxiliary-dataset instances into target frames.
    Augment(AugmentArgs),
    /// Fit class means and a tied covariance on training features.
    FitMahalanobis(FitArgs),
    /// Append per-point trust scores to a CSV table.
    Score(ScoreArgs),
    /// Confusion counts and ratios as CSV.
    Confusion(SegArgs),
    /// Per-class segmentation metrics as CSV.
    Metrics(SegArgs),
    /// Detection report: AUROC, counts, weighted precision, TSD and ROC files.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct TableArg {
    /// Built-in table (semantickitti, augkitti, semanticposs) or a TOML path.
    #[arg(long, default_value = "semantickitti")]
    table: String,
}

impl TableArg {
    fn load(&self) -> Result<ClassTable> {
        load_table(&self.table)
    }
}

#[derive(Args)]
struct WeightsArgs {
    #[command(flatten)]
    table: TableArg,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    source_manifest: PathBuf,
    #[arg(long)]
    aux_manifest: PathBuf,
    /// Taxonomy of the target frames.
    #[arg(long, default_value = "augkitti")]
    table: String,
    /// Taxonomy of the auxiliary frames.
    #[arg(long, default_value = "semanticposs")]
    aux_table: String,
    #[arg(long, value_delimiter = ',', default_value = "people,rider")]
    classes: Vec<String>,
    /// Instances of each class per frame.
    #[arg(long, default_value_t = 1)]
    per_frame: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the config's billboard cell size in meters.
    #[arg(long)]
    cell_size: Option<f64>,
    /// TOML file with augmentation tunables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Manifest whose prediction files carry training features.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    table: TableArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "conf,du,mu,temp,md")]
    methods: Vec<TrustMethod>,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    /// Model file from `fit-mahalanobis`; required for md.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    table: TableArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    table: TableArg,
    #[arg(long)]
    method: TrustMethod,
    #[arg(long, value_delimiter = ',', default_value = "io,cw,cwood")]
    tasks: Vec<TaskKind>,
    /// Number of equal steps in the threshold sweep.
    #[arg(long, default_value_t = 10)]
    delta_grid: usize,
    /// Threshold of the single-point weighted precision.
    #[arg(long, default_value_t = 0.9)]
    delta: f64,
    /// Number of equal-width trust bins in the TSD files.
    #[arg(long, default_value_t = 10)]
    tsd_bins: usize,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn load_table(name: &str) -> Result<ClassTable> {
    Ok(match name {
        "semantickitti" => ClassTable::semantickitti(),
        "augkitti" => ClassTable::augkitti(),
        "semanticposs" => ClassTable::semanticposs(),
        path => ClassTable::load(path).with_context(|| format!("loading class table {path}"))?,
    })
}

fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let set = if path.extension().is_some_and(|e| e == "csv") { read_prediction_csv(path) } else { read_prediction_set(path) };
    set.with_context(|| format!("reading {}", path.display()))
}

/// `(frame_id, predictions)` for every manifest entry, loaded one at a time.
fn prediction_sets(manifest: &Path) -> Result<impl Iterator<Item = Result<(String, PredictionSet)>>> {
    let m = Manifest::load(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    Ok(m.entries.into_iter().map(|e| {
        let Some(p) = &e.predictions else { bail!("frame {} has no predictions file", e.frame_id) };
        Ok((e.frame_id.clone(), read_predictions(p)?))
    }))
}

fn check_classes(set: &PredictionSet, table: &ClassTable, frame: &str) -> Result<()> {
    if set.classes() != table.num_id_classes() {
        bail!("frame {frame}: {} output classes, table {} has {} ID classes", set.classes(), table.name(), table.num_id_classes());
    }
    Ok(())
}

fn load_model(path: Option<&PathBuf>, needed: bool) -> Result<Option<MahalanobisModel>> {
    match path {
        Some(p) => Ok(Some(MahalanobisModel::load(p).with_context(|| format!("loading {}", p.display()))?)),
        None if needed => bail!("md needs --model"),
        None => Ok(None),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn weights(args: WeightsArgs) -> Result<()> {
    let table = args.table.load()?;
    let w = table_weights(&table)?;
    let out = std::io::stdout();
    let mut out = out.lock();
    writeln!(out, "class_id,class,train_points,weight")?;
    for (c, def) in table.classes().take(w.len()) {
        writeln!(out, "{},{},{},{:.4}", c.0, def.name, def.train_points.unwrap_or(0), w[c.index()])?;
    }
    Ok(())
}

fn augment(args: AugmentArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => AugmentConfig::load(p)?,
        None => AugmentConfig::default(),
    };
    if let Some(cs) = args.cell_size {
        config.cell_size = cs;
    }
    config.validate()?;
    let (table, aux_table) = (load_table(&args.table)?, load_table(&args.aux_table)?);
    let aux = Manifest::load(&args.aux_manifest).with_context(|| format!("loading {}", args.aux_manifest.display()))?;
    let source = Manifest::load(&args.source_manifest).with_context(|| format!("loading {}", args.source_manifest.display()))?;
    let names: Vec<&str> = args.classes.iter().map(String::as_str).collect();
    let bank = build_instance_bank(&aux, &aux_table, &names, config.min_points)?;
    info!("instance bank: {} instances", bank.len());
    let requests: Vec<ClassRequest> = args.classes.iter().map(|c| ClassRequest::new(c.as_str(), args.per_frame)).collect();
    let summary = augment_dataset(&source, &bank, &requests, &table, &config, args.seed, &args.out_dir)?;
    println!(
        "{} frames, {} instances placed, {} frames with unplaced instances",
        summary.outcomes.len(),
        summary.placed(),
        summary.exhausted_frames()
    );
    Ok(())
}

fn fit(args: FitArgs) -> Result<()> {
    let table = args.table.load()?;
    let sets: Vec<PredictionSet> = prediction_sets(&args.manifest)?.map(|r| r.map(|(_, s)| s)).collect::<Result<_>>()?;
    let refs: Vec<&PredictionSet> = sets.iter().collect();
    let model = fit_mahalanobis(&refs, &table)?;
    model.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!("fitted {} classes in {} dimensions, tau {}", model.classes().len(), model.dim(), model.tau());
    Ok(())
}

fn score(args: ScoreArgs) -> Result<()> {
    if args.methods.is_empty() {
        bail!("no trust methods given");
    }
    let model = load_model(args.model.as_ref(), args.methods.contains(&TrustMethod::Md))?;
    let mut header = vec!["frame_id".to_string(), "point".into(), "gt".into(), "pd".into()];
    for m in &args.methods {
        header.push(format!("{m}_raw"));
        header.push(format!("{m}_g"));
    }
    let header = header.join(",");

    // appending to an existing table requires the same columns
    let existing = File::open(&args.out).ok().and_then(|f| BufReader::new(f).lines().next()).transpose()?;
    if let Some(first) = &existing {
        if first.trim_end() != header {
            bail!("{} has columns {first:?}, expected {header:?}", args.out.display());
        }
    }
    let file = OpenOptions::new().create(true).append(true).open(&args.out).with_context(|| format!("opening {}", args.out.display()))?;
    let mut out = BufWriter::new(file);
    if existing.is_none() {
        writeln!(out, "{header}")?;
    }
    let mut rows = 0usize;
    for item in prediction_sets(&args.manifest)? {
        let (frame, set) = item?;
        let columns = args
            .methods
            .iter()
            .map(|&m| {
                let mut s = Scorer::new(m).with_temperature(args.temperature);
                if let Some(model) = &model {
                    s = s.with_model(model);
                }
                s.score(&set).with_context(|| format!("frame {frame}: scoring {m}"))
            })
            .collect::<Result<Vec<_>>>()?;
        for i in 0..set.len() {
            let gt = set.gt(i).map_or(String::new(), |c| c.0.to_string());
            write!(out, "{frame},{i},{gt},{}", set.predicted(i).0)?;
            for col in &columns {
                write!(out, ",{},{}", col[i].raw, col[i].trust)?;
            }
            writeln!(out)?;
        }
        rows += set.len();
    }
    out.flush()?;
    println!("{rows} points scored into {}", args.out.display());
    Ok(())
}

/// Confusion matrix and per-class NLL over every prediction file.
fn accumulate(manifest: &Path, table: &ClassTable) -> Result<(ConfusionMatrix, NllAccumulator)> {
    let mut cm = ConfusionMatrix::for_table(table);
    let mut nll = NllAccumulator::new(table.num_id_classes());
    for item in prediction_sets(manifest)? {
        let (frame, set) = item?;
        check_classes(&set, table, &frame)?;
        cm.merge(&confusion_from_predictions(&set, table).with_context(|| format!("frame {frame}"))?)?;
        nll.add(&set);
    }
    Ok((cm, nll))
}

fn confusion(args: SegArgs) -> Result<()> {
    let table = args.table.load()?;
    let (cm, _) = accumulate(&args.manifest, &table)?;
    write_confusion_csv(&cm, &table, &args.out)?;
    println!("{} points", cm.total());
    Ok(())
}

fn metrics(args: SegArgs) -> Result<()> {
    let table = args.table.load()?;
    let (cm, nll) = accumulate(&args.manifest, &table)?;
    let mut extra = vec![("nll".to_string(), nll.per_class())];
    if let Ok(w) = table_weights(&table) {
        println!("weighted cross-entropy {}", fmt_opt(nll.weighted(&w)));
        extra.push(("weight".into(), w.into_iter().map(Some).collect()));
    }
    write_metrics_csv(&class_metrics(&cm), &cm, &table, &extra, &args.out)?;
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    if args.delta_grid == 0 || args.tsd_bins == 0 {
        bail!("--delta-grid and --tsd-bins must be positive");
    }
    let table = args.table.load()?;
    let model = load_model(args.model.as_ref(), args.method == TrustMethod::Md)?;
    let mut scorer = Scorer::new(args.method).with_temperature(args.temperature);
    if let Some(m) = &model {
        scorer = scorer.with_model(m);
    }
    let mut records = Vec::new();
    let mut nll = NllAccumulator::new(table.num_id_classes());
    for item in prediction_sets(&args.manifest)? {
        let (frame, set) = item?;
        check_classes(&set, &table, &frame)?;
        let scores = scorer.score(&set).with_context(|| format!("frame {frame}"))?;
        records.extend(records_from_scores(&set, &scores));
        nll.add(&set);
    }
    let options = ReportOptions {
        tasks: args.tasks,
        delta_grid: uniform_edges(args.delta_grid),
        delta: args.delta,
        tsd_edges: uniform_edges(args.tsd_bins),
    };
    let report = Report::build(&records, &table, options)?.with_method(args.method.name()).with_loss(nll.per_class());
    report.write_dir(&args.out, &table)?;
    println!("{} points evaluated, report in {}", records.len(), args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Weights(a) => weights(a),
        Command::Augment(a) => augment(a),
        Command::FitMahalanobis(a) => fit(a),
        Command::Score(a) => score(a),
        Command::Confusion(a) => confusion(a),
        Command::Metrics(a) => metrics(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

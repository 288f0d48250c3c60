//! `vqlab`: command-line front end for data generation, curation, training,
//! evaluation, ensembling and the ablation study.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::Value;

use vqlab_core::codec::{build_target, rationale, render_mask, LabelMode, Vocabulary};
use vqlab_core::curation::{curate_all, DatasetRecord, PromptTemplate};
use vqlab_core::eval::{ensemble, evaluate, EnsembleSpec, EvalReport, ScoreVector};
use vqlab_core::harness::{
    check_ordering, files_under, per_seed_csv, read_per_seed_csv, run_ablation, run_size_grid,
    DatasetSpec, Manifest, ReportTable, StudyConfig,
};
use vqlab_core::scorer::{save_checkpoint, CheckpointHeader, ScorerModel};
use vqlab_core::synth::{generate_dataset, read_jsonl, write_jsonl, RawRecord};
use vqlab_core::train::{self, TrainConfig};
use vqlab_core::Error;

#[derive(Parser)]
#[command(
    name = "vqlab",
    version,
    about = "Integer-label video quality scoring lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic raw dataset (train/val/test JSON Lines).
    Generate(GenerateArgs),
    /// Sample frames, render prompts and attach integer labels.
    Curate(CurateArgs),
    /// Train one scorer and write checkpoints, history and predictions.
    Train(TrainArgs),
    /// Score a prediction file against ground truth.
    Eval(EvalArgs),
    /// Run the label-mode ablation (and optionally the size grid).
    Ablate(AblateArgs),
    /// Combine member predictions with fixed weights.
    Ensemble(EnsembleArgs),
    /// Re-render summary tables from per-seed results.
    Report(ReportArgs),
    /// Show which target positions a label mode trains on.
    Mask(MaskArgs),
}

#[derive(Args)]
struct Overrides {
    /// Override a config field, e.g. `--set epochs=2` or
    /// `--set generator.feature_dim=16`. Values are parsed as JSON when
    /// possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset spec JSON (generator settings and split sizes).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data/raw")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct CurateArgs {
    /// Directory written by `generate`.
    #[arg(long, default_value = "data/raw")]
    raw: PathBuf,
    #[arg(long, default_value = "data/curated")]
    out: PathBuf,
    /// Frames sampled per item (1 or 2).
    #[arg(long, default_value_t = 2)]
    frames: usize,
    /// Prompt template file; the built-in template when absent.
    #[arg(long)]
    template: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON; field names as in the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `curate`.
    #[arg(long, default_value = "data/curated")]
    data: PathBuf,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    label_mode: Option<LabelMode>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// CSV with item_id,score.
    #[arg(long)]
    pred: PathBuf,
    /// CSV with item_id,score.
    #[arg(long)]
    truth: PathBuf,
    /// Name shown in the report.
    #[arg(long, default_value = "model")]
    name: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Study config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value = "study")]
    out: PathBuf,
    /// Also run the model-size by adapter-rank grid.
    #[arg(long)]
    grid: bool,
    /// Exit with status 2 when the directional ordering does not hold.
    #[arg(long)]
    require_ordering: bool,
    /// Minimum integer-masked over decimal margin for the ordering check.
    #[arg(long, default_value_t = 0.01)]
    min_margin: f64,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Ensemble spec JSON; five members with the default weights when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Prediction file for a member, `ID=PATH`; overrides the spec.
    #[arg(long = "member", value_name = "ID=PATH")]
    members: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ground truth CSV to evaluate the ensemble against.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Study output directory.
    #[arg(long, default_value = "study")]
    dir: PathBuf,
    /// Decimal places in the text tables.
    #[arg(long, default_value_t = 3)]
    places: usize,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    label: u8,
    #[arg(long, default_value = "integer_masked")]
    mode: LabelMode,
    /// Item id used to pick the filler rationale.
    #[arg(long, default_value = "item-000000")]
    item: String,
    #[arg(long, default_value_t = 48)]
    rationale_len: usize,
}

/// Problems with how the tool was invoked.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(usage(format!("bad override key {key:?}")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| usage(format!("override {key:?} does not address an object field")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Reads an optional JSON config, applies `--set` overrides and
/// deserializes the result.
fn load_config<T: DeserializeOwned>(
    path: Option<&Path>,
    overrides: &Overrides,
) -> anyhow::Result<T> {
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(Error::from)?
        }
        None => Value::Object(Default::default()),
    };
    for kv in &overrides.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("override {kv:?} is not KEY=VALUE")))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_path(&mut value, k, v)?;
    }
    Ok(serde_json::from_value(value).map_err(Error::from)?)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Records every file under `dir` (except the manifest) as an output.
fn finish_manifest(mut m: Manifest, dir: &Path) -> anyhow::Result<()> {
    for f in files_under(dir)? {
        if f.file_name().is_some_and(|n| n != "manifest.json") {
            m.add_output(dir, &f)?;
        }
    }
    m.write(&dir.join("manifest.json"))?;
    Ok(())
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let mut spec = load_config::<DatasetSpec>(a.config.as_deref(), &a.overrides)?;
    if let Some(s) = a.seed {
        spec.generator.seed = s;
    }
    let splits = generate_dataset(&spec.generator, spec.splits)?;
    create_dir(&a.out)?;
    for (name, rows) in SPLITS
        .iter()
        .zip([&splits.train, &splits.val, &splits.test])
    {
        write_jsonl(&a.out.join(format!("{name}.jsonl")), rows)?;
    }
    let mut m = Manifest::new(
        "generate",
        vec![spec.generator.seed],
        serde_json::to_value(&spec)?,
    );
    if let Some(p) = &a.config {
        m.add_input(p)?;
    }
    finish_manifest(m, &a.out)?;
    println!(
        "wrote {} / {} / {} items to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        a.out.display()
    );
    Ok(())
}

fn truth_csv(records: &[DatasetRecord], path: &Path) -> anyhow::Result<()> {
    train::truth_vector(records)?.write_csv(path)?;
    Ok(())
}

fn cmd_curate(a: CurateArgs) -> anyhow::Result<()> {
    let template = match &a.template {
        Some(p) => PromptTemplate::load(p)?,
        None => PromptTemplate::default(),
    };
    create_dir(&a.out)?;
    let mut m = Manifest::new(
        "curate",
        Vec::new(),
        serde_json::json!({ "frames": a.frames, "template": template.text() }),
    );
    for name in SPLITS {
        let input = a.raw.join(format!("{name}.jsonl"));
        let raw: Vec<RawRecord> = read_jsonl(&input)?;
        m.add_input(&input)?;
        let curated = curate_all(&raw, &template, a.frames)?;
        write_jsonl(&a.out.join(format!("{name}.jsonl")), &curated)?;
        if !curated.is_empty() {
            truth_csv(&curated, &a.out.join(format!("truth_{name}.csv")))?;
        }
        println!("{name}: {} records", curated.len());
    }
    finish_manifest(m, &a.out)
}

fn read_split(dir: &Path, name: &str) -> anyhow::Result<Vec<DatasetRecord>> {
    let p = dir.join(format!("{name}.jsonl"));
    if !p.exists() {
        return Ok(Vec::new());
    }
    Ok(read_jsonl(&p)?)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config::<TrainConfig>(a.config.as_deref(), &a.overrides)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.label_mode {
        cfg.label_mode = m;
    }
    cfg.validate()?;
    let train_set = read_split(&a.data, "train")?;
    let val = read_split(&a.data, "val")?;
    let test = read_split(&a.data, "test")?;
    let dim = train_set
        .first()
        .and_then(|r| r.sampled_features.first())
        .map(Vec::len)
        .ok_or_else(|| Error::invalid(format!("no training records in {}", a.data.display())))?;
    create_dir(&a.out)?;
    let model = ScorerModel::new(cfg.model_config(dim), cfg.seed)?;
    let out = train::train(model, &train_set, &val, &cfg, Some(&a.out))?;
    let header = CheckpointHeader::for_model(
        &out.best_model,
        cfg.seed,
        Some(out.best_epoch),
        serde_json::to_value(&cfg)?,
    );
    save_checkpoint(&a.out.join("best.ckpt"), &out.best_model, &header)?;
    for (name, records) in [("val", &val), ("test", &test)] {
        if !records.is_empty() {
            train::predict(&out.best_model, records, cfg.label_mode)?
                .write_csv(&a.out.join(format!("preds_{name}.csv")))?;
        }
    }
    let mut m = Manifest::new("train", vec![cfg.seed], serde_json::to_value(&cfg)?);
    for name in SPLITS {
        let p = a.data.join(format!("{name}.jsonl"));
        if p.exists() {
            m.add_input(&p)?;
        }
    }
    finish_manifest(m, &a.out)?;
    for r in &out.history {
        println!(
            "epoch {}: train_loss {:.4}  val_final {}",
            r.epoch,
            r.train_loss,
            r.val_final
                .map(|f| format!("{f:.4}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    println!("best epoch {}", out.best_epoch);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let pred = ScoreVector::read_csv(&a.pred)?;
    let truth = ScoreVector::read_csv(&a.truth)?;
    let report = EvalReport {
        rows: vec![evaluate(&a.name, &pred, &truth)?],
    };
    if a.json {
        println!("{}", report.to_json()?);
    } else {
        let r = &report.rows[0];
        println!("srcc  {:.6}", r.srcc);
        println!("plcc  {:.6}", r.plcc);
        println!("final {:.6}", r.final_score);
    }
    Ok(())
}

fn print_table(t: &ReportTable) {
    print!("{}", t.to_text(3));
}

fn cmd_ablate(a: AblateArgs) -> anyhow::Result<()> {
    let mut study = load_config::<StudyConfig>(a.config.as_deref(), &a.overrides)?;
    if let Some(s) = a.seeds {
        study.seeds = s;
    }
    create_dir(&a.out)?;
    let ablation = run_ablation(&study, &a.out)?;
    print_table(&ablation.table);
    let check = check_ordering(&ablation.table, a.min_margin);
    let verdict = if check.holds {
        "holds"
    } else {
        "does not hold"
    };
    match check.margin {
        Some(m) => println!("ordering {verdict} (masked - decimal margin {m:.4})"),
        None => println!("ordering {verdict} (an arm is missing or failed)"),
    }
    if a.grid {
        let grid_dir = a.out.join("grid");
        create_dir(&grid_dir)?;
        let grid = run_size_grid(&study, &grid_dir)?;
        print_table(&grid.table);
    }
    if a.require_ordering && !check.holds {
        return Err(anyhow!("directional ordering does not hold"));
    }
    Ok(())
}

fn cmd_ensemble(a: EnsembleArgs) -> anyhow::Result<()> {
    let mut spec = match &a.spec {
        Some(p) => EnsembleSpec::load(p)?,
        None => EnsembleSpec::default(),
    };
    for kv in &a.members {
        let (id, path) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("member {kv:?} is not ID=PATH")))?;
        let m = spec
            .members
            .iter_mut()
            .find(|m| m.id == id)
            .ok_or_else(|| usage(format!("no member named {id:?} in the spec")))?;
        m.predictions = Some(path.to_string());
    }
    let weights: Vec<String> = spec
        .members
        .iter()
        .map(|m| format!("{}={}", m.id, m.weight))
        .collect();
    println!("weights: {}", weights.join(" "));
    let paths: Vec<Option<&String>> = spec
        .members
        .iter()
        .map(|m| m.predictions.as_ref())
        .collect();
    if paths.iter().all(Option::is_none) {
        return Ok(());
    }
    let base = a
        .spec
        .as_deref()
        .and_then(Path::parent)
        .unwrap_or(Path::new(""));
    let preds = spec
        .members
        .iter()
        .map(|m| {
            let p = m
                .predictions
                .as_ref()
                .ok_or_else(|| usage(format!("member {} has no prediction file", m.id)))?;
            let p = if Path::new(p).is_absolute()
                || a.members
                    .iter()
                    .any(|kv| kv.starts_with(&format!("{}=", m.id)))
            {
                PathBuf::from(p)
            } else {
                base.join(p)
            };
            Ok(ScoreVector::read_csv(&p)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let combined = ensemble(&preds, &spec)?;
    if let Some(out) = &a.out {
        combined.write_csv(out)?;
        println!(
            "wrote {} ensemble scores to {}",
            combined.len(),
            out.display()
        );
    }
    if let Some(t) = &a.truth {
        let row = evaluate("ensemble", &combined, &ScoreVector::read_csv(t)?)?;
        println!(
            "srcc {:.6} plcc {:.6} final {:.6}",
            row.srcc, row.plcc, row.final_score
        );
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    let mut found = false;
    for (file, title) in [
        (
            "ablation_per_seed.csv",
            "Label-mode ablation (test split, mean over seeds)",
        ),
        (
            "grid/size_grid_per_seed.csv",
            "Model size by adapter rank (test split, mean over seeds)",
        ),
    ] {
        let p = a.dir.join(file);
        if !p.exists() {
            continue;
        }
        found = true;
        let results = read_per_seed_csv(&p)?;
        let table = ReportTable::from_results(title, &results);
        print!("{}", table.to_text(a.places));
        if file.starts_with("ablation") {
            print!("{}", per_seed_csv(&results));
        }
    }
    if !found {
        return Err(Error::invalid(format!("no study results under {}", a.dir.display())).into());
    }
    Ok(())
}

fn cmd_mask(a: MaskArgs) -> anyhow::Result<()> {
    if a.mode == LabelMode::GradeHead {
        return Err(usage(
            "grade_head trains a regression head, not token targets",
        ));
    }
    let seq = build_target(a.label, a.mode, &rationale(&a.item, a.rationale_len))?;
    print!("{}", render_mask(&Vocabulary::default(), &seq));
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Curate(a) => cmd_curate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Report(a) => cmd_report(a),
        Command::Mask(a) => cmd_mask(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {:#}", e);
            ExitCode::from(code)
        }
    }
}

//! Study orchestration: the label-mode ablation, the size by adapter-rank
//! grid, report tables and run manifests.
//!
//! Output layout under the study directory:
//!
//! ```text
//! runs/<arm>/<seed>/checkpoints/epoch-N.ckpt
//! runs/<arm>/<seed>/history.csv
//! runs/<arm>/<seed>/preds.csv        test-split predictions, MOS scale
//! <table>.csv, <table>_per_seed.csv, <table>.txt, manifest.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::LabelMode;
use crate::curation::{curate_all, DatasetRecord, PromptTemplate};
use crate::error::{Error, Result};
use crate::eval::{display_round, evaluate, final_score};
use crate::scorer::ScorerModel;
use crate::synth::{generate_dataset, GeneratorConfig, SplitSizes};
use crate::train::{self, TrainConfig};

pub const NOT_FINETUNED: &str = "not_finetuned";
/// Ablation arms in report order.
pub const ABLATION_ARMS: [&str; 4] = [
    NOT_FINETUNED,
    "decimal_full",
    "integer_full",
    "integer_masked",
];
pub const GRADE_HEAD_ARM: &str = "grade_head";
/// Arms run by default: the label-mode ablation plus the grade head, reported
/// on the same splits.
pub const DEFAULT_ARMS: [&str; 5] = [
    NOT_FINETUNED,
    "decimal_full",
    "integer_full",
    "integer_masked",
    GRADE_HEAD_ARM,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub generator: GeneratorConfig,
    pub splits: SplitSizes,
    /// Frames sampled per item (1 or 2).
    pub frames_per_item: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            splits: SplitSizes::default(),
            frames_per_item: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

impl DatasetSpec {
    pub fn build(&self, template: &PromptTemplate) -> Result<Splits> {
        let raw = generate_dataset(&self.generator, self.splits)?;
        let k = self.frames_per_item;
        Ok(Splits {
            train: curate_all(&raw.train, template, k)?,
            val: curate_all(&raw.val, template, k)?,
            test: curate_all(&raw.test, template, k)?,
        })
    }
}

/// A named model-size setting for the grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeSpec {
    pub name: String,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub sizes: Vec<SizeSpec>,
    pub lora_r: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            sizes: vec![
                SizeSpec {
                    name: "small".into(),
                    embed_dim: 32,
                    n_layers: 1,
                    n_heads: 2,
                },
                SizeSpec {
                    name: "medium".into(),
                    embed_dim: 64,
                    n_layers: 2,
                    n_heads: 4,
                },
            ],
            lora_r: vec![32, 128],
        }
    }
}

/// Study configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub dataset: DatasetSpec,
    pub seeds: Vec<u64>,
    /// Settings shared by every arm; each arm overrides the label mode.
    pub train: TrainConfig,
    pub arms: Vec<String>,
    pub grid: GridSpec,
    /// Jobs run at once; 0 uses every core.
    pub parallelism: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            seeds: vec![1, 2, 3],
            train: TrainConfig::default(),
            arms: DEFAULT_ARMS.iter().map(|s| s.to_string()).collect(),
            grid: GridSpec::default(),
            parallelism: 0,
        }
    }
}

impl StudyConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    /// `false` evaluates the freshly initialized model without training.
    pub finetune: bool,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub arms: Vec<ArmSpec>,
    pub dataset: DatasetSpec,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub parallelism: usize,
}

fn arm_for(name: &str, base: &TrainConfig) -> Result<ArmSpec> {
    let (finetune, mode) = match name {
        NOT_FINETUNED => (false, LabelMode::IntegerMasked),
        GRADE_HEAD_ARM => (true, LabelMode::GradeHead),
        other => (true, other.parse::<LabelMode>()?),
    };
    Ok(ArmSpec {
        name: name.to_string(),
        finetune,
        train: TrainConfig {
            label_mode: mode,
            ..base.clone()
        },
    })
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("a plan needs at least one arm and one seed"));
        }
        let mut names: Vec<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("arm names must be unique"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("seeds must be unique"));
        }
        if !(1..=2).contains(&self.dataset.frames_per_item) {
            return Err(Error::invalid("frames_per_item must be 1 or 2"));
        }
        for a in &self.arms {
            a.train.validate()?;
        }
        Ok(())
    }

    /// The label-mode ablation arms named in the study, in the given order.
    pub fn ablation(study: &StudyConfig, output_dir: &Path) -> Result<Self> {
        let plan = Self {
            arms: study
                .arms
                .iter()
                .map(|n| arm_for(n, &study.train))
                .collect::<Result<_>>()?,
            dataset: study.dataset.clone(),
            seeds: study.seeds.clone(),
            output_dir: output_dir.to_path_buf(),
            parallelism: study.parallelism,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// One adapter-trained integer-masked arm per (size, rank) cell.
    pub fn size_grid(study: &StudyConfig, output_dir: &Path) -> Result<Self> {
        let mut arms = Vec::new();
        for size in &study.grid.sizes {
            for &r in &study.grid.lora_r {
                arms.push(ArmSpec {
                    name: format!("{}-d{}-l{}-r{r}", size.name, size.embed_dim, size.n_layers),
                    finetune: true,
                    train: TrainConfig {
                        label_mode: LabelMode::IntegerMasked,
                        embed_dim: size.embed_dim,
                        n_layers: size.n_layers,
                        n_heads: size.n_heads,
                        use_lora: true,
                        lora_r: r,
                        lora_alpha: r as f64,
                        ..study.train.clone()
                    },
                });
            }
        }
        let plan = Self {
            arms,
            dataset: study.dataset.clone(),
            seeds: study.seeds.clone(),
            output_dir: output_dir.to_path_buf(),
            parallelism: study.parallelism,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn run_dir(&self, arm: &str, seed: u64) -> PathBuf {
        self.output_dir
            .join("runs")
            .join(arm)
            .join(seed.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: String,
    pub seed: u64,
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub best_epoch: Option<usize>,
    /// The model gave every test item the same score. Correlation is
    /// undefined then; such a run carries no ranking information and is
    /// scored 0.
    pub constant: bool,
    /// Empty on success, otherwise the reason the run failed.
    pub failure: String,
}

impl RunResult {
    pub fn final_score(&self) -> Option<f64> {
        Some(final_score(self.srcc?, self.plcc?))
    }

    fn failed(arm: &str, seed: u64, why: String) -> Self {
        Self {
            arm: arm.to_string(),
            seed,
            srcc: None,
            plcc: None,
            best_epoch: None,
            constant: false,
            failure: why,
        }
    }
}

/// Trains (unless the arm is not fine-tuned) and scores one arm on the test
/// split, writing its run directory.
pub fn run_arm(arm: &ArmSpec, seed: u64, data: &Splits, run_dir: &Path) -> Result<RunResult> {
    let cfg = TrainConfig {
        seed,
        ..arm.train.clone()
    };
    let feature_dim = data
        .train
        .first()
        .and_then(|r| r.sampled_features.first())
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("training split is empty"))?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let model = ScorerModel::new(cfg.model_config(feature_dim), seed)?;
    let (model, best_epoch) = if arm.finetune {
        let out = train::train(model, &data.train, &data.val, &cfg, Some(run_dir))?;
        (out.best_model, Some(out.best_epoch))
    } else {
        (model, None)
    };
    let preds = train::predict(&model, &data.test, cfg.label_mode)?;
    preds.write_csv(&run_dir.join("preds.csv"))?;
    let truth = train::truth_vector(&data.test)?;
    let constant = preds.values().windows(2).all(|w| w[0] == w[1]);
    let (srcc, plcc) = if constant {
        log::warn!("{} seed {seed}: constant predictions, scored 0", arm.name);
        (0.0, 0.0)
    } else {
        let r = evaluate(&arm.name, &preds, &truth)?;
        (r.srcc, r.plcc)
    };
    Ok(RunResult {
        arm: arm.name.clone(),
        seed,
        srcc: Some(srcc),
        plcc: Some(plcc),
        best_epoch,
        constant,
        failure: String::new(),
    })
}

/// Runs every (arm, seed) job. A job that errors is reported as failed and
/// the others carry on. Results follow plan order.
pub fn run_plan(plan: &ExperimentPlan, data: &Splits) -> Result<Vec<RunResult>> {
    plan.validate()?;
    let jobs: Vec<(&ArmSpec, u64)> = plan
        .arms
        .iter()
        .flat_map(|a| plan.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let run = |&(arm, seed): &(&ArmSpec, u64)| {
        log::info!("running {} seed {seed}", arm.name);
        run_arm(arm, seed, data, &plan.run_dir(&arm.name, seed))
            .unwrap_or_else(|e| RunResult::failed(&arm.name, seed, e.to_string()))
    };
    if plan.parallelism == 1 {
        return Ok(jobs.iter().map(run).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.parallelism)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(|| jobs.par_iter().map(run).collect()))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); `None` below two values.
pub fn sample_sd(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    /// Sample standard deviation of the per-seed final scores.
    pub final_sd: Option<f64>,
    pub best_epoch: Option<String>,
    pub seeds: usize,
    /// Seeds whose predictions were constant and scored 0.
    pub constant: usize,
    pub failure: String,
}

impl ReportRow {
    /// Always recomputed from the row's own correlations.
    pub fn final_score(&self) -> Option<f64> {
        Some(final_score(self.srcc?, self.plcc?))
    }

    pub fn is_failed(&self) -> bool {
        !self.failure.is_empty()
    }

    fn status(&self) -> String {
        match (self.is_failed(), self.constant) {
            (true, _) => "FAILED".into(),
            (false, 0) => "ok".into(),
            (false, n) => format!("ok ({n} constant)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub title: String,
    pub rows: Vec<ReportRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_round(v: Option<f64>, places: usize) -> String {
    v.map(|x| display_round(x, places))
        .unwrap_or_else(|| "-".into())
}

impl ReportTable {
    /// One row per arm, in plan order: mean correlations over the seeds that
    /// succeeded. An arm with any failed seed is marked FAILED.
    pub fn summarize(title: &str, plan: &ExperimentPlan, results: &[RunResult]) -> Self {
        let order: Vec<&str> = plan.arms.iter().map(|a| a.name.as_str()).collect();
        Self::summarize_in(title, &order, results)
    }

    /// As [`ReportTable::summarize`], with arms in order of first appearance.
    pub fn from_results(title: &str, results: &[RunResult]) -> Self {
        let mut order: Vec<&str> = Vec::new();
        for r in results {
            if !order.contains(&r.arm.as_str()) {
                order.push(&r.arm);
            }
        }
        Self::summarize_in(title, &order, results)
    }

    fn summarize_in(title: &str, order: &[&str], results: &[RunResult]) -> Self {
        let rows = order
            .iter()
            .map(|&arm| {
                let runs: Vec<&RunResult> = results.iter().filter(|r| r.arm == arm).collect();
                let ok: Vec<&RunResult> = runs
                    .iter()
                    .copied()
                    .filter(|r| r.failure.is_empty())
                    .collect();
                let failures: Vec<String> = runs
                    .iter()
                    .filter(|r| !r.failure.is_empty())
                    .map(|r| format!("seed {}: {}", r.seed, r.failure))
                    .collect();
                let srcc: Vec<f64> = ok.iter().filter_map(|r| r.srcc).collect();
                let plcc: Vec<f64> = ok.iter().filter_map(|r| r.plcc).collect();
                let finals: Vec<f64> = ok.iter().filter_map(|r| r.final_score()).collect();
                let epochs: Vec<String> = ok
                    .iter()
                    .filter_map(|r| r.best_epoch.map(|e| e.to_string()))
                    .collect();
                ReportRow {
                    name: arm.to_string(),
                    srcc: (!srcc.is_empty()).then(|| mean(&srcc)),
                    plcc: (!plcc.is_empty()).then(|| mean(&plcc)),
                    final_sd: sample_sd(&finals),
                    best_epoch: (!epochs.is_empty()).then(|| epochs.join("/")),
                    seeds: ok.len(),
                    constant: ok.iter().filter(|r| r.constant).count(),
                    failure: failures.join("; "),
                }
            })
            .collect();
        Self {
            title: title.to_string(),
            rows,
        }
    }

    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Machine-readable, full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,srcc,plcc,final,final_sd,best_epoch,seeds,status\n");
        for r in &self.rows {
            let status = if r.is_failed() {
                format!("FAILED: {}", r.failure.replace(',', ";"))
            } else {
                r.status()
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.name,
                opt(r.srcc),
                opt(r.plcc),
                opt(r.final_score()),
                opt(r.final_sd),
                r.best_epoch.clone().unwrap_or_default(),
                r.seeds,
                status
            ));
        }
        out
    }

    /// Aligned text at `places` decimals.
    pub fn to_text(&self, places: usize) -> String {
        let header = [
            "name",
            "srcc",
            "plcc",
            "final",
            "sd",
            "best_epoch",
            "status",
        ];
        let body: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.name.clone(),
                    opt_round(r.srcc, places),
                    opt_round(r.plcc, places),
                    opt_round(r.final_score(), places),
                    opt_round(r.final_sd, places),
                    r.best_epoch.clone().unwrap_or_else(|| "-".into()),
                    r.status(),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: Vec<&str>| {
            let parts: Vec<String> = cells
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = format!("{}\n", self.title);
        out += &line(header.to_vec());
        for row in &body {
            out += &line(row.iter().map(String::as_str).collect());
        }
        out
    }
}

pub fn per_seed_csv(results: &[RunResult]) -> String {
    let mut out = String::from("arm,seed,srcc,plcc,final,best_epoch,status\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.arm,
            r.seed,
            opt(r.srcc),
            opt(r.plcc),
            opt(r.final_score()),
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            if r.constant {
                "constant".to_string()
            } else if r.failure.is_empty() {
                "ok".to_string()
            } else {
                format!("FAILED: {}", r.failure.replace(',', ";"))
            }
        ));
    }
    out
}

/// Reads a file written by [`per_seed_csv`].
pub fn read_per_seed_csv(path: &Path) -> Result<Vec<RunResult>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| Error::Format(format!("bad number {s:?}")))
        }
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(Error::Format(format!(
                "expected 7 columns, found {}",
                rec.len()
            )));
        }
        let status = &rec[6];
        out.push(RunResult {
            arm: rec[0].to_string(),
            seed: rec[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad seed {:?}", &rec[1])))?,
            srcc: num(&rec[2])?,
            plcc: num(&rec[3])?,
            best_epoch: num(&rec[5])?.map(|e| e as usize),
            constant: status == "constant",
            failure: status
                .strip_prefix("FAILED: ")
                .unwrap_or_default()
                .to_string(),
        });
    }
    Ok(out)
}

/// Outcome of the directional check on the ablation table:
/// not fine-tuned < decimal <= integer <= integer with masked loss, and the
/// masked arm at least `min_margin` above the decimal arm.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderingCheck {
    pub finals: [Option<f64>; 4],
    pub margin: Option<f64>,
    pub holds: bool,
}

pub fn check_ordering(table: &ReportTable, min_margin: f64) -> OrderingCheck {
    let finals = ABLATION_ARMS.map(|a| {
        table
            .row(a)
            .filter(|r| !r.is_failed())
            .and_then(ReportRow::final_score)
    });
    let holds = match finals {
        [Some(n), Some(d), Some(i), Some(m)] => n < d && d <= i && i <= m && m - d >= min_margin,
        _ => false,
    };
    OrderingCheck {
        finals,
        margin: finals[3].zip(finals[1]).map(|(m, d)| m - d),
        holds,
    }
}

/// `sha256("blob <len>\0" ++ content)`, the way git hashes file contents.
pub fn git_style_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

/// What a command was run with: enough to regenerate its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    /// Input file name to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file (relative to the manifest) to content hash.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seeds: Vec<u64>, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            seeds,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs
            .insert(path.display().to_string(), git_style_hash(&bytes));
        Ok(())
    }

    /// Hashes `path`, recorded relative to `root`.
    pub fn add_output(&mut self, root: &Path, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.outputs
            .insert(rel.display().to_string(), git_style_hash(&bytes));
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Every regular file under `dir`, sorted.
pub fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub struct StudyOutput {
    pub results: Vec<RunResult>,
    pub table: ReportTable,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs `plan` and writes `<name>.csv`, `<name>_per_seed.csv`,
/// `<name>.txt` and `manifest.json` into the output directory.
pub fn run_study(
    name: &str,
    title: &str,
    plan: &ExperimentPlan,
    study: &StudyConfig,
) -> Result<StudyOutput> {
    let data = plan.dataset.build(&PromptTemplate::default())?;
    let results = run_plan(plan, &data)?;
    let table = ReportTable::summarize(title, plan, &results);
    let dir = &plan.output_dir;
    write_text(&dir.join(format!("{name}.csv")), &table.to_csv())?;
    write_text(
        &dir.join(format!("{name}_per_seed.csv")),
        &per_seed_csv(&results),
    )?;
    write_text(&dir.join(format!("{name}.txt")), &table.to_text(3))?;
    let mut manifest = Manifest::new(name, plan.seeds.clone(), serde_json::to_value(study)?);
    for f in files_under(dir)? {
        if f.file_name().is_some_and(|n| n != "manifest.json") {
            manifest.add_output(dir, &f)?;
        }
    }
    manifest.write(&dir.join("manifest.json"))?;
    Ok(StudyOutput { results, table })
}

pub fn run_ablation(study: &StudyConfig, output_dir: &Path) -> Result<StudyOutput> {
    let plan = ExperimentPlan::ablation(study, output_dir)?;
    run_study(
        "ablation",
        "Label-mode ablation (test split, mean over seeds)",
        &plan,
        study,
    )
}

pub fn run_size_grid(study: &StudyConfig, output_dir: &Path) -> Result<StudyOutput> {
    let plan = ExperimentPlan::size_grid(study, output_dir)?;
    run_study(
        "size_grid",
        "Model size by adapter rank (test split, mean over seeds)",
        &plan,
        study,
    )
}

/// Reads a history CSV written by training back into `(epoch, val_final)`.
pub fn read_history_finals(path: &Path) -> Result<Vec<(usize, Option<f64>)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let epoch: usize = rec[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad epoch {:?}", &rec[0])))?;
        let f = match &rec[4] {
            "" => None,
            s => Some(
                s.parse()
                    .map_err(|_| Error::Format(format!("bad score {s:?}")))?,
            ),
        };
        out.push((epoch, f));
    }
    Ok(out)
}

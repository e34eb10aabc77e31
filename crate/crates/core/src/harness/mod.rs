//! Experiment orchestration: configuration, fold assignment, k-fold
//! cross-validation, evaluation of saved weights and report files.

mod report;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use report::{report_emit, CaseResult, DEntry, Report, ReportFormat, Stats, D_TABLE_POINTS};

use crate::baseline::{mix_and_match, stagewise_train, FoldModels, MixReport, StagewiseBundle};
use crate::error::{invalid, Error, Result};
use crate::inference::{run_pipeline, InferenceConfig, ViewModel};
use crate::model::{ModelBundle, ModelConfig};
use crate::rng::{derive_seed, SplitMix64};
use crate::rstn::{train, TrainConfig, TrainingLog};
use crate::synthgen::{load_corpus, Case};
use crate::volume::Axis;

const FOLD_TAG: u64 = 0xf01d;
const TRAIN_TAG: u64 = 0x7a1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rstn,
    Stagewise,
    /// Both methods on the same folds, plus the coarse/fine mix-and-match table.
    Mix,
}

impl Method {
    /// Methods whose networks are trained.
    fn trained(self) -> &'static [Method] {
        match self {
            Method::Rstn => &[Method::Rstn],
            Method::Stagewise => &[Method::Stagewise],
            Method::Mix => &[Method::Rstn, Method::Stagewise],
        }
    }

    fn file_prefix(self) -> &'static str {
        match self {
            Method::Rstn => "rstn",
            Method::Stagewise => "stagewise",
            Method::Mix => "mix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Corpus manifest; relative paths resolve against the config file's directory.
    pub corpus: PathBuf,
    pub folds: usize,
    pub method: Method,
    /// Drives fold assignment and every training run.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus/corpus.json"),
            folds: 4,
            method: Method::Rstn,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            out: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_slice(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.corpus, &mut cfg.out] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(invalid!("need at least 2 folds, got {}", self.folds));
        }
        self.model.architecture.validate()?;
        self.model.saliency.validate()?;
        self.train.validate()?;
        self.inference.validate()
    }
}

/// Assign each id a fold in `0..k`: shuffle with the seed, then deal round-robin.
///
/// The result is indexed like `ids` and does not depend on their order.
pub fn assign_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || ids.len() < k {
        return Err(invalid!("{} cases cannot fill {k} folds", ids.len()));
    }
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(invalid!("case ids are not unique"));
    }
    SplitMix64::new(derive_seed(seed, FOLD_TAG)).shuffle(&mut sorted);
    Ok(ids
        .iter()
        .map(|id| sorted.iter().position(|s| *s == id).expect("present") % k)
        .collect())
}

/// Cases a fold trains and tests on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl FoldRecord {
    pub fn is_disjoint(&self) -> bool {
        let train: BTreeSet<&String> = self.train_ids.iter().collect();
        self.test_ids.iter().all(|id| !train.contains(id))
    }
}

pub fn fold_records(ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldRecord>> {
    let assignment = assign_folds(ids, k, seed)?;
    Ok((0..k)
        .map(|fold| {
            let (test, train): (Vec<_>, Vec<_>) =
                ids.iter().zip(&assignment).partition(|(_, &f)| f == fold);
            FoldRecord {
                fold,
                train_ids: train.into_iter().map(|(id, _)| id.clone()).collect(),
                test_ids: test.into_iter().map(|(id, _)| id.clone()).collect(),
            }
        })
        .collect())
}

/// Training seed of one fold; shared by both methods.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(derive_seed(seed, TRAIN_TAG), fold as u64)
}

/// Written as `run_log.json` before any training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: ExperimentConfig,
    pub case_ids: Vec<String>,
    pub folds: Vec<FoldRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalOutcome {
    pub folds: Vec<FoldRecord>,
    /// One report per trained method, in [`Method`] order.
    pub reports: Vec<Report>,
    pub mix: Option<MixReport>,
}

impl CrossvalOutcome {
    pub fn report(&self, method: Method) -> Option<&Report> {
        self.reports.iter().find(|r| r.method == method)
    }
}

fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold_{fold}"))
}

fn weight_path(dir: &Path, method: Method, axis: Axis) -> PathBuf {
    dir.join(format!("{}_{}.json", method.file_prefix(), axis.name()))
}

pub fn save_joint(dir: &Path, bundles: &[ModelBundle; 3]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for b in bundles {
        b.save(weight_path(dir, Method::Rstn, b.viewpoint))?;
    }
    Ok(())
}

pub fn load_joint(dir: &Path) -> Result<[ModelBundle; 3]> {
    let v = Axis::ALL
        .iter()
        .map(|&a| ModelBundle::load(weight_path(dir, Method::Rstn, a)))
        .collect::<Result<Vec<_>>>()?;
    Ok(v.try_into().expect("three viewpoints"))
}

pub fn save_stagewise(dir: &Path, bundles: &[StagewiseBundle; 3]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for b in bundles {
        b.save(weight_path(dir, Method::Stagewise, b.viewpoint))?;
    }
    Ok(())
}

pub fn load_stagewise(dir: &Path) -> Result<[StagewiseBundle; 3]> {
    let v = Axis::ALL
        .iter()
        .map(|&a| StagewiseBundle::load(weight_path(dir, Method::Stagewise, a)))
        .collect::<Result<Vec<_>>>()?;
    Ok(v.try_into().expect("three viewpoints"))
}

fn check_loaded(bundles_axes: [Axis; 3]) -> Result<()> {
    if bundles_axes != Axis::ALL {
        return Err(Error::Format(
            "weight files list viewpoints out of order".into(),
        ));
    }
    Ok(())
}

/// Test `views` on one case, cropping by ground truth when the config asks for oracle boxes.
pub fn evaluate_case(
    views: &[ViewModel; 3],
    case: &Case,
    fold: usize,
    cfg: &InferenceConfig,
) -> Result<CaseResult> {
    let oracle = cfg.oracle_boxes.then_some(&case.mask);
    let (_, trace) = run_pipeline(views, &case.volume, cfg, oracle)?;
    log::debug!(
        "{}: {} iterations, d = {:?}",
        case.id,
        trace.iterations,
        trace.d
    );
    CaseResult::from_trace(&case.id, fold, &trace, &case.mask)
}

fn find_case<'a>(cases: &'a [Case], id: &str) -> Result<&'a Case> {
    cases
        .iter()
        .find(|c| c.id == id)
        .ok_or_else(|| invalid!("case {id} is not in the corpus"))
}

fn split<'a>(cases: &'a [Case], rec: &FoldRecord) -> Result<(Vec<Case>, Vec<&'a Case>)> {
    if !rec.is_disjoint() {
        return Err(invalid!(
            "fold {} trains on one of its test cases",
            rec.fold
        ));
    }
    let train = rec
        .train_ids
        .iter()
        .map(|id| find_case(cases, id).cloned())
        .collect::<Result<Vec<_>>>()?;
    let test = rec
        .test_ids
        .iter()
        .map(|id| find_case(cases, id))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, test))
}

fn save_log(dir: &Path, method: Method, log: &TrainingLog) -> Result<()> {
    log.save_jsonl(dir.join(format!("{}_train.jsonl", method.file_prefix())))
}

/// Train on each fold's complement, test on the fold, and write weights,
/// training logs and reports under `cfg.out`.
pub fn crossval(cfg: &ExperimentConfig) -> Result<CrossvalOutcome> {
    cfg.validate()?;
    let (_, cases) = load_corpus(&cfg.corpus)?;
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let folds = fold_records(&ids, cfg.folds, cfg.seed)?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let run_log = RunLog {
        config: cfg.clone(),
        case_ids: ids,
        folds: folds.clone(),
    };
    let log_path = cfg.out.join("run_log.json");
    fs::write(&log_path, serde_json::to_vec_pretty(&run_log)?)
        .map_err(|e| Error::io(&log_path, e))?;

    let methods = cfg.method.trained();
    let mut results: Vec<Vec<CaseResult>> = vec![Vec::new(); methods.len()];
    let mut joint_folds = Vec::new();
    let mut stage_folds = Vec::new();
    for rec in &folds {
        let (train_cases, test_cases) = split(&cases, rec)?;
        let dir = fold_dir(&cfg.out, rec.fold);
        let seed = fold_seed(cfg.seed, rec.fold);
        for (mi, &method) in methods.iter().enumerate() {
            log::info!(
                "fold {}: training {} on {} cases",
                rec.fold,
                method.file_prefix(),
                train_cases.len()
            );
            match method {
                Method::Rstn => {
                    let m = train(&train_cases, &cfg.model, &cfg.train, seed)?;
                    save_joint(&dir, &m.bundles)?;
                    save_log(&dir, method, &m.log)?;
                    let views = [
                        m.bundles[0].view(),
                        m.bundles[1].view(),
                        m.bundles[2].view(),
                    ];
                    for c in &test_cases {
                        results[mi].push(evaluate_case(&views, c, rec.fold, &cfg.inference)?);
                    }
                    joint_folds.push(FoldModels {
                        fold: rec.fold,
                        train_ids: rec.train_ids.clone(),
                        test_ids: rec.test_ids.clone(),
                        bundles: m.bundles,
                    });
                }
                Method::Stagewise => {
                    let m = stagewise_train(&train_cases, &cfg.model, &cfg.train, seed)?;
                    save_stagewise(&dir, &m.bundles)?;
                    save_log(&dir, method, &m.log)?;
                    let views = [
                        m.bundles[0].view(),
                        m.bundles[1].view(),
                        m.bundles[2].view(),
                    ];
                    for c in &test_cases {
                        results[mi].push(evaluate_case(&views, c, rec.fold, &cfg.inference)?);
                    }
                    stage_folds.push(FoldModels {
                        fold: rec.fold,
                        train_ids: rec.train_ids.clone(),
                        test_ids: rec.test_ids.clone(),
                        bundles: m.bundles,
                    });
                }
                Method::Mix => unreachable!("mix is not a trained method"),
            }
        }
    }

    let reports = methods
        .iter()
        .zip(results)
        .map(|(&m, r)| Report::new(m, &cfg.inference, r))
        .collect::<Result<Vec<_>>>()?;
    let mix = if cfg.method == Method::Mix {
        Some(mix_and_match(
            &joint_folds,
            &stage_folds,
            &cases,
            &cfg.inference,
        )?)
    } else {
        None
    };
    let outcome = CrossvalOutcome {
        folds,
        reports,
        mix,
    };
    write_outcome(&cfg.out, &outcome)?;
    Ok(outcome)
}

fn write_outcome(out: &Path, outcome: &CrossvalOutcome) -> Result<()> {
    for r in &outcome.reports {
        report_emit(r, out, &[ReportFormat::Json, ReportFormat::Csv])?;
    }
    if let Some(mix) = &outcome.mix {
        let p = out.join("mix_and_match.json");
        fs::write(&p, serde_json::to_vec_pretty(mix)?).map_err(|e| Error::io(&p, e))?;
    }
    let p = out.join("crossval.json");
    fs::write(&p, serde_json::to_vec_pretty(outcome)?).map_err(|e| Error::io(&p, e))
}

/// Re-test the weights saved by [`crossval`] under another inference
/// configuration, such as oracle boxes or a different threshold.
pub fn evaluate_saved(
    cfg: &ExperimentConfig,
    method: Method,
    inference: &InferenceConfig,
) -> Result<Report> {
    inference.validate()?;
    if method == Method::Mix {
        return Err(invalid!("evaluate one method at a time"));
    }
    let log_path = cfg.out.join("run_log.json");
    let text = fs::read(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let run_log: RunLog = serde_json::from_slice(&text)?;
    let (_, cases) = load_corpus(&cfg.corpus)?;
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    if ids != run_log.case_ids {
        return Err(invalid!(
            "corpus differs from the one the weights were trained on"
        ));
    }
    let mut results = Vec::new();
    for rec in &run_log.folds {
        let (_, test_cases) = split(&cases, rec)?;
        let dir = fold_dir(&cfg.out, rec.fold);
        match method {
            Method::Rstn => {
                let b = load_joint(&dir)?;
                check_loaded(b.each_ref().map(|b| b.viewpoint))?;
                let views = [b[0].view(), b[1].view(), b[2].view()];
                for c in &test_cases {
                    results.push(evaluate_case(&views, c, rec.fold, inference)?);
                }
            }
            Method::Stagewise => {
                let b = load_stagewise(&dir)?;
                check_loaded(b.each_ref().map(|b| b.viewpoint))?;
                let views = [b[0].view(), b[1].view(), b[2].view()];
                for c in &test_cases {
                    results.push(evaluate_case(&views, c, rec.fold, inference)?);
                }
            }
            Method::Mix => unreachable!(),
        }
    }
    Report::new(method, inference, results)
}

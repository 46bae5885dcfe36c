//! Pairwise comparison sweeps over experiment manifests.
//!
//! Pairs are formed only within one manifest, with model names in
//! lexicographic order. Every (pair, measure, k) job is independent; jobs
//! run on a rayon pool and the results are sorted canonically before they
//! are written, so output bytes never depend on scheduling. A failing job
//! is recorded as a [`RowFailure`] and the sweep carries on.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Error;
use crate::funcsim;
use crate::probe::{self, ProbeConfig, ProbeWeights};
use crate::repsim::{RepMeasure, DEFAULT_K};
use crate::stats::{self, DEFAULT_PERMUTATIONS};
use crate::tensor_io::{load_manifest, validate_pairing, ExperimentManifest, InputType, LoadedModel};

type Result<T> = std::result::Result<T, Error>;

/// Every measure the pipeline can evaluate on a model pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Cka,
    ProcrustesSim,
    Jaccard,
    NegRtd,
    Agreement,
    Jsdsim,
}

impl Measure {
    pub const ALL: [Measure; 6] = [
        Measure::Cka,
        Measure::ProcrustesSim,
        Measure::Jaccard,
        Measure::NegRtd,
        Measure::Agreement,
        Measure::Jsdsim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Cka => "cka",
            Measure::ProcrustesSim => "procrustes_sim",
            Measure::Jaccard => "jaccard",
            Measure::NegRtd => "neg_rtd",
            Measure::Agreement => "agreement",
            Measure::Jsdsim => "jsdsim",
        }
    }

    pub fn representational(self) -> Option<RepMeasure> {
        match self {
            Measure::Cka => Some(RepMeasure::Cka),
            Measure::ProcrustesSim => Some(RepMeasure::ProcrustesSim),
            Measure::Jaccard => Some(RepMeasure::Jaccard),
            Measure::NegRtd => Some(RepMeasure::NegRtd),
            Measure::Agreement | Measure::Jsdsim => None,
        }
    }

    fn uses_k(self) -> bool {
        self == Measure::Jaccard
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "cka" => Measure::Cka,
            "procrustes" | "procrustes_sim" => Measure::ProcrustesSim,
            "jaccard" => Measure::Jaccard,
            "rtd" | "neg_rtd" => Measure::NegRtd,
            "agreement" => Measure::Agreement,
            "jsd" | "jsdsim" => Measure::Jsdsim,
            other => return Err(Error::Config(format!("unknown measure {other:?}"))),
        })
    }
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings shared by all pipeline commands.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub manifests: Vec<PathBuf>,
    pub measures: Vec<Measure>,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub permutations: usize,
    /// Worker threads; `None` uses every available core.
    pub jobs: Option<usize>,
    /// Training-split manifest for probes, matched to the evaluation models
    /// by name.
    pub train_manifest: Option<PathBuf>,
    pub probe: ProbeConfig,
    pub weights_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifests: Vec::new(),
            measures: Measure::ALL.to_vec(),
            ks: vec![DEFAULT_K],
            seed: 0,
            permutations: DEFAULT_PERMUTATIONS,
            jobs: None,
            train_manifest: None,
            probe: ProbeConfig::default(),
            weights_dir: None,
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.manifests.is_empty() {
            return Err(Error::Config("at least one manifest is required".into()));
        }
        if self.measures.is_empty() {
            return Err(Error::Config("at least one measure is required".into()));
        }
        if self.measures.contains(&Measure::Jaccard) && self.ks.is_empty() {
            return Err(Error::Config("jaccard needs at least one k".into()));
        }
        if self.ks.contains(&0) {
            return Err(Error::Config("k must be positive".into()));
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(jobs) = self.jobs {
            if jobs == 0 {
                return Err(Error::Config("--jobs must be positive".into()));
            }
            builder = builder.num_threads(jobs);
        }
        builder.build().map_err(|e| Error::Config(e.to_string()))
    }

    /// Measure/k combinations in canonical order.
    fn measure_ks(&self, filter: impl Fn(Measure) -> bool) -> Vec<(Measure, Option<usize>)> {
        let mut measures = self.measures.clone();
        measures.sort();
        measures.dedup();
        let mut ks = self.ks.clone();
        ks.sort();
        ks.dedup();
        measures
            .into_iter()
            .filter(|&m| filter(m))
            .flat_map(|m| {
                if m.uses_k() {
                    ks.iter().map(|&k| (m, Some(k))).collect::<Vec<_>>()
                } else {
                    vec![(m, None)]
                }
            })
            .collect()
    }
}

/// Identity of a model pair inside one manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairKey {
    pub model_a: String,
    pub model_b: String,
    pub dataset: String,
    pub epsilon: f64,
    pub input_type: InputType,
    pub generator_model: Option<String>,
}

impl PairKey {
    fn cmp_key(&self, other: &Self) -> Ordering {
        (&self.dataset, self.input_type.as_str(), &self.generator_model)
            .cmp(&(&other.dataset, other.input_type.as_str(), &other.generator_model))
            .then(self.epsilon.total_cmp(&other.epsilon))
            .then((&self.model_a, &self.model_b).cmp(&(&other.model_a, &other.model_b)))
    }

    fn fields(&self) -> [String; 6] {
        [
            self.model_a.clone(),
            self.model_b.clone(),
            self.dataset.clone(),
            self.epsilon.to_string(),
            self.input_type.as_str().to_string(),
            self.generator_model.clone().unwrap_or_default(),
        ]
    }
}

/// One score: (model pair, input type, measure, k) -> value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonResult {
    #[serde(flatten)]
    pub pair: PairKey,
    pub measure: Measure,
    pub k: Option<usize>,
    pub value: f64,
    pub n_inputs: usize,
}

/// A job that could not produce a value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowFailure {
    #[serde(flatten)]
    pub pair: PairKey,
    pub measure: String,
    pub k: Option<usize>,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunOutput<T> {
    pub rows: Vec<T>,
    pub failures: Vec<RowFailure>,
}

/// Serialized value with nine decimals; `-0` is written as `0`.
pub fn fmt_value(v: f64) -> String {
    let s = format!("{v:.9}");
    if s.starts_with('-') && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn fmt_opt(k: Option<usize>) -> String {
    k.map(|k| k.to_string()).unwrap_or_default()
}

/// A report row with a fixed CSV layout.
pub trait CsvRow {
    const HEADER: &'static str;
    fn fields(&self) -> Vec<String>;
}

impl CsvRow for ComparisonResult {
    const HEADER: &'static str = "model_a,model_b,dataset,epsilon,input_type,generator_model,measure,k,value,n_inputs";

    fn fields(&self) -> Vec<String> {
        let mut f = self.pair.fields().to_vec();
        f.extend([
            self.measure.to_string(),
            fmt_opt(self.k),
            fmt_value(self.value),
            self.n_inputs.to_string(),
        ]);
        f
    }
}

impl CsvRow for RowFailure {
    const HEADER: &'static str = "model_a,model_b,dataset,epsilon,input_type,generator_model,measure,k,value,error";

    fn fields(&self) -> Vec<String> {
        let mut f = self.pair.fields().to_vec();
        f.extend([self.measure.clone(), fmt_opt(self.k), String::new(), self.error.clone()]);
        f
    }
}

pub fn to_csv<T: CsvRow>(rows: &[T]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::with_capacity(64 * (rows.len() + 1)));
    // writes into memory cannot fail
    w.write_record(T::HEADER.split(',')).expect("in-memory write");
    for row in rows {
        w.write_record(row.fields()).expect("in-memory write");
    }
    let bytes = w.into_inner().expect("in-memory flush");
    String::from_utf8(bytes).expect("fields are UTF-8")
}

/// Writes the CSV report to `out`, failures (if any) to `<out>.errors.csv`
/// and, with `json`, a JSON mirror of the rows to `out` with a `.json`
/// extension.
pub fn write_report<T: CsvRow + Serialize>(out: &Path, output: &RunOutput<T>, json: bool) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, to_csv(&output.rows))?;
    let errors = errors_path(out);
    if output.failures.is_empty() {
        if errors.exists() {
            std::fs::remove_file(&errors)?;
        }
    } else {
        std::fs::write(&errors, to_csv(&output.failures))?;
    }
    if json {
        let path = out.with_extension("json");
        if path == out {
            return Err(Error::Config(
                "--json needs an output path without a .json extension".into(),
            ));
        }
        let mut text = serde_json::to_string_pretty(&output.rows)?;
        text.push('\n');
        std::fs::write(path, text)?;
    }
    Ok(())
}

pub fn errors_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".errors.csv");
    out.with_file_name(name)
}

/// A loaded manifest with its models sorted by name.
struct Group {
    manifest: ExperimentManifest,
    models: Vec<LoadedModel>,
}

impl Group {
    fn load(path: &Path) -> Result<Self> {
        let manifest = load_manifest(path)?;
        let mut models = manifest
            .models
            .par_iter()
            .map(LoadedModel::load)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        models.sort_by(|a, b| a.record.name.cmp(&b.record.name));
        if let Some(first) = models.first() {
            let eps = first.record.epsilon;
            if let Some(other) = models.iter().find(|m| m.record.epsilon != eps) {
                return Err(Error::Config(format!(
                    "{}: models {} and {} have different epsilon ({} vs {}); pairs are only formed within one robustness level",
                    path.display(),
                    first.record.name,
                    other.record.name,
                    eps,
                    other.record.epsilon
                )));
            }
        }
        Ok(Group { manifest, models })
    }

    fn pairs(&self) -> impl Iterator<Item = (&LoadedModel, &LoadedModel, PairKey)> + '_ {
        let n = self.models.len();
        (0..n).flat_map(move |i| {
            (i + 1..n).map(move |j| {
                let (a, b) = (&self.models[i], &self.models[j]);
                let key = PairKey {
                    model_a: a.record.name.clone(),
                    model_b: b.record.name.clone(),
                    dataset: self.manifest.dataset.clone(),
                    epsilon: a.record.epsilon,
                    input_type: self.manifest.input_type,
                    generator_model: self.manifest.generator_model.clone(),
                };
                (a, b, key)
            })
        })
    }
}

fn load_groups(paths: &[PathBuf]) -> Result<Vec<Group>> {
    paths.iter().map(|p| Group::load(p)).collect()
}

fn pairing_error(a: &LoadedModel, b: &LoadedModel) -> Option<String> {
    validate_pairing(&a.activations, &b.activations, &a.labels, &b.labels)
        .and_then(|_| validate_pairing(&a.logits, &b.logits, &a.labels, &b.labels))
        .err()
        .map(|e| e.to_string())
}

fn evaluate(a: &LoadedModel, b: &LoadedModel, measure: Measure, k: Option<usize>, seed: u64) -> Result<f64> {
    match measure.representational() {
        Some(rep) => Ok(rep
            .evaluate(&a.activations, &b.activations, k.unwrap_or(DEFAULT_K), seed)?
            .value),
        None => {
            if a.logits.ncols() != b.logits.ncols() {
                return Err(funcsim::FuncSimError::ShapeMismatch(a.logits.shape(), b.logits.shape()).into());
            }
            Ok(match measure {
                Measure::Agreement => funcsim::agreement(&a.logits, &b.logits)?,
                _ => funcsim::jsdsim(&a.logits, &b.logits)?,
            })
        }
    }
}

fn sort_output<T>(out: &mut RunOutput<T>, key: impl Fn(&T) -> (&PairKey, String, Option<usize>)) {
    out.rows.sort_by(|x, y| {
        let (px, mx, kx) = key(x);
        let (py, my, ky) = key(y);
        px.cmp_key(py).then(mx.cmp(&my)).then(kx.cmp(&ky))
    });
    out.failures.sort_by(|x, y| {
        x.pair
            .cmp_key(&y.pair)
            .then(x.measure.cmp(&y.measure))
            .then(x.k.cmp(&y.k))
    });
}

/// One row per (pair, measure, k) for every manifest in the config.
pub fn run_compare(cfg: &RunConfig) -> Result<RunOutput<ComparisonResult>> {
    cfg.validate()?;
    let groups = load_groups(&cfg.manifests)?;
    let plan = cfg.measure_ks(|_| true);
    compare_groups(cfg, &groups, &plan)
}

/// Scores every (pair, measure, k) job of `plan` on the configured pool.
/// Pairs failing validation are recorded as failures without being scored.
fn score_pairs<T, F>(
    cfg: &RunConfig,
    groups: &[Group],
    plan: &[(Measure, Option<usize>)],
    score: F,
) -> Result<RunOutput<T>>
where
    T: Send,
    F: Fn(&LoadedModel, &LoadedModel, &PairKey, Measure, Option<usize>) -> std::result::Result<T, String> + Sync,
{
    let mut jobs = Vec::new();
    for g in groups {
        for (a, b, key) in g.pairs() {
            let broken = pairing_error(a, b);
            for &(measure, k) in plan {
                jobs.push((a, b, key.clone(), measure, k, broken.clone()));
            }
        }
    }
    let results: Vec<std::result::Result<T, Box<RowFailure>>> = cfg.pool()?.install(|| {
        jobs.into_par_iter()
            .map(|(a, b, pair, measure, k, broken)| {
                let row = match broken {
                    Some(e) => Err(e),
                    None => score(a, b, &pair, measure, k),
                };
                row.map_err(|error| {
                    Box::new(RowFailure {
                        pair,
                        measure: measure.to_string(),
                        k,
                        error,
                    })
                })
            })
            .collect()
    });
    let mut out = RunOutput {
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for r in results {
        match r {
            Ok(row) => out.rows.push(row),
            Err(f) => out.failures.push(*f),
        }
    }
    Ok(out)
}

fn compare_groups(
    cfg: &RunConfig,
    groups: &[Group],
    plan: &[(Measure, Option<usize>)],
) -> Result<RunOutput<ComparisonResult>> {
    let mut out = score_pairs(cfg, groups, plan, |a, b, pair, measure, k| {
        let value = evaluate(a, b, measure, k, cfg.seed).map_err(|e| e.to_string())?;
        Ok(ComparisonResult {
            pair: pair.clone(),
            measure,
            k,
            value,
            n_inputs: a.activations.nrows(),
        })
    })?;
    sort_output(&mut out, |r| (&r.pair, r.measure.to_string(), r.k));
    Ok(out)
}

/// Robustness/similarity correlation of one measure.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub measure: Measure,
    pub k: Option<usize>,
    pub n_levels: usize,
    #[serde(flatten)]
    pub report: stats::CorrelationReport,
}

impl CsvRow for SweepRow {
    const HEADER: &'static str = "measure,k,n_levels,rho,p_value,n_pairs,n_permutations,seed";

    fn fields(&self) -> Vec<String> {
        vec![
            self.measure.to_string(),
            fmt_opt(self.k),
            self.n_levels.to_string(),
            fmt_value(self.report.rho),
            fmt_value(self.report.p_value),
            self.report.n_pairs.to_string(),
            self.report.n_permutations.to_string(),
            self.report.seed.to_string(),
        ]
    }
}

/// Result of [`run_sweep`]: per-measure correlations plus the pooled pair
/// scores they were computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutput {
    pub correlations: RunOutput<SweepRow>,
    pub scores: RunOutput<ComparisonResult>,
}

/// Pools pair scores across manifests (one robustness level each) and
/// correlates every measure with epsilon.
pub fn run_sweep(cfg: &RunConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let groups = load_groups(&cfg.manifests)?;
    let mut levels: Vec<f64> = groups
        .iter()
        .filter_map(|g| g.models.first().map(|m| m.record.epsilon))
        .collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if levels.len() < 3 {
        return Err(Error::TooFewLevels(levels.len()));
    }
    let plan = cfg.measure_ks(|_| true);
    let scores = compare_groups(cfg, &groups, &plan)?;

    let mut correlations = RunOutput {
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for &(measure, k) in &plan {
        let (x, y): (Vec<f64>, Vec<f64>) = scores
            .rows
            .iter()
            .filter(|r| r.measure == measure && r.k == k)
            .map(|r| (r.pair.epsilon, r.value))
            .unzip();
        let n_levels = {
            let mut l = x.clone();
            l.sort_by(f64::total_cmp);
            l.dedup();
            l.len()
        };
        let result = if n_levels < 3 {
            Err(Error::TooFewLevels(n_levels))
        } else {
            cfg.pool()?
                .install(|| stats::permutation_pvalue(&x, &y, cfg.permutations, cfg.seed))
                .map_err(Error::from)
        };
        match result {
            Ok(report) => correlations.rows.push(SweepRow {
                measure,
                k,
                n_levels,
                report,
            }),
            Err(e) => correlations.failures.push(RowFailure {
                pair: PairKey {
                    model_a: "*".into(),
                    model_b: "*".into(),
                    dataset: groups[0].manifest.dataset.clone(),
                    epsilon: f64::NAN,
                    input_type: groups[0].manifest.input_type,
                    generator_model: None,
                },
                measure: measure.to_string(),
                k,
                error: e.to_string(),
            }),
        }
    }
    Ok(SweepOutput { correlations, scores })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubgroupRow {
    #[serde(flatten)]
    pub pair: PairKey,
    pub measure: Measure,
    #[serde(flatten)]
    pub result: stats::SubgroupResult,
}

impl CsvRow for SubgroupRow {
    const HEADER: &'static str = "model_a,model_b,dataset,epsilon,input_type,generator_model,measure,k,value_agree,value_disagree,n_agree,n_disagree";

    fn fields(&self) -> Vec<String> {
        let mut f = self.pair.fields().to_vec();
        f.extend([
            self.measure.to_string(),
            fmt_opt(self.result.k),
            fmt_value(self.result.value_agree),
            fmt_value(self.result.value_disagree),
            self.result.n_agree.to_string(),
            self.result.n_disagree.to_string(),
        ]);
        f
    }
}

/// Representational similarity on agreeing vs disagreeing inputs for every
/// pair. Functional measures in the config are ignored.
pub fn run_subgroup(cfg: &RunConfig) -> Result<RunOutput<SubgroupRow>> {
    cfg.validate()?;
    let plan = cfg.measure_ks(|m| m.representational().is_some());
    if plan.is_empty() {
        return Err(Error::Config(
            "subgroup analysis needs a representational measure".into(),
        ));
    }
    let groups = load_groups(&cfg.manifests)?;
    let mut out = score_pairs(cfg, &groups, &plan, |a, b, pair, measure, k| {
        let rep = measure
            .representational()
            .expect("plan holds representational measures only");
        let result = stats::subgroup_similarity(
            &a.activations,
            &b.activations,
            &a.logits,
            &b.logits,
            rep,
            k.unwrap_or(DEFAULT_K),
            cfg.seed,
        )
        .map_err(|e| e.to_string())?;
        Ok(SubgroupRow {
            pair: pair.clone(),
            measure,
            result,
        })
    })?;
    sort_output(&mut out, |r| (&r.pair, r.measure.to_string(), r.result.k));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundsRow {
    #[serde(flatten)]
    pub pair: PairKey,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    #[serde(flatten)]
    pub bounds: stats::AgreementBounds,
    pub observed_agreement: f64,
}

impl CsvRow for BoundsRow {
    const HEADER: &'static str = "model_a,model_b,dataset,epsilon,input_type,generator_model,accuracy_a,accuracy_b,min_agreement,max_agreement,expected_independent,expected_correlated,observed_agreement";

    fn fields(&self) -> Vec<String> {
        let mut f = self.pair.fields().to_vec();
        f.extend(
            [
                self.accuracy_a,
                self.accuracy_b,
                self.bounds.min_agreement,
                self.bounds.max_agreement,
                self.bounds.expected_independent,
                self.bounds.expected_correlated,
                self.observed_agreement,
            ]
            .map(fmt_value),
        );
        f
    }
}

/// Agreement limits and reference expectations from each model's recorded
/// clean accuracy, next to the observed agreement of its logits.
pub fn run_bounds(cfg: &RunConfig) -> Result<RunOutput<BoundsRow>> {
    if cfg.manifests.is_empty() {
        return Err(Error::Config("at least one manifest is required".into()));
    }
    let groups = load_groups(&cfg.manifests)?;
    let mut out = RunOutput {
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for g in &groups {
        for (a, b, pair) in g.pairs() {
            let row = stats::agreement_bounds(a.record.clean_accuracy, b.record.clean_accuracy, g.manifest.num_classes)
                .map_err(Error::from)
                .and_then(|bounds| {
                    if let Some(e) = pairing_error(a, b) {
                        return Err(Error::Config(e));
                    }
                    Ok((bounds, funcsim::agreement(&a.logits, &b.logits)?))
                });
            match row {
                Ok((bounds, observed_agreement)) => out.rows.push(BoundsRow {
                    pair,
                    accuracy_a: a.record.clean_accuracy,
                    accuracy_b: b.record.clean_accuracy,
                    bounds,
                    observed_agreement,
                }),
                Err(e) => out.failures.push(RowFailure {
                    pair,
                    measure: "bounds".into(),
                    k: None,
                    error: e.to_string(),
                }),
            }
        }
    }
    sort_output(&mut out, |r| (&r.pair, String::new(), None));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    #[serde(flatten)]
    pub pair: PairKey,
    pub original_agreement: f64,
    pub probe_agreement: f64,
    pub probe_accuracy_a: f64,
    pub probe_accuracy_b: f64,
}

impl CsvRow for ProbeRow {
    const HEADER: &'static str = "model_a,model_b,dataset,epsilon,input_type,generator_model,original_agreement,probe_agreement,probe_accuracy_a,probe_accuracy_b";

    fn fields(&self) -> Vec<String> {
        let mut f = self.pair.fields().to_vec();
        f.extend(
            [
                self.original_agreement,
                self.probe_agreement,
                self.probe_accuracy_a,
                self.probe_accuracy_b,
            ]
            .map(fmt_value),
        );
        f
    }
}

/// Trains one probe per model on the training manifest, then compares probe
/// predictions (and the original classifiers') on the evaluation manifest.
pub fn run_probe(cfg: &RunConfig) -> Result<RunOutput<ProbeRow>> {
    let train_path = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("probe training needs --train-manifest".into()))?;
    let [eval_path] = cfg.manifests.as_slice() else {
        return Err(Error::Config("probe expects exactly one evaluation manifest".into()));
    };
    let train = Group::load(train_path)?;
    let eval = Group::load(eval_path)?;
    if train.manifest.num_classes != eval.manifest.num_classes {
        return Err(Error::Config("train and eval manifests disagree on num_classes".into()));
    }
    let classes = eval.manifest.num_classes;
    let pool = cfg.pool()?;
    let probes: Vec<std::result::Result<ProbeWeights, String>> = pool.install(|| {
        eval.models
            .par_iter()
            .map(|m| {
                let t = train
                    .models
                    .iter()
                    .find(|t| t.record.name == m.record.name)
                    .ok_or_else(|| format!("no training split for model {}", m.record.name))?;
                probe::train_probe(&t.activations, &t.labels, classes, &cfg.probe).map_err(|e| e.to_string())
            })
            .collect()
    });
    if let Some(dir) = &cfg.weights_dir {
        std::fs::create_dir_all(dir)?;
        for (m, w) in eval.models.iter().zip(&probes) {
            if let Ok(w) = w {
                probe::save_probe(dir, &m.record.name, w, &cfg.probe)?;
            }
        }
    }
    let predicted: Vec<std::result::Result<crate::Matrix, String>> = eval
        .models
        .iter()
        .zip(&probes)
        .map(|(m, w)| {
            let w = w.as_ref().map_err(Clone::clone)?;
            probe::probe_predict(w, &m.activations).map_err(|e| e.to_string())
        })
        .collect();
    let index = |name: &str| eval.models.iter().position(|m| m.record.name == name).unwrap();

    let mut out = RunOutput {
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for (a, b, pair) in eval.pairs() {
        let (pa, pb) = (&predicted[index(&a.record.name)], &predicted[index(&b.record.name)]);
        let row = (|| -> std::result::Result<ProbeRow, String> {
            if let Some(e) = pairing_error(a, b) {
                return Err(e);
            }
            let (pa, pb) = (pa.as_ref().map_err(Clone::clone)?, pb.as_ref().map_err(Clone::clone)?);
            let agree = |x, y| funcsim::agreement(x, y).map_err(|e| e.to_string());
            Ok(ProbeRow {
                pair: pair.clone(),
                original_agreement: agree(&a.logits, &b.logits)?,
                probe_agreement: agree(pa, pb)?,
                probe_accuracy_a: probe::accuracy(pa, &a.labels),
                probe_accuracy_b: probe::accuracy(pb, &b.labels),
            })
        })();
        match row {
            Ok(r) => out.rows.push(r),
            Err(error) => out.failures.push(RowFailure {
                pair,
                measure: "probe".into(),
                k: None,
                error,
            }),
        }
    }
    sort_output(&mut out, |r| (&r.pair, String::new(), None));
    Ok(out)
}

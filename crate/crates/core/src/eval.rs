//! Top-k accuracy, repeated trials, ablation grids and their reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{fingerprint, RecognitionConfig};
use crate::dataset::{DatasetManifest, EntrySource, GroundTruth, ManifestEntry, SimilarityGroups, TemplateCatalog};
use crate::extraction::{crop_sign, extract_signs, load_rgb, select_target, ExtractionConfig, MaskImage};
use crate::knowledge::{MemoryBank, TranscriptEntry};
use crate::lmm::{clock, Clock, LmmClient};
use crate::prompts::PROMPT_VERSION;
use crate::recognizer::{RecognitionResult, Recognizer, RecognizerError, RoadImage, Sample, StageTimings};
use crate::workers::parallel_map;

pub const REPORTED_K: [usize; 3] = [1, 3, 5];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("results and ground truth disagree: {0}")]
    Alignment(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("duplicate configuration in grid at rows {first} and {second}")]
    DuplicateConfig { first: usize, second: usize },
    #[error("no samples to evaluate")]
    NoSamples,
    #[error(transparent)]
    Recognizer(#[from] RecognizerError),
    #[error("results file {path}: {message}")]
    Results { path: PathBuf, message: String },
}

/// Fraction of samples whose true class is among the first `k` ranked
/// answers. Results and truth must cover the same image ids, once each.
pub fn topk_accuracy(results: &[RecognitionResult], truth: &[GroundTruth], k: usize) -> Result<f64, EvalError> {
    Ok(topk_correct(results, truth, k)? as f64 / truth.len().max(1) as f64)
}

fn topk_correct(results: &[RecognitionResult], truth: &[GroundTruth], k: usize) -> Result<usize, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    let mut by_id: HashMap<&str, &RecognitionResult> = HashMap::with_capacity(results.len());
    for r in results {
        if by_id.insert(r.image_id.as_str(), r).is_some() {
            return Err(EvalError::Alignment(format!("duplicate result for `{}`", r.image_id)));
        }
    }
    let mut seen = BTreeSet::new();
    let mut correct = 0;
    for t in truth {
        if !seen.insert(t.image_id.as_str()) {
            return Err(EvalError::Alignment(format!("duplicate ground truth for `{}`", t.image_id)));
        }
        let r = by_id
            .get(t.image_id.as_str())
            .ok_or_else(|| EvalError::Alignment(format!("no result for `{}`", t.image_id)))?;
        if r.ranked.iter().take(k).any(|c| c.class_id == t.class_id) {
            correct += 1;
        }
    }
    if by_id.len() != seen.len() {
        let extra: Vec<&str> = by_id.keys().filter(|id| !seen.contains(*id)).copied().collect();
        return Err(EvalError::Alignment(format!("results without ground truth: {}", extra.join(", "))));
    }
    Ok(correct)
}

// ---------------------------------------------------------------------------
// Sample preparation

/// Entry indices of a seeded subset of at most `size` entries that keeps
/// at least one entry of every class present, in manifest order. When the
/// dataset has more classes than `size`, one entry per class is kept.
pub fn subset_indices(entries: &[ManifestEntry], size: usize, seed: u64) -> Vec<usize> {
    if size >= entries.len() {
        return (0..entries.len()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut rng);
    let mut chosen = BTreeSet::new();
    let mut classes = BTreeSet::new();
    for &i in &order {
        if classes.insert(entries[i].ground_truth_class.class_id.as_str()) {
            chosen.insert(i);
        }
    }
    if chosen.len() > size {
        log::warn!("subset size {size} is below the {} classes present; keeping one entry per class", chosen.len());
    }
    for &i in &order {
        if chosen.len() >= size {
            break;
        }
        chosen.insert(i);
    }
    chosen.into_iter().collect()
}

fn prepare_one(entry: &ManifestEntry, manifest: &DatasetManifest, cfg: &ExtractionConfig) -> Result<Sample, String> {
    let id = &entry.image_id;
    match &entry.source {
        EntrySource::RoadWithMask { road, mask } => {
            let road_img = load_rgb(road).map_err(|e| e.to_string())?;
            let mask_img = load_rgb(mask).map_err(|e| e.to_string())?;
            let mask = MaskImage::new(mask_img, manifest.mask_colors.clone());
            let ex = extract_signs(id, &road_img, &mask, &manifest.sign_label, cfg).map_err(|e| e.to_string())?;
            let target = select_target(&ex.regions, entry.region_hint.as_ref())
                .ok_or_else(|| format!("{id}: no sign region found in the mask"))?;
            let crop = ex.crops.into_iter().nth(target).expect("one crop per region");
            Ok(Sample {
                image_id: id.clone(),
                crop: crop.image,
                road: Some(RoadImage::Path(road.clone())),
                region: Some(crop.region),
                extraction_ms: 0,
            })
        }
        EntrySource::RoadWithHint { road } => {
            let road_img = load_rgb(road).map_err(|e| e.to_string())?;
            let region = entry
                .region_hint
                .ok_or_else(|| format!("{id}: road image without mask needs a region hint"))?;
            let crop = crop_sign(&road_img, id, &region, cfg.padding).map_err(|e| e.to_string())?;
            Ok(Sample {
                image_id: id.clone(),
                crop: crop.image,
                road: Some(RoadImage::Path(road.clone())),
                region: Some(region),
                extraction_ms: 0,
            })
        }
        EntrySource::Precropped { sign } => Ok(Sample {
            image_id: id.clone(),
            crop: load_rgb(sign).map_err(|e| e.to_string())?,
            road: None,
            region: None,
            extraction_ms: 0,
        }),
    }
}

/// Turns every manifest entry into a sample, timing extraction on `clock`.
/// Entries that fail are returned as `(image_id, message)`.
pub fn prepare_samples(
    manifest: &DatasetManifest,
    cfg: &ExtractionConfig,
    clock: &dyn Clock,
    jobs: usize,
) -> (Vec<Sample>, Vec<(String, String)>) {
    let outcomes = parallel_map(&manifest.entries, jobs, |entry| {
        let started = clock.now();
        let r = prepare_one(entry, manifest, cfg);
        let ms = clock::millis(clock.now().saturating_sub(started));
        r.map(|mut s| {
            s.extraction_ms = ms;
            s
        })
    });
    let mut samples = Vec::new();
    let mut failed = Vec::new();
    for (entry, r) in manifest.entries.iter().zip(outcomes) {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => failed.push((entry.image_id.clone(), e)),
        }
    }
    (samples, failed)
}

// ---------------------------------------------------------------------------
// Results file

/// One line of the results file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub fingerprint: String,
    pub trial: usize,
    pub image_id: String,
    pub ranked: Vec<String>,
    pub raw_answer: String,
    pub timings: StageTimings,
    pub transcript: Vec<TranscriptEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ResultRecord {
    fn from_result(fingerprint: &str, trial: usize, r: &RecognitionResult) -> Self {
        ResultRecord {
            fingerprint: fingerprint.to_string(),
            trial,
            image_id: r.image_id.clone(),
            ranked: r.ranked.iter().map(|c| c.class_id.clone()).collect(),
            raw_answer: r.raw_answer.clone(),
            timings: r.timings,
            transcript: r.transcript.clone(),
            error: r.error.clone(),
        }
    }

    fn into_result(self, catalog: &TemplateCatalog) -> RecognitionResult {
        RecognitionResult {
            image_id: self.image_id,
            ranked: self.ranked.iter().filter_map(|id| catalog.get(id).cloned()).collect(),
            raw_answer: self.raw_answer,
            transcript: self.transcript,
            timings: self.timings,
            error: self.error,
        }
    }
}

/// Append-only results log keyed by (fingerprint, trial, image id).
#[derive(Debug)]
pub struct ResultsLog {
    path: PathBuf,
    done: HashMap<(String, usize, String), ResultRecord>,
    writer: Mutex<std::fs::File>,
}

impl ResultsLog {
    /// Opens `path` for appending, first reading any earlier records.
    /// A torn final line from an interrupted run is ignored.
    pub fn open(path: &Path) -> Result<Self, EvalError> {
        let err = |message: String| EvalError::Results {
            path: path.to_path_buf(),
            message,
        };
        let mut done = HashMap::new();
        if path.exists() {
            let f = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<ResultRecord>(&line) {
                    Ok(r) => {
                        done.insert((r.fingerprint.clone(), r.trial, r.image_id.clone()), r);
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable record: {e}", path.display(), n + 1),
                }
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| err(e.to_string()))?;
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| err(e.to_string()))?;
        Ok(ResultsLog {
            path: path.to_path_buf(),
            done,
            writer: Mutex::new(writer),
        })
    }

    pub fn lookup(&self, fingerprint: &str, trial: usize, image_id: &str) -> Option<&ResultRecord> {
        self.done.get(&(fingerprint.to_string(), trial, image_id.to_string()))
    }

    pub fn append(&self, record: &ResultRecord) -> Result<(), EvalError> {
        let mut line = serde_json::to_string(record).expect("serializable record");
        line.push('\n');
        let mut w = self.writer.lock().expect("results writer");
        w.write_all(line.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| EvalError::Results {
                path: self.path.clone(),
                message: e.to_string(),
            })
    }
}

// ---------------------------------------------------------------------------
// Trials and reports

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
}

impl TopK {
    pub fn values(&self) -> [f64; 3] {
        [self.top1, self.top3, self.top5]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub trial: usize,
    /// Correctly recognized samples at k = 1, 3, 5.
    pub correct: [usize; 3],
    pub accuracy: TopK,
    pub failures: usize,
}

/// Mean milliseconds per sample and stage over all trials.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub extraction_ms: f64,
    pub context_ms: Option<f64>,
    pub multistep_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetInfo {
    pub seed: u64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub label: String,
    pub fingerprint: String,
    pub backend_id: String,
    pub temperature: f32,
    pub prompt_version: String,
    /// Configuration actually run.
    pub config: RecognitionConfig,
    pub n_samples: usize,
    pub trials: Vec<TrialMetrics>,
    pub mean: Option<TopK>,
    pub latency: LatencyReport,
    /// Distinct images that failed in at least one trial.
    pub failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<SubsetInfo>,
    /// The context stage was switched off because some samples lack road images.
    pub context_downgraded: bool,
    /// Why the row was not run, if it was not.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl EvalReport {
    /// Metric invariants; returns one message per violation.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for t in &self.trials {
            let v = t.accuracy.values();
            if v.iter().any(|a| !(0.0..=1.0).contains(a)) {
                bad.push(format!("{}: trial {} accuracy outside [0, 1]: {v:?}", self.label, t.trial));
            }
            if !(v[0] <= v[1] && v[1] <= v[2]) {
                bad.push(format!("{}: trial {} Top-k not monotone in k: {v:?}", self.label, t.trial));
            }
        }
        if !self.trials.is_empty() {
            let expect = mean_topk(&self.trials);
            if self.mean != Some(expect) {
                bad.push(format!("{}: mean {:?} differs from the trial average {expect:?}", self.label, self.mean));
            }
        }
        bad
    }
}

fn mean_topk(trials: &[TrialMetrics]) -> TopK {
    let n = trials.len() as f64;
    let avg = |i: usize| trials.iter().map(|t| t.accuracy.values()[i]).sum::<f64>() / n;
    TopK {
        top1: avg(0),
        top3: avg(1),
        top5: avg(2),
    }
}

/// What every trial of an evaluation shares.
pub struct EvalContext<'a> {
    pub dataset_id: &'a str,
    pub catalog: &'a TemplateCatalog,
    pub groups: &'a SimilarityGroups,
    pub bank: &'a MemoryBank,
    pub client: &'a LmmClient,
    pub samples: &'a [Sample],
    pub truth: &'a [GroundTruth],
}

#[derive(Debug, Clone, Default)]
pub struct TrialOptions {
    pub trials: usize,
    pub jobs: usize,
    pub results: Option<PathBuf>,
    pub subset: Option<SubsetInfo>,
    pub label: Option<String>,
}

fn scene_available(samples: &[Sample]) -> bool {
    !samples.is_empty() && samples.iter().all(Sample::has_scene)
}

fn latency(results: &[RecognitionResult]) -> LatencyReport {
    let ok: Vec<&RecognitionResult> = results.iter().filter(|r| r.error.is_none()).collect();
    if ok.is_empty() {
        return LatencyReport::default();
    }
    let n = ok.len() as f64;
    let mean = |f: &dyn Fn(&RecognitionResult) -> u64| ok.iter().map(|r| f(r) as f64).sum::<f64>() / n;
    let context_ms = ok
        .iter()
        .any(|r| r.timings.context_ms.is_some())
        .then(|| mean(&|r| r.timings.context_ms.unwrap_or(0)));
    let extraction_ms = mean(&|r| r.timings.extraction_ms);
    let multistep_ms = mean(&|r| r.timings.multistep_ms);
    LatencyReport {
        extraction_ms,
        context_ms,
        multistep_ms,
        total_ms: extraction_ms + context_ms.unwrap_or(0.0) + multistep_ms,
    }
}

/// Runs the recognizer over every sample, `opts.trials` times in sequence.
///
/// Per-image failures are scored as wrong and counted; errors that would
/// recur for every image abort the run. When some samples lack a road
/// image, the context stage is switched off for the whole dataset.
pub fn run_trials(ctx: &EvalContext<'_>, cfg: &RecognitionConfig, opts: &TrialOptions) -> Result<EvalReport, EvalError> {
    if ctx.samples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let mut cfg = cfg.clone();
    let mut context_downgraded = false;
    if cfg.use_context && !scene_available(ctx.samples) {
        log::warn!(
            "{}: some samples have no road image; scene descriptions are disabled for this dataset",
            ctx.dataset_id
        );
        cfg = cfg.without_context();
        context_downgraded = true;
    }
    if cfg.k_max < 5 {
        log::warn!("k_max {} is below 5; Top-5 is computed on shorter lists", cfg.k_max);
    }
    let recognizer = Recognizer::new(ctx.catalog, ctx.groups, ctx.bank, cfg.clone(), ctx.client)?;
    let fp = fingerprint(&cfg, ctx.client.backend_id(), ctx.client.temperature());
    let log_file = opts.results.as_deref().map(ResultsLog::open).transpose()?;
    let trials = opts.trials.max(1);

    let mut trial_rows = Vec::with_capacity(trials);
    let mut all_results = Vec::new();
    let mut failed_images = BTreeSet::new();
    for trial in 1..=trials {
        let abort = AtomicBool::new(false);
        let fatal: Mutex<Option<RecognizerError>> = Mutex::new(None);
        let results = parallel_map(ctx.samples, opts.jobs, |sample| {
            if let Some(rec) = log_file.as_ref().and_then(|l| l.lookup(&fp, trial, &sample.image_id)) {
                return Ok(rec.clone().into_result(ctx.catalog));
            }
            if abort.load(Ordering::SeqCst) {
                return Ok(RecognitionResult::failed(sample.image_id.clone(), "run aborted"));
            }
            let result = match recognizer.recognize(sample) {
                Ok(r) => r,
                Err(e) if e.is_fatal() => {
                    abort.store(true, Ordering::SeqCst);
                    fatal.lock().expect("fatal slot").get_or_insert(e);
                    return Ok(RecognitionResult::failed(sample.image_id.clone(), "run aborted"));
                }
                Err(e) => {
                    log::warn!("{}: {e}", sample.image_id);
                    RecognitionResult::failed(sample.image_id.clone(), e)
                }
            };
            if let Some(l) = &log_file {
                l.append(&ResultRecord::from_result(&fp, trial, &result))?;
            }
            Ok(result)
        })
        .into_iter()
        .collect::<Result<Vec<_>, EvalError>>()?;
        if let Some(e) = fatal.into_inner().expect("fatal slot") {
            return Err(e.into());
        }
        let mut correct = [0usize; 3];
        for (slot, k) in correct.iter_mut().zip(REPORTED_K) {
            *slot = topk_correct(&results, ctx.truth, k)?;
        }
        let n = ctx.truth.len() as f64;
        let failures = results.iter().filter(|r| r.error.is_some()).count();
        failed_images.extend(results.iter().filter(|r| r.error.is_some()).map(|r| r.image_id.clone()));
        trial_rows.push(TrialMetrics {
            trial,
            correct,
            accuracy: TopK {
                top1: correct[0] as f64 / n,
                top3: correct[1] as f64 / n,
                top5: correct[2] as f64 / n,
            },
            failures,
        });
        all_results.extend(results);
    }

    Ok(EvalReport {
        dataset_id: ctx.dataset_id.to_string(),
        label: opts.label.clone().unwrap_or_else(|| config_label(&cfg)),
        fingerprint: fp,
        backend_id: ctx.client.backend_id().to_string(),
        temperature: ctx.client.temperature(),
        prompt_version: PROMPT_VERSION.to_string(),
        config: cfg.normalized(),
        n_samples: ctx.truth.len(),
        mean: Some(mean_topk(&trial_rows)),
        trials: trial_rows,
        latency: latency(&all_results),
        failures: failed_images.len(),
        subset: opts.subset.clone(),
        context_downgraded,
        skipped: None,
    })
}

/// Short row label naming the enabled stages.
pub fn config_label(cfg: &RecognitionConfig) -> String {
    let mut parts = Vec::new();
    if cfg.use_context {
        let mut s = String::from("Cont");
        match (cfg.use_hypothesis, cfg.use_coordinates) {
            (true, true) => {}
            (true, false) => s.push_str("(no coords)"),
            (false, true) => s.push_str("(no hyp)"),
            (false, false) => s.push_str("(no hyp, no coords)"),
        }
        parts.push(s);
    }
    if cfg.use_characteristic {
        parts.push("Char".to_string());
    }
    if cfg.use_differential {
        parts.push("Diff".to_string());
    }
    let mut label = if parts.is_empty() {
        "Baseline".to_string()
    } else {
        parts.join("+")
    };
    if !cfg.is_canonical_order() {
        let order: Vec<String> = cfg.order().iter().map(ToString::to_string).collect();
        let _ = write!(label, " [{}]", order.join(" > "));
    }
    label
}

/// One report per configuration. The baseline is added first when missing;
/// duplicates are rejected. Scene-based rows are marked skipped when the
/// dataset has samples without road images.
pub fn ablation_grid(
    ctx: &EvalContext<'_>,
    configs: &[RecognitionConfig],
    opts: &TrialOptions,
) -> Result<Vec<EvalReport>, EvalError> {
    let mut rows: Vec<RecognitionConfig> = configs.iter().map(RecognitionConfig::normalized).collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if rows[i] == rows[j] {
                return Err(EvalError::DuplicateConfig { first: i, second: j });
            }
        }
    }
    let baseline = RecognitionConfig {
        k_max: rows.first().map_or(5, |r| r.k_max),
        max_hypothesis: rows.first().map_or(5, |r| r.max_hypothesis),
        prompt_class_cap: rows.first().map_or(64, |r| r.prompt_class_cap),
        ..RecognitionConfig::baseline()
    }
    .normalized();
    if !rows.iter().any(|r| !r.use_context && !r.use_characteristic && !r.use_differential) {
        rows.insert(0, baseline);
    }
    let has_scene = scene_available(ctx.samples);
    let mut reports = Vec::with_capacity(rows.len());
    for cfg in &rows {
        if cfg.use_context && !has_scene {
            reports.push(EvalReport {
                dataset_id: ctx.dataset_id.to_string(),
                label: config_label(cfg),
                fingerprint: fingerprint(cfg, ctx.client.backend_id(), ctx.client.temperature()),
                backend_id: ctx.client.backend_id().to_string(),
                temperature: ctx.client.temperature(),
                prompt_version: PROMPT_VERSION.to_string(),
                config: cfg.clone(),
                n_samples: ctx.truth.len(),
                trials: Vec::new(),
                mean: None,
                latency: LatencyReport::default(),
                failures: 0,
                subset: opts.subset.clone(),
                context_downgraded: false,
                skipped: Some("no road images for scene descriptions".into()),
            });
            continue;
        }
        let row_opts = TrialOptions {
            label: Some(config_label(cfg)),
            ..opts.clone()
        };
        reports.push(run_trials(ctx, cfg, &row_opts)?);
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Rendering

const CHECK: &str = "✓";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

/// Accuracy table with stage checkmark columns, one row per report.
pub fn render_accuracy_table(reports: &[EvalReport]) -> String {
    let mut s = String::from(
        "| Method | Cont* | Char* | Diff* | Hyp | Coord | Order | Top-1 | Top-3 | Top-5 | n | Failures |\n\
         |---|:-:|:-:|:-:|:-:|:-:|---|---:|---:|---:|---:|---:|\n",
    );
    for r in reports {
        let c = &r.config;
        let mark = |b: bool| if b { CHECK } else { "" };
        let order: Vec<String> = c.order().iter().map(ToString::to_string).collect();
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.label,
            mark(c.use_context),
            mark(c.use_characteristic),
            mark(c.use_differential),
            mark(c.use_hypothesis),
            mark(c.use_coordinates),
            if order.is_empty() { "-".to_string() } else { order.join(" > ") },
            cell(r.mean.map(|m| m.top1)),
            cell(r.mean.map(|m| m.top3)),
            cell(r.mean.map(|m| m.top5)),
            r.n_samples,
            if r.skipped.is_some() { "-".to_string() } else { r.failures.to_string() },
        );
    }
    s
}

/// Mean per-stage latency per report, with samples per second.
pub fn render_timing_table(reports: &[EvalReport]) -> String {
    let mut s = String::from(
        "| Method | Extraction (ms) | Context (ms) | LMM (ms) | Total (ms) | Inference speed (img/s) |\n\
         |---|---:|---:|---:|---:|---:|\n",
    );
    for r in reports {
        if r.skipped.is_some() {
            let _ = writeln!(s, "| {} | - | - | - | - | - |", r.label);
            continue;
        }
        let l = &r.latency;
        let speed = if l.total_ms > 0.0 {
            format!("{:.3}", 1000.0 / l.total_ms)
        } else {
            "-".to_string()
        };
        let _ = writeln!(
            s,
            "| {} | {:.1} | {} | {:.1} | {:.1} | {} |",
            r.label,
            l.extraction_ms,
            l.context_ms.map_or_else(|| "-".to_string(), |v| format!("{v:.1}")),
            l.multistep_ms,
            l.total_ms,
            speed
        );
    }
    s
}

/// Per-trial accuracy for one report.
pub fn render_trials(report: &EvalReport) -> String {
    let mut s = String::from("| Trial | Top-1 | Top-3 | Top-5 | Failures |\n|---:|---:|---:|---:|---:|\n");
    for t in &report.trials {
        let _ = writeln!(
            s,
            "| {} | {:.3} | {:.3} | {:.3} | {} |",
            t.trial, t.accuracy.top1, t.accuracy.top3, t.accuracy.top5, t.failures
        );
    }
    if let Some(m) = report.mean {
        let _ = writeln!(s, "| mean | {:.3} | {:.3} | {:.3} | {} |", m.top1, m.top3, m.top5, report.failures);
    }
    s
}

/// Machine-readable bundle written next to the rendered tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub version: u32,
    pub grid: Option<String>,
    pub reports: Vec<EvalReport>,
    /// Invariant violations by report label; empty when all hold.
    pub invariant_violations: BTreeMap<String, Vec<String>>,
}

impl ReportFile {
    pub fn new(grid: Option<String>, reports: Vec<EvalReport>) -> Self {
        let invariant_violations = reports
            .iter()
            .map(|r| (r.label.clone(), r.check_invariants()))
            .filter(|(_, v)| !v.is_empty())
            .collect();
        ReportFile {
            version: 1,
            grid,
            reports,
            invariant_violations,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable report");
        s.push('\n');
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        if let Some(first) = self.reports.first() {
            let _ = writeln!(s, "# Evaluation: {}\n", first.dataset_id);
            let _ = writeln!(
                s,
                "Backend `{}`, temperature {}, prompts `{}`.\n",
                first.backend_id, first.temperature, first.prompt_version
            );
            if let Some(sub) = &first.subset {
                let _ = writeln!(s, "Subset of {} samples drawn with seed {}.\n", sub.size, sub.seed);
            }
        }
        s.push_str("## Accuracy\n\n");
        s.push_str(&render_accuracy_table(&self.reports));
        s.push_str("\n## Timing\n\n");
        s.push_str(&render_timing_table(&self.reports));
        for r in &self.reports {
            if r.skipped.is_none() {
                let _ = write!(s, "\n## {} (fingerprint `{}`)\n\n", r.label, r.fingerprint);
                if r.context_downgraded {
                    s.push_str("Scene descriptions disabled: some samples have no road image.\n\n");
                }
                s.push_str(&render_trials(r));
            }
        }
        if !self.invariant_violations.is_empty() {
            s.push_str("\n## Invariant violations\n\n");
            for (label, v) in &self.invariant_violations {
                for m in v {
                    let _ = writeln!(s, "- {label}: {m}");
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClassRef;

    fn class(id: &str) -> ClassRef {
        ClassRef {
            class_id: id.into(),
            display_name: id.into(),
            country: "xx".into(),
        }
    }

    fn result(id: &str, ranked: &[&str]) -> RecognitionResult {
        RecognitionResult {
            ranked: ranked.iter().map(|c| class(c)).collect(),
            ..RecognitionResult::failed(id, "")
        }
    }

    fn truth(id: &str, class_id: &str) -> GroundTruth {
        GroundTruth {
            image_id: id.into(),
            class_id: class_id.into(),
        }
    }

    #[test]
    fn direct_counts() {
        let res: Vec<_> = (0..5)
            .map(|i| result(&format!("i{i}"), if i < 3 { &["a", "b"] } else { &["b", "a"] }))
            .collect();
        let gt: Vec<_> = (0..5).map(|i| truth(&format!("i{i}"), "a")).collect();
        assert_eq!(topk_accuracy(&res, &gt, 1).unwrap(), 0.6);
        assert_eq!(topk_accuracy(&res, &gt, 3).unwrap(), 1.0);
        assert!(matches!(topk_accuracy(&res, &gt, 0), Err(EvalError::InvalidK)));
    }

    #[test]
    fn alignment_errors() {
        let gt = vec![truth("a", "x"), truth("b", "x")];
        assert!(matches!(topk_accuracy(&[result("a", &["x"])], &gt, 1), Err(EvalError::Alignment(_))));
        let res = vec![result("a", &["x"]), result("b", &[]), result("c", &[])];
        assert!(matches!(topk_accuracy(&res, &gt, 1), Err(EvalError::Alignment(_))));
        let dup = vec![result("a", &["x"]), result("a", &["x"])];
        assert!(matches!(topk_accuracy(&dup, &gt, 1), Err(EvalError::Alignment(_))));
        let ok = vec![result("b", &[]), result("a", &["x"])];
        assert_eq!(topk_accuracy(&ok, &gt, 5).unwrap(), 0.5);
    }

    #[test]
    fn labels() {
        assert_eq!(config_label(&RecognitionConfig::baseline()), "Baseline");
        assert_eq!(config_label(&RecognitionConfig::full()), "Cont+Char+Diff");
        assert_eq!(
            config_label(&RecognitionConfig::full().swapped_order()),
            "Cont+Char+Diff [characteristic > context > differential]"
        );
    }

    #[test]
    fn invariant_checks_flag_bad_reports() {
        let mut r = EvalReport {
            dataset_id: "d".into(),
            label: "x".into(),
            fingerprint: "f".into(),
            backend_id: "b".into(),
            temperature: 0.0,
            prompt_version: PROMPT_VERSION.into(),
            config: RecognitionConfig::baseline(),
            n_samples: 2,
            trials: vec![TrialMetrics {
                trial: 1,
                correct: [1, 1, 2],
                accuracy: TopK {
                    top1: 0.5,
                    top3: 0.5,
                    top5: 1.0,
                },
                failures: 0,
            }],
            mean: Some(TopK {
                top1: 0.5,
                top3: 0.5,
                top5: 1.0,
            }),
            latency: LatencyReport::default(),
            failures: 0,
            subset: None,
            context_downgraded: false,
            skipped: None,
        };
        assert!(r.check_invariants().is_empty());
        r.trials[0].accuracy.top3 = 0.4;
        assert_eq!(r.check_invariants().len(), 2);
    }
}

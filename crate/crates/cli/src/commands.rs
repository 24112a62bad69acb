use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use tsr_core::config::{Grid, RecognitionConfig, ThinkingStage};
use tsr_core::dataset::{self, DatasetManifest, SimilarityGroups, TemplateCatalog};
use tsr_core::eval::{self, EvalContext, EvalError, ReportFile, SubsetInfo, TrialOptions};
use tsr_core::extraction::{self, MaskImage};
use tsr_core::geometry::SignRegion;
use tsr_core::knowledge::{self, BuildOptions, KnowledgeError, MemoryBank, Provenance};
use tsr_core::lmm::{LmmClient, LmmError, SystemClock};
use tsr_core::recognizer::{Recognizer, RecognizerError, Sample};
use tsr_core::synthetic::{self, SyntheticSpec};

use crate::config::{ConfigError, RunConfigFile};

/// Command failure, split by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or inputs that no retry would fix.
    #[error("{0}")]
    Config(String),
    /// Some of the work failed.
    #[error("{0}")]
    Work(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Work(_) => 1,
            CliError::Config(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<dataset::DatasetError> for CliError {
    fn from(e: dataset::DatasetError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<LmmError> for CliError {
    fn from(e: LmmError) -> Self {
        match e {
            LmmError::Config(_) | LmmError::AuthError { .. } => CliError::Config(e.to_string()),
            other => CliError::Work(other.to_string()),
        }
    }
}

impl From<RecognizerError> for CliError {
    fn from(e: RecognizerError) -> Self {
        if e.is_fatal() {
            CliError::Config(e.to_string())
        } else {
            CliError::Work(e.to_string())
        }
    }
}

impl From<KnowledgeError> for CliError {
    fn from(e: KnowledgeError) -> Self {
        match e {
            KnowledgeError::Lmm(e) => e.into(),
            KnowledgeError::SchemaViolation { .. } | KnowledgeError::CoverageGap { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Work(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Recognizer(e) => e.into(),
            EvalError::DuplicateConfig { .. } | EvalError::NoSamples => CliError::Config(e.to_string()),
            other => CliError::Work(other.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Work(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Work(format!("{}: {e}", path.display())))
}

struct Inputs {
    catalog: TemplateCatalog,
    groups: SimilarityGroups,
}

fn load_inputs(cfg: &RunConfigFile) -> Result<Inputs, CliError> {
    let catalog = dataset::load_template_catalog(&cfg.require(&cfg.paths.catalog, "catalog")?)?;
    let groups = dataset::load_similarity_groups(&cfg.require(&cfg.paths.groups, "groups")?, &catalog)?;
    Ok(Inputs { catalog, groups })
}

fn load_manifest(cfg: &RunConfigFile, catalog: &TemplateCatalog) -> Result<DatasetManifest, CliError> {
    Ok(dataset::load_manifest(&cfg.require(&cfg.paths.manifest, "manifest")?, catalog)?)
}

/// The bank on disk, or an empty one when none has been built yet.
fn existing_bank(cfg: &RunConfigFile, client: &LmmClient) -> Result<MemoryBank, CliError> {
    let path = cfg.require(&cfg.paths.bank, "bank")?;
    if !path.exists() {
        log::warn!("no memory bank at {}; run build-bank first", path.display());
        return Ok(MemoryBank::new(Provenance::for_client(client)));
    }
    let bank = knowledge::read_bank(&path)?;
    if !bank.is_current() {
        log::warn!("memory bank {} was built with older prompts; rebuild it", path.display());
    }
    Ok(bank)
}

fn calls_per_image(cfg: &RecognitionConfig, has_scene: bool) -> usize {
    1 + usize::from(cfg.use_context && has_scene)
}

// ---------------------------------------------------------------------------
// extract

#[derive(Serialize)]
struct RegionSidecar<'a> {
    image_id: &'a str,
    fingerprint: &'a str,
    regions: &'a [SignRegion],
    target: Option<usize>,
    crops: Vec<String>,
}

pub fn extract(cfg: &RunConfigFile, keep_going: bool, dry_run: bool) -> Result<(), CliError> {
    let fp = cfg.fingerprint();
    let Inputs { catalog, .. } = load_inputs(cfg)?;
    let manifest = load_manifest(cfg, &catalog)?;
    println!("fingerprint: {fp}");
    if dry_run {
        println!("dry run: {} images, planned LMM calls: 0", manifest.entries.len());
        return Ok(());
    }
    let out = cfg.output_dir().join("crops");
    let mut done = 0usize;
    let mut failed = Vec::new();
    for entry in &manifest.entries {
        match extract_one(&manifest, entry, cfg, &out, &fp) {
            Ok(n) => {
                done += 1;
                log::info!("{}: {n} regions", entry.image_id);
            }
            Err(msg) => {
                let msg = format!("{}: {msg}", entry.image_id);
                if !keep_going {
                    return Err(CliError::Work(msg));
                }
                eprintln!("error: {msg}");
                failed.push(msg);
            }
        }
    }
    println!(
        "extracted {done} of {} images into {} ({} failed)",
        manifest.entries.len(),
        out.display(),
        failed.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Work(format!("{} images failed extraction", failed.len())))
    }
}

fn extract_one(
    manifest: &DatasetManifest,
    entry: &dataset::ManifestEntry,
    cfg: &RunConfigFile,
    out: &Path,
    fp: &str,
) -> Result<usize, String> {
    let (road, mask) = match (entry.road_image_path(), entry.mask_image_path()) {
        (Some(r), Some(m)) => (r, m),
        _ => return Err("entry has no segmentation mask".into()),
    };
    let road = extraction::load_rgb(road).map_err(|e| e.to_string())?;
    let mask = MaskImage::new(
        extraction::load_rgb(mask).map_err(|e| e.to_string())?,
        manifest.mask_colors.clone(),
    );
    let ex = extraction::extract_signs(&entry.image_id, &road, &mask, &manifest.sign_label, &cfg.extraction)
        .map_err(|e| e.to_string())?;
    let mut crops = Vec::new();
    for (i, crop) in ex.crops.iter().enumerate() {
        let name = format!("{}_{i}.png", entry.image_id);
        extraction::save_png(&crop.image, &out.join(&name)).map_err(|e| e.to_string())?;
        crops.push(name);
    }
    let sidecar = RegionSidecar {
        image_id: &entry.image_id,
        fingerprint: fp,
        regions: &ex.regions,
        target: extraction::select_target(&ex.regions, entry.region_hint.as_ref()),
        crops,
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| e.to_string())?;
    write_file(&out.join(format!("{}.json", entry.image_id)), &json).map_err(|e| e.to_string())?;
    Ok(ex.regions.len())
}

// ---------------------------------------------------------------------------
// build-bank

pub fn build_bank(cfg: &RunConfigFile, jobs: usize, limit: Option<usize>, dry_run: bool) -> Result<(), CliError> {
    let Inputs { catalog, groups } = load_inputs(cfg)?;
    let client = LmmClient::from_config(&cfg.backend)?;
    let path = cfg.require(&cfg.paths.bank, "bank")?;
    let existing = if path.exists() {
        Some(knowledge::read_bank(&path)?)
    } else {
        None
    };
    let plan = knowledge::plan_bank(&catalog, &groups, existing.as_ref());
    println!("fingerprint: {}", cfg.fingerprint());
    println!(
        "planned LMM calls: {} ({} characteristics, {} differentials{})",
        plan.calls(),
        plan.classes.len(),
        plan.pairs.len(),
        if plan.regenerate { ", regenerating stale bank" } else { "" }
    );
    if dry_run {
        return Ok(());
    }
    let opts = BuildOptions {
        path: Some(path.clone()),
        jobs,
        limit,
    };
    let report = knowledge::build_bank(&client, &catalog, &groups, existing, &opts)?;
    println!(
        "generated {} characteristics and {} differentials; backend calls {}, cache hits {}",
        report.characteristics_generated,
        report.differentials_generated,
        client.backend_calls(),
        client.cache_hits()
    );
    println!("bank: {}", path.display());
    if report.interrupted {
        return Err(CliError::Work("stopped at the entry limit; rerun to finish the bank".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// recognize

pub enum Target {
    ImageId(String),
    Crop(PathBuf),
}

pub fn recognize(cfg: &RunConfigFile, target: &Target, dry_run: bool) -> Result<(), CliError> {
    let Inputs { catalog, groups } = load_inputs(cfg)?;
    let sample = match target {
        Target::ImageId(id) => {
            let mut manifest = load_manifest(cfg, &catalog)?;
            manifest.entries.retain(|e| &e.image_id == id);
            if manifest.entries.is_empty() {
                return Err(CliError::Config(format!("no manifest entry with image id `{id}`")));
            }
            let (mut samples, failed) =
                eval::prepare_samples(&manifest, &cfg.extraction, &SystemClock::new(), 1);
            if let Some((_, msg)) = failed.into_iter().next() {
                return Err(CliError::Work(format!("{id}: {msg}")));
            }
            samples.remove(0)
        }
        Target::Crop(path) => Sample {
            image_id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            crop: extraction::load_rgb(path).map_err(|e| CliError::Config(e.to_string()))?,
            road: None,
            region: None,
            extraction_ms: 0,
        },
    };
    let mut rcfg = cfg.recognition.clone();
    if rcfg.use_context && !sample.has_scene() {
        log::warn!("{} has no road image; the scene description stage is skipped", sample.image_id);
        rcfg = rcfg.without_context();
    }
    let fp = cfg.fingerprint_of(&rcfg);
    println!("fingerprint: {fp}");
    if dry_run {
        println!("planned LMM calls: {}", calls_per_image(&rcfg, sample.has_scene()));
        return Ok(());
    }
    let client = LmmClient::from_config(&cfg.backend)?;
    let bank = existing_bank(cfg, &client)?;
    let recognizer = Recognizer::new(&catalog, &groups, &bank, rcfg, &client)?;
    let result = recognizer.recognize(&sample)?;
    println!("image: {}", result.image_id);
    println!("ranked answer:");
    for (i, c) in result.ranked.iter().enumerate() {
        println!("  {}. {} ({})", i + 1, c.display_name, c.class_id);
    }
    println!("transcript:");
    for t in &result.transcript {
        println!(
            "  {:<14} prompt {} response {}{}",
            t.stage.to_string(),
            &t.prompt_digest[..12.min(t.prompt_digest.len())],
            &t.response_digest[..12.min(t.response_digest.len())],
            if t.cached { " (cached)" } else { "" }
        );
    }
    println!("timings (ms): {}", serde_json::to_string(&result.timings).unwrap_or_default());
    println!("raw answer:\n{}", result.raw_answer);
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

pub struct EvaluateArgs {
    pub grid: Option<Grid>,
    pub trials: usize,
    pub jobs: usize,
    pub dry_run: bool,
}

pub fn evaluate(cfg: &RunConfigFile, args: &EvaluateArgs) -> Result<(), CliError> {
    let Inputs { catalog, groups } = load_inputs(cfg)?;
    let mut manifest = load_manifest(cfg, &catalog)?;
    let subset = cfg.eval.subset_size.map(|size| {
        let keep = eval::subset_indices(&manifest.entries, size, cfg.eval.subset_seed);
        manifest.entries = keep.iter().map(|&i| manifest.entries[i].clone()).collect();
        SubsetInfo {
            seed: cfg.eval.subset_seed,
            size: manifest.entries.len(),
        }
    });
    let configs = match args.grid {
        Some(g) => g.configs(&cfg.recognition),
        None => vec![cfg.recognition.clone()],
    };
    let has_scene = manifest.all_have_road_images();
    let n = manifest.entries.len();
    let mut planned = 0;
    for c in &configs {
        let c = if c.use_context && !has_scene { c.without_context() } else { c.clone() };
        println!("fingerprint: {} {}", cfg.fingerprint_of(&c), eval::config_label(&c));
        planned += n * args.trials * calls_per_image(&c, has_scene);
    }
    if args.grid.is_some() && !configs.iter().any(|c| c.enabled_stages().is_empty()) {
        planned += n * args.trials;
    }
    println!("{n} samples, {} trials, planned LMM calls: {planned}", args.trials);
    if args.dry_run {
        return Ok(());
    }

    let client = LmmClient::from_config(&cfg.backend)?;
    let bank = existing_bank(cfg, &client)?;
    let (samples, failed) = eval::prepare_samples(&manifest, &cfg.extraction, &SystemClock::new(), args.jobs);
    for (id, msg) in &failed {
        eprintln!("error: {id}: {msg}");
    }
    let kept: std::collections::BTreeSet<&str> = samples.iter().map(|s| s.image_id.as_str()).collect();
    let truth: Vec<_> = manifest
        .ground_truth()
        .into_iter()
        .filter(|t| kept.contains(t.image_id.as_str()))
        .collect();
    let ctx = EvalContext {
        dataset_id: &manifest.dataset_id,
        catalog: &catalog,
        groups: &groups,
        bank: &bank,
        client: &client,
        samples: &samples,
        truth: &truth,
    };
    let opts = TrialOptions {
        trials: args.trials,
        jobs: args.jobs,
        results: cfg.paths.results.clone(),
        subset,
        label: None,
    };
    let reports = match args.grid {
        Some(_) => eval::ablation_grid(&ctx, &configs, &opts)?,
        None => vec![eval::run_trials(&ctx, &configs[0], &opts)?],
    };
    let file = ReportFile::new(args.grid.map(|g| g.name().to_string()), reports);
    let stem = args.grid.map_or("evaluation", Grid::name);
    let out = cfg.output_dir();
    write_file(&out.join(format!("{stem}.json")), &file.to_json())?;
    write_file(&out.join(format!("{stem}.md")), &file.to_markdown())?;
    println!("{}", file.to_markdown());
    println!("reports: {}", out.join(format!("{stem}.{{json,md}}")).display());

    let failures: usize = file.reports.iter().map(|r| r.failures).sum();
    if !failed.is_empty() || failures > 0 || !file.invariant_violations.is_empty() {
        return Err(CliError::Work(format!(
            "{} samples failed preparation, {failures} recognitions failed, {} reports broke invariants",
            failed.len(),
            file.invariant_violations.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

pub fn synth(out: &Path, spec: &SyntheticSpec) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Work(format!("{}: {e}", out.display())))?;
    let out = &out
        .canonicalize()
        .map_err(|e| CliError::Work(format!("{}: {e}", out.display())))?;
    let ds = synthetic::generate(out, spec).map_err(|e| CliError::Work(e.to_string()))?;
    let rel = |p: &Path| p.strip_prefix(out).unwrap_or(p).display().to_string();
    let config = format!(
        "[paths]\n\
         manifest = \"{}\"\n\
         catalog = \"{}\"\n\
         groups = \"{}\"\n\
         bank = \"bank.json\"\n\
         output = \"out\"\n\
         \n\
         [backend]\n\
         kind = \"mock\"\n\
         model = \"synthetic\"\n\
         mock_script = \"{}\"\n\
         max_road_image_side = {}\n\
         \n\
         [recognition]\n\
         thinking_order = [{}]\n\
         \n\
         [eval]\n\
         trials = 1\n",
        rel(&ds.manifest_path),
        rel(&ds.catalog_path),
        rel(&ds.groups_path),
        rel(&ds.script_path),
        spec.max_image_side,
        ThinkingStage::CANONICAL
            .iter()
            .map(|s| format!("\"{s}\""))
            .collect::<Vec<_>>()
            .join(", "),
    );
    let path = out.join("tsr.toml");
    write_file(&path, &config)?;
    println!(
        "synthetic dataset: {} classes, {} images",
        ds.catalog.len(),
        ds.manifest.entries.len()
    );
    println!("config: {}", path.display());
    Ok(path)
}

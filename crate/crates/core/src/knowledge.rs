//! Scene, characteristic and differential descriptions, and the memory bank
//! that stores the per-class and per-pair ones.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RecognitionConfig;
use crate::dataset::{write_atomic, ClassPair, ClassRef, SimilarityGroups, TemplateCatalog};
use crate::extraction::load_rgb;
use crate::geometry::SignRegion;
use crate::lmm::{text_digest, ImageAttachment, LmmClient, LmmError, LmmResponse, StageKind};
use crate::prompts::{self, Prompt, PROMPT_VERSION};
use crate::text::{parse_labeled, split_candidates, NameResolver};
use crate::workers::parallel_map;

pub const BANK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error(transparent)]
    Lmm(#[from] LmmError),
    #[error("cannot parse {what} answer: {detail}")]
    ParseFailure { what: String, detail: String },
    #[error("template image for `{class_id}`: {message}")]
    TemplateImage { class_id: String, message: String },
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("bank file {path}: {message}")]
    SchemaViolation { path: PathBuf, message: String },
    #[error("memory bank coverage gap: {}", describe_gap(.missing_classes, .missing_pairs, .unexpected_pairs))]
    CoverageGap {
        missing_classes: Vec<String>,
        missing_pairs: Vec<ClassPair>,
        unexpected_pairs: Vec<ClassPair>,
    },
    #[error("memory bank incomplete after build ({} failures): {}", .failures.len(), describe_gap(.missing_classes, .missing_pairs, &[]))]
    Incomplete {
        failures: Vec<String>,
        missing_classes: Vec<String>,
        missing_pairs: Vec<ClassPair>,
    },
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn describe_gap(classes: &[String], pairs: &[ClassPair], unexpected: &[ClassPair]) -> String {
    let mut s = String::new();
    if !classes.is_empty() {
        let _ = write!(s, "missing characteristics for [{}]", classes.join(", "));
    }
    for (label, list) in [("missing differentials for", pairs), ("unexpected differentials for", unexpected)] {
        if !list.is_empty() {
            if !s.is_empty() {
                s.push_str("; ");
            }
            let names: Vec<String> = list.iter().map(ToString::to_string).collect();
            let _ = write!(s, "{label} [{}]", names.join(", "));
        }
    }
    s
}

/// One model exchange, recorded by digests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub stage: StageKind,
    /// Cache key of the request, which hashes its full content.
    pub prompt_digest: String,
    pub response_digest: String,
    pub cached: bool,
}

pub(crate) fn run_prompt(
    client: &LmmClient,
    stage: StageKind,
    prompt: Prompt,
) -> Result<(LmmResponse, TranscriptEntry), LmmError> {
    let req = client.request(stage, prompt.system, prompt.parts);
    let prompt_digest = client.cache_key(&req);
    let resp = client.complete(&req)?;
    let entry = TranscriptEntry {
        stage,
        prompt_digest,
        response_digest: text_digest(&resp.text),
        cached: resp.cached,
    };
    Ok((resp, entry))
}

// ---------------------------------------------------------------------------
// Context

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDescription {
    pub image_id: String,
    pub region: SignRegion,
    pub background_text: String,
    pub hypothesis: Vec<ClassRef>,
    pub raw_text: String,
}

/// Reads a scene answer. A missing background label keeps the whole text
/// as background; unreadable candidates leave the hypothesis empty.
pub fn parse_context_answer(
    raw: &str,
    image_id: &str,
    region: SignRegion,
    catalog: &TemplateCatalog,
    hypothesis: Option<usize>,
) -> ContextDescription {
    let fields = parse_labeled(raw, &[prompts::BACKGROUND_LABEL, prompts::CANDIDATES_LABEL]);
    let background_text = match fields.get("background").filter(|s| !s.is_empty()) {
        Some(b) => b.clone(),
        None => {
            log::warn!("{image_id}: scene answer has no background line; keeping the full text");
            raw.trim().to_string()
        }
    };
    let mut resolved = Vec::new();
    if let Some(max) = hypothesis {
        match fields.get("candidates") {
            Some(list) => {
                let resolver = NameResolver::new(catalog);
                for cand in split_candidates(list) {
                    match resolver.resolve(&cand) {
                        Some(c) if !resolved.contains(c) => resolved.push(c.clone()),
                        Some(_) => {}
                        None => log::warn!("{image_id}: candidate `{cand}` matches no catalog class"),
                    }
                }
                resolved.truncate(max);
            }
            None => log::warn!("{image_id}: scene answer has no candidates line; hypothesis left empty"),
        }
    }
    ContextDescription {
        image_id: image_id.to_string(),
        region,
        background_text,
        hypothesis: resolved,
        raw_text: raw.to_string(),
    }
}

/// Describes the scene around `region` of a road image.
pub fn gen_context(
    client: &LmmClient,
    image_id: &str,
    road: &RgbImage,
    region: &SignRegion,
    catalog: &TemplateCatalog,
    cfg: &RecognitionConfig,
) -> Result<(ContextDescription, TranscriptEntry), KnowledgeError> {
    let hypothesis = cfg.use_hypothesis.then_some(cfg.max_hypothesis);
    let prompt = prompts::context_prompt(
        ImageAttachment::png_downscaled(road, client.max_road_image_side()),
        road.dimensions(),
        region,
        catalog,
        cfg.use_coordinates,
        hypothesis,
    );
    let (resp, entry) = run_prompt(client, StageKind::Context, prompt)?;
    let desc = parse_context_answer(&resp.text, image_id, *region, catalog, hypothesis);
    Ok((desc, entry))
}

// ---------------------------------------------------------------------------
// Characteristics and differentials

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharacteristicDescription {
    pub class_id: String,
    pub shape: String,
    pub color: String,
    pub composition: String,
    pub raw_text: String,
}

pub fn parse_characteristic_answer(raw: &str, class_id: &str) -> Result<CharacteristicDescription, KnowledgeError> {
    let fields = parse_labeled(raw, &prompts::FACET_LABELS);
    let get = |k: &str| fields.get(k).map(|s| s.trim().to_string()).filter(|s| !s.is_empty());
    match (get("shape"), get("color"), get("composition")) {
        (Some(shape), Some(color), Some(composition)) => Ok(CharacteristicDescription {
            class_id: class_id.to_string(),
            shape,
            color,
            composition,
            raw_text: raw.to_string(),
        }),
        _ => Err(KnowledgeError::ParseFailure {
            what: format!("characteristic ({class_id})"),
            detail: "expected non-empty Shape, Color and Composition lines".into(),
        }),
    }
}

/// Describes one class template; an unreadable answer is retried once with
/// a stricter format reminder.
pub fn gen_characteristic(
    client: &LmmClient,
    template: &RgbImage,
    class: &ClassRef,
) -> Result<CharacteristicDescription, KnowledgeError> {
    let attachment = ImageAttachment::png_downscaled(template, client.max_road_image_side());
    let prompt = prompts::characteristic_prompt(attachment.clone(), class, false);
    let (resp, _) = run_prompt(client, StageKind::Characteristic, prompt)?;
    match parse_characteristic_answer(&resp.text, &class.class_id) {
        Ok(d) => Ok(d),
        Err(first) => {
            log::warn!("{first}; retrying with a stricter format reminder");
            let prompt = prompts::characteristic_prompt(attachment, class, true);
            let (resp, _) = run_prompt(client, StageKind::Characteristic, prompt)?;
            parse_characteristic_answer(&resp.text, &class.class_id)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifferentialDescription {
    pub pair: ClassPair,
    pub text: String,
}

/// Contrasts two classes from their characteristic texts alone.
pub fn gen_differential(
    client: &LmmClient,
    u: (&ClassRef, &CharacteristicDescription),
    v: (&ClassRef, &CharacteristicDescription),
) -> Result<DifferentialDescription, KnowledgeError> {
    let pair = ClassPair::new(u.0.class_id.clone(), v.0.class_id.clone()).ok_or_else(|| KnowledgeError::ParseFailure {
        what: "differential".into(),
        detail: format!("a class cannot be contrasted with itself ({})", u.0.class_id),
    })?;
    let (a, b) = if u.0.class_id == pair.first() { (u, v) } else { (v, u) };
    let prompt = prompts::differential_prompt(a.0, a.1, b.0, b.1);
    let (resp, _) = run_prompt(client, StageKind::Differential, prompt)?;
    let fields = parse_labeled(&resp.text, &[prompts::DIFFERENCES_LABEL]);
    let text = fields
        .get("differences")
        .filter(|s| !s.is_empty())
        .cloned()
        .unwrap_or_else(|| resp.text.trim().to_string());
    Ok(DifferentialDescription { pair, text })
}

// ---------------------------------------------------------------------------
// Memory bank

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub backend_id: String,
    pub model: String,
    pub created_at: String,
    pub prompt_version: String,
}

impl Provenance {
    pub fn for_client(client: &LmmClient) -> Self {
        Provenance {
            backend_id: client.backend_id().to_string(),
            model: client.model().to_string(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            prompt_version: PROMPT_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryBank {
    pub provenance: Provenance,
    characteristics: BTreeMap<String, CharacteristicDescription>,
    differentials: BTreeMap<ClassPair, DifferentialDescription>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    version: u32,
    provenance: Provenance,
    characteristics: Vec<CharacteristicDescription>,
    differentials: Vec<DifferentialDescription>,
}

impl MemoryBank {
    pub fn new(provenance: Provenance) -> Self {
        MemoryBank {
            provenance,
            characteristics: BTreeMap::new(),
            differentials: BTreeMap::new(),
        }
    }

    pub fn characteristics(&self) -> &BTreeMap<String, CharacteristicDescription> {
        &self.characteristics
    }

    pub fn differentials(&self) -> &BTreeMap<ClassPair, DifferentialDescription> {
        &self.differentials
    }

    pub fn characteristic(&self, class_id: &str) -> Option<&CharacteristicDescription> {
        self.characteristics.get(class_id)
    }

    pub fn differential(&self, pair: &ClassPair) -> Option<&DifferentialDescription> {
        self.differentials.get(pair)
    }

    pub fn insert_characteristic(&mut self, d: CharacteristicDescription) {
        self.characteristics.insert(d.class_id.clone(), d);
    }

    pub fn insert_differential(&mut self, d: DifferentialDescription) {
        self.differentials.insert(d.pair.clone(), d);
    }

    /// Whether the entries were produced by the current prompt templates.
    pub fn is_current(&self) -> bool {
        self.provenance.prompt_version == PROMPT_VERSION
    }

    /// Drops entries for classes or pairs that the catalog and groups no longer induce.
    pub fn retain_induced(&mut self, catalog: &TemplateCatalog, groups: &SimilarityGroups) {
        let pairs = groups.pairs();
        self.characteristics.retain(|id, _| catalog.contains(id));
        self.differentials.retain(|p, _| pairs.contains(p));
    }

    fn gaps(&self, catalog: &TemplateCatalog, groups: &SimilarityGroups) -> (Vec<String>, Vec<ClassPair>, Vec<ClassPair>) {
        let pairs = groups.pairs();
        let missing_classes = catalog
            .class_ids()
            .filter(|id| !self.characteristics.contains_key(*id))
            .map(str::to_string)
            .collect();
        let missing_pairs = pairs.iter().filter(|p| !self.differentials.contains_key(*p)).cloned().collect();
        let unexpected = self.differentials.keys().filter(|p| !pairs.contains(*p)).cloned().collect();
        (missing_classes, missing_pairs, unexpected)
    }

    /// Every catalog class described, and exactly the group-induced pairs contrasted.
    pub fn validate_coverage(&self, catalog: &TemplateCatalog, groups: &SimilarityGroups) -> Result<(), KnowledgeError> {
        let (missing_classes, missing_pairs, unexpected_pairs) = self.gaps(catalog, groups);
        if missing_classes.is_empty() && missing_pairs.is_empty() && unexpected_pairs.is_empty() {
            Ok(())
        } else {
            Err(KnowledgeError::CoverageGap {
                missing_classes,
                missing_pairs,
                unexpected_pairs,
            })
        }
    }

    fn to_json(&self) -> String {
        let file = BankFile {
            version: BANK_FORMAT_VERSION,
            provenance: self.provenance.clone(),
            characteristics: self.characteristics.values().cloned().collect(),
            differentials: self.differentials.values().cloned().collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("serializable bank");
        s.push('\n');
        s
    }
}

pub fn save_bank(bank: &MemoryBank, path: &Path) -> Result<(), KnowledgeError> {
    write_atomic(path, bank.to_json().as_bytes()).map_err(|source| KnowledgeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a bank file without checking coverage.
pub fn read_bank(path: &Path) -> Result<MemoryBank, KnowledgeError> {
    let schema = |message: String| KnowledgeError::SchemaViolation {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| schema(e.to_string()))?;
    let file: BankFile = serde_json::from_str(&text).map_err(|e| schema(e.to_string()))?;
    if file.version != BANK_FORMAT_VERSION {
        return Err(schema(format!("unsupported version {}", file.version)));
    }
    let mut bank = MemoryBank::new(file.provenance);
    for c in file.characteristics {
        if bank.characteristics.contains_key(&c.class_id) {
            return Err(schema(format!("duplicate characteristic for `{}`", c.class_id)));
        }
        bank.insert_characteristic(c);
    }
    for d in file.differentials {
        if bank.differentials.contains_key(&d.pair) {
            return Err(schema(format!("duplicate differential for {}", d.pair)));
        }
        bank.insert_differential(d);
    }
    Ok(bank)
}

/// Reads a bank and checks it against the catalog and groups. A bank from
/// older prompt templates loads with a warning; callers should consult
/// [`MemoryBank::is_current`] and regenerate.
pub fn load_bank(path: &Path, catalog: &TemplateCatalog, groups: &SimilarityGroups) -> Result<MemoryBank, KnowledgeError> {
    let bank = read_bank(path)?;
    if !bank.is_current() {
        log::warn!(
            "bank {} was built with prompts `{}` but current prompts are `{PROMPT_VERSION}`; it must be regenerated",
            path.display(),
            bank.provenance.prompt_version
        );
    }
    bank.validate_coverage(catalog, groups)?;
    Ok(bank)
}

// ---------------------------------------------------------------------------
// Building

/// Entries still to generate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankPlan {
    pub classes: Vec<String>,
    pub pairs: Vec<ClassPair>,
    /// Existing entries are discarded because they come from older prompts.
    pub regenerate: bool,
}

impl BankPlan {
    /// Model calls needed when every answer parses on the first try.
    pub fn calls(&self) -> usize {
        self.classes.len() + self.pairs.len()
    }
}

fn usable_existing(existing: Option<MemoryBank>, catalog: &TemplateCatalog, groups: &SimilarityGroups) -> (Option<MemoryBank>, bool) {
    match existing {
        Some(b) if !b.is_current() => (None, true),
        Some(mut b) => {
            b.retain_induced(catalog, groups);
            (Some(b), false)
        }
        None => (None, false),
    }
}

pub fn plan_bank(catalog: &TemplateCatalog, groups: &SimilarityGroups, existing: Option<&MemoryBank>) -> BankPlan {
    let (bank, regenerate) = usable_existing(existing.cloned(), catalog, groups);
    let has_char = |id: &str| bank.as_ref().is_some_and(|b| b.characteristics.contains_key(id));
    let has_pair = |p: &ClassPair| bank.as_ref().is_some_and(|b| b.differentials.contains_key(p));
    BankPlan {
        classes: catalog.class_ids().filter(|id| !has_char(id)).map(str::to_string).collect(),
        pairs: groups.pairs().into_iter().filter(|p| !has_pair(p)).collect(),
        regenerate,
    }
}

#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    /// Bank file rewritten after every new entry.
    pub path: Option<PathBuf>,
    pub jobs: usize,
    /// Stop after this many generated entries, leaving the rest for a later run.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct BuildReport {
    pub bank: MemoryBank,
    pub characteristics_generated: usize,
    pub differentials_generated: usize,
    /// Entries left over because the entry limit was reached.
    pub interrupted: bool,
}

struct Shared {
    bank: MemoryBank,
    path: Option<PathBuf>,
    write_error: Option<KnowledgeError>,
}

impl Shared {
    fn commit(&mut self, f: impl FnOnce(&mut MemoryBank)) {
        f(&mut self.bank);
        if let (Some(path), None) = (&self.path, &self.write_error) {
            if let Err(e) = save_bank(&self.bank, path) {
                self.write_error = Some(e);
            }
        }
    }
}

/// Generates every missing characteristic, then every missing differential.
///
/// Entries already in `existing` are kept when the bank was built with the
/// current prompts, so an interrupted build resumes where it stopped. Each
/// new entry is persisted before the next one is committed.
pub fn build_bank(
    client: &LmmClient,
    catalog: &TemplateCatalog,
    groups: &SimilarityGroups,
    existing: Option<MemoryBank>,
    opts: &BuildOptions,
) -> Result<BuildReport, KnowledgeError> {
    let (bank, regenerate) = usable_existing(existing, catalog, groups);
    if regenerate {
        log::warn!("existing bank uses outdated prompts; regenerating every entry");
    }
    let bank = bank.unwrap_or_else(|| MemoryBank::new(Provenance::for_client(client)));
    let plan = plan_bank(catalog, groups, Some(&bank));
    let mut budget = opts.limit.unwrap_or(usize::MAX);
    let shared = Mutex::new(Shared {
        bank,
        path: opts.path.clone(),
        write_error: None,
    });
    let mut failures = Vec::new();

    let classes: Vec<&ClassRef> = plan
        .classes
        .iter()
        .take(budget)
        .map(|id| catalog.get(id).ok_or_else(|| KnowledgeError::UnknownClass(id.clone())))
        .collect::<Result<_, _>>()?;
    budget -= classes.len();
    let outcomes = parallel_map(&classes, opts.jobs, |class| {
        let path = catalog
            .template_path(&class.class_id)
            .ok_or_else(|| KnowledgeError::UnknownClass(class.class_id.clone()))?;
        let template = load_rgb(path).map_err(|e| KnowledgeError::TemplateImage {
            class_id: class.class_id.clone(),
            message: e.to_string(),
        })?;
        let d = gen_characteristic(client, &template, class)?;
        shared.lock().expect("bank lock").commit(|b| b.insert_characteristic(d));
        Ok::<_, KnowledgeError>(())
    });
    let mut characteristics_generated = 0;
    for (class, r) in classes.iter().zip(outcomes) {
        match r {
            Ok(()) => characteristics_generated += 1,
            Err(e) => failures.push(format!("characteristic {}: {e}", class.class_id)),
        }
    }

    let pairs: Vec<(ClassPair, CharacteristicDescription, CharacteristicDescription)> = {
        let guard = shared.lock().expect("bank lock");
        plan.pairs
            .iter()
            .filter_map(|p| {
                let a = guard.bank.characteristic(p.first())?;
                let b = guard.bank.characteristic(p.second())?;
                Some((p.clone(), a.clone(), b.clone()))
            })
            .take(budget)
            .collect()
    };
    budget -= pairs.len();
    let outcomes = parallel_map(&pairs, opts.jobs, |(p, a, b)| {
        let ca = catalog.get(p.first()).ok_or_else(|| KnowledgeError::UnknownClass(p.first().into()))?;
        let cb = catalog.get(p.second()).ok_or_else(|| KnowledgeError::UnknownClass(p.second().into()))?;
        let d = gen_differential(client, (ca, a), (cb, b))?;
        shared.lock().expect("bank lock").commit(|bank| bank.insert_differential(d));
        Ok::<_, KnowledgeError>(())
    });
    let mut differentials_generated = 0;
    for ((p, _, _), r) in pairs.iter().zip(outcomes) {
        match r {
            Ok(()) => differentials_generated += 1,
            Err(e) => failures.push(format!("differential {p}: {e}")),
        }
    }

    let mut shared = shared.into_inner().expect("bank lock");
    if let Some(e) = shared.write_error.take() {
        return Err(e);
    }
    if let Some(path) = &opts.path {
        save_bank(&shared.bank, path)?;
    }
    let bank = shared.bank;
    let (missing_classes, missing_pairs, _) = bank.gaps(catalog, groups);
    let remaining = missing_classes.len() + missing_pairs.len();
    let interrupted = budget == 0 && remaining > 0 && opts.limit.is_some() && failures.is_empty();
    if remaining > 0 && !interrupted {
        for f in &failures {
            log::error!("{f}");
        }
        return Err(KnowledgeError::Incomplete {
            failures,
            missing_classes,
            missing_pairs,
        });
    }
    Ok(BuildReport {
        bank,
        characteristics_generated,
        differentials_generated,
        interrupted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::lmm::{MockBackend, MockRule, MockScript};

    fn catalog(ids: &[&str]) -> TemplateCatalog {
        TemplateCatalog::from_parts(
            "xx",
            ids.iter()
                .map(|id| {
                    (
                        ClassRef {
                            class_id: id.to_string(),
                            display_name: id.replace('_', " "),
                            country: "xx".into(),
                        },
                        PathBuf::from(format!("{id}.png")),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn client(script: MockScript) -> LmmClient {
        LmmClient::new(Box::new(MockBackend::new("m", script)))
    }

    #[test]
    fn context_answer_parsing() {
        let cat = catalog(&["stop", "yield", "no_entry"]);
        let region = SignRegion::from_bbox(BBox::new(0, 0, 9, 9));
        let d = parse_context_answer("Background: an urban crossing\nCandidates: Stop; Yield; Banana", "i", region, &cat, Some(5));
        assert_eq!(d.background_text, "an urban crossing");
        let ids: Vec<_> = d.hypothesis.iter().map(|c| c.class_id.as_str()).collect();
        assert_eq!(ids, ["stop", "yield"]);
        let d = parse_context_answer("Background: x\nCandidates: Stop; Yield", "i", region, &cat, None);
        assert!(d.hypothesis.is_empty());
        let d = parse_context_answer("just prose", "i", region, &cat, Some(5));
        assert_eq!(d.background_text, "just prose");
        assert!(d.hypothesis.is_empty());
        let d = parse_context_answer("Background: x\nCandidates: Stop; Yield; No entry", "i", region, &cat, Some(2));
        assert_eq!(d.hypothesis.len(), 2);
    }

    #[test]
    fn characteristic_parsing_and_retry() {
        let c = parse_characteristic_answer("Shape: octagon | Color: red/white | Composition: STOP text", "stop").unwrap();
        assert_eq!((c.shape.as_str(), c.color.as_str(), c.composition.as_str()), ("octagon", "red/white", "STOP text"));
        assert!(parse_characteristic_answer("Shape: round", "x").is_err());

        let class = ClassRef {
            class_id: "stop".into(),
            display_name: "Stop".into(),
            country: "xx".into(),
        };
        let template = RgbImage::from_pixel(8, 8, image::Rgb([200, 0, 0]));
        let script = MockScript::default()
            .with_rule(MockRule::answer("Shape: octagon\nColor: red\nComposition: STOP").when_contains("could not be read"))
            .with_rule(MockRule::answer("a red sign"));
        let c = client(script);
        let d = gen_characteristic(&c, &template, &class).unwrap();
        assert_eq!(d.shape, "octagon");
        assert_eq!(c.backend_calls(), 2);

        let c = client(MockScript::default().with_rule(MockRule::answer("a red sign")));
        assert!(matches!(gen_characteristic(&c, &template, &class), Err(KnowledgeError::ParseFailure { .. })));
        assert_eq!(c.backend_calls(), 2);
    }

    #[test]
    fn differential_is_order_independent() {
        let cat = catalog(&["a", "b"]);
        let ch = |id: &str| CharacteristicDescription {
            class_id: id.into(),
            shape: "s".into(),
            color: "c".into(),
            composition: format!("{id} comp"),
            raw_text: format!("raw {id}"),
        };
        let (ca, cb) = (ch("a"), ch("b"));
        let a = cat.get("a").unwrap();
        let b = cat.get("b").unwrap();
        let c = client(MockScript::default().with_stage_default(StageKind::Differential, "Differences: a has more"));
        let d1 = gen_differential(&c, (a, &ca), (b, &cb)).unwrap();
        let d2 = gen_differential(&c, (b, &cb), (a, &ca)).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.pair, ClassPair::new("a", "b").unwrap());
        assert_eq!(d1.text, "a has more");
        assert!(gen_differential(&c, (a, &ca), (a, &ca)).is_err());
    }

    #[test]
    fn bank_round_trip_and_gaps() {
        let cat = catalog(&["a", "b", "c"]);
        let groups = SimilarityGroups::new(vec![vec!["a".into(), "b".into()]], &cat).unwrap();
        let mut bank = MemoryBank::new(Provenance {
            backend_id: "mock:m".into(),
            model: "m".into(),
            created_at: "2026-01-01T00:00:00Z".into(),
            prompt_version: PROMPT_VERSION.into(),
        });
        for id in ["a", "b"] {
            bank.insert_characteristic(CharacteristicDescription {
                class_id: id.into(),
                shape: "s".into(),
                color: "c".into(),
                composition: "k".into(),
                raw_text: "r".into(),
            });
        }
        bank.insert_differential(DifferentialDescription {
            pair: ClassPair::new("b", "a").unwrap(),
            text: "t".into(),
        });
        let dir = tempfile::TempDir::new().unwrap();
        let p = dir.path().join("bank.json");
        save_bank(&bank, &p).unwrap();
        assert_eq!(read_bank(&p).unwrap(), bank);
        match load_bank(&p, &cat, &groups) {
            Err(KnowledgeError::CoverageGap { missing_classes, .. }) => assert_eq!(missing_classes, ["c"]),
            other => panic!("{other:?}"),
        }
        let msg = bank.validate_coverage(&cat, &groups).unwrap_err().to_string();
        assert!(msg.contains("[c]"), "{msg}");
    }

    #[test]
    fn stale_bank_is_planned_for_regeneration() {
        let cat = catalog(&["a", "b"]);
        let groups = SimilarityGroups::new(vec![], &cat).unwrap();
        let mut bank = MemoryBank::new(Provenance {
            backend_id: "mock:m".into(),
            model: "m".into(),
            created_at: "x".into(),
            prompt_version: "old".into(),
        });
        bank.insert_characteristic(CharacteristicDescription {
            class_id: "a".into(),
            shape: "s".into(),
            color: "c".into(),
            composition: "k".into(),
            raw_text: "r".into(),
        });
        assert!(!bank.is_current());
        let plan = plan_bank(&cat, &groups, Some(&bank));
        assert!(plan.regenerate);
        assert_eq!(plan.calls(), 2);
    }
}

//! Dataset manifests, template catalogs and similarity groups.
//!
//! All three are versioned JSON documents (`"version": 1`). Relative paths
//! inside a document are resolved against the directory that contains it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, SignRegion};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_SIGN_LABEL: &str = "traffic_sign";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("schema violation in {context}: {message}")]
    SchemaViolation { context: String, message: String },
    #[error("unresolved class id `{class_id}` in {context}")]
    UnresolvedClass { class_id: String, context: String },
    #[error("template image for class `{class_id}` not found at {path}")]
    MissingTemplateImage { class_id: String, path: PathBuf },
    #[error("duplicate class id `{0}`")]
    DuplicateClassId(String),
    #[error("similarity group {index} has fewer than two distinct members: {members:?}")]
    SingletonGroup { index: usize, members: Vec<String> },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn schema(context: impl Into<String>, message: impl Into<String>) -> DatasetError {
    DatasetError::SchemaViolation {
        context: context.into(),
        message: message.into(),
    }
}

fn read_document(path: &Path) -> Result<String, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_document<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T, DatasetError> {
    serde_json::from_str(text).map_err(|e| schema(path.display().to_string(), e.to_string()))
}

fn check_version(path: &Path, version: u32) -> Result<(), DatasetError> {
    if version != FORMAT_VERSION {
        return Err(schema(
            path.display().to_string(),
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    Ok(())
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

/// `[a-z0-9_-]+`
pub fn is_valid_class_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

/// A sign class: stable slug id for metrics, display name for matching LMM answers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassRef {
    pub class_id: String,
    pub display_name: String,
    pub country: String,
}

/// Unordered pair of distinct class ids, stored sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[String; 2]", into = "[String; 2]")]
pub struct ClassPair {
    first: String,
    second: String,
}

impl ClassPair {
    /// `None` when `u == v`.
    pub fn new(u: impl Into<String>, v: impl Into<String>) -> Option<Self> {
        let (u, v) = (u.into(), v.into());
        match u.cmp(&v) {
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Less => Some(ClassPair { first: u, second: v }),
            std::cmp::Ordering::Greater => Some(ClassPair { first: v, second: u }),
        }
    }

    pub fn first(&self) -> &str {
        &self.first
    }

    pub fn second(&self) -> &str {
        &self.second
    }

    pub fn contains(&self, id: &str) -> bool {
        self.first == id || self.second == id
    }
}

impl TryFrom<[String; 2]> for ClassPair {
    type Error = String;

    fn try_from([u, v]: [String; 2]) -> Result<Self, Self::Error> {
        ClassPair::new(u.clone(), v).ok_or_else(|| format!("pair members must differ, got `{u}` twice"))
    }
}

impl From<ClassPair> for [String; 2] {
    fn from(p: ClassPair) -> Self {
        [p.first, p.second]
    }
}

impl fmt::Display for ClassPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}, {}}}", self.first, self.second)
    }
}

// ---------------------------------------------------------------------------
// Template catalog

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateCatalog {
    pub country: String,
    classes: Vec<ClassRef>,
    templates: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    version: u32,
    country: String,
    classes: Vec<CatalogClassFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogClassFile {
    class_id: String,
    display_name: String,
    template_image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    country: Option<String>,
}

impl TemplateCatalog {
    /// Build a catalog from `(class, template path)` pairs; classes end up sorted by id.
    pub fn from_parts(
        country: impl Into<String>,
        parts: Vec<(ClassRef, PathBuf)>,
    ) -> Result<Self, DatasetError> {
        let mut classes = Vec::with_capacity(parts.len());
        let mut templates = BTreeMap::new();
        for (class, path) in parts {
            if !is_valid_class_id(&class.class_id) {
                return Err(schema(
                    "catalog",
                    format!("class id `{}` must match [a-z0-9_-]+", class.class_id),
                ));
            }
            if class.display_name.trim().is_empty() {
                return Err(schema(
                    "catalog",
                    format!("class `{}` has an empty display name", class.class_id),
                ));
            }
            if templates.insert(class.class_id.clone(), path).is_some() {
                return Err(DatasetError::DuplicateClassId(class.class_id));
            }
            classes.push(class);
        }
        if classes.len() < 2 {
            return Err(schema(
                "catalog",
                format!("at least 2 classes are required, found {}", classes.len()),
            ));
        }
        classes.sort_by(|a, b| a.class_id.cmp(&b.class_id));
        Ok(TemplateCatalog {
            country: country.into(),
            classes,
            templates,
        })
    }

    pub fn classes(&self) -> &[ClassRef] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, class_id: &str) -> Option<&ClassRef> {
        self.classes
            .binary_search_by(|c| c.class_id.as_str().cmp(class_id))
            .ok()
            .map(|i| &self.classes[i])
    }

    pub fn contains(&self, class_id: &str) -> bool {
        self.get(class_id).is_some()
    }

    pub fn template_path(&self, class_id: &str) -> Option<&Path> {
        self.templates.get(class_id).map(PathBuf::as_path)
    }

    pub fn class_ids(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.class_id.as_str())
    }
}

pub fn load_template_catalog(path: &Path) -> Result<TemplateCatalog, DatasetError> {
    let text = read_document(path)?;
    let file: CatalogFile = parse_document(path, &text)?;
    check_version(path, file.version)?;
    let base = base_dir(path);
    let mut parts = Vec::with_capacity(file.classes.len());
    for c in file.classes {
        let template = resolve(&base, &c.template_image);
        parts.push((
            ClassRef {
                country: c.country.unwrap_or_else(|| file.country.clone()),
                class_id: c.class_id,
                display_name: c.display_name,
            },
            template,
        ));
    }
    let catalog = TemplateCatalog::from_parts(file.country, parts)?;
    for class in catalog.classes() {
        let p = catalog.template_path(&class.class_id).expect("template recorded");
        if !p.is_file() {
            return Err(DatasetError::MissingTemplateImage {
                class_id: class.class_id.clone(),
                path: p.to_path_buf(),
            });
        }
    }
    Ok(catalog)
}

pub fn save_template_catalog(catalog: &TemplateCatalog, path: &Path) -> Result<(), DatasetError> {
    let file = CatalogFile {
        version: FORMAT_VERSION,
        country: catalog.country.clone(),
        classes: catalog
            .classes
            .iter()
            .map(|c| CatalogClassFile {
                class_id: c.class_id.clone(),
                display_name: c.display_name.clone(),
                template_image: catalog.templates[&c.class_id].clone(),
                country: (c.country != catalog.country).then(|| c.country.clone()),
            })
            .collect(),
    };
    write_json(path, &file)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable document");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Similarity groups

/// Expert-curated sets of visually similar classes. Groups may overlap.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimilarityGroups {
    groups: Vec<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupsFile {
    version: u32,
    groups: Vec<Vec<String>>,
}

impl SimilarityGroups {
    /// Normalizes members (sorted, deduplicated) and validates them against `catalog`.
    pub fn new(raw: Vec<Vec<String>>, catalog: &TemplateCatalog) -> Result<Self, DatasetError> {
        let mut groups = Vec::with_capacity(raw.len());
        for (index, members) in raw.into_iter().enumerate() {
            for m in &members {
                if !catalog.contains(m) {
                    return Err(DatasetError::UnresolvedClass {
                        class_id: m.clone(),
                        context: format!("similarity group {index}"),
                    });
                }
            }
            let set: BTreeSet<String> = members.into_iter().collect();
            if set.len() < 2 {
                return Err(DatasetError::SingletonGroup {
                    index,
                    members: set.into_iter().collect(),
                });
            }
            groups.push(set.into_iter().collect());
        }
        Ok(SimilarityGroups { groups })
    }

    pub fn groups(&self) -> &[Vec<String>] {
        &self.groups
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Every unordered pair of distinct co-members, deduplicated across groups.
    pub fn pairs(&self) -> BTreeSet<ClassPair> {
        let mut out = BTreeSet::new();
        for g in &self.groups {
            for (i, u) in g.iter().enumerate() {
                for v in &g[i + 1..] {
                    out.extend(ClassPair::new(u.as_str(), v.as_str()));
                }
            }
        }
        out
    }

    /// Classes sharing at least one group with `class_id`, excluding itself.
    pub fn co_members(&self, class_id: &str) -> BTreeSet<&str> {
        self.groups
            .iter()
            .filter(|g| g.iter().any(|m| m == class_id))
            .flat_map(|g| g.iter().map(String::as_str))
            .filter(|m| *m != class_id)
            .collect()
    }
}

pub fn load_similarity_groups(
    path: &Path,
    catalog: &TemplateCatalog,
) -> Result<SimilarityGroups, DatasetError> {
    let text = read_document(path)?;
    let file: GroupsFile = parse_document(path, &text)?;
    check_version(path, file.version)?;
    SimilarityGroups::new(file.groups, catalog)
}

pub fn save_similarity_groups(groups: &SimilarityGroups, path: &Path) -> Result<(), DatasetError> {
    write_json(
        path,
        &GroupsFile {
            version: FORMAT_VERSION,
            groups: groups.groups.clone(),
        },
    )
}

// ---------------------------------------------------------------------------
// Manifest

/// Where the pixels for one sample come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntrySource {
    /// Road image with a color-coded segmentation mask; the sign is extracted.
    RoadWithMask { road: PathBuf, mask: PathBuf },
    /// Road image whose sign location is given by the entry's region hint.
    RoadWithHint { road: PathBuf },
    /// A sign image that has already been cut out; no scene context available.
    Precropped { sign: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub source: EntrySource,
    pub ground_truth_class: ClassRef,
    pub region_hint: Option<SignRegion>,
}

impl ManifestEntry {
    pub fn road_image_path(&self) -> Option<&Path> {
        match &self.source {
            EntrySource::RoadWithMask { road, .. } | EntrySource::RoadWithHint { road } => Some(road),
            EntrySource::Precropped { .. } => None,
        }
    }

    pub fn mask_image_path(&self) -> Option<&Path> {
        match &self.source {
            EntrySource::RoadWithMask { mask, .. } => Some(mask),
            _ => None,
        }
    }

    pub fn precropped_sign_path(&self) -> Option<&Path> {
        match &self.source {
            EntrySource::Precropped { sign } => Some(sign),
            _ => None,
        }
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            image_id: self.image_id.clone(),
            class_id: self.ground_truth_class.class_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dataset_id: String,
    /// Segmentation label whose color marks sign pixels.
    pub sign_label: String,
    /// Segmentation label → RGB color.
    pub mask_colors: BTreeMap<String, [u8; 3]>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: String,
}

/// Default segmentation palette: the Cityscapes traffic-sign color.
pub fn default_mask_colors() -> BTreeMap<String, [u8; 3]> {
    BTreeMap::from([(DEFAULT_SIGN_LABEL.to_string(), [220, 220, 0])])
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    version: u32,
    dataset_id: String,
    #[serde(default = "default_sign_label")]
    sign_label: String,
    #[serde(default = "default_mask_colors")]
    mask_colors: BTreeMap<String, [u8; 3]>,
    entries: Vec<ManifestEntryFile>,
}

fn default_sign_label() -> String {
    DEFAULT_SIGN_LABEL.to_string()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntryFile {
    image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    road_image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    precropped_sign: Option<PathBuf>,
    ground_truth_class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region_hint: Option<RegionHintFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionHintFile {
    bbox: BBox,
}

impl DatasetManifest {
    pub fn validate(&self, catalog: &TemplateCatalog) -> Result<(), DatasetError> {
        if self.dataset_id.trim().is_empty() {
            return Err(schema("manifest", "dataset_id must be non-empty"));
        }
        if !self.mask_colors.contains_key(&self.sign_label) && self.has_masks() {
            return Err(schema(
                "manifest",
                format!("mask_colors has no entry for sign label `{}`", self.sign_label),
            ));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            let ctx = format!("entry `{}`", e.image_id);
            if e.image_id.is_empty() {
                return Err(schema("manifest entry", "image_id must be non-empty"));
            }
            if !seen.insert(e.image_id.as_str()) {
                return Err(schema(ctx, "duplicate image_id"));
            }
            if catalog.get(&e.ground_truth_class.class_id) != Some(&e.ground_truth_class) {
                return Err(DatasetError::UnresolvedClass {
                    class_id: e.ground_truth_class.class_id.clone(),
                    context: ctx,
                });
            }
            if let Some(hint) = &e.region_hint {
                if !hint.bbox.is_well_formed() {
                    return Err(schema(ctx, "region_hint bbox is inverted"));
                }
                if matches!(e.source, EntrySource::Precropped { .. }) {
                    return Err(schema(ctx, "region_hint is meaningless for a precropped sign"));
                }
            }
        }
        Ok(())
    }

    pub fn has_masks(&self) -> bool {
        self.entries.iter().any(|e| e.mask_image_path().is_some())
    }

    /// True when every entry carries a road image (context descriptions possible).
    pub fn all_have_road_images(&self) -> bool {
        self.entries.iter().all(|e| e.road_image_path().is_some())
    }

    pub fn any_has_road_image(&self) -> bool {
        self.entries.iter().any(|e| e.road_image_path().is_some())
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.entries.iter().map(ManifestEntry::ground_truth).collect()
    }

    pub fn entry(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }
}

pub fn load_manifest(path: &Path, catalog: &TemplateCatalog) -> Result<DatasetManifest, DatasetError> {
    let text = read_document(path)?;
    let file: ManifestFile = parse_document(path, &text)?;
    check_version(path, file.version)?;
    let base = base_dir(path);
    let mut entries = Vec::with_capacity(file.entries.len());
    for e in file.entries {
        let ctx = format!("entry `{}`", e.image_id);
        let source = match (e.road_image, e.mask_image, e.precropped_sign) {
            (Some(road), Some(mask), None) => EntrySource::RoadWithMask {
                road: resolve(&base, &road),
                mask: resolve(&base, &mask),
            },
            (Some(road), None, None) if e.region_hint.is_some() => EntrySource::RoadWithHint {
                road: resolve(&base, &road),
            },
            (None, None, Some(sign)) => EntrySource::Precropped {
                sign: resolve(&base, &sign),
            },
            (_, _, Some(_)) => {
                return Err(schema(
                    ctx,
                    "precropped_sign is exclusive with road_image/mask_image",
                ))
            }
            (None, Some(_), None) => return Err(schema(ctx, "mask_image requires road_image")),
            (Some(_), None, None) => {
                return Err(schema(ctx, "road_image requires mask_image or region_hint"))
            }
            (None, None, None) => {
                return Err(schema(
                    ctx,
                    "one of road_image+mask_image or precropped_sign is required",
                ))
            }
        };
        let ground_truth_class =
            catalog
                .get(&e.ground_truth_class)
                .cloned()
                .ok_or_else(|| DatasetError::UnresolvedClass {
                    class_id: e.ground_truth_class.clone(),
                    context: ctx.clone(),
                })?;
        entries.push(ManifestEntry {
            image_id: e.image_id,
            source,
            ground_truth_class,
            region_hint: e.region_hint.map(|h| SignRegion::from_bbox(h.bbox)),
        });
    }
    let manifest = DatasetManifest {
        dataset_id: file.dataset_id,
        sign_label: file.sign_label,
        mask_colors: file.mask_colors,
        entries,
    };
    manifest.validate(catalog)?;
    Ok(manifest)
}

/// Writes `manifest` with its (already resolved) paths verbatim.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let file = ManifestFile {
        version: FORMAT_VERSION,
        dataset_id: manifest.dataset_id.clone(),
        sign_label: manifest.sign_label.clone(),
        mask_colors: manifest.mask_colors.clone(),
        entries: manifest
            .entries
            .iter()
            .map(|e| ManifestEntryFile {
                image_id: e.image_id.clone(),
                road_image: e.road_image_path().map(Path::to_path_buf),
                mask_image: e.mask_image_path().map(Path::to_path_buf),
                precropped_sign: e.precropped_sign_path().map(Path::to_path_buf),
                ground_truth_class: e.ground_truth_class.class_id.clone(),
                region_hint: e.region_hint.map(|r| RegionHintFile { bbox: r.bbox }),
            })
            .collect(),
    };
    write_json(path, &file)
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Reference converter for a folder-of-crops layout: `root/<class_id>/<file>.png`.
///
/// Every image becomes a precropped entry with `image_id = "<class_id>_<file stem>"`.
/// Directories that are not catalog classes are rejected.
pub fn manifest_from_crop_folders(
    root: &Path,
    dataset_id: &str,
    catalog: &TemplateCatalog,
) -> Result<DatasetManifest, DatasetError> {
    let io = |source| DatasetError::Io {
        path: root.to_path_buf(),
        source,
    };
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io)?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut entries = Vec::new();
    for dir in dirs {
        let class_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let class = catalog
            .get(&class_id)
            .cloned()
            .ok_or_else(|| DatasetError::UnresolvedClass {
                class_id: class_id.clone(),
                context: format!("folder {}", dir.display()),
            })?;
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|source| DatasetError::Io {
                path: dir.clone(),
                source,
            })?
            .filter_map(|d| d.ok().map(|d| d.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        for f in files {
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            entries.push(ManifestEntry {
                image_id: format!("{class_id}_{stem}"),
                source: EntrySource::Precropped { sign: f.clone() },
                ground_truth_class: class.clone(),
                region_hint: None,
            });
        }
    }
    let manifest = DatasetManifest {
        dataset_id: dataset_id.to_string(),
        sign_label: default_sign_label(),
        mask_colors: default_mask_colors(),
        entries,
    };
    manifest.validate(catalog)?;
    Ok(manifest)
}

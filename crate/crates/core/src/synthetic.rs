//! Seeded synthetic dataset: drawn sign templates, road scenes with
//! matching segmentation masks, and a mock script that answers every
//! recognition prompt with the ground truth.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{
    default_mask_colors, save_manifest, save_similarity_groups, save_template_catalog, ClassRef, DatasetError,
    DatasetManifest, EntrySource, ManifestEntry, SimilarityGroups, TemplateCatalog, DEFAULT_SIGN_LABEL,
};
use crate::eval::prepare_samples;
use crate::extraction::{save_png, ExtractionConfig, ExtractionError};
use crate::geometry::{BBox, SignRegion};
use crate::lmm::{FakeClock, ImageAttachment, MockRule, MockScript, StageKind};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Image(#[from] ExtractionError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sample {image_id} could not be prepared: {message}")]
    Prepare { image_id: String, message: String },
    #[error("between 2 and {max} classes are supported, got {got}")]
    ClassCount { got: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Circle,
    Square,
    Diamond,
    TriangleUp,
    TriangleDown,
    Octagon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mark {
    None,
    HBar,
    VBar,
    Dot,
    Cross,
}

struct Design {
    id: &'static str,
    name: &'static str,
    shape: Shape,
    fill: [u8; 3],
    mark: Mark,
    mark_color: [u8; 3],
}

const RED: [u8; 3] = [200, 30, 40];
const BLUE: [u8; 3] = [30, 70, 190];
const WHITE: [u8; 3] = [245, 245, 245];
const YELLOW: [u8; 3] = [250, 200, 20];
const BLACK: [u8; 3] = [15, 15, 15];

const DESIGNS: [Design; 10] = [
    Design { id: "no_entry", name: "No entry", shape: Shape::Circle, fill: RED, mark: Mark::HBar, mark_color: WHITE },
    Design { id: "no_parking", name: "No parking", shape: Shape::Circle, fill: BLUE, mark: Mark::Cross, mark_color: RED },
    Design { id: "keep_right", name: "Keep right", shape: Shape::Circle, fill: BLUE, mark: Mark::VBar, mark_color: WHITE },
    Design { id: "roundabout", name: "Roundabout", shape: Shape::Circle, fill: BLUE, mark: Mark::Dot, mark_color: WHITE },
    Design { id: "give_way", name: "Give way", shape: Shape::TriangleDown, fill: WHITE, mark: Mark::None, mark_color: RED },
    Design { id: "priority_road", name: "Priority road", shape: Shape::Diamond, fill: YELLOW, mark: Mark::Dot, mark_color: WHITE },
    Design { id: "general_danger", name: "General danger", shape: Shape::TriangleUp, fill: WHITE, mark: Mark::VBar, mark_color: BLACK },
    Design { id: "pedestrian_crossing", name: "Pedestrian crossing", shape: Shape::Square, fill: BLUE, mark: Mark::VBar, mark_color: WHITE },
    Design { id: "dead_end", name: "Dead end", shape: Shape::Square, fill: BLUE, mark: Mark::HBar, mark_color: WHITE },
    Design { id: "halt", name: "Halt", shape: Shape::Octagon, fill: RED, mark: Mark::HBar, mark_color: WHITE },
];

const GROUPS: [&[&str]; 3] = [
    &["keep_right", "no_parking", "roundabout"],
    &["dead_end", "pedestrian_crossing"],
    &["halt", "no_entry"],
];

pub const MAX_CLASSES: usize = DESIGNS.len();

fn shape_contains(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Circle => u * u + v * v <= 1.0,
        Shape::Square => u.abs() <= 0.9 && v.abs() <= 0.9,
        Shape::Diamond => u.abs() + v.abs() <= 1.0,
        Shape::TriangleUp => (-1.0..=0.9).contains(&v) && u.abs() <= (v + 1.0) / 1.9,
        Shape::TriangleDown => (-0.9..=1.0).contains(&v) && u.abs() <= (1.0 - v) / 1.9,
        Shape::Octagon => u.abs() <= 0.92 && v.abs() <= 0.92 && u.abs() + v.abs() <= 1.3,
    }
}

fn mark_contains(mark: Mark, u: f64, v: f64) -> bool {
    let hbar = v.abs() < 0.18 && u.abs() < 0.55;
    let vbar = u.abs() < 0.18 && v.abs() < 0.55;
    match mark {
        Mark::None => false,
        Mark::HBar => hbar,
        Mark::VBar => vbar,
        Mark::Dot => u * u + v * v < 0.1,
        Mark::Cross => hbar || vbar,
    }
}

/// Paints `design` into the `size`×`size` square at (x0, y0); returns the painted pixels.
fn paint(
    img: &mut RgbImage,
    design: &Design,
    x0: u32,
    y0: u32,
    size: u32,
    rng: Option<&mut ChaCha8Rng>,
) -> Vec<(u32, u32)> {
    let mut painted = Vec::new();
    let mut rng = rng;
    let half = f64::from(size) / 2.0;
    for dy in 0..size {
        for dx in 0..size {
            let u = (f64::from(dx) + 0.5 - half) / half;
            let v = (f64::from(dy) + 0.5 - half) / half;
            if !shape_contains(design.shape, u, v) {
                continue;
            }
            let base = if mark_contains(design.mark, u, v) {
                design.mark_color
            } else {
                design.fill
            };
            let color = match rng.as_deref_mut() {
                Some(r) => base.map(|c| (i16::from(c) + r.random_range(-8i16..=8)).clamp(0, 255) as u8),
                None => base,
            };
            let (x, y) = (x0 + dx, y0 + dy);
            img.put_pixel(x, y, Rgb(color));
            painted.push((x, y));
        }
    }
    painted
}

fn bbox_of(pixels: &[(u32, u32)]) -> BBox {
    let xs = pixels.iter().map(|p| p.0);
    let ys = pixels.iter().map(|p| p.1);
    BBox::new(
        xs.clone().min().unwrap_or(0),
        ys.clone().min().unwrap_or(0),
        xs.max().unwrap_or(0),
        ys.max().unwrap_or(0),
    )
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    /// Must match the longest-side limit the evaluating client uses.
    pub max_image_side: u32,
    pub extraction: ExtractionConfig,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 10,
            images_per_class: 2,
            seed: 7,
            width: 160,
            height: 120,
            max_image_side: 768,
            extraction: ExtractionConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub root: PathBuf,
    pub catalog_path: PathBuf,
    pub groups_path: PathBuf,
    pub manifest_path: PathBuf,
    pub script_path: PathBuf,
    pub catalog: TemplateCatalog,
    pub groups: SimilarityGroups,
    pub manifest: DatasetManifest,
    pub script: MockScript,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn shape_word(s: Shape) -> &'static str {
    match s {
        Shape::Circle => "circle",
        Shape::Square => "square",
        Shape::Diamond => "diamond standing on one corner",
        Shape::TriangleUp => "triangle pointing up",
        Shape::TriangleDown => "triangle pointing down",
        Shape::Octagon => "octagon",
    }
}

fn color_word(c: [u8; 3]) -> &'static str {
    match c {
        RED => "red",
        BLUE => "blue",
        WHITE => "white",
        YELLOW => "yellow",
        _ => "black",
    }
}

fn mark_word(m: Mark) -> &'static str {
    match m {
        Mark::None => "plain face without symbols",
        Mark::HBar => "a horizontal bar across the center",
        Mark::VBar => "a vertical bar through the center",
        Mark::Dot => "a round dot in the center",
        Mark::Cross => "a cross in the center",
    }
}

/// Writes the dataset under `root` and returns it with paths and a mock script.
pub fn generate(root: &Path, spec: &SyntheticSpec) -> Result<SyntheticDataset, SynthError> {
    if !(2..=MAX_CLASSES).contains(&spec.n_classes) {
        return Err(SynthError::ClassCount {
            got: spec.n_classes,
            max: MAX_CLASSES,
        });
    }
    let designs = &DESIGNS[..spec.n_classes];
    for dir in ["templates", "images", "masks"] {
        let p = root.join(dir);
        std::fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut parts = Vec::new();
    for d in designs {
        let mut t = RgbImage::from_pixel(64, 64, Rgb([255, 255, 255]));
        paint(&mut t, d, 4, 4, 56, None);
        let path = root.join("templates").join(format!("{}.png", d.id));
        save_png(&t, &path)?;
        parts.push((
            ClassRef {
                class_id: d.id.to_string(),
                display_name: d.name.to_string(),
                country: "synthetic".into(),
            },
            path,
        ));
    }
    let catalog = TemplateCatalog::from_parts("synthetic", parts)?;
    let raw_groups: Vec<Vec<String>> = GROUPS
        .iter()
        .map(|g| g.iter().filter(|id| catalog.contains(id)).map(|s| s.to_string()).collect::<Vec<_>>())
        .filter(|g| g.len() >= 2)
        .collect();
    let groups = SimilarityGroups::new(raw_groups, &catalog)?;

    let (w, h) = (spec.width, spec.height);
    let sign_color = default_mask_colors()[DEFAULT_SIGN_LABEL];
    let mut entries = Vec::new();
    let mut targets = BTreeMap::new();
    for round in 0..spec.images_per_class {
        for (ci, d) in designs.iter().enumerate() {
            let image_id = format!("syn_{:03}", entries.len());
            let mut road = RgbImage::from_fn(w, h, |_, y| {
                if y < h / 2 {
                    Rgb([150, 180, 215])
                } else {
                    Rgb([95, 95, 100])
                }
            });
            for p in road.pixels_mut() {
                let n: i16 = rng.random_range(-12..=12);
                *p = Rgb(p.0.map(|c| (i16::from(c) + n).clamp(0, 255) as u8));
            }
            let mut mask = RgbImage::new(w, h);
            let left = rng.random_bool(0.5);
            let half_w = w / 2;
            let size = rng.random_range(24..=34u32);
            let x_lo = if left { 4 } else { half_w + 2 };
            let x0 = rng.random_range(x_lo..=x_lo + half_w - size - 8);
            let y0 = rng.random_range(4..=h - size - 4);
            let pixels = paint(&mut road, d, x0, y0, size, Some(&mut rng));
            for &(x, y) in &pixels {
                mask.put_pixel(x, y, Rgb(sign_color));
            }
            let target = bbox_of(&pixels);
            if (round + ci) % 2 == 1 {
                let other = &designs[(ci + 1 + round) % designs.len()];
                let dsize = rng.random_range(14..=18u32);
                let dx_lo = if left { half_w + 2 } else { 4 };
                let dx0 = rng.random_range(dx_lo..=dx_lo + half_w - dsize - 8);
                let dy0 = rng.random_range(4..=h - dsize - 4);
                for (x, y) in paint(&mut road, other, dx0, dy0, dsize, Some(&mut rng)) {
                    mask.put_pixel(x, y, Rgb(sign_color));
                }
            }
            let road_path = root.join("images").join(format!("{image_id}.png"));
            let mask_path = root.join("masks").join(format!("{image_id}.png"));
            save_png(&road, &road_path)?;
            save_png(&mask, &mask_path)?;
            targets.insert(image_id.clone(), (ci, road));
            entries.push(ManifestEntry {
                image_id,
                source: EntrySource::RoadWithMask {
                    road: road_path,
                    mask: mask_path,
                },
                ground_truth_class: catalog.get(d.id).expect("catalog class").clone(),
                region_hint: Some(SignRegion::from_bbox(target)),
            });
        }
    }
    let manifest = DatasetManifest {
        dataset_id: format!("synthetic-{}x{}", spec.n_classes, spec.images_per_class),
        sign_label: DEFAULT_SIGN_LABEL.to_string(),
        mask_colors: default_mask_colors(),
        entries,
    };

    let (samples, failed) = prepare_samples(&manifest, &spec.extraction, &FakeClock::new(), 1);
    if let Some((image_id, message)) = failed.into_iter().next() {
        return Err(SynthError::Prepare { image_id, message });
    }
    let mut script = MockScript::default()
        .with_stage_default(StageKind::Context, "Background: a two-lane road with a traffic sign at the roadside.")
        .with_stage_default(
            StageKind::Differential,
            "Differences: the two signs differ in the symbol drawn at their center.",
        );
    for d in designs {
        script = script.with_rule(
            MockRule::answer(format!(
                "Shape: {}\nColor: {} face\nComposition: {}",
                shape_word(d.shape),
                color_word(d.fill),
                mark_word(d.mark)
            ))
            .on_stage(StageKind::Characteristic)
            .when_contains(format!("\"{}\"", d.name)),
        );
    }
    for s in &samples {
        let (ci, road) = &targets[&s.image_id];
        let d = &designs[*ci];
        let mut ranked = vec![d.name];
        ranked.extend(groups.co_members(d.id).into_iter().filter_map(|id| catalog.get(id)).map(|c| c.display_name.as_str()));
        for other in designs {
            if ranked.len() >= 5 {
                break;
            }
            if !ranked.contains(&other.name) {
                ranked.push(other.name);
            }
        }
        let listing: String = ranked
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{}. {n}\n", i + 1))
            .collect();
        let crop_digest = ImageAttachment::png(&s.crop).digest();
        script = script.with_rule(
            MockRule::answer(format!(
                "The sign is a {} {} with {}.\nAnswer:\n{listing}",
                color_word(d.fill),
                shape_word(d.shape),
                mark_word(d.mark)
            ))
            .on_stage(StageKind::Multistep)
            .when_image(crop_digest),
        );
        let road_digest = ImageAttachment::png_downscaled(road, spec.max_image_side).digest();
        script = script.with_rule(
            MockRule::answer(format!(
                "Background: a two-lane road with parked cars and a sign post at the edge.\nCandidates: {}",
                ranked[..ranked.len().min(2)].join("; ")
            ))
            .on_stage(StageKind::Context)
            .when_image(road_digest),
        );
    }

    let catalog_path = root.join("catalog.json");
    let groups_path = root.join("groups.json");
    let manifest_path = root.join("manifest.json");
    let script_path = root.join("mock_script.json");
    save_template_catalog(&catalog, &catalog_path)?;
    save_similarity_groups(&groups, &groups_path)?;
    save_manifest(&manifest, &manifest_path)?;
    script.save(&script_path).map_err(io_err(&script_path))?;
    Ok(SyntheticDataset {
        root: root.to_path_buf(),
        catalog_path,
        groups_path,
        manifest_path,
        script_path,
        catalog,
        groups,
        manifest,
        script,
    })
}

#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsr_core::dataset::{ClassRef, GroundTruth, SimilarityGroups, TemplateCatalog};
use tsr_core::eval::prepare_samples;
use tsr_core::extraction::{BinaryMask, ExtractionConfig};
use tsr_core::geometry::BBox;
use tsr_core::knowledge::{build_bank, BuildOptions, MemoryBank};
use tsr_core::lmm::{
    CallError, Clock, Completion, FakeClock, LmmBackend, LmmClient, LmmRequest, MockBackend, MockScript,
};
use tsr_core::recognizer::{RecognitionResult, Sample};
use tsr_core::synthetic::{generate, SyntheticDataset, SyntheticSpec};

/// 8-connected components by breadth-first search, each with its bounding
/// box and the number of pixels it encloses (its own pixels plus holes).
pub fn flood_components(mask: &BinaryMask) -> Vec<(BBox, u64)> {
    let (w, h) = mask.dimensions();
    let mut label = vec![usize::MAX; (w * h) as usize];
    let mut out = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if !mask.get(x0, y0) || label[(y0 * w + x0) as usize] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut pixels = Vec::new();
            let mut queue = VecDeque::from([(x0, y0)]);
            label[(y0 * w + x0) as usize] = id;
            while let Some((x, y)) = queue.pop_front() {
                pixels.push((x, y));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as u32, ny as u32);
                        let idx = (ny * w + nx) as usize;
                        if mask.get(nx, ny) && label[idx] == usize::MAX {
                            label[idx] = id;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            let bbox = BBox::new(
                pixels.iter().map(|p| p.0).min().unwrap(),
                pixels.iter().map(|p| p.1).min().unwrap(),
                pixels.iter().map(|p| p.0).max().unwrap(),
                pixels.iter().map(|p| p.1).max().unwrap(),
            );
            let enclosed = enclosed_area(&pixels, bbox);
            out.push((bbox, enclosed));
        }
    }
    out
}

/// Pixels of the bbox not reachable from outside it through 4-connected
/// non-component pixels.
fn enclosed_area(pixels: &[(u32, u32)], b: BBox) -> u64 {
    let gw = (b.width() + 2) as usize;
    let gh = (b.height() + 2) as usize;
    let mut wall = vec![false; gw * gh];
    for &(x, y) in pixels {
        wall[(y - b.y_min + 1) as usize * gw + (x - b.x_min + 1) as usize] = true;
    }
    let mut outside = vec![false; gw * gh];
    let mut queue = VecDeque::from([(0usize, 0usize)]);
    outside[0] = true;
    while let Some((x, y)) = queue.pop_front() {
        let mut push = |nx: usize, ny: usize| {
            let i = ny * gw + nx;
            if !wall[i] && !outside[i] {
                outside[i] = true;
                queue.push_back((nx, ny));
            }
        };
        if x > 0 {
            push(x - 1, y);
        }
        if y > 0 {
            push(x, y - 1);
        }
        if x + 1 < gw {
            push(x + 1, y);
        }
        if y + 1 < gh {
            push(x, y + 1);
        }
    }
    (gw * gh - outside.iter().filter(|o| **o).count()) as u64
}

/// Random mask mixing noise, filled rectangles, rings and discs.
pub fn random_mask(rng: &mut ChaCha8Rng) -> BinaryMask {
    let w = rng.random_range(1..=128u32);
    let h = rng.random_range(1..=128u32);
    let mut m = BinaryMask::new(w, h);
    let density: f64 = rng.random_range(0.0..0.5);
    if rng.random_bool(0.5) {
        for y in 0..h {
            for x in 0..w {
                if rng.random_bool(density) {
                    m.set(x, y, true);
                }
            }
        }
    }
    for _ in 0..rng.random_range(0..8) {
        let x0 = rng.random_range(0..w);
        let y0 = rng.random_range(0..h);
        let x1 = rng.random_range(x0..w);
        let y1 = rng.random_range(y0..h);
        let kind = rng.random_range(0..3);
        let (cx, cy) = ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0);
        let r = ((x1 - x0).min(y1 - y0) as f64 / 2.0).max(0.5);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let on = match kind {
                    0 => true,
                    1 => x == x0 || x == x1 || y == y0 || y == y1,
                    _ => d <= r && d >= r * 0.5,
                };
                if on {
                    m.set(x, y, true);
                }
            }
        }
    }
    m
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Ranked-answer fixture and its brute-force Top-k count.
pub fn brute_topk(results: &[RecognitionResult], truth: &[GroundTruth], k: usize) -> f64 {
    let mut hits = 0usize;
    for t in truth {
        let r = results.iter().find(|r| r.image_id == t.image_id).unwrap();
        let mut found = false;
        for (rank, c) in r.ranked.iter().enumerate() {
            if rank < k && c.class_id == t.class_id {
                found = true;
            }
        }
        if found {
            hits += 1;
        }
    }
    hits as f64 / truth.len() as f64
}

pub fn class(id: &str) -> ClassRef {
    ClassRef {
        class_id: id.to_string(),
        display_name: id.to_string(),
        country: "xx".into(),
    }
}

/// Catalog whose template images are written into `dir`.
pub fn catalog_with_templates(dir: &Path, names: &[(&str, &str)]) -> TemplateCatalog {
    let parts = names
        .iter()
        .enumerate()
        .map(|(i, (id, name))| {
            let p = dir.join(format!("{id}.png"));
            RgbImage::from_pixel(16, 16, Rgb([(i * 20) as u8, 100, 200])).save(&p).unwrap();
            (
                ClassRef {
                    class_id: id.to_string(),
                    display_name: name.to_string(),
                    country: "xx".into(),
                },
                p,
            )
        })
        .collect();
    TemplateCatalog::from_parts("xx", parts).unwrap()
}

/// Backend wrapper that records every request and the clock time it arrived.
pub struct Recording {
    inner: Box<dyn LmmBackend>,
    clock: Option<Arc<dyn Clock>>,
    pub log: Arc<Mutex<Vec<(std::time::Duration, LmmRequest)>>>,
}

impl Recording {
    pub fn new(inner: Box<dyn LmmBackend>, clock: Option<Arc<dyn Clock>>) -> Self {
        Recording {
            inner,
            clock,
            log: Arc::new(Mutex::new(Vec::new())),
        }
    }
}

impl LmmBackend for Recording {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn model(&self) -> &str {
        self.inner.model()
    }
    fn call(&self, req: &LmmRequest) -> Result<Completion, CallError> {
        let t = self.clock.as_ref().map(|c| c.now()).unwrap_or_default();
        self.log.lock().unwrap().push((t, req.clone()));
        self.inner.call(req)
    }
}

pub type RequestLog = Arc<Mutex<Vec<(std::time::Duration, LmmRequest)>>>;

/// Mock client over `script` that records requests, on a fake clock.
pub fn recording_client(script: MockScript) -> (LmmClient, RequestLog) {
    let rec = Recording::new(Box::new(MockBackend::new("mock", script)), None);
    let log = rec.log.clone();
    let client = LmmClient::new(Box::new(rec)).with_clock(Arc::new(FakeClock::new()));
    (client, log)
}

/// A generated synthetic dataset with its bank built and samples prepared.
pub struct SyntheticEnv {
    pub ds: SyntheticDataset,
    pub bank: MemoryBank,
    pub samples: Vec<Sample>,
    pub truth: Vec<GroundTruth>,
}

pub fn synthetic_env(dir: &Path) -> SyntheticEnv {
    let ds = generate(dir, &SyntheticSpec::default()).unwrap();
    let client = LmmClient::new(Box::new(MockBackend::new("mock", ds.script.clone())));
    let bank = build_bank(&client, &ds.catalog, &ds.groups, None, &BuildOptions::default())
        .unwrap()
        .bank;
    let (samples, failed) = prepare_samples(&ds.manifest, &ExtractionConfig::default(), &FakeClock::new(), 2);
    assert!(failed.is_empty(), "{failed:?}");
    let truth = ds.manifest.ground_truth();
    SyntheticEnv {
        ds,
        bank,
        samples,
        truth,
    }
}

pub fn groups(catalog: &TemplateCatalog, raw: &[&[&str]]) -> SimilarityGroups {
    SimilarityGroups::new(
        raw.iter().map(|g| g.iter().map(|s| s.to_string()).collect()).collect(),
        catalog,
    )
    .unwrap()
}

/// Brute-force pair enumeration over group members.
pub fn brute_pairs(raw: &[&[&str]]) -> Vec<(String, String)> {
    let mut set = BTreeMap::new();
    for g in raw {
        for a in g.iter() {
            for b in g.iter() {
                if a < b {
                    set.insert((a.to_string(), b.to_string()), ());
                }
            }
        }
    }
    set.into_keys().collect()
}

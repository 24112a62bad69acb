//! Sign extraction: color-coded segmentation image → binary mask → outer
//! contours → regions, a background-removed composite and padded crops.

mod contour;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, SignRegion};

pub use contour::{trace_contours, Contour};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("label `{0}` is not in the mask color map")]
    UnknownLabel(String),
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error("region {bbox:?} lies outside the {width}x{height} image")]
    RegionOutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("cannot read image {path}: {message}")]
    ImageRead { path: PathBuf, message: String },
    #[error("cannot write {path}: {message}")]
    Write { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub min_area: u64,
    pub padding: u32,
    pub fill: [u8; 3],
    /// Per-channel tolerance when matching the sign label color.
    pub color_tolerance: u8,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            min_area: 64,
            padding: 4,
            fill: [0, 0, 0],
            color_tolerance: 0,
        }
    }
}

/// A color-coded segmentation image with its label palette.
#[derive(Debug, Clone)]
pub struct MaskImage {
    pub pixels: RgbImage,
    pub class_color_map: BTreeMap<String, [u8; 3]>,
}

impl MaskImage {
    pub fn new(pixels: RgbImage, class_color_map: BTreeMap<String, [u8; 3]>) -> Self {
        MaskImage {
            pixels,
            class_color_map,
        }
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.pixels.dimensions()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        BinaryMask {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Foreground iff the pixel color equals the label's color exactly.
pub fn binarize_mask(mask: &MaskImage, label: &str) -> Result<BinaryMask, ExtractionError> {
    binarize_mask_with_tolerance(mask, label, 0)
}

pub fn binarize_mask_with_tolerance(
    mask: &MaskImage,
    label: &str,
    tolerance: u8,
) -> Result<BinaryMask, ExtractionError> {
    let color = *mask
        .class_color_map
        .get(label)
        .ok_or_else(|| ExtractionError::UnknownLabel(label.to_string()))?;
    let (w, h) = mask.dimensions();
    Ok(BinaryMask::from_fn(w, h, |x, y| {
        let p = mask.pixels.get_pixel(x, y).0;
        p.iter().zip(color).all(|(&a, b)| a.abs_diff(b) <= tolerance)
    }))
}

/// Bounding boxes and centers of the contours whose filled area reaches `min_area`.
pub fn regions_from_contours(contours: &[Contour], min_area: u64) -> Vec<SignRegion> {
    contours
        .iter()
        .map(Contour::region)
        .filter(|r| r.area_px >= min_area)
        .collect()
}

/// Union of the filled interiors of `contours`.
pub fn fill_contours<'a>(
    contours: impl IntoIterator<Item = &'a Contour>,
    width: u32,
    height: u32,
) -> BinaryMask {
    let mut out = BinaryMask::new(width, height);
    for c in contours {
        let (bbox, bits) = c.filled_bitmap();
        let bw = bbox.width() as usize;
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            let x = bbox.x_min + (i % bw) as u32;
            let y = bbox.y_min + (i / bw) as u32;
            out.set(x, y, true);
        }
    }
    out
}

/// Road pixels where `mask` is set, `fill` everywhere else.
pub fn compose_foreground(
    road: &RgbImage,
    mask: &BinaryMask,
    fill: [u8; 3],
) -> Result<RgbImage, ExtractionError> {
    if road.dimensions() != mask.dimensions() {
        return Err(ExtractionError::DimensionMismatch {
            expected: road.dimensions(),
            actual: mask.dimensions(),
        });
    }
    Ok(RgbImage::from_fn(road.width(), road.height(), |x, y| {
        if mask.get(x, y) {
            *road.get_pixel(x, y)
        } else {
            Rgb(fill)
        }
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignCrop {
    pub image_id: String,
    pub region: SignRegion,
    pub image: RgbImage,
}

/// Cuts the region's bbox, grown by `padding` and clamped to the image, out of `source`.
pub fn crop_sign(
    source: &RgbImage,
    image_id: &str,
    region: &SignRegion,
    padding: u32,
) -> Result<SignCrop, ExtractionError> {
    let (w, h) = source.dimensions();
    if !region.bbox.fits_within(w, h) {
        return Err(ExtractionError::RegionOutOfBounds {
            bbox: region.bbox,
            width: w,
            height: h,
        });
    }
    let b = region.bbox.expand_clamped(padding, w, h);
    let image = image::imageops::crop_imm(source, b.x_min, b.y_min, b.width(), b.height()).to_image();
    Ok(SignCrop {
        image_id: image_id.to_string(),
        region: *region,
        image,
    })
}

/// Everything the extraction step produces for one road image.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub regions: Vec<SignRegion>,
    pub composite: RgbImage,
    pub crops: Vec<SignCrop>,
}

/// Full extraction for one road image and its segmentation image.
pub fn extract_signs(
    image_id: &str,
    road: &RgbImage,
    mask: &MaskImage,
    sign_label: &str,
    cfg: &ExtractionConfig,
) -> Result<Extraction, ExtractionError> {
    if road.dimensions() != mask.dimensions() {
        return Err(ExtractionError::DimensionMismatch {
            expected: road.dimensions(),
            actual: mask.dimensions(),
        });
    }
    let binary = binarize_mask_with_tolerance(mask, sign_label, cfg.color_tolerance)?;
    let contours = trace_contours(&binary);
    let kept: Vec<(&Contour, SignRegion)> = contours
        .iter()
        .map(|c| (c, c.region()))
        .filter(|(_, r)| r.area_px >= cfg.min_area)
        .collect();
    let filled = fill_contours(kept.iter().map(|(c, _)| *c), road.width(), road.height());
    let composite = compose_foreground(road, &filled, cfg.fill)?;
    let regions: Vec<SignRegion> = kept.into_iter().map(|(_, r)| r).collect();
    let crops = regions
        .iter()
        .map(|r| crop_sign(&composite, image_id, r, cfg.padding))
        .collect::<Result<_, _>>()?;
    Ok(Extraction {
        regions,
        composite,
        crops,
    })
}

/// Picks the target region: best IoU with `hint` when given, otherwise the
/// largest region (earliest in raster order on ties).
pub fn select_target(regions: &[SignRegion], hint: Option<&SignRegion>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in regions.iter().enumerate() {
        let score = match hint {
            Some(h) => r.bbox.iou(&h.bbox),
            None => r.area_px as f64,
        };
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((i, score));
        }
    }
    match (best, hint) {
        (Some((_, s)), Some(_)) if s <= 0.0 => None,
        (b, _) => b.map(|(i, _)| i),
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, ExtractionError> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| ExtractionError::ImageRead {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<(), ExtractionError> {
    let err = |e: String| ExtractionError::Write {
        path: path.to_path_buf(),
        message: e,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| err(e.to_string()))?;
    }
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| err(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub index: usize,
    pub bbox: BBox,
    pub center: (u32, u32),
    pub area_px: u64,
    pub crop: String,
}

/// Per-image sidecar listing the extracted regions and their crop files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionsSidecar {
    pub version: u32,
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub regions: Vec<RegionRecord>,
}

pub fn crop_file_name(image_id: &str, index: usize) -> String {
    format!("{image_id}_{index}.png")
}

/// Writes `{image_id}_{index}.png` crops and `{image_id}.regions.json` into `dir`.
pub fn write_extraction(
    dir: &Path,
    image_id: &str,
    extraction: &Extraction,
) -> Result<RegionsSidecar, ExtractionError> {
    let mut records = Vec::with_capacity(extraction.crops.len());
    for (index, crop) in extraction.crops.iter().enumerate() {
        let name = crop_file_name(image_id, index);
        save_png(&crop.image, &dir.join(&name))?;
        records.push(RegionRecord {
            index,
            bbox: crop.region.bbox,
            center: crop.region.center,
            area_px: crop.region.area_px,
            crop: name,
        });
    }
    let sidecar = RegionsSidecar {
        version: 1,
        image_id: image_id.to_string(),
        width: extraction.composite.width(),
        height: extraction.composite.height(),
        regions: records,
    };
    let path = dir.join(format!("{image_id}.regions.json"));
    let mut text = serde_json::to_string_pretty(&sidecar).expect("serializable sidecar");
    text.push('\n');
    crate::dataset::write_atomic(&path, text.as_bytes()).map_err(|e| ExtractionError::Write {
        path: path.clone(),
        message: e.to_string(),
    })?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_mask(w: u32, h: u32, b: BBox) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| b.contains(x, y))
    }

    fn road(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn binarize_exact_color() {
        let mut px = RgbImage::new(4, 4);
        px.put_pixel(1, 2, Rgb([0, 220, 220]));
        px.put_pixel(3, 3, Rgb([0, 220, 221]));
        let map = BTreeMap::from([("traffic_sign".to_string(), [0, 220, 220])]);
        let mask = MaskImage::new(px, map);
        let b = binarize_mask(&mask, "traffic_sign").unwrap();
        assert!(b.get(1, 2));
        assert!(!b.get(3, 3));
        assert_eq!(b.count(), 1);
        assert_eq!(binarize_mask_with_tolerance(&mask, "traffic_sign", 1).unwrap().count(), 2);
        assert!(matches!(
            binarize_mask(&mask, "bicycle"),
            Err(ExtractionError::UnknownLabel(l)) if l == "bicycle"
        ));
    }

    #[test]
    fn all_background_mask_is_all_false() {
        let map = BTreeMap::from([("traffic_sign".to_string(), [0, 220, 220])]);
        let mask = MaskImage::new(RgbImage::new(5, 3), map);
        assert_eq!(binarize_mask(&mask, "traffic_sign").unwrap().count(), 0);
    }

    #[test]
    fn square_region_and_center() {
        let m = square_mask(32, 32, BBox::new(5, 5, 14, 14));
        let contours = trace_contours(&m);
        assert_eq!(contours.len(), 1);
        let regions = regions_from_contours(&contours, 1);
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].bbox, BBox::new(5, 5, 14, 14));
        assert_eq!(regions[0].center, (10, 10));
        assert_eq!(regions[0].area_px, 100);
    }

    #[test]
    fn speck_below_min_area_dropped() {
        let m = square_mask(10, 10, BBox::new(2, 2, 3, 3));
        let contours = trace_contours(&m);
        assert!(regions_from_contours(&contours, 9).is_empty());
        assert_eq!(regions_from_contours(&contours, 4).len(), 1);
        assert!(regions_from_contours(&[], 1).is_empty());
    }

    #[test]
    fn compose_identity_and_fill() {
        let r = road(6, 4);
        let all = BinaryMask::from_fn(6, 4, |_, _| true);
        assert_eq!(compose_foreground(&r, &all, [0, 0, 0]).unwrap(), r);
        let none = BinaryMask::new(6, 4);
        let c = compose_foreground(&r, &none, [9, 8, 7]).unwrap();
        assert!(c.pixels().all(|p| p.0 == [9, 8, 7]));
        assert!(matches!(
            compose_foreground(&r, &BinaryMask::new(5, 4), [0, 0, 0]),
            Err(ExtractionError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn compose_checkerboard_matches_pixelwise_select() {
        let r = road(9, 7);
        let m = BinaryMask::from_fn(9, 7, |x, y| (x + y) % 2 == 0);
        let c = compose_foreground(&r, &m, [1, 2, 3]).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                let expected = if (x + y) % 2 == 0 { r.get_pixel(x, y).0 } else { [1, 2, 3] };
                assert_eq!(c.get_pixel(x, y).0, expected);
            }
        }
    }

    #[test]
    fn crop_sizes_and_clamping() {
        let r = road(32, 32);
        let region = SignRegion::from_bbox(BBox::new(5, 5, 14, 14));
        let c = crop_sign(&r, "img", &region, 0).unwrap();
        assert_eq!(c.image.dimensions(), (10, 10));

        let c = crop_sign(&r, "img", &region, 2).unwrap();
        assert_eq!(c.image.dimensions(), (14, 14));
        for y in 0..14 {
            for x in 0..14 {
                assert_eq!(c.image.get_pixel(x, y), r.get_pixel(x + 3, y + 3));
            }
        }

        let corner = SignRegion::from_bbox(BBox::new(0, 0, 3, 3));
        let c = crop_sign(&r, "img", &corner, 4).unwrap();
        assert_eq!(c.image.dimensions(), (8, 8));
        let far = SignRegion::from_bbox(BBox::new(28, 29, 31, 31));
        let c = crop_sign(&r, "img", &far, 4).unwrap();
        assert_eq!(c.image.dimensions(), (8, 7));

        let out = SignRegion::from_bbox(BBox::new(30, 30, 40, 40));
        assert!(matches!(
            crop_sign(&r, "img", &out, 0),
            Err(ExtractionError::RegionOutOfBounds { .. })
        ));
    }

    #[test]
    fn extraction_fills_ring_interior_and_removes_background() {
        let w = 24;
        let h = 20;
        let r = road(w, h);
        let sign = [220, 220, 0];
        let mut px = RgbImage::from_pixel(w, h, Rgb([128, 64, 128]));
        // 10x10 ring with a 6x6 hole, plus a 2x2 speck.
        for y in 3..13 {
            for x in 4..14 {
                let inner = (6..12).contains(&x) && (5..11).contains(&y);
                if !inner {
                    px.put_pixel(x, y, Rgb(sign));
                }
            }
        }
        px.put_pixel(20, 16, Rgb(sign));
        px.put_pixel(21, 16, Rgb(sign));
        px.put_pixel(20, 17, Rgb(sign));
        px.put_pixel(21, 17, Rgb(sign));
        let mask = MaskImage::new(px, crate::dataset::default_mask_colors());
        let cfg = ExtractionConfig {
            min_area: 9,
            padding: 1,
            ..Default::default()
        };
        let ex = extract_signs("ring", &r, &mask, "traffic_sign", &cfg).unwrap();
        assert_eq!(ex.regions.len(), 1);
        assert_eq!(ex.regions[0].bbox, BBox::new(4, 3, 13, 12));
        assert_eq!(ex.regions[0].area_px, 100);
        // Hole pixel keeps road content; speck location is filled.
        assert_eq!(ex.composite.get_pixel(8, 8), r.get_pixel(8, 8));
        assert_eq!(ex.composite.get_pixel(20, 16).0, [0, 0, 0]);
        assert_eq!(ex.crops[0].image.dimensions(), (12, 12));

        let bad = MaskImage::new(RgbImage::new(3, 3), crate::dataset::default_mask_colors());
        assert!(matches!(
            extract_signs("x", &r, &bad, "traffic_sign", &cfg),
            Err(ExtractionError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn target_selection() {
        let a = SignRegion::new(BBox::new(0, 0, 9, 9), 100);
        let b = SignRegion::new(BBox::new(20, 20, 39, 39), 400);
        assert_eq!(select_target(&[a, b], None), Some(1));
        let hint = SignRegion::from_bbox(BBox::new(1, 1, 9, 9));
        assert_eq!(select_target(&[a, b], Some(&hint)), Some(0));
        let miss = SignRegion::from_bbox(BBox::new(60, 60, 70, 70));
        assert_eq!(select_target(&[a, b], Some(&miss)), None);
        assert_eq!(select_target(&[], None), None);
    }

    #[test]
    fn write_extraction_files() {
        let dir = tempfile::TempDir::new().unwrap();
        let r = road(16, 16);
        let m = square_mask(16, 16, BBox::new(2, 2, 11, 11));
        let contours = trace_contours(&m);
        let regions = regions_from_contours(&contours, 1);
        let composite = compose_foreground(&r, &m, [0, 0, 0]).unwrap();
        let crops = vec![crop_sign(&composite, "img7", &regions[0], 0).unwrap()];
        let ex = Extraction {
            regions,
            composite,
            crops,
        };
        let side = write_extraction(dir.path(), "img7", &ex).unwrap();
        assert_eq!(side.regions[0].crop, "img7_0.png");
        assert!(dir.path().join("img7_0.png").is_file());
        let text = std::fs::read_to_string(dir.path().join("img7.regions.json")).unwrap();
        let back: RegionsSidecar = serde_json::from_str(&text).unwrap();
        assert_eq!(back, side);
        assert_eq!(load_rgb(&dir.path().join("img7_0.png")).unwrap(), ex.crops[0].image);
    }
}

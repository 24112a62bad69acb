mod common;

use std::collections::BTreeSet;
use std::time::Duration;

use image::RgbImage;
use proptest::prelude::*;
use rand::seq::SliceRandom;

use common::*;
use tsr_core::dataset::{ClassPair, GroundTruth, TemplateCatalog};
use tsr_core::eval::topk_accuracy;
use tsr_core::extraction::{crop_sign, regions_from_contours, trace_contours};
use tsr_core::geometry::{BBox, SignRegion};
use tsr_core::knowledge::{build_bank, BuildOptions};
use tsr_core::lmm::{ImageAttachment, MockScript, RateLimiter, StageKind};
use tsr_core::prompts::context_prompt;
use tsr_core::recognizer::RecognitionResult;
use tsr_core::text::parse_ranked_answer;

fn sorted_regions(mask: &tsr_core::extraction::BinaryMask) -> Vec<(BBox, u64)> {
    let mut v: Vec<(BBox, u64)> = regions_from_contours(&trace_contours(mask), 0)
        .into_iter()
        .map(|r| (r.bbox, r.area_px))
        .collect();
    v.sort_by_key(|(b, a)| (b.x_min, b.y_min, b.x_max, b.y_max, *a));
    v
}

fn sorted_oracle(mask: &tsr_core::extraction::BinaryMask) -> Vec<(BBox, u64)> {
    let mut v = flood_components(mask);
    v.sort_by_key(|(b, a)| (b.x_min, b.y_min, b.x_max, b.y_max, *a));
    v
}

fn ranked_fixture(seed: u64, n: usize, classes: usize) -> (Vec<RecognitionResult>, Vec<GroundTruth>) {
    use rand::Rng;
    let mut r = rng(seed);
    let ids: Vec<String> = (0..classes).map(|i| format!("c{i}")).collect();
    let mut results = Vec::new();
    let mut truth = Vec::new();
    for i in 0..n {
        let image_id = format!("img{i}");
        let mut pool = ids.clone();
        pool.shuffle(&mut r);
        let len = r.random_range(0..=classes.min(7));
        results.push(RecognitionResult {
            ranked: pool[..len].iter().map(|c| class(c)).collect(),
            ..RecognitionResult::failed(image_id.clone(), "")
        });
        truth.push(GroundTruth {
            image_id,
            class_id: ids[r.random_range(0..classes)].clone(),
        });
    }
    (results, truth)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contour_regions_match_flood_fill(seed in any::<u64>()) {
        let mask = random_mask(&mut rng(seed));
        prop_assert_eq!(sorted_regions(&mask), sorted_oracle(&mask));
    }

    #[test]
    fn one_region_per_component(seed in any::<u64>()) {
        let mask = random_mask(&mut rng(seed));
        let contours = trace_contours(&mask);
        prop_assert_eq!(contours.len(), flood_components(&mask).len());
        for c in &contours {
            prop_assert!(!c.is_empty());
            let b = c.bbox();
            prop_assert!(b.is_well_formed() && b.fits_within(mask.width(), mask.height()));
        }
    }

    #[test]
    fn crops_stay_inside_the_image(
        w in 1u32..96, h in 1u32..96,
        a in any::<(u32, u32, u32, u32)>(), padding in 0u32..40,
    ) {
        let (x0, x1) = { let (p, q) = (a.0 % w, a.1 % w); (p.min(q), p.max(q)) };
        let (y0, y1) = { let (p, q) = (a.2 % h, a.3 % h); (p.min(q), p.max(q)) };
        let img = RgbImage::new(w, h);
        let region = SignRegion::from_bbox(BBox::new(x0, y0, x1, y1));
        let crop = crop_sign(&img, "x", &region, padding).unwrap();
        let (cw, ch) = crop.image.dimensions();
        prop_assert!(cw <= w && ch <= h);
        prop_assert!(cw >= region.bbox.width() && ch >= region.bbox.height());
        let grown = region.bbox.expand_clamped(padding, w, h);
        prop_assert!(grown.x_min <= x0 && grown.y_min <= y0 && grown.x_max >= x1 && grown.y_max >= y1);
        prop_assert_eq!((cw, ch), (grown.width(), grown.height()));
    }

    #[test]
    fn topk_matches_brute_force_and_is_monotone(seed in any::<u64>(), n in 1usize..40, classes in 1usize..12) {
        let (results, truth) = ranked_fixture(seed, n, classes);
        let mut prev = 0.0;
        for k in 1..=6 {
            let got = topk_accuracy(&results, &truth, k).unwrap();
            prop_assert_eq!(got, brute_topk(&results, &truth, k));
            prop_assert!(got >= prev && (0.0..=1.0).contains(&got));
            prev = got;
        }
    }

    #[test]
    fn topk_ignores_sample_order(seed in any::<u64>(), n in 1usize..40) {
        let (mut results, mut truth) = ranked_fixture(seed, n, 6);
        let before: Vec<f64> = [1, 3, 5].iter().map(|&k| topk_accuracy(&results, &truth, k).unwrap()).collect();
        let mut r = rng(seed ^ 0x5eed);
        results.shuffle(&mut r);
        truth.shuffle(&mut r);
        let after: Vec<f64> = [1, 3, 5].iter().map(|&k| topk_accuracy(&results, &truth, k).unwrap()).collect();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn pair_keys_are_order_free(a in "[a-z]{1,6}", b in "[a-z]{1,6}") {
        match (ClassPair::new(a.clone(), b.clone()), ClassPair::new(b.clone(), a.clone())) {
            (Some(p), Some(q)) => {
                prop_assert_eq!(&p, &q);
                prop_assert!(p.first() < p.second());
            }
            (None, None) => prop_assert_eq!(a, b),
            _ => prop_assert!(false, "asymmetric pair construction"),
        }
    }

    #[test]
    fn coordinates_appear_exactly_when_enabled(cx in 0u32..2000, cy in 0u32..2000, coords in any::<bool>()) {
        let dir = tempfile::TempDir::new().unwrap();
        let cat = catalog_with_templates(dir.path(), &[("a", "Alpha"), ("b", "Beta")]);
        let region = SignRegion::new(BBox::new(cx, cy, cx, cy), 1);
        let p = context_prompt(ImageAttachment::new("image/png", vec![1]), (2000, 2000), &region, &cat, coords, Some(5));
        let text: String = p.parts.iter().filter_map(|x| match x {
            tsr_core::lmm::UserPart::Text(t) => Some(t.clone()),
            _ => None,
        }).collect();
        prop_assert_eq!(text.contains(&format!("({cx}, {cy})")), coords);
    }

    #[test]
    fn ranked_answers_are_unique_and_bounded(words in proptest::collection::vec(0usize..8, 0..12), k in 1usize..6) {
        let names = ["Stop", "Yield", "No entry", "Speed Limit (50km/h)", "Keep right", "banana", "qq", "No"];
        let cat = TemplateCatalog::from_parts("xx", ["stop", "yield", "no_entry", "speed_50", "keep_right"]
            .iter()
            .zip(["Stop", "Yield", "No entry", "Speed Limit (50km/h)", "Keep right"])
            .map(|(id, n)| (tsr_core::dataset::ClassRef { class_id: id.to_string(), display_name: n.into(), country: "xx".into() }, format!("{id}.png").into()))
            .collect()).unwrap();
        let text: String = words.iter().enumerate().map(|(i, w)| format!("{}. {}\n", i + 1, names[*w])).collect();
        let ranked = parse_ranked_answer(&text, &cat, k);
        prop_assert!(ranked.len() <= k);
        let ids: BTreeSet<_> = ranked.iter().map(|c| c.class_id.clone()).collect();
        prop_assert_eq!(ids.len(), ranked.len());
        prop_assert!(ranked.iter().all(|c| cat.contains(&c.class_id)));
    }

    #[test]
    fn limiter_never_exceeds_budget(rpm in 1u32..20, gaps in proptest::collection::vec(0u64..30_000, 1..80)) {
        let limiter = RateLimiter::new(rpm);
        let mut now = Duration::ZERO;
        let mut starts = Vec::new();
        for g in gaps {
            now += Duration::from_millis(g);
            let s = limiter.reserve(now);
            prop_assert!(s >= now);
            starts.push(s);
        }
        for (i, s) in starts.iter().enumerate() {
            let in_window = starts[i..].iter().filter(|t| **t < *s + Duration::from_secs(60)).count();
            prop_assert!(in_window <= rpm as usize);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bank_pairs_close_over_groups(raw in proptest::collection::vec(proptest::collection::btree_set(0usize..7, 2..5), 0..4)) {
        let ids = ["a", "b", "c", "d", "e", "f", "g"];
        let dir = tempfile::TempDir::new().unwrap();
        let names: Vec<(&str, &str)> = ids.iter().map(|i| (*i, *i)).collect();
        let cat = catalog_with_templates(dir.path(), &names);
        let groups_raw: Vec<Vec<&str>> = raw.iter().map(|g| g.iter().map(|i| ids[*i]).collect()).collect();
        let refs: Vec<&[&str]> = groups_raw.iter().map(Vec::as_slice).collect();
        let groups = groups(&cat, &refs);
        let script = MockScript::default()
            .with_stage_default(StageKind::Characteristic, "Shape: s\nColor: c\nComposition: k")
            .with_stage_default(StageKind::Differential, "Differences: d");
        let (client, log) = recording_client(script);
        let report = build_bank(&client, &cat, &groups, None, &BuildOptions { jobs: 3, ..Default::default() }).unwrap();
        let got: Vec<(String, String)> = report.bank.differentials().keys().map(|p| (p.first().to_string(), p.second().to_string())).collect();
        let expected = brute_pairs(&refs);
        prop_assert_eq!(&got, &expected);
        prop_assert_eq!(log.lock().unwrap().len(), ids.len() + expected.len());
        let again = build_bank(&client, &cat, &groups, Some(report.bank), &BuildOptions::default()).unwrap();
        prop_assert_eq!(log.lock().unwrap().len(), ids.len() + expected.len());
        prop_assert_eq!(again.characteristics_generated + again.differentials_generated, 0);
    }
}

//! Prompt texts pinned to files under tests/golden. Set UPDATE_GOLDEN=1 to
//! rewrite them after an intended prompt change (and bump PROMPT_VERSION).

mod common;

use std::path::PathBuf;

use common::catalog_with_templates;
use tsr_core::dataset::ClassPair;
use tsr_core::geometry::{BBox, SignRegion};
use tsr_core::knowledge::{CharacteristicDescription, ContextDescription, DifferentialDescription};
use tsr_core::lmm::{ImageAttachment, UserPart};
use tsr_core::prompts::{self, Prompt};

fn render(system: &str, parts: &[UserPart]) -> String {
    let mut out = format!("[system]\n{system}\n");
    for p in parts {
        match p {
            UserPart::Text(t) => out.push_str(&format!("[text]\n{t}\n")),
            UserPart::Image(img) => out.push_str(&format!("[image {} {}]\n", img.media_type, img.digest())),
        }
    }
    out
}

fn check(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.txt"));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; run with UPDATE_GOLDEN=1", path.display()));
    assert_eq!(actual, expected, "{name} prompt changed; bump PROMPT_VERSION and regenerate");
}

fn image() -> ImageAttachment {
    ImageAttachment::new("image/png", b"fixture".to_vec())
}

fn chars(id: &str, shape: &str, color: &str, composition: &str) -> CharacteristicDescription {
    CharacteristicDescription {
        class_id: id.into(),
        shape: shape.into(),
        color: color.into(),
        composition: composition.into(),
        raw_text: String::new(),
    }
}

fn prompt_text(p: &Prompt) -> String {
    render(&p.system, &p.parts)
}

#[test]
fn prompt_version_is_pinned() {
    check("version", &format!("{}\n", prompts::PROMPT_VERSION));
}

#[test]
fn context_prompts() {
    let dir = tempfile::TempDir::new().unwrap();
    let cat = catalog_with_templates(dir.path(), &[("stop", "Stop"), ("yield", "Yield")]);
    let region = SignRegion::from_bbox(BBox::new(900, 260, 920, 282));
    let full = prompts::context_prompt(image(), (1280, 720), &region, &cat, true, Some(3));
    check("context_full", &prompt_text(&full));
    let bare = prompts::context_prompt(image(), (1280, 720), &region, &cat, false, None);
    check("context_bare", &prompt_text(&bare));
}

#[test]
fn characteristic_prompts() {
    let dir = tempfile::TempDir::new().unwrap();
    let cat = catalog_with_templates(dir.path(), &[("stop", "Stop"), ("yield", "Yield")]);
    let class = cat.get("stop").unwrap();
    check("characteristic", &prompt_text(&prompts::characteristic_prompt(image(), class, false)));
    check("characteristic_strict", &prompt_text(&prompts::characteristic_prompt(image(), class, true)));
}

#[test]
fn differential_prompt() {
    let dir = tempfile::TempDir::new().unwrap();
    let cat = catalog_with_templates(dir.path(), &[("no_entry", "No entry"), ("halt", "Halt")]);
    let a = chars("halt", "octagon", "red", "white bar");
    let b = chars("no_entry", "circle", "red", "white bar");
    let p = prompts::differential_prompt(cat.get("halt").unwrap(), &a, cat.get("no_entry").unwrap(), &b);
    check("differential", &prompt_text(&p));
}

#[test]
fn multistep_pieces() {
    let dir = tempfile::TempDir::new().unwrap();
    let cat = catalog_with_templates(dir.path(), &[("no_entry", "No entry"), ("halt", "Halt")]);
    let (halt, no_entry) = (cat.get("halt").unwrap(), cat.get("no_entry").unwrap());
    let ctx = ContextDescription {
        image_id: "img".into(),
        region: SignRegion::from_bbox(BBox::new(1, 1, 4, 4)),
        background_text: "a quiet junction".into(),
        hypothesis: vec![halt.clone()],
        raw_text: String::new(),
    };
    let (ca, cb) = (chars("halt", "octagon", "red", "white bar"), chars("no_entry", "circle", "red", "white bar"));
    let diff = DifferentialDescription {
        pair: ClassPair::new("halt", "no_entry").unwrap(),
        text: "shape differs".into(),
    };
    let text = [
        prompts::MULTISTEP_PREAMBLE.to_string(),
        prompts::context_block(&ctx),
        prompts::characteristic_block(&[(halt, &ca), (no_entry, &cb)]),
        prompts::differential_block(&[(halt, no_entry, &diff)]),
        prompts::final_instruction(5, &cat),
    ]
    .into_iter()
    .map(UserPart::Text)
    .collect::<Vec<_>>();
    check("multistep", &render(prompts::SYSTEM_PROMPT, &text));
}

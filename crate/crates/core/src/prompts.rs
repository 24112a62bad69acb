//! Prompt templates. Any wording change must bump [`PROMPT_VERSION`], which
//! invalidates memory banks built with older templates.

use crate::dataset::{ClassRef, TemplateCatalog};
use crate::geometry::SignRegion;
use crate::knowledge::{CharacteristicDescription, ContextDescription, DifferentialDescription};
use crate::lmm::{ImageAttachment, UserPart};

pub const PROMPT_VERSION: &str = "tsr-prompts/1";

pub const SYSTEM_PROMPT: &str = "You are an expert in traffic sign recognition. \
Answer precisely and follow the requested answer format exactly.";

pub const BACKGROUND_LABEL: &str = "Background";
pub const CANDIDATES_LABEL: &str = "Candidates";
pub const FACET_LABELS: [&str; 3] = ["Shape", "Color", "Composition"];
pub const DIFFERENCES_LABEL: &str = "Differences";
pub const ANSWER_LABEL: &str = "Answer";

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub system: String,
    pub parts: Vec<UserPart>,
}

fn name_list(names: impl IntoIterator<Item = impl AsRef<str>>) -> String {
    names
        .into_iter()
        .map(|n| n.as_ref().to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Scene description request for one target sign of a road image.
///
/// `dims` are the original road image dimensions; the region is expressed
/// in the same pixel space even when the attached image is downscaled.
pub fn context_prompt(
    road: ImageAttachment,
    dims: (u32, u32),
    region: &SignRegion,
    catalog: &TemplateCatalog,
    use_coordinates: bool,
    hypothesis: Option<usize>,
) -> Prompt {
    let mut text = String::new();
    if use_coordinates {
        let (cx, cy) = region.center;
        text.push_str(&format!(
            "The image shows a road scene. Focus on the target traffic sign centered at pixel coordinates ({cx}, {cy}) in this {}x{} image.\n",
            dims.0, dims.1
        ));
    } else {
        text.push_str("The image shows a road scene. Focus on the target traffic sign in this image.\n");
    }
    text.push_str(
        "Describe the surroundings of the target sign: the kind of road, nearby lanes, markings, \
         vehicles, buildings and other signs that could help to understand its meaning.\n",
    );
    match hypothesis {
        Some(n) => {
            text.push_str(&format!(
                "Then name up to {n} traffic signs that the target sign could plausibly be, choosing only from these names: {}.\n",
                name_list(catalog.classes().iter().map(|c| &c.display_name))
            ));
            text.push_str(&format!(
                "Answer with exactly two labeled lines:\n{BACKGROUND_LABEL}: <one paragraph>\n{CANDIDATES_LABEL}: <names separated by semicolons>"
            ));
        }
        None => {
            text.push_str(&format!(
                "Answer with exactly one labeled line:\n{BACKGROUND_LABEL}: <one paragraph>"
            ));
        }
    }
    Prompt {
        system: SYSTEM_PROMPT.to_string(),
        parts: vec![UserPart::Image(road), UserPart::Text(text)],
    }
}

/// Worked examples showing the expected characteristic answer format.
pub const FEW_SHOT_EXEMPLARS: &str = "\
Here are two examples of how to describe a traffic sign template by its shape, color and composition.

Example 1, sign \"Stop\":
Shape: regular octagon
Color: red background with a thin white border; white lettering
Composition: the word STOP in bold capital letters centered horizontally

Example 2, sign \"Speed limit 50\":
Shape: circle
Color: white background inside a thick red ring; black digits
Composition: the number 50 centered in the circle, no other symbols";

pub const STRICT_REMINDER: &str = "Your previous answer could not be read. Reply with exactly three lines \
that start with \"Shape:\", \"Color:\" and \"Composition:\", and nothing else.";

/// Few-shot request for the shape, color and composition of one template.
pub fn characteristic_prompt(template: ImageAttachment, class: &ClassRef, strict: bool) -> Prompt {
    let mut instruction = format!(
        "The image above is the template of the traffic sign \"{}\". Describe its key features: \
         shape, color, and composition. Answer with exactly three labeled lines:\n\
         Shape: <shape>\nColor: <colors>\nComposition: <symbols, text and layout>",
        class.display_name
    );
    if strict {
        instruction.push_str("\n\n");
        instruction.push_str(STRICT_REMINDER);
    }
    Prompt {
        system: SYSTEM_PROMPT.to_string(),
        parts: vec![
            UserPart::Text(FEW_SHOT_EXEMPLARS.to_string()),
            UserPart::Image(template),
            UserPart::Text(instruction),
        ],
    }
}

/// Text-only request contrasting two similar classes. Callers pass the
/// pair in normalized order so the prompt does not depend on argument order.
pub fn differential_prompt(
    u: &ClassRef,
    char_u: &CharacteristicDescription,
    v: &ClassRef,
    char_v: &CharacteristicDescription,
) -> Prompt {
    let text = format!(
        "Two similar traffic signs are described below.\n\n\
         Sign A, \"{}\":\n{}\n\n\
         Sign B, \"{}\":\n{}\n\n\
         Explain the visual details that tell these two signs apart, so that one is never mistaken for the other. \
         Answer with one labeled line:\n{DIFFERENCES_LABEL}: <the distinguishing details>",
        u.display_name,
        char_u.raw_text.trim(),
        v.display_name,
        char_v.raw_text.trim()
    );
    Prompt {
        system: SYSTEM_PROMPT.to_string(),
        parts: vec![UserPart::Text(text)],
    }
}

pub const MULTISTEP_PREAMBLE: &str = "The image shows one target traffic sign. Recognize it by thinking step by step.\n\
First, form a preliminary understanding of the sign in the image from your own knowledge.\n\
Then study each reference section below in the order given and compare it with what you see.";

pub fn context_block(ctx: &ContextDescription) -> String {
    let mut s = format!("Scene around the sign:\n{}", ctx.background_text.trim());
    if !ctx.hypothesis.is_empty() {
        s.push_str(&format!(
            "\nCandidate signs suggested by the scene: {}",
            name_list(ctx.hypothesis.iter().map(|c| &c.display_name))
        ));
    }
    s
}

pub fn characteristic_block(entries: &[(&ClassRef, &CharacteristicDescription)]) -> String {
    let mut s = String::from("Key features of possible signs:");
    for (class, d) in entries {
        s.push_str(&format!(
            "\n- {}: shape: {}; color: {}; composition: {}",
            class.display_name, d.shape, d.color, d.composition
        ));
    }
    s
}

pub fn differential_block(entries: &[(&ClassRef, &ClassRef, &DifferentialDescription)]) -> String {
    let mut s = String::from("Differences between similar signs:");
    for (u, v, d) in entries {
        s.push_str(&format!(
            "\n- {} vs {}: {}",
            u.display_name,
            v.display_name,
            d.text.trim().replace('\n', " ")
        ));
    }
    s
}

pub fn final_instruction(k: usize, catalog: &TemplateCatalog) -> String {
    format!(
        "Finally, list the {k} most likely names for the target sign, most likely first, \
         using only names from this list: {}.\n\
         Answer in this format:\n{ANSWER_LABEL}:\n1. <name>\n2. <name>",
        name_list(catalog.classes().iter().map(|c| &c.display_name))
    )
}

//! Multistep recognition: one prompt carrying the crop, the enabled
//! reference blocks in thinking order, and a ranked-answer request.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigViolation, RecognitionConfig, ThinkingStage};
use crate::dataset::{ClassPair, ClassRef, SimilarityGroups, TemplateCatalog};
use crate::extraction::{load_rgb, ExtractionError};
use crate::geometry::SignRegion;
use crate::knowledge::{gen_context, run_prompt, ContextDescription, KnowledgeError, MemoryBank, TranscriptEntry};
use crate::lmm::{clock, ImageAttachment, LmmClient, LmmError, StageKind, UserPart};
use crate::prompts::{self, Prompt};
use crate::text::parse_ranked_answer;

#[derive(Debug, Error)]
pub enum RecognizerError {
    #[error(transparent)]
    Config(#[from] ConfigViolation),
    #[error(transparent)]
    Lmm(#[from] LmmError),
    #[error(transparent)]
    Knowledge(KnowledgeError),
    #[error(transparent)]
    Image(#[from] ExtractionError),
}

impl From<KnowledgeError> for RecognizerError {
    fn from(e: KnowledgeError) -> Self {
        match e {
            KnowledgeError::Lmm(e) => RecognizerError::Lmm(e),
            other => RecognizerError::Knowledge(other),
        }
    }
}

impl RecognizerError {
    /// Errors that will recur for every image, so a run should stop.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            RecognizerError::Config(_)
                | RecognizerError::Knowledge(KnowledgeError::CoverageGap { .. })
                | RecognizerError::Lmm(LmmError::AuthError { .. } | LmmError::Config(_))
        )
    }
}

/// A road image held in memory or read on first use.
#[derive(Debug, Clone)]
pub enum RoadImage {
    Path(PathBuf),
    Loaded(Arc<RgbImage>),
}

impl RoadImage {
    pub fn load(&self) -> Result<Arc<RgbImage>, ExtractionError> {
        match self {
            RoadImage::Path(p) => load_rgb(p).map(Arc::new),
            RoadImage::Loaded(img) => Ok(img.clone()),
        }
    }
}

/// One recognition input: the sign crop plus, when available, where it sits in its road image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    pub crop: RgbImage,
    pub road: Option<RoadImage>,
    pub region: Option<SignRegion>,
    pub extraction_ms: u64,
}

impl Sample {
    pub fn has_scene(&self) -> bool {
        self.road.is_some() && self.region.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultistepPrompt {
    pub system: String,
    pub crop: ImageAttachment,
    pub preamble: String,
    /// Reference blocks in thinking order.
    pub blocks: Vec<(ThinkingStage, String)>,
    pub final_instruction: String,
}

impl MultistepPrompt {
    pub fn user_parts(&self) -> Vec<UserPart> {
        let mut parts = vec![UserPart::Image(self.crop.clone()), UserPart::Text(self.preamble.clone())];
        parts.extend(self.blocks.iter().map(|(_, b)| UserPart::Text(b.clone())));
        parts.push(UserPart::Text(self.final_instruction.clone()));
        parts
    }

    /// All text of the prompt, system prompt included.
    pub fn full_text(&self) -> String {
        let mut s = self.system.clone();
        for p in self.user_parts() {
            if let UserPart::Text(t) = p {
                s.push_str("\n\n");
                s.push_str(&t);
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub extraction_ms: u64,
    pub context_ms: Option<u64>,
    pub multistep_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecognitionResult {
    pub image_id: String,
    /// Best first, unique, at most `k_max` long.
    pub ranked: Vec<ClassRef>,
    pub raw_answer: String,
    pub transcript: Vec<TranscriptEntry>,
    pub timings: StageTimings,
    /// Set when the image could not be processed; such results rank nothing.
    pub error: Option<String>,
}

impl RecognitionResult {
    pub fn failed(image_id: impl Into<String>, error: impl ToString) -> Self {
        RecognitionResult {
            image_id: image_id.into(),
            ranked: Vec::new(),
            raw_answer: String::new(),
            transcript: Vec::new(),
            timings: StageTimings::default(),
            error: Some(error.to_string()),
        }
    }

    pub fn ranked_ids(&self) -> Vec<&str> {
        self.ranked.iter().map(|c| c.class_id.as_str()).collect()
    }
}

pub struct Recognizer<'a> {
    catalog: &'a TemplateCatalog,
    groups: &'a SimilarityGroups,
    bank: &'a MemoryBank,
    cfg: RecognitionConfig,
    client: &'a LmmClient,
}

impl<'a> Recognizer<'a> {
    /// Checks the config and that the bank covers every enabled stage.
    pub fn new(
        catalog: &'a TemplateCatalog,
        groups: &'a SimilarityGroups,
        bank: &'a MemoryBank,
        cfg: RecognitionConfig,
        client: &'a LmmClient,
    ) -> Result<Self, RecognizerError> {
        cfg.validate()?;
        let missing_classes: Vec<String> = if cfg.use_characteristic {
            catalog
                .class_ids()
                .filter(|id| bank.characteristic(id).is_none())
                .map(str::to_string)
                .collect()
        } else {
            Vec::new()
        };
        let missing_pairs: Vec<ClassPair> = if cfg.use_differential {
            groups.pairs().into_iter().filter(|p| bank.differential(p).is_none()).collect()
        } else {
            Vec::new()
        };
        if !missing_classes.is_empty() || !missing_pairs.is_empty() {
            return Err(KnowledgeError::CoverageGap {
                missing_classes,
                missing_pairs,
                unexpected_pairs: Vec::new(),
            }
            .into());
        }
        Ok(Recognizer {
            catalog,
            groups,
            bank,
            cfg,
            client,
        })
    }

    pub fn config(&self) -> &RecognitionConfig {
        &self.cfg
    }

    /// Classes described in the characteristic block: the hypothesis and
    /// its group co-members when a hypothesis exists, otherwise the whole
    /// catalog. Sorted by id and cut at the configured cap.
    pub fn scope(&self, ctx: Option<&ContextDescription>) -> Vec<&'a ClassRef> {
        let hypothesis = ctx.map(|c| c.hypothesis.as_slice()).unwrap_or_default();
        let mut ids: BTreeSet<&str> = BTreeSet::new();
        if hypothesis.is_empty() {
            ids.extend(self.catalog.class_ids());
        } else {
            for c in hypothesis {
                ids.insert(c.class_id.as_str());
                ids.extend(self.groups.co_members(&c.class_id));
            }
        }
        let mut scope: Vec<&ClassRef> = ids.into_iter().filter_map(|id| self.catalog.get(id)).collect();
        if scope.len() > self.cfg.prompt_class_cap {
            log::warn!(
                "{} classes in scope exceed the prompt cap of {}; keeping the first by id",
                scope.len(),
                self.cfg.prompt_class_cap
            );
            scope.truncate(self.cfg.prompt_class_cap);
        }
        scope
    }

    pub fn assemble_multistep_prompt(
        &self,
        crop: &RgbImage,
        ctx: Option<&ContextDescription>,
    ) -> Result<MultistepPrompt, RecognizerError> {
        match (self.cfg.use_context, ctx) {
            (false, Some(_)) => {
                return Err(ConfigViolation("a scene description was supplied with use_context off".into()).into())
            }
            (true, None) => return Err(ConfigViolation("use_context is on but no scene description was supplied".into()).into()),
            _ => {}
        }
        let scope = self.scope(ctx);
        let mut blocks = Vec::new();
        for stage in self.cfg.order() {
            let block = match stage {
                ThinkingStage::Context => prompts::context_block(ctx.expect("checked above")),
                ThinkingStage::Characteristic => {
                    let entries: Vec<_> = scope
                        .iter()
                        .map(|c| {
                            let d = self.bank.characteristic(&c.class_id).expect("coverage checked");
                            (*c, d)
                        })
                        .collect();
                    prompts::characteristic_block(&entries)
                }
                ThinkingStage::Differential => {
                    let in_scope: BTreeSet<&str> = scope.iter().map(|c| c.class_id.as_str()).collect();
                    let entries: Vec<_> = self
                        .groups
                        .pairs()
                        .into_iter()
                        .filter(|p| in_scope.contains(p.first()) && in_scope.contains(p.second()))
                        .filter_map(|p| {
                            let d = self.bank.differential(&p)?;
                            Some((self.catalog.get(p.first())?, self.catalog.get(p.second())?, d))
                        })
                        .collect();
                    prompts::differential_block(&entries)
                }
            };
            blocks.push((stage, block));
        }
        Ok(MultistepPrompt {
            system: prompts::SYSTEM_PROMPT.to_string(),
            crop: ImageAttachment::png(crop),
            preamble: prompts::MULTISTEP_PREAMBLE.to_string(),
            blocks,
            final_instruction: prompts::final_instruction(self.cfg.k_max, self.catalog),
        })
    }

    /// Scene description when enabled, then one multistep call.
    pub fn recognize(&self, sample: &Sample) -> Result<RecognitionResult, RecognizerError> {
        let clock = self.client.clock();
        let mut transcript = Vec::new();
        let mut timings = StageTimings {
            extraction_ms: sample.extraction_ms,
            ..StageTimings::default()
        };

        let ctx = if self.cfg.use_context {
            let (Some(road), Some(region)) = (&sample.road, &sample.region) else {
                return Err(ConfigViolation(format!(
                    "{}: use_context needs the road image and sign region",
                    sample.image_id
                ))
                .into());
            };
            let started = clock.now();
            let road = road.load()?;
            let (ctx, entry) = gen_context(self.client, &sample.image_id, &road, region, self.catalog, &self.cfg)?;
            timings.context_ms = Some(clock::millis(clock.now().saturating_sub(started)));
            transcript.push(entry);
            Some(ctx)
        } else {
            None
        };

        let started = clock.now();
        let prompt = self.assemble_multistep_prompt(&sample.crop, ctx.as_ref())?;
        let (resp, entry) = run_prompt(
            self.client,
            StageKind::Multistep,
            Prompt {
                system: prompt.system.clone(),
                parts: prompt.user_parts(),
            },
        )?;
        timings.multistep_ms = clock::millis(clock.now().saturating_sub(started));
        transcript.push(entry);

        let ranked = parse_ranked_answer(&resp.text, self.catalog, self.cfg.k_max);
        if ranked.is_empty() {
            log::warn!("{}: no catalog sign found in the answer", sample.image_id);
        }
        Ok(RecognitionResult {
            image_id: sample.image_id.clone(),
            ranked,
            raw_answer: resp.text,
            transcript,
            timings,
            error: None,
        })
    }
}

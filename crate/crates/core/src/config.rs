//! Recognition switches, thinking order, ablation grids and run fingerprints.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompts::PROMPT_VERSION;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("configuration violation: {0}")]
pub struct ConfigViolation(pub String);

/// A reference block that can be placed in the multistep prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThinkingStage {
    Context,
    Characteristic,
    Differential,
}

impl ThinkingStage {
    pub const CANONICAL: [ThinkingStage; 3] = [
        ThinkingStage::Context,
        ThinkingStage::Characteristic,
        ThinkingStage::Differential,
    ];
}

impl fmt::Display for ThinkingStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThinkingStage::Context => "context",
            ThinkingStage::Characteristic => "characteristic",
            ThinkingStage::Differential => "differential",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognitionConfig {
    pub use_context: bool,
    pub use_characteristic: bool,
    pub use_differential: bool,
    /// Ask for candidate sign names while describing the scene.
    pub use_hypothesis: bool,
    /// Give the sign's pixel center in the scene prompt.
    pub use_coordinates: bool,
    /// Order of the enabled reference blocks; empty means canonical order.
    pub thinking_order: Vec<ThinkingStage>,
    pub k_max: usize,
    pub max_hypothesis: usize,
    /// Most classes described in one prompt; extra classes are dropped by id.
    pub prompt_class_cap: usize,
}

impl Default for RecognitionConfig {
    fn default() -> Self {
        RecognitionConfig::full()
    }
}

impl RecognitionConfig {
    /// Every stage on, hypothesis and coordinates included.
    pub fn full() -> Self {
        RecognitionConfig {
            use_context: true,
            use_characteristic: true,
            use_differential: true,
            use_hypothesis: true,
            use_coordinates: true,
            thinking_order: Vec::new(),
            k_max: 5,
            max_hypothesis: 5,
            prompt_class_cap: 64,
        }
    }

    /// Plain recognition from the crop alone.
    pub fn baseline() -> Self {
        RecognitionConfig::with_stages(false, false, false)
    }

    /// Given stages on; hypothesis and coordinates follow the context switch.
    pub fn with_stages(context: bool, characteristic: bool, differential: bool) -> Self {
        RecognitionConfig {
            use_context: context,
            use_characteristic: characteristic,
            use_differential: differential,
            use_hypothesis: context,
            use_coordinates: context,
            ..RecognitionConfig::full()
        }
    }

    pub fn is_enabled(&self, stage: ThinkingStage) -> bool {
        match stage {
            ThinkingStage::Context => self.use_context,
            ThinkingStage::Characteristic => self.use_characteristic,
            ThinkingStage::Differential => self.use_differential,
        }
    }

    pub fn enabled_stages(&self) -> Vec<ThinkingStage> {
        ThinkingStage::CANONICAL
            .into_iter()
            .filter(|s| self.is_enabled(*s))
            .collect()
    }

    /// The effective block order.
    pub fn order(&self) -> Vec<ThinkingStage> {
        if self.thinking_order.is_empty() {
            self.enabled_stages()
        } else {
            self.thinking_order.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigViolation> {
        if self.k_max < 1 {
            return Err(ConfigViolation("k_max must be at least 1".into()));
        }
        if self.prompt_class_cap < 1 {
            return Err(ConfigViolation("prompt_class_cap must be at least 1".into()));
        }
        if !self.use_context && (self.use_hypothesis || self.use_coordinates) {
            return Err(ConfigViolation(
                "use_hypothesis and use_coordinates require use_context".into(),
            ));
        }
        if self.use_hypothesis && self.max_hypothesis < 1 {
            return Err(ConfigViolation("max_hypothesis must be at least 1".into()));
        }
        if !self.thinking_order.is_empty() {
            let mut sorted = self.thinking_order.clone();
            sorted.sort();
            if sorted != self.enabled_stages() {
                return Err(ConfigViolation(format!(
                    "thinking_order {:?} must list each enabled stage exactly once (enabled: {:?})",
                    self.thinking_order,
                    self.enabled_stages()
                )));
            }
        }
        Ok(())
    }

    /// Same config with an explicit thinking order, so equal behavior gives equal values.
    pub fn normalized(&self) -> Self {
        RecognitionConfig {
            thinking_order: self.order(),
            ..self.clone()
        }
    }

    /// The context stage removed, for datasets without road images.
    pub fn without_context(&self) -> Self {
        RecognitionConfig {
            use_context: false,
            use_hypothesis: false,
            use_coordinates: false,
            thinking_order: self
                .order()
                .into_iter()
                .filter(|s| *s != ThinkingStage::Context)
                .collect(),
            ..self.clone()
        }
    }

    /// Swaps the first two blocks of the canonical order among the enabled ones.
    pub fn swapped_order(&self) -> Self {
        let mut order = self.enabled_stages();
        if order.len() >= 2 {
            order.swap(0, 1);
        }
        RecognitionConfig {
            thinking_order: order,
            ..self.clone()
        }
    }

    pub fn is_canonical_order(&self) -> bool {
        self.order() == self.enabled_stages()
    }
}

/// Named families of configurations compared side by side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grid {
    /// Baseline plus every combination of the three stages.
    Strategies,
    /// Hypothesis and coordinate switches with all stages on.
    ContextGeneration,
    /// Canonical versus swapped thinking order with all stages on.
    ThinkingOrder,
}

impl Grid {
    pub fn parse(s: &str) -> Option<Grid> {
        match s {
            "strategies" => Some(Grid::Strategies),
            "context-generation" => Some(Grid::ContextGeneration),
            "thinking-order" => Some(Grid::ThinkingOrder),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Grid::Strategies => "strategies",
            Grid::ContextGeneration => "context-generation",
            Grid::ThinkingOrder => "thinking-order",
        }
    }

    /// Rows derived from `base`, whose non-switch settings are kept.
    pub fn configs(self, base: &RecognitionConfig) -> Vec<RecognitionConfig> {
        let stages = |c, h, d| RecognitionConfig {
            thinking_order: Vec::new(),
            ..RecognitionConfig {
                use_context: c,
                use_characteristic: h,
                use_differential: d,
                use_hypothesis: c,
                use_coordinates: c,
                ..base.clone()
            }
        };
        match self {
            Grid::Strategies => vec![
                stages(false, false, false),
                stages(true, false, false),
                stages(false, true, false),
                stages(false, false, true),
                stages(true, false, true),
                stages(true, true, false),
                stages(false, true, true),
                stages(true, true, true),
            ],
            Grid::ContextGeneration => [(false, false), (true, false), (false, true), (true, true)]
                .into_iter()
                .map(|(hyp, coords)| RecognitionConfig {
                    use_hypothesis: hyp,
                    use_coordinates: coords,
                    ..stages(true, true, true)
                })
                .collect(),
            Grid::ThinkingOrder => {
                let all = stages(true, true, true);
                vec![all.clone(), all.swapped_order()]
            }
        }
    }
}

/// Short stable hash of a run's behavior-relevant settings.
pub fn fingerprint(cfg: &RecognitionConfig, backend_id: &str, temperature: f32) -> String {
    #[derive(Serialize)]
    struct Canon<'a> {
        recognition: &'a RecognitionConfig,
        backend_id: &'a str,
        temperature_bits: u32,
        prompt_version: &'a str,
    }
    let canon = Canon {
        recognition: &cfg.normalized(),
        backend_id,
        temperature_bits: temperature.to_bits(),
        prompt_version: PROMPT_VERSION,
    };
    let json = serde_json::to_vec(&canon).expect("serializable config");
    hex::encode(Sha256::digest(json))[..16].to_string()
}

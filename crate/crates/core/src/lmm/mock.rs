//! Scripted offline backend.
//!
//! A script is an ordered list of rules. A rule matches when every
//! condition it sets holds: stage kind, a substring of the prompt text, or
//! the SHA-256 digest of one of the attached images. The first matching
//! rule answers (or fails, when it carries an `error`); otherwise the
//! per-stage default, then the global default applies.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CallError, Completion, LmmBackend, LmmError, LmmRequest, StageKind, Usage, UserPart};

pub const DEFAULT_MOCK_RESPONSE: &str = "I cannot tell.";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<StageKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MockRule {
    pub fn answer(response: impl Into<String>) -> Self {
        MockRule {
            response: Some(response.into()),
            ..Default::default()
        }
    }

    pub fn fail(error: impl Into<String>) -> Self {
        MockRule {
            error: Some(error.into()),
            ..Default::default()
        }
    }

    pub fn on_stage(mut self, stage: StageKind) -> Self {
        self.stage = Some(stage);
        self
    }

    pub fn when_contains(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    pub fn when_image(mut self, digest: impl Into<String>) -> Self {
        self.image_digest = Some(digest.into());
        self
    }

    fn matches(&self, req: &LmmRequest) -> bool {
        if self.stage.is_some_and(|s| s != req.stage) {
            return false;
        }
        if let Some(needle) = &self.contains {
            let in_text = req.system_prompt.contains(needle.as_str())
                || req.user_parts.iter().any(|p| match p {
                    UserPart::Text(t) => t.contains(needle.as_str()),
                    UserPart::Image(_) => false,
                });
            if !in_text {
                return false;
            }
        }
        if let Some(digest) = &self.image_digest {
            let hit = req.user_parts.iter().any(|p| match p {
                UserPart::Image(img) => img.digest() == *digest,
                UserPart::Text(_) => false,
            });
            if !hit {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    pub version: u32,
    #[serde(default = "default_response")]
    pub default_response: String,
    #[serde(default)]
    pub stage_defaults: BTreeMap<StageKind, String>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
}

fn default_response() -> String {
    DEFAULT_MOCK_RESPONSE.to_string()
}

impl Default for MockScript {
    fn default() -> Self {
        MockScript {
            version: 1,
            default_response: default_response(),
            stage_defaults: BTreeMap::new(),
            rules: Vec::new(),
        }
    }
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, LmmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LmmError::Config(format!("mock script {}: {e}", path.display())))?;
        let script: MockScript = serde_json::from_str(&text)
            .map_err(|e| LmmError::Config(format!("mock script {}: {e}", path.display())))?;
        if script.version != 1 {
            return Err(LmmError::Config(format!(
                "mock script {}: unsupported version {}",
                path.display(),
                script.version
            )));
        }
        Ok(script)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("serializable script");
        text.push('\n');
        crate::dataset::write_atomic(path, text.as_bytes())
    }

    pub fn with_rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn with_stage_default(mut self, stage: StageKind, response: impl Into<String>) -> Self {
        self.stage_defaults.insert(stage, response.into());
        self
    }

    /// Response text for `req`, or the scripted error.
    pub fn resolve(&self, req: &LmmRequest) -> Result<&str, &str> {
        if let Some(rule) = self.rules.iter().find(|r| r.matches(req)) {
            if let Some(err) = &rule.error {
                return Err(err);
            }
            if let Some(resp) = &rule.response {
                return Ok(resp);
            }
        }
        Ok(self
            .stage_defaults
            .get(&req.stage)
            .unwrap_or(&self.default_response))
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    id: String,
    model: String,
    script: MockScript,
}

impl MockBackend {
    pub fn new(model: impl Into<String>, script: MockScript) -> Self {
        let model = model.into();
        MockBackend {
            id: format!("mock:{model}"),
            model,
            script,
        }
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

impl LmmBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn call(&self, req: &LmmRequest) -> Result<Completion, CallError> {
        let text = self
            .script
            .resolve(req)
            .map_err(|e| CallError::Scripted(e.to_string()))?;
        let input_tokens = word_count(&req.system_prompt)
            + req
                .user_parts
                .iter()
                .map(|p| match p {
                    UserPart::Text(t) => word_count(t),
                    UserPart::Image(_) => 85,
                })
                .sum::<u64>();
        Ok(Completion {
            text: text.to_string(),
            usage: Usage {
                input_tokens,
                output_tokens: word_count(text),
            },
        })
    }
}

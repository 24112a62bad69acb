//! Chat-completions style HTTP backend.

use std::time::Duration;

use serde_json::{json, Value};

use super::{CallError, Completion, LmmBackend, LmmRequest, Usage, UserPart};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Other(String),
}

/// Minimal POST transport, swappable for a scripted fake in tests.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError>;
}

#[derive(Debug, Default)]
pub struct UreqTransport;

impl HttpTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let payload = serde_json::to_string(body).expect("serializable body");
        match req.send(payload.as_bytes()) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let body = resp
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| classify_ureq(&e))?;
                Ok(HttpReply { status, body })
            }
            Err(e) => Err(classify_ureq(&e)),
        }
    }
}

fn classify_ureq(e: &ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        other => TransportError::Other(other.to_string()),
    }
}

pub struct RemoteBackend {
    id: String,
    endpoint: String,
    model: String,
    api_key: String,
    timeout: Duration,
    transport: Box<dyn HttpTransport>,
}

impl RemoteBackend {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: impl Into<String>,
        timeout: Duration,
        transport: Box<dyn HttpTransport>,
    ) -> Self {
        let model = model.into();
        RemoteBackend {
            id: format!("remote:{model}"),
            endpoint: endpoint.into(),
            model,
            api_key: api_key.into(),
            timeout,
            transport,
        }
    }
}

/// Request body: `model`, `messages` (system text, then user text and
/// `image_url` data-URI parts in order), `temperature`, `max_tokens`.
pub fn build_chat_body(model: &str, req: &LmmRequest) -> Value {
    let content: Vec<Value> = req
        .user_parts
        .iter()
        .map(|p| match p {
            UserPart::Text(t) => json!({ "type": "text", "text": t }),
            UserPart::Image(img) => json!({
                "type": "image_url",
                "image_url": { "url": img.data_uri() },
            }),
        })
        .collect();
    let mut messages = Vec::with_capacity(2);
    if !req.system_prompt.is_empty() {
        messages.push(json!({ "role": "system", "content": req.system_prompt }));
    }
    messages.push(json!({ "role": "user", "content": content }));
    json!({
        "model": model,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_output_tokens,
    })
}

pub fn parse_chat_response(body: &str) -> Result<Completion, CallError> {
    let v: Value = serde_json::from_str(body).map_err(|e| CallError::Malformed(e.to_string()))?;
    let content = &v["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        _ => return Err(CallError::Malformed("missing choices[0].message.content".into())),
    };
    let usage = Usage {
        input_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        output_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
    };
    Ok(Completion { text, usage })
}

impl LmmBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn call(&self, req: &LmmRequest) -> Result<Completion, CallError> {
        let body = build_chat_body(&self.model, req);
        let headers = [("Authorization".to_string(), format!("Bearer {}", self.api_key))];
        let reply = self
            .transport
            .post_json(&self.endpoint, &headers, &body, self.timeout)
            .map_err(|e| match e {
                TransportError::Timeout => CallError::Timeout,
                TransportError::Other(m) => CallError::Transport(m),
            })?;
        if !(200..300).contains(&reply.status) {
            return Err(CallError::Status {
                code: reply.status,
                body: reply.body,
            });
        }
        parse_chat_response(&reply.body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmm::{ImageAttachment, StageKind};

    #[test]
    fn body_layout() {
        let req = LmmRequest::new(
            StageKind::Multistep,
            "be precise",
            vec![
                UserPart::Image(ImageAttachment::new("image/png", vec![0xff, 0x00])),
                UserPart::Text("what sign?".into()),
            ],
        );
        let b = build_chat_body("gpt-4o", &req);
        assert_eq!(b["model"], "gpt-4o");
        assert_eq!(b["messages"][0]["role"], "system");
        assert_eq!(b["messages"][1]["content"][0]["type"], "image_url");
        assert_eq!(
            b["messages"][1]["content"][0]["image_url"]["url"],
            "data:image/png;base64,/wA="
        );
        assert_eq!(b["messages"][1]["content"][1]["text"], "what sign?");
        assert_eq!(b["temperature"], 0.0);
        assert_eq!(b["max_tokens"], 1024);
    }

    #[test]
    fn parse_response_variants() {
        let c = parse_chat_response(
            r#"{"choices":[{"message":{"content":"1. Stop"}}],"usage":{"prompt_tokens":10,"completion_tokens":3}}"#,
        )
        .unwrap();
        assert_eq!(c.text, "1. Stop");
        assert_eq!(c.usage.input_tokens, 10);
        let c = parse_chat_response(
            r#"{"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]}"#,
        )
        .unwrap();
        assert_eq!(c.text, "ab");
        assert!(matches!(parse_chat_response("{}"), Err(CallError::Malformed(_))));
        assert!(matches!(parse_chat_response("not json"), Err(CallError::Malformed(_))));
    }
}

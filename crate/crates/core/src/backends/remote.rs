use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{non_empty, Backend, BackendError, GenRequest, Segment};

#[derive(Serialize)]
struct WireRequest<'a> {
    segments: &'a [Segment],
    max_tokens: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

/// Client for a model served over HTTP.
///
/// `POST <endpoint>` with `{segments, max_tokens, seed}`; the server answers
/// `{text}`. Connection failures, timeouts and 5xx answers are retriable.
pub struct RemoteBackend {
    name: String,
    endpoint: String,
    model: Option<String>,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(name: &str, endpoint: &str, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build();
        RemoteBackend {
            name: name.to_string(),
            endpoint: endpoint.to_string(),
            model: None,
            agent: ureq::Agent::new_with_config(config),
        }
    }

    pub fn with_model(mut self, model: Option<String>) -> Self {
        self.model = model;
        self
    }
}

impl Backend for RemoteBackend {
    fn generate(&self, request: &GenRequest) -> Result<String, BackendError> {
        request.validate()?;
        let body = WireRequest {
            segments: &request.segments,
            max_tokens: request.max_tokens,
            seed: request.seed,
            model: self.model.as_deref(),
        };
        let mut response =
            self.agent.post(&self.endpoint).send_json(&body).map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        if status >= 500 {
            return Err(BackendError::Transport(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            let detail = response.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Remote(format!("HTTP {status}: {detail}")));
        }
        let parsed: WireResponse = response.body_mut().read_json().map_err(|e| BackendError::Remote(e.to_string()))?;
        non_empty(parsed.text)
    }

    fn name(&self) -> &str {
        &self.name
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::SegmentTag;
    use axum::{routing::post, Json, Router};
    use serde_json::{json, Value};

    fn serve(app: Router) -> (String, std::thread::JoinHandle<()>) {
        let (tx, rx) = std::sync::mpsc::channel();
        let handle = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                axum::serve(listener, app).await.unwrap();
            });
        });
        (format!("http://{}/generate", rx.recv().unwrap()), handle)
    }

    #[test]
    fn echoes_goal_from_mock_server() {
        let app = Router::new().route(
            "/generate",
            post(|Json(body): Json<Value>| async move {
                let goal = body["segments"]
                    .as_array()
                    .and_then(|s| s.iter().find(|seg| seg["tag"] == "GOAL"))
                    .and_then(|seg| seg["text"].as_str())
                    .unwrap_or("")
                    .to_string();
                Json(json!({ "text": format!("have you ever been to {goal}?") }))
            }),
        );
        let (url, _server) = serve(app);
        let backend = RemoteBackend::new("remote", &url, Duration::from_secs(5));
        let req = GenRequest::new(1).segment(SegmentTag::Context, "hi").segment(SegmentTag::Goal, "norwich");
        assert!(backend.generate(&req).unwrap().contains("norwich"));
    }

    #[test]
    fn unreachable_is_retriable() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let backend = RemoteBackend::new("remote", &format!("http://{addr}/generate"), Duration::from_millis(500));
        let err = backend.generate(&GenRequest::new(0).segment(SegmentTag::Context, "hi")).unwrap_err();
        assert!(err.is_retriable(), "{err}");
    }
}

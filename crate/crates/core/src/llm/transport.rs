//! Pluggable HTTP transport. The client only ever POSTs JSON.

use std::time::Duration;

#[derive(Debug, Clone)]
pub struct HttpRequest<'a> {
    pub url: &'a str,
    pub bearer: Option<&'a str>,
    pub body: &'a [u8],
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
}

pub trait Transport: Send + Sync {
    fn post_json(&self, req: &HttpRequest<'_>) -> Result<HttpResponse, TransportError>;
}

/// Blocking HTTP(S) transport backed by `ureq`.
#[derive(Debug, Clone)]
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl Default for UreqTransport {
    fn default() -> Self {
        let config = ureq::Agent::config_builder().http_status_as_error(false).build();
        UreqTransport { agent: ureq::Agent::new_with_config(config) }
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, req: &HttpRequest<'_>) -> Result<HttpResponse, TransportError> {
        let mut builder = self
            .agent
            .post(req.url)
            .config()
            .timeout_global(Some(req.timeout))
            .build()
            .header("Content-Type", "application/json");
        if let Some(token) = req.bearer {
            builder = builder.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = builder.send(req.body).map_err(map_ureq_error)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(map_ureq_error)?;
        Ok(HttpResponse { status, body })
    }
}

fn map_ureq_error(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => TransportError::Timeout,
        other => TransportError::Connect(other.to_string()),
    }
}

/// Transport backed by a closure; useful for stubs and offline runs.
pub struct FnTransport<F>(pub F);

impl<F> Transport for FnTransport<F>
where
    F: Fn(&HttpRequest<'_>) -> Result<HttpResponse, TransportError> + Send + Sync,
{
    fn post_json(&self, req: &HttpRequest<'_>) -> Result<HttpResponse, TransportError> {
        (self.0)(req)
    }
}

/// Refuses every request. Replay clients hold one so a bug that reaches the
/// network fails loudly instead of silently going live.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoNetwork;

impl Transport for NoNetwork {
    fn post_json(&self, _req: &HttpRequest<'_>) -> Result<HttpResponse, TransportError> {
        Err(TransportError::Connect("network disabled".into()))
    }
}

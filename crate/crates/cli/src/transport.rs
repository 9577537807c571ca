use std::time::Duration;

use riskner::ingest::{HttpRequest, HttpResponse, HttpTransport, IngestError};

/// Blocking HTTP transport. Non-2xx statuses are returned, not raised, so
/// the client can apply its own retry policy.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new() -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build(),
        }
    }
}

impl HttpTransport for UreqTransport {
    fn get(&mut self, request: &HttpRequest) -> Result<HttpResponse, IngestError> {
        let mut req = self.agent.get(&request.url);
        for (k, v) in &request.headers {
            req = req.set(k, v);
        }
        let (status, resp) = match req.call() {
            Ok(resp) => (resp.status(), resp),
            Err(ureq::Error::Status(code, resp)) => (code, resp),
            Err(e) => return Err(IngestError::Transport(e.to_string())),
        };
        let body = resp.into_string().map_err(|e| IngestError::Transport(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

//! Where requests go: a service opened in-process, or a running server.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rfidtrace_core::{Request, Service, ServiceConfig};
use serde_json::{json, Value as Json};

pub struct Credentials {
    pub user: Option<String>,
    pub password: Option<String>,
    pub token: Option<String>,
}

impl Credentials {
    fn user_password(&self) -> Result<(&str, &str)> {
        match (&self.user, &self.password) {
            (Some(u), Some(p)) => Ok((u, p)),
            _ => bail!("credentials required: pass --user and --password or set RFIDTRACE_USER and RFIDTRACE_PASSWORD"),
        }
    }
}

pub enum Backend {
    Local { service: Box<Service>, token: Option<String> },
    Remote { base: String, http: reqwest::blocking::Client, token: Option<String> },
}

/// A failed request, carrying the service's error code.
#[derive(Debug)]
pub struct ApiFailure {
    pub code: String,
    pub message: String,
}

impl std::fmt::Display for ApiFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({})", self.message, self.code)
    }
}

impl std::error::Error for ApiFailure {}

impl Backend {
    pub fn local(config: &Path) -> Result<Self> {
        let cfg = ServiceConfig::load(config)?;
        let service = Service::open(cfg)?;
        Ok(Backend::Local { service: Box::new(service), token: None })
    }

    pub fn remote(base: &str) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .context("http client")?;
        Ok(Backend::Remote { base: base.trim_end_matches('/').to_string(), http, token: None })
    }

    pub fn service_mut(&mut self) -> Option<&mut Service> {
        match self {
            Backend::Local { service, .. } => Some(service),
            Backend::Remote { .. } => None,
        }
    }

    /// Establishes a session unless the request needs none.
    pub fn authenticate(&mut self, creds: &Credentials, req: &Request) -> Result<()> {
        if matches!(req, Request::Health | Request::Login { .. }) {
            return Ok(());
        }
        if let Some(t) = &creds.token {
            self.set_token(t.clone());
            return Ok(());
        }
        let (user, password) = creds.user_password()?;
        let login = Request::Login { username: user.to_string(), password: password.to_string() };
        let reply = self.call(login)?;
        let token = reply["token"].as_str().ok_or_else(|| anyhow!("login reply without token"))?;
        self.set_token(token.to_string());
        Ok(())
    }

    fn set_token(&mut self, t: String) {
        match self {
            Backend::Local { token, .. } | Backend::Remote { token, .. } => *token = Some(t),
        }
    }

    pub fn call(&mut self, req: Request) -> Result<Json> {
        match self {
            Backend::Local { service, token } => service
                .handle(token.as_deref(), req)
                .map_err(|e| anyhow::Error::new(ApiFailure { code: e.code().to_string(), message: e.to_string() })),
            Backend::Remote { base, http, token } => {
                let op = req.op();
                let mut body = serde_json::to_value(&req)?;
                if let Some(m) = body.as_object_mut() {
                    m.remove("op");
                }
                let mut call = http.post(format!("{base}/api/{op}")).json(&body);
                if let Some(t) = token {
                    call = call.bearer_auth(t);
                }
                let resp = call.send().with_context(|| format!("contacting {base}"))?;
                let status = resp.status();
                let text = resp.text().with_context(|| format!("reply to {op}"))?;
                let reply: Json = match serde_json::from_str(&text) {
                    Ok(v) => v,
                    Err(_) if !status.is_success() => {
                        json!({ "error": "http", "message": format!("{status} {text}") })
                    }
                    Err(e) => return Err(e).with_context(|| format!("reply to {op}")),
                };
                if status.is_success() {
                    Ok(reply)
                } else {
                    Err(anyhow::Error::new(ApiFailure {
                        code: reply["error"].as_str().unwrap_or("http").to_string(),
                        message: reply["message"].as_str().unwrap_or(status.as_str()).to_string(),
                    }))
                }
            }
        }
    }
}

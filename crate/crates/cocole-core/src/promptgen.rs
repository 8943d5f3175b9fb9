//! Per-class prompt text generation.
//!
//! The default generator is a deterministic template. An external service
//! can be plugged in over a local HTTP endpoint (enabled via the
//! `COCOLE_LLM_ENDPOINT` environment variable); any failure or timeout falls
//! back to the template so prompt-set construction never blocks on the
//! network.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use crate::error::{Error, Result};

pub const ENDPOINT_ENV: &str = "COCOLE_LLM_ENDPOINT";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

pub trait PromptGenerator {
    fn generate(&self, class_name: &str, concepts: &[String]) -> Result<Vec<String>>;

    fn name(&self) -> &'static str {
        "generator"
    }
}

// ── Template generator ──────────────────────────────────────────────

/// `a photo of <class> which is <c1> <c2> ...` with overridable pieces.
#[derive(Debug, Clone)]
pub struct TemplateGenerator {
    pub prefix: Vec<String>,
    pub connector: Vec<String>,
}

impl Default for TemplateGenerator {
    fn default() -> Self {
        TemplateGenerator {
            prefix: ["a", "photo", "of"].iter().map(|s| s.to_string()).collect(),
            connector: ["which", "is"].iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PromptGenerator for TemplateGenerator {
    fn generate(&self, class_name: &str, concepts: &[String]) -> Result<Vec<String>> {
        let mut words = self.prefix.clone();
        words.push(class_name.to_string());
        words.extend(self.connector.iter().cloned());
        words.extend(concepts.iter().cloned());
        Ok(words)
    }

    fn name(&self) -> &'static str {
        "template"
    }
}

// ── External HTTP generator ─────────────────────────────────────────

#[derive(Debug, Serialize)]
struct GenerateRequest<'a> {
    class_name: &'a str,
    concepts: &'a [String],
}

#[derive(Debug, Deserialize)]
struct GenerateResponse {
    words: Vec<String>,
}

/// Minimal HTTP/1.1 POST client for a local endpoint like
/// `http://127.0.0.1:8089/generate`. Connect/read/write all share one
/// timeout budget.
#[derive(Debug, Clone)]
pub struct HttpGenerator {
    host: String,
    port: u16,
    path: String,
    pub timeout: Duration,
}

impl HttpGenerator {
    pub fn from_endpoint(endpoint: &str) -> Result<Self> {
        let rest = endpoint
            .strip_prefix("http://")
            .ok_or_else(|| Error::Generator(format!("endpoint must be http://, got {endpoint}")))?;
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], rest[i..].to_string()),
            None => (rest, "/".to_string()),
        };
        let (host, port) = match authority.rsplit_once(':') {
            Some((h, p)) => (
                h.to_string(),
                p.parse::<u16>()
                    .map_err(|_| Error::Generator(format!("bad port in {endpoint}")))?,
            ),
            None => (authority.to_string(), 80),
        };
        if host.is_empty() {
            return Err(Error::Generator(format!("empty host in {endpoint}")));
        }
        Ok(HttpGenerator { host, port, path, timeout: DEFAULT_TIMEOUT })
    }

    fn post(&self, body: &str) -> Result<String> {
        let addr = format!("{}:{}", self.host, self.port);
        let sockaddr = addr
            .parse()
            .map_err(|_| Error::Generator(format!("endpoint host must be an address: {addr}")))?;
        let mut stream = TcpStream::connect_timeout(&sockaddr, self.timeout)
            .map_err(|e| Error::Generator(format!("connect {addr}: {e}")))?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        let request = format!(
            "POST {} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            self.path,
            self.host,
            body.len(),
            body
        );
        stream
            .write_all(request.as_bytes())
            .map_err(|e| Error::Generator(format!("write: {e}")))?;
        let mut raw = String::new();
        stream
            .read_to_string(&mut raw)
            .map_err(|e| Error::Generator(format!("read: {e}")))?;
        let (head, payload) = raw
            .split_once("\r\n\r\n")
            .ok_or_else(|| Error::Generator("malformed HTTP response".into()))?;
        let status = head.lines().next().unwrap_or("");
        if !status.contains("200") {
            return Err(Error::Generator(format!("endpoint returned {status}")));
        }
        Ok(payload.to_string())
    }
}

impl PromptGenerator for HttpGenerator {
    fn generate(&self, class_name: &str, concepts: &[String]) -> Result<Vec<String>> {
        let body = serde_json::to_string(&GenerateRequest { class_name, concepts })?;
        let payload = self.post(&body)?;
        let resp: GenerateResponse = serde_json::from_str(payload.trim())
            .map_err(|e| Error::Generator(format!("bad response body: {e}")))?;
        if resp.words.is_empty() {
            return Err(Error::Generator("endpoint returned an empty word list".into()));
        }
        Ok(resp.words)
    }

    fn name(&self) -> &'static str {
        "http"
    }
}

// ── Entry points ────────────────────────────────────────────────────

/// Run the configured generator; on failure fall back to the template and
/// record a warning on stderr.
pub fn generate_prompt(
    class_name: &str,
    concepts: &[String],
    generator: &dyn PromptGenerator,
    fallback: &TemplateGenerator,
) -> Result<Vec<String>> {
    if class_name.is_empty() {
        return Err(Error::degenerate("generate_prompt", "empty class name"));
    }
    if concepts.is_empty() {
        return Err(Error::degenerate("generate_prompt", "empty concept list"));
    }
    match generator.generate(class_name, concepts) {
        Ok(words) if !words.is_empty() => Ok(words),
        Ok(_) => {
            eprintln!(
                "warning: {} generator returned no words for class {class_name}; using template",
                generator.name()
            );
            fallback.generate(class_name, concepts)
        }
        Err(e) => {
            eprintln!(
                "warning: {} generator failed for class {class_name} ({e}); using template",
                generator.name()
            );
            fallback.generate(class_name, concepts)
        }
    }
}

/// The generator selected by the environment: external HTTP when
/// `COCOLE_LLM_ENDPOINT` is set, the template otherwise.
pub fn generator_from_env() -> Result<Box<dyn PromptGenerator>> {
    match std::env::var(ENDPOINT_ENV) {
        Ok(endpoint) if !endpoint.is_empty() => {
            Ok(Box::new(HttpGenerator::from_endpoint(&endpoint)?))
        }
        _ => Ok(Box::new(TemplateGenerator::default())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    #[test]
    fn template_matches_documented_form() {
        let t = TemplateGenerator::default();
        let words = t
            .generate("cat", &["furry".to_string(), "small".to_string()])
            .unwrap();
        assert_eq!(words, vec!["a", "photo", "of", "cat", "which", "is", "furry", "small"]);
        // deterministic
        assert_eq!(words, t.generate("cat", &["furry".into(), "small".into()]).unwrap());
    }

    #[test]
    fn generate_prompt_validates_inputs() {
        let t = TemplateGenerator::default();
        assert!(generate_prompt("", &["x".into()], &t, &t).is_err());
        assert!(generate_prompt("cat", &[], &t, &t).is_err());
    }

    #[test]
    fn endpoint_parsing() {
        let g = HttpGenerator::from_endpoint("http://127.0.0.1:8089/generate").unwrap();
        assert_eq!(g.host, "127.0.0.1");
        assert_eq!(g.port, 8089);
        assert_eq!(g.path, "/generate");
        assert!(HttpGenerator::from_endpoint("https://x/").is_err());
    }

    fn spawn_server(response_body: Option<&'static str>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            if let Ok((mut sock, _)) = listener.accept() {
                let mut buf = [0u8; 4096];
                let _ = sock.read(&mut buf);
                match response_body {
                    Some(body) => {
                        let resp = format!(
                            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                            body.len(),
                            body
                        );
                        let _ = sock.write_all(resp.as_bytes());
                    }
                    None => {
                        // accept, read, never answer: forces a read timeout
                        std::thread::sleep(Duration::from_secs(2));
                    }
                }
            }
        });
        format!("http://{addr}/generate")
    }

    #[test]
    fn http_generator_roundtrip() {
        let endpoint = spawn_server(Some(r#"{"words":["a","sleek","cat","portrait"]}"#));
        let g = HttpGenerator::from_endpoint(&endpoint).unwrap();
        let words = g.generate("cat", &["sleek".into()]).unwrap();
        assert_eq!(words, vec!["a", "sleek", "cat", "portrait"]);
    }

    #[test]
    fn http_timeout_falls_back_to_template() {
        let endpoint = spawn_server(None);
        let mut g = HttpGenerator::from_endpoint(&endpoint).unwrap();
        g.timeout = Duration::from_millis(100);
        let fallback = TemplateGenerator::default();
        let words =
            generate_prompt("cat", &["sleek".to_string()], &g, &fallback).unwrap();
        assert_eq!(words, fallback.generate("cat", &["sleek".into()]).unwrap());
    }

    #[test]
    fn unreachable_endpoint_falls_back() {
        // port 1 on localhost: connection refused immediately
        let mut g = HttpGenerator::from_endpoint("http://127.0.0.1:1/generate").unwrap();
        g.timeout = Duration::from_millis(200);
        let fallback = TemplateGenerator::default();
        let words = generate_prompt("fern", &["green".to_string()], &g, &fallback).unwrap();
        assert_eq!(words, fallback.generate("fern", &["green".into()]).unwrap());
    }
}

//! Blocking JSON-over-HTTP with retry and exponential backoff, shared by the
//! hosted-model adapters.

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Clone)]
pub(crate) struct RetryPolicy {
    pub retries: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

pub(crate) fn agent(policy: &RetryPolicy) -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(policy.timeout))
        .build()
        .into()
}

/// POST `body` as JSON, retrying transport failures, 429 and 5xx responses.
/// Other 4xx responses fail immediately.
pub(crate) fn post_json<B: Serialize, R: DeserializeOwned>(
    agent: &ureq::Agent,
    url: &str,
    bearer: Option<&str>,
    body: &B,
    policy: &RetryPolicy,
) -> Result<R, String> {
    let mut backoff = policy.initial_backoff;
    let mut last_error = String::new();
    for attempt in 0..=policy.retries {
        if attempt > 0 {
            thread::sleep(backoff);
            backoff *= 2;
        }
        let mut request = agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        match request.send_json(body) {
            Ok(mut response) => {
                let status = response.status().as_u16();
                if status == 200 {
                    return response
                        .body_mut()
                        .read_json::<R>()
                        .map_err(|e| format!("invalid response body from {url}: {e}"));
                }
                let text = response.body_mut().read_to_string().unwrap_or_default();
                last_error = format!("{url} returned HTTP {status}: {}", text.trim());
                if status != 429 && status < 500 {
                    return Err(last_error);
                }
            }
            Err(e) => last_error = format!("request to {url} failed: {e}"),
        }
        log::warn!("attempt {} of {}: {last_error}", attempt + 1, policy.retries + 1);
    }
    Err(last_error)
}

/// Minimal scripted HTTP/1.1 server for adapter tests.
#[cfg(test)]
pub(crate) mod test_server {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};
    use std::thread;

    pub struct Server {
        pub url: String,
        pub requests: Arc<Mutex<Vec<String>>>,
    }

    /// Serve `responses` (status, body) in order, one per connection.
    pub fn serve(responses: Vec<(u16, String)>) -> Server {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap_or(0);
                    }
                    head.push_str(&line);
                }
                let mut payload = vec![0u8; content_length];
                reader.read_exact(&mut payload).unwrap();
                log.lock().unwrap().push(format!("{head}\r\n{}", String::from_utf8_lossy(&payload)));
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        Server { url, requests }
    }
}

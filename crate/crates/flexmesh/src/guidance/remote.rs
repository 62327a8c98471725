//! HTTP client for an external denoiser service.
//!
//! Wire protocol, version 1: `POST {base}/v1/denoise` with header
//! `x-flexmesh-proto: 1` and JSON body
//! `{"frames": <base64 LE f32>, "shape": [N,H,W,C], "noise_level": f, "prompt": s|null}`;
//! the response is `{"eps_hat": <base64 LE f32>, "shape": [N,H,W,C]}` with
//! the same shape. Calls are serialized through an internal lock so the
//! oracle can be shared freely; transient transport failures are retried.

use std::sync::Mutex;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{real, to_f64, Real};

use super::oracle::ScoreOracle;
use super::FrameStack;

pub struct RemoteDenoiser {
    endpoint: String,
    agent: ureq::Agent,
    retries: usize,
    serialize: Mutex<()>,
}

#[derive(Serialize)]
struct DenoiseRequest<'a> {
    frames: String,
    shape: [usize; 4],
    noise_level: f64,
    prompt: Option<&'a str>,
}

#[derive(Deserialize)]
struct DenoiseResponse {
    eps_hat: String,
    shape: Vec<usize>,
}

impl RemoteDenoiser {
    /// `base_url` is the service root, e.g. `http://localhost:9000`.
    pub fn new(base_url: &str, timeout: Duration, retries: usize) -> Result<Self> {
        let trimmed = base_url.trim_end_matches('/');
        if trimmed.is_empty() || !trimmed.starts_with("http") {
            return Err(Error::Remote(format!("invalid denoiser URL: {base_url:?}")));
        }
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Ok(RemoteDenoiser {
            endpoint: format!("{trimmed}/v1/denoise"),
            agent,
            retries,
            serialize: Mutex::new(()),
        })
    }

    fn call(&self, body: &str) -> Result<String> {
        let mut last_err = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(10 * attempt as u64));
            }
            match self
                .agent
                .post(&self.endpoint)
                .set("content-type", "application/json")
                .set("x-flexmesh-proto", "1")
                .send_string(body)
            {
                Ok(resp) => {
                    return resp
                        .into_string()
                        .map_err(|e| Error::Remote(format!("reading denoiser response: {e}")));
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::Remote(format!(
            "denoiser at {} failed after {} attempts: {last_err}",
            self.endpoint,
            self.retries + 1
        )))
    }
}

fn encode_f32<T: Real>(values: &[T]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(to_f64(v) as f32).to_le_bytes());
    }
    BASE64.encode(bytes)
}

fn decode_f32<T: Real>(encoded: &str, expected: usize) -> Result<Vec<T>> {
    let bytes = BASE64
        .decode(encoded)
        .map_err(|e| Error::Remote(format!("response payload is not base64: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Remote(format!(
            "response payload holds {} bytes, expected {} f32 values",
            bytes.len(),
            expected
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| real(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect())
}

impl<T: Real> ScoreOracle<T> for RemoteDenoiser {
    fn predict_eps(
        &self,
        frames: &FrameStack<T>,
        noise_level: T,
        condition: Option<&str>,
    ) -> Result<FrameStack<T>> {
        let _guard = self.serialize.lock().unwrap_or_else(|e| e.into_inner());
        let request = DenoiseRequest {
            frames: encode_f32(frames.data()),
            shape: frames.shape(),
            noise_level: to_f64(noise_level),
            prompt: condition,
        };
        let body = serde_json::to_string(&request)?;
        let raw = self.call(&body)?;
        let parsed: DenoiseResponse = serde_json::from_str(&raw)
            .map_err(|e| Error::Remote(format!("malformed denoiser response: {e}")))?;
        if parsed.shape != frames.shape() {
            return Err(Error::Remote(format!(
                "denoiser returned shape {:?} for input {:?}",
                parsed.shape,
                frames.shape()
            )));
        }
        let data = decode_f32(&parsed.eps_hat, frames.len())?;
        let [n, h, w, c] = frames.shape();
        FrameStack::new(n, h, w, c, data)
    }
}

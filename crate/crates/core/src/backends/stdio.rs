//! Adapters for models served by a child process. Each request is one JSON
//! line on the child's stdin and each reply one JSON line on its stdout; a
//! reply of the form `{"error": "..."}` becomes a backend error.
//!
//! Image inputs are written to temporary PNG files and passed by path.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tempfile::TempDir;

use crate::compliance::EmbedderBackend;
use crate::detection::{BoundingBox, DetectorBackend, ImageView};
use crate::error::{Error, Result};
use crate::scene::CaptionerBackend;

use super::LlmBackend;

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// One long-lived child process. Requests are serialized.
pub struct StdioProcess {
    id: String,
    channel: Mutex<Channel>,
    scratch: TempDir,
}

impl std::fmt::Debug for StdioProcess {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StdioProcess").field("id", &self.id).finish()
    }
}

impl StdioProcess {
    pub fn spawn(id: impl Into<String>, command: &[String]) -> Result<Self> {
        let id = id.into();
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config(format!("backend `{id}` has an empty command")))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::backend(&id, format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        let scratch = TempDir::new().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        Ok(StdioProcess {
            id,
            channel: Mutex::new(Channel { child, stdin, stdout }),
            scratch,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn request<T: DeserializeOwned>(&self, request: &Value) -> Result<T> {
        let mut channel = self.channel.lock().expect("stdio channel lock poisoned");
        let fail = |message: String| Error::backend(&self.id, message);
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        channel
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| channel.stdin.flush())
            .map_err(|e| fail(format!("write failed: {e}")))?;
        let mut reply = String::new();
        let read = channel
            .stdout
            .read_line(&mut reply)
            .map_err(|e| fail(format!("read failed: {e}")))?;
        if read == 0 {
            return Err(fail("process closed its output".into()));
        }
        let value: Value =
            serde_json::from_str(&reply).map_err(|e| fail(format!("invalid reply JSON: {e}")))?;
        if let Some(message) = value.get("error") {
            let message = message.as_str().map(str::to_owned).unwrap_or_else(|| message.to_string());
            return Err(fail(message));
        }
        serde_json::from_value(value).map_err(|e| fail(format!("unexpected reply shape: {e}")))
    }

    fn write_view(&self, view: &ImageView<'_>, n: usize) -> Result<PathBuf> {
        let name = format!(
            "{}-{}-{}-{n}.png",
            sanitize(view.image_id),
            view.origin.0,
            view.origin.1
        );
        let path = self.scratch.path().join(name);
        view.pixels
            .save(&path)
            .map_err(|e| Error::backend(&self.id, format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

impl Drop for StdioProcess {
    fn drop(&mut self) {
        if let Ok(channel) = self.channel.get_mut() {
            let _ = channel.child.kill();
            let _ = channel.child.wait();
        }
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn path_str(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

#[derive(Debug)]
pub struct StdioDetector(pub StdioProcess);

#[derive(Deserialize)]
struct DetectReply {
    boxes: Vec<BoundingBox>,
}

impl DetectorBackend for StdioDetector {
    fn id(&self) -> &str {
        self.0.id()
    }

    fn detect(&self, view: &ImageView<'_>, vocabulary: &[String], floor: f64) -> Result<Vec<BoundingBox>> {
        let path = self.0.write_view(view, 0)?;
        let reply: DetectReply = self.0.request(&json!({
            "image_path": path_str(&path),
            "vocabulary": vocabulary,
            "floor": floor,
        }))?;
        Ok(reply.boxes)
    }
}

#[derive(Debug)]
pub struct StdioCaptioner(pub StdioProcess);

#[derive(Deserialize)]
struct CaptionReply {
    caption: String,
}

impl CaptionerBackend for StdioCaptioner {
    fn id(&self) -> &str {
        self.0.id()
    }

    fn caption(&self, view: &ImageView<'_>) -> Result<String> {
        let path = self.0.write_view(view, 0)?;
        let reply: CaptionReply = self.0.request(&json!({"image_path": path_str(&path)}))?;
        Ok(reply.caption)
    }
}

#[derive(Debug)]
pub struct StdioEmbedder {
    process: StdioProcess,
    dim: usize,
}

impl StdioEmbedder {
    pub fn new(process: StdioProcess, dim: usize) -> Self {
        StdioEmbedder { process, dim }
    }
}

#[derive(Deserialize)]
struct EmbedReply {
    embeddings: Vec<Vec<f64>>,
}

impl EmbedderBackend for StdioEmbedder {
    fn id(&self) -> &str {
        self.process.id()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_images(&self, views: &[ImageView<'_>]) -> Result<Vec<Vec<f64>>> {
        let paths = views
            .iter()
            .enumerate()
            .map(|(n, v)| self.process.write_view(v, n).map(|p| path_str(&p)))
            .collect::<Result<Vec<_>>>()?;
        let reply: EmbedReply = self.process.request(&json!({"image_paths": paths}))?;
        Ok(reply.embeddings)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let reply: EmbedReply = self.process.request(&json!({"texts": texts}))?;
        Ok(reply.embeddings)
    }
}

#[derive(Debug)]
pub struct StdioLlm(pub StdioProcess);

#[derive(Deserialize)]
struct CompleteReply {
    text: String,
}

impl LlmBackend for StdioLlm {
    fn id(&self) -> &str {
        self.0.id()
    }

    fn complete(&self, system: &str, prompt: &str) -> Result<String> {
        let reply: CompleteReply = self.0.request(&json!({"system": system, "prompt": prompt}))?;
        Ok(reply.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shell(script: &str) -> StdioProcess {
        StdioProcess::spawn("sh-test", &["sh".into(), "-c".into(), script.into()]).unwrap()
    }

    #[test]
    fn round_trip_and_error_reply() {
        let llm = StdioLlm(shell(r#"read l; echo '{"text":"ok"}'; read l; echo '{"error":"boom"}'"#));
        assert_eq!(llm.complete("s", "p").unwrap(), "ok");
        let err = llm.complete("s", "p").unwrap_err();
        assert_eq!(err.kind(), "backend-error");
        assert!(err.to_string().contains("boom"));
    }

    #[test]
    fn closed_output_is_a_backend_error() {
        let llm = StdioLlm(shell("exit 0"));
        assert_eq!(llm.complete("s", "p").unwrap_err().kind(), "backend-error");
    }
}

//! Adapter for models served by an external inference runtime.
//!
//! The runtime is an executable invoked once per call as
//! `<program> <args..> <artifact>`; it reads one JSON [`RuntimeRequest`] on
//! stdin and answers with one JSON [`RuntimeResponse`] on stdout. Array
//! payloads travel as base64 of little-endian values.
//!
//! [`serve_runtime_request`] implements the runtime side for reference-model
//! artifacts, so the adapter can be exercised end to end without any
//! learned weights.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::reference::{ReferenceArtifact, ReferenceBackend};
use super::{BackendDescriptor, BackendError, ImageEmbedding, PromptSet, SegmentationBackend};
use crate::geometry::Affine;
use crate::volume::{ContentHash, ElementType, LogitVolume, Volume, VoxelData};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeCommand {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireVolume {
    pub dims: [usize; 3],
    pub element_type: ElementType,
    pub affine: Affine,
    pub data: String,
}

impl WireVolume {
    pub fn from_volume(v: &Volume) -> Self {
        Self {
            dims: v.dims(),
            element_type: v.element_type(),
            affine: *v.affine(),
            data: B64.encode(v.data().to_le_bytes()),
        }
    }

    pub fn to_volume(&self) -> Result<Volume, BackendError> {
        let bytes = decode_b64(&self.data)?;
        let data = VoxelData::from_le_bytes(self.element_type, &bytes)
            .ok_or_else(|| BackendError::Protocol("ragged voxel payload".into()))?;
        Volume::new(self.dims, data, self.affine).map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireGrid {
    pub dims: [usize; 3],
    pub data: String,
}

impl WireGrid {
    pub fn from_logits(l: &LogitVolume) -> Self {
        Self {
            dims: l.dims,
            data: encode_f64s(&l.values),
        }
    }

    pub fn to_logits(&self) -> Result<LogitVolume, BackendError> {
        LogitVolume::from_vec(self.dims, decode_f64s(&self.data)?)
            .map_err(|e| BackendError::ShapeMismatch(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEmbedding {
    pub grid: [usize; 3],
    pub channels: usize,
    pub values: String,
    pub backend: String,
    pub content_hash: String,
}

impl WireEmbedding {
    pub fn from_embedding(e: &ImageEmbedding) -> Self {
        Self {
            grid: e.grid,
            channels: e.channels,
            values: encode_f64s(&e.values),
            backend: e.backend.clone(),
            content_hash: e.content_hash.to_string(),
        }
    }

    pub fn to_embedding(&self) -> Result<ImageEmbedding, BackendError> {
        Ok(ImageEmbedding {
            grid: self.grid,
            channels: self.channels,
            values: decode_f64s(&self.values)?,
            backend: self.backend.clone(),
            content_hash: parse_hash(&self.content_hash)?,
            codebook: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeDescription {
    pub input_dims: [usize; 3],
    pub embedding_grid: [usize; 3],
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RuntimeRequest {
    Describe,
    Encode {
        volume: WireVolume,
    },
    Decode {
        embedding: WireEmbedding,
        prompts: PromptSet,
        prev: Option<WireGrid>,
        image: WireVolume,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RuntimeResponse {
    Described(RuntimeDescription),
    Encoded { embedding: WireEmbedding },
    Decoded { logits: WireGrid },
    Error { message: String },
}

fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_b64(s: &str) -> Result<Vec<u8>, BackendError> {
    B64.decode(s)
        .map_err(|e| BackendError::Protocol(format!("base64: {e}")))
}

fn decode_f64s(s: &str) -> Result<Vec<f64>, BackendError> {
    let bytes = decode_b64(s)?;
    if bytes.len() % 8 != 0 {
        return Err(BackendError::Protocol("ragged f64 payload".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn parse_hash(s: &str) -> Result<ContentHash, BackendError> {
    let bad = || BackendError::Protocol(format!("bad content hash `{s}`"));
    if s.len() != 64 || !s.is_ascii() {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (n, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&s[2 * n..2 * n + 2], 16).map_err(|_| bad())?;
    }
    Ok(ContentHash(out))
}

/// A backend whose encode/decode run in an external process.
#[derive(Debug, Clone)]
pub struct ExternalBackend {
    descriptor: BackendDescriptor,
    artifact: PathBuf,
    runtime: RuntimeCommand,
    description: RuntimeDescription,
}

impl ExternalBackend {
    /// Check the artifact and runtime, then verify the runtime's reported
    /// shapes against `descriptor`.
    pub fn open(
        descriptor: BackendDescriptor,
        artifact: impl AsRef<Path>,
        runtime: Option<RuntimeCommand>,
    ) -> Result<Self, BackendError> {
        descriptor.validate()?;
        let artifact = artifact.as_ref().to_path_buf();
        if !artifact.is_file() {
            return Err(BackendError::ArtifactNotFound(artifact.display().to_string()));
        }
        let runtime = runtime.ok_or_else(|| {
            BackendError::RuntimeUnavailable(format!(
                "no inference runtime configured for `{}`",
                descriptor.name
            ))
        })?;
        let description = match call(&runtime, &artifact, &RuntimeRequest::Describe)? {
            RuntimeResponse::Described(d) => d,
            other => return Err(unexpected(&other)),
        };
        if description.input_dims != descriptor.input_dims {
            return Err(BackendError::ShapeMismatch(format!(
                "artifact input {:?}, descriptor {:?}",
                description.input_dims, descriptor.input_dims
            )));
        }
        if description.embedding_grid != descriptor.embedding_grid() {
            return Err(BackendError::ShapeMismatch(format!(
                "artifact embedding grid {:?}, descriptor stride {:?} implies {:?}",
                description.embedding_grid,
                descriptor.stride,
                descriptor.embedding_grid()
            )));
        }
        Ok(Self {
            descriptor,
            artifact,
            runtime,
            description,
        })
    }

    pub fn description(&self) -> &RuntimeDescription {
        &self.description
    }
}

fn unexpected(resp: &RuntimeResponse) -> BackendError {
    match resp {
        RuntimeResponse::Error { message } => BackendError::Protocol(message.clone()),
        other => BackendError::Protocol(format!("unexpected response {other:?}")),
    }
}

fn call(
    runtime: &RuntimeCommand,
    artifact: &Path,
    request: &RuntimeRequest,
) -> Result<RuntimeResponse, BackendError> {
    let body = serde_json::to_vec(request).map_err(|e| BackendError::Protocol(e.to_string()))?;
    let mut child = Command::new(&runtime.program)
        .args(&runtime.args)
        .arg(artifact)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| BackendError::RuntimeUnavailable(format!("{}: {e}", runtime.program.display())))?;
    {
        let mut stdin = child.stdin.take().expect("stdin is piped");
        stdin
            .write_all(&body)
            .map_err(|e| BackendError::Protocol(format!("writing request: {e}")))?;
    }
    let out = child
        .wait_with_output()
        .map_err(|e| BackendError::Protocol(e.to_string()))?;
    if !out.status.success() {
        return Err(BackendError::Protocol(format!(
            "runtime exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| BackendError::Protocol(format!("response: {e}")))
}

impl SegmentationBackend for ExternalBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn encode(&self, volume: &Volume) -> Result<ImageEmbedding, BackendError> {
        if volume.dims() != self.descriptor.input_dims {
            return Err(BackendError::DimMismatch(format!(
                "volume {:?}, backend expects {:?}",
                volume.dims(),
                self.descriptor.input_dims
            )));
        }
        let req = RuntimeRequest::Encode {
            volume: WireVolume::from_volume(volume),
        };
        let emb = match call(&self.runtime, &self.artifact, &req)? {
            RuntimeResponse::Encoded { embedding } => embedding.to_embedding()?,
            other => return Err(unexpected(&other)),
        };
        emb.check(&self.descriptor)?;
        Ok(emb)
    }

    fn decode(
        &self,
        embedding: &ImageEmbedding,
        prompts: &PromptSet,
        prev: Option<&LogitVolume>,
        image: &Volume,
    ) -> Result<LogitVolume, BackendError> {
        prompts.validate(self.descriptor.input_dims)?;
        let req = RuntimeRequest::Decode {
            embedding: WireEmbedding::from_embedding(embedding),
            prompts: prompts.clone(),
            prev: prev.map(WireGrid::from_logits),
            image: WireVolume::from_volume(image),
        };
        let logits = match call(&self.runtime, &self.artifact, &req)? {
            RuntimeResponse::Decoded { logits } => logits.to_logits()?,
            other => return Err(unexpected(&other)),
        };
        if logits.dims != self.descriptor.input_dims {
            return Err(BackendError::ShapeMismatch(format!(
                "runtime returned logits {:?}, expected {:?}",
                logits.dims, self.descriptor.input_dims
            )));
        }
        Ok(logits)
    }
}

/// Answer one runtime request for a reference-model artifact (JSON-encoded
/// [`ReferenceArtifact`]). Errors are reported inside the response.
pub fn serve_runtime_request(artifact: &Path, request: &[u8]) -> RuntimeResponse {
    match handle(artifact, request) {
        Ok(r) => r,
        Err(e) => RuntimeResponse::Error {
            message: e.to_string(),
        },
    }
}

fn handle(artifact: &Path, request: &[u8]) -> Result<RuntimeResponse, BackendError> {
    let text = std::fs::read(artifact)
        .map_err(|e| BackendError::ArtifactNotFound(format!("{}: {e}", artifact.display())))?;
    let art: ReferenceArtifact =
        serde_json::from_slice(&text).map_err(|e| BackendError::Protocol(format!("artifact: {e}")))?;
    let backend = ReferenceBackend::new(art.descriptor, art.params)?;
    let req: RuntimeRequest =
        serde_json::from_slice(request).map_err(|e| BackendError::Protocol(e.to_string()))?;
    Ok(match req {
        RuntimeRequest::Describe => {
            let d = backend.descriptor();
            RuntimeResponse::Described(RuntimeDescription {
                input_dims: d.input_dims,
                embedding_grid: d.embedding_grid(),
                channels: 2,
            })
        }
        RuntimeRequest::Encode { volume } => {
            let e = backend.encode(&volume.to_volume()?)?;
            RuntimeResponse::Encoded {
                embedding: WireEmbedding::from_embedding(&e),
            }
        }
        RuntimeRequest::Decode {
            embedding,
            prompts,
            prev,
            image,
        } => {
            let prev = prev.map(|p| p.to_logits()).transpose()?;
            let logits = backend.decode(
                &embedding.to_embedding()?,
                &prompts,
                prev.as_ref(),
                &image.to_volume()?,
            )?;
            RuntimeResponse::Decoded {
                logits: WireGrid::from_logits(&logits),
            }
        }
    })
}

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use voxprompt_core::backend::{ExternalBackend, RuntimeCommand};
use voxprompt_core::{BackendDescriptor, BackendError, BackendRegistry, EngineConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("backend `{name}`: {error}")]
    Backend { name: String, error: BackendError },
    #[error("{0}")]
    Invalid(String),
}

/// A model served by an out-of-process runtime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalBackendConfig {
    #[serde(flatten)]
    pub descriptor: BackendDescriptor,
    pub artifact: PathBuf,
    #[serde(default)]
    pub runtime: Option<RuntimeCommand>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Largest accepted upload body.
    pub max_upload_bytes: usize,
    /// Largest accepted volume, in voxels.
    pub max_voxels: usize,
    /// Sessions untouched for this long are dropped.
    pub idle_timeout_secs: u64,
    /// Backend used when `POST /sessions` names none.
    pub default_backend: String,
    pub engine: EngineConfig,
    pub backends: Vec<ExternalBackendConfig>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_upload_bytes: 512 * 1024 * 1024,
            max_voxels: 1 << 28,
            idle_timeout_secs: 30 * 60,
            default_backend: "reference-3d".into(),
            engine: EngineConfig::default(),
            backends: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_upload_bytes == 0 || self.max_voxels == 0 {
            return Err(ConfigError::Invalid("caps must be positive".into()));
        }
        if !self.engine.tau.is_finite() || !self.engine.background_logit.is_finite() {
            return Err(ConfigError::Invalid(
                "tau and background_logit must be finite".into(),
            ));
        }
        self.engine
            .ensemble
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Reference backends plus every configured external one.
    pub fn build_registry(&self) -> Result<Arc<BackendRegistry>, ConfigError> {
        let mut registry = BackendRegistry::with_reference(self.engine.reference.clone());
        for b in &self.backends {
            let backend = ExternalBackend::open(b.descriptor.clone(), &b.artifact, b.runtime.clone())
                .map_err(|error| ConfigError::Backend {
                    name: b.descriptor.name.clone(),
                    error,
                })?;
            registry.insert(Arc::new(backend));
        }
        if registry.get(&self.default_backend).is_err() {
            return Err(ConfigError::Invalid(format!(
                "default backend `{}` is not registered",
                self.default_backend
            )));
        }
        Ok(Arc::new(registry))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = ServiceConfig::from_toml("").unwrap();
        assert_eq!(cfg, ServiceConfig::default());
        assert_eq!(cfg.max_upload_bytes, 512 << 20);
        assert_eq!(cfg.idle_timeout_secs, 1800);

        let cfg = ServiceConfig::from_toml(
            r#"
            max_voxels = 1000
            default_backend = "reference-3d-lite"
            [engine]
            tau = 0.5
            [engine.reference]
            sigma_d = 8.0
            gamma = 0.5
            [engine.ensemble]
            n = 7
            k = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.max_voxels, 1000);
        assert_eq!(cfg.engine.tau, 0.5);
        assert_eq!(cfg.engine.reference.sigma_d, 8.0);
        assert_eq!(cfg.engine.reference.w_d, 4.0);
        assert_eq!(cfg.engine.ensemble.n, 7);
        assert_eq!(cfg.engine.ensemble.k, Some(3));
        assert!(cfg.build_registry().unwrap().get("reference-2d").is_ok());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ServiceConfig::from_toml("bogus = 1").is_err());
        assert!(ServiceConfig::from_toml("[engine.ensemble]\nn = 1").is_err());
        let cfg = ServiceConfig {
            default_backend: "nope".into(),
            ..ServiceConfig::default()
        };
        assert!(matches!(cfg.build_registry(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn external_backend_needs_artifact() {
        let cfg = ServiceConfig::from_toml(
            r#"
            [[backends]]
            name = "onnx-3d"
            input_dims = [64, 64, 64]
            stride = [4, 4, 4]
            dimensionality = "volumetric"
            artifact = "/nonexistent/model.onnx"
            "#,
        )
        .unwrap();
        match cfg.build_registry() {
            Err(ConfigError::Backend { name, error }) => {
                assert_eq!(name, "onnx-3d");
                assert!(matches!(error, BackendError::ArtifactNotFound(_)));
            }
            other => panic!("{other:?}"),
        }
    }
}

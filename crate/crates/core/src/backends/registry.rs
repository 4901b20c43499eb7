use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, LocalToyBackend, RemoteBackend, ScriptedStub, TemplateStub, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    ScriptedStub,
    Remote,
    LocalToy,
}

/// One `[[backend]]` entry of a registry file.
///
/// ```toml
/// [[backend]]
/// name = "user_sim"
/// kind = "scripted_stub"
/// templates = ["have you been to {goal}?"]
///
/// [[backend]]
/// name = "chat"
/// kind = "remote"
/// endpoint = "http://127.0.0.1:8080/generate"
/// timeout_ms = 20000
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub name: String,
    pub kind: Option<BackendKind>,
    /// Lines replayed in order (scripted stub).
    #[serde(default)]
    pub script: Vec<String>,
    /// File with one script line per row, relative to the registry file.
    #[serde(default)]
    pub script_path: Option<PathBuf>,
    #[serde(default)]
    pub cycle: bool,
    /// Request-keyed templates (scripted stub); used when `script` is empty.
    #[serde(default)]
    pub templates: Vec<String>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
    /// Saved toy model (local toy).
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    #[serde(default)]
    pub temperature: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryFile {
    #[serde(default)]
    pub backend: Vec<BackendConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub kind: BackendKind,
}

/// Named backends. Names are unique.
#[derive(Default, Clone)]
pub struct BackendRegistry {
    entries: BTreeMap<String, (BackendKind, Arc<dyn Backend>)>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, kind: BackendKind, backend: Arc<dyn Backend>) -> Result<(), BackendError> {
        if self.entries.contains_key(name) {
            return Err(BackendError::Config(format!("duplicate backend name `{name}`")));
        }
        self.entries.insert(name.to_string(), (kind, backend));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Backend>, BackendError> {
        self.entries.get(name).map(|(_, b)| b.clone()).ok_or_else(|| BackendError::UnknownBackend(name.to_string()))
    }

    pub fn descriptors(&self) -> Vec<BackendDescriptor> {
        self.entries.iter().map(|(n, (k, _))| BackendDescriptor { name: n.clone(), kind: *k }).collect()
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let raw = fs::read_to_string(path).map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
        let file: RegistryFile =
            toml::from_str(&raw).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::from_configs(&file.backend, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_configs(configs: &[BackendConfig], base: &Path) -> Result<Self, BackendError> {
        let mut reg = BackendRegistry::new();
        for cfg in configs {
            let kind = cfg.kind.ok_or_else(|| BackendError::Config(format!("backend `{}` has no kind", cfg.name)))?;
            reg.register(&cfg.name, kind, build(cfg, kind, base)?)?;
        }
        Ok(reg)
    }
}

fn build(cfg: &BackendConfig, kind: BackendKind, base: &Path) -> Result<Arc<dyn Backend>, BackendError> {
    let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
    match kind {
        BackendKind::ScriptedStub => {
            let mut script = cfg.script.clone();
            if let Some(p) = &cfg.script_path {
                let p = resolve(p);
                let raw = fs::read_to_string(&p).map_err(|e| BackendError::Io(format!("{}: {e}", p.display())))?;
                script.extend(raw.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
            }
            if !script.is_empty() {
                let stub = ScriptedStub::new(script).named(&cfg.name);
                Ok(Arc::new(if cfg.cycle { stub.cycling() } else { stub }))
            } else if !cfg.templates.is_empty() {
                Ok(Arc::new(TemplateStub::new(cfg.templates.clone()).named(&cfg.name)))
            } else {
                Err(BackendError::Config(format!("scripted backend `{}` has neither script nor templates", cfg.name)))
            }
        }
        BackendKind::Remote => {
            let endpoint = cfg
                .endpoint
                .as_deref()
                .ok_or_else(|| BackendError::Config(format!("remote backend `{}` has no endpoint", cfg.name)))?;
            let timeout = Duration::from_millis(cfg.timeout_ms.unwrap_or(30_000));
            Ok(Arc::new(RemoteBackend::new(&cfg.name, endpoint, timeout).with_model(cfg.model.clone())))
        }
        BackendKind::LocalToy => {
            let p = cfg
                .model_path
                .as_ref()
                .ok_or_else(|| BackendError::Config(format!("toy backend `{}` has no model_path", cfg.name)))?;
            let model = ToyModel::load(&resolve(p))?;
            Ok(Arc::new(LocalToyBackend::new(&cfg.name, model, cfg.temperature)))
        }
    }
}

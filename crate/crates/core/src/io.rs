//! Self-describing JSON container for trained models.
//!
//! ```json
//! {"format": "fdia-model", "version": 1, "kind": "predictor",
//!  "scalar": "f32", "n_buses": 10, "payload": { ... }}
//! ```
//!
//! Numbers are written in shortest round-trip form, so a model saved in one
//! precision loads in the other (rounding when narrowing).

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::offline::OfflineClassifier;
use crate::policy::{PolicyNet, Role};
use crate::predictor::LstmPredictor;
use crate::scalar::Scalar;

pub const MODEL_FORMAT: &str = "fdia-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Predictor,
    OfflineClassifier,
    AdversaryPolicy,
    DefenderPolicy,
}

pub trait Model: Serialize + DeserializeOwned {
    fn kind(&self) -> ModelKind;
    fn n_buses(&self) -> usize;
    fn scalar_name(&self) -> &'static str;
    fn check(&self) -> Result<()>;
}

impl<T: Scalar> Model for LstmPredictor<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Predictor
    }
    fn n_buses(&self) -> usize {
        self.n_buses
    }
    fn scalar_name(&self) -> &'static str {
        T::NAME
    }
    fn check(&self) -> Result<()> {
        self.validate_shapes()
    }
}

impl<T: Scalar> Model for OfflineClassifier<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::OfflineClassifier
    }
    fn n_buses(&self) -> usize {
        self.n_buses
    }
    fn scalar_name(&self) -> &'static str {
        T::NAME
    }
    fn check(&self) -> Result<()> {
        self.validate_shapes()
    }
}

impl<T: Scalar> Model for PolicyNet<T> {
    fn kind(&self) -> ModelKind {
        match self.role {
            Role::Adversary => ModelKind::AdversaryPolicy,
            Role::Defender => ModelKind::DefenderPolicy,
        }
    }
    fn n_buses(&self) -> usize {
        self.n_buses
    }
    fn scalar_name(&self) -> &'static str {
        T::NAME
    }
    fn check(&self) -> Result<()> {
        self.validate_shapes()
    }
}

#[derive(Serialize)]
struct Header<'a, M> {
    format: &'a str,
    version: u32,
    kind: ModelKind,
    scalar: &'a str,
    n_buses: usize,
    payload: &'a M,
}

#[derive(Deserialize)]
struct Envelope<M> {
    format: String,
    version: u32,
    kind: ModelKind,
    #[allow(dead_code)]
    scalar: String,
    n_buses: usize,
    payload: M,
}

pub fn model_to_string<M: Model>(model: &M) -> Result<String> {
    Ok(serde_json::to_string(&Header {
        format: MODEL_FORMAT,
        version: MODEL_VERSION,
        kind: model.kind(),
        scalar: model.scalar_name(),
        n_buses: model.n_buses(),
        payload: model,
    })?)
}

/// Parses a container and checks that it holds a `want` model with
/// consistent shapes.
pub fn model_from_str<M: Model>(text: &str, want: ModelKind) -> Result<M> {
    let env: Envelope<serde_json::Value> = serde_json::from_str(text)?;
    if env.format != MODEL_FORMAT {
        return Err(Error::Model(format!("not a model file (format {:?})", env.format)));
    }
    if env.version != MODEL_VERSION {
        return Err(Error::Model(format!("unsupported model version {}", env.version)));
    }
    if env.kind != want {
        return Err(Error::Model(format!("expected a {want:?} model, file holds a {:?}", env.kind)));
    }
    let model: M = serde_json::from_value(env.payload)?;
    if model.kind() != want || model.n_buses() != env.n_buses {
        return Err(Error::Model("model header disagrees with its payload".into()));
    }
    model.check()?;
    Ok(model)
}

pub fn save_model<M: Model>(path: &Path, model: &M) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, model_to_string(model)?)?;
    Ok(())
}

pub fn load_model<M: Model>(path: &Path, want: ModelKind) -> Result<M> {
    let text = fs::read_to_string(path).map_err(|e| Error::Model(format!("cannot read {}: {e}", path.display())))?;
    model_from_str(&text, want)
}

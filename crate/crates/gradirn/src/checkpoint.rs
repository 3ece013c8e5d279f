//! Checkpoint directories: `manifest.json` plus one GTF file per parameter
//! and per Adam moment.

use std::fs;
use std::path::Path;

use gradirn_core::registration::DEFAULT_TAU_INIT;
use gradirn_core::{
    AdamState, DType, Real, RegistrationConfig, RegistrationParams, SimilarityKind, TrainConfig, Variant,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gtf;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantName {
    Vn,
    VnNograd,
    RcCnn,
    PlainGd,
}

impl From<Variant> for VariantName {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Vn => Self::Vn,
            Variant::VnNoGrad => Self::VnNograd,
            Variant::RcCnn => Self::RcCnn,
            Variant::PlainGd => Self::PlainGd,
        }
    }
}

impl From<VariantName> for Variant {
    fn from(v: VariantName) -> Self {
        match v {
            VariantName::Vn => Variant::Vn,
            VariantName::VnNograd => Variant::VnNoGrad,
            VariantName::RcCnn => Variant::RcCnn,
            VariantName::PlainGd => Variant::PlainGd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SimilarityRecord {
    Ssd,
    NccGlobal,
    NccLocal { window: usize },
}

impl From<SimilarityKind> for SimilarityRecord {
    fn from(k: SimilarityKind) -> Self {
        match k {
            SimilarityKind::Ssd => Self::Ssd,
            SimilarityKind::NccGlobal => Self::NccGlobal,
            SimilarityKind::NccLocal { window } => Self::NccLocal { window },
        }
    }
}

impl From<SimilarityRecord> for SimilarityKind {
    fn from(k: SimilarityRecord) -> Self {
        match k {
            SimilarityRecord::Ssd => Self::Ssd,
            SimilarityRecord::NccGlobal => Self::NccGlobal,
            SimilarityRecord::NccLocal { window } => Self::NccLocal { window },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub variant: VariantName,
    pub levels: usize,
    pub steps_per_level: usize,
    pub similarity: SimilarityRecord,
    pub lambda: f64,
    pub alpha: f64,
    pub plain_gd_step: f64,
}

impl From<&RegistrationConfig> for RegistrationRecord {
    fn from(c: &RegistrationConfig) -> Self {
        Self {
            variant: c.variant.into(),
            levels: c.levels,
            steps_per_level: c.steps_per_level,
            similarity: c.similarity.into(),
            lambda: c.lambda,
            alpha: c.alpha,
            plain_gd_step: c.plain_gd_step,
        }
    }
}

impl RegistrationRecord {
    pub fn to_config(&self) -> RegistrationConfig {
        RegistrationConfig {
            variant: self.variant.into(),
            levels: self.levels,
            steps_per_level: self.steps_per_level,
            similarity: self.similarity.into(),
            lambda: self.lambda,
            alpha: self.alpha,
            plain_gd_step: self.plain_gd_step,
            dump_intermediate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub clip_norm: Option<f64>,
    pub tau_init: f64,
}

impl TrainRecord {
    pub fn new(c: &TrainConfig, tau_init: f64) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            adam_eps: c.adam_eps,
            lambda: c.lambda,
            epochs: c.epochs,
            batch_size: c.batch_size,
            seed: c.seed,
            checkpoint_every: c.checkpoint_every,
            clip_norm: c.clip_norm,
            tau_init,
        }
    }

    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            lambda: self.lambda,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub registration: RegistrationRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainRecord>,
    /// Completed training epochs.
    pub epoch: usize,
    pub adam_step: u64,
    pub parameter_count: usize,
    pub parameters: Vec<TensorRecord>,
    #[serde(default)]
    pub adam: Vec<TensorRecord>,
}

/// Everything restored from a checkpoint directory.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub params: RegistrationParams<T>,
    pub adam: Option<AdamState<T>>,
    pub registration: RegistrationConfig,
    pub training: Option<TrainRecord>,
    pub epoch: usize,
}

fn dtype_name<T: Real>() -> &'static str {
    match T::DTYPE {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

/// Writes a checkpoint into `dir`, creating it if needed.
pub fn save<T: Real>(
    dir: &Path,
    params: &RegistrationParams<T>,
    adam: Option<&AdamState<T>>,
    reg: &RegistrationConfig,
    training: Option<&TrainRecord>,
    epoch: usize,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut parameters = Vec::new();
    let mut moments = Vec::new();
    for (i, p) in params.parameters().into_iter().enumerate() {
        let file = format!("{}.gtf", p.name);
        gtf::write_tensor(&dir.join(&file), &p.value)?;
        parameters.push(TensorRecord {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            file,
        });
        if let Some(st) = adam {
            for (kind, t) in [("m", &st.m[i]), ("v", &st.v[i])] {
                let name = format!("adam.{kind}.{}", p.name);
                let file = format!("{name}.gtf");
                gtf::write_tensor(&dir.join(&file), t)?;
                moments.push(TensorRecord {
                    name,
                    shape: t.shape().to_vec(),
                    file,
                });
            }
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        dtype: dtype_name::<T>().into(),
        registration: reg.into(),
        training: training.cloned(),
        epoch,
        adam_step: adam.map_or(0, |a| a.step),
        parameter_count: params.count_parameters(),
        parameters,
        adam: moments,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::json(&path))?;
    fs::write(&path, text + "\n").map_err(Error::io(&path))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    serde_json::from_str(&text).map_err(Error::json(&path))
}

/// Loads a checkpoint and validates every tensor against the shapes implied
/// by its registration config.
pub fn load<T: Real>(dir: &Path) -> Result<Checkpoint<T>> {
    let m = read_manifest(dir)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            m.format_version
        )));
    }
    if m.dtype != dtype_name::<T>() {
        return Err(Error::Checkpoint(format!(
            "stored as {}, requested {}",
            m.dtype,
            dtype_name::<T>()
        )));
    }
    let reg = m.registration.to_config();
    reg.validate()?;
    let mut params = if reg.variant.is_learnable() {
        let tau = m.training.as_ref().map_or(DEFAULT_TAU_INIT, |t| t.tau_init);
        RegistrationParams::init(&reg, tau, 0)
    } else {
        RegistrationParams::empty()
    };
    let expected = params.parameters().len();
    if m.parameters.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{} parameter tensors listed, the configuration needs {expected}",
            m.parameters.len()
        )));
    }
    for (p, rec) in params.parameters_mut().into_iter().zip(&m.parameters) {
        if rec.name != p.name || rec.shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "expected {} {:?}, manifest lists {} {:?}",
                p.name,
                p.value.shape(),
                rec.name,
                rec.shape
            )));
        }
        let t = gtf::read_tensor_exact::<T>(&dir.join(&rec.file))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!("{}: file shape {:?}", p.name, t.shape())));
        }
        p.value = t;
    }
    if params.count_parameters() != m.parameter_count {
        return Err(Error::Checkpoint(format!(
            "declared {} parameters, found {}",
            m.parameter_count,
            params.count_parameters()
        )));
    }
    let adam = if m.adam.is_empty() {
        None
    } else {
        let mut st = AdamState::new(&params);
        if m.adam.len() != 2 * expected {
            return Err(Error::Checkpoint("incomplete optimizer state".into()));
        }
        for (i, p) in params.parameters().into_iter().enumerate() {
            for (k, (kind, slot)) in [("m", &mut st.m[i]), ("v", &mut st.v[i])].into_iter().enumerate() {
                let rec = &m.adam[2 * i + k];
                let name = format!("adam.{kind}.{}", p.name);
                if rec.name != name || rec.shape != p.value.shape() {
                    return Err(Error::Checkpoint(format!("expected moment {name}, found {}", rec.name)));
                }
                let t = gtf::read_tensor_exact::<T>(&dir.join(&rec.file))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!("{name}: file shape {:?}", t.shape())));
                }
                *slot = t;
            }
        }
        st.step = m.adam_step;
        Some(st)
    };
    Ok(Checkpoint {
        params,
        adam,
        registration: reg,
        training: m.training,
        epoch: m.epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let reg = RegistrationConfig::default();
        let mut params = RegistrationParams::<f32>::init(&reg, 0.7, 3);
        params.step_sizes.tau[4].value = gradirn_core::Tensor::scalar(1.25);
        let mut adam = AdamState::new(&params);
        adam.step = 17;
        adam.m[3].data_mut()[5] = 0.5;
        let tr = TrainRecord::new(&TrainConfig::default(), 0.7);
        let a = tempfile::tempdir().unwrap();
        save(a.path(), &params, Some(&adam), &reg, Some(&tr), 4).unwrap();
        let ck = load::<f32>(a.path()).unwrap();
        assert_eq!(ck.params, params);
        assert_eq!(ck.adam.as_ref(), Some(&adam));
        assert_eq!(ck.epoch, 4);
        assert_eq!(ck.registration, reg);
        let b = tempfile::tempdir().unwrap();
        save(
            b.path(),
            &ck.params,
            ck.adam.as_ref(),
            &ck.registration,
            ck.training.as_ref(),
            ck.epoch,
        )
        .unwrap();
        for entry in fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(a.path().join(&name)).unwrap(),
                fs::read(b.path().join(&name)).unwrap(),
                "{name:?}"
            );
        }
        let m = read_manifest(a.path()).unwrap();
        assert_eq!(m.parameter_count, 88_527);
    }

    #[test]
    fn mismatched_levels_are_rejected() {
        let reg = RegistrationConfig::default();
        let params = RegistrationParams::<f32>::init(&reg, 1.0, 0);
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &params, None, &reg, None, 0).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.registration.levels = 2;
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load::<f32>(dir.path()), Err(Error::Checkpoint(_))));
        assert!(matches!(load::<f64>(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_tensor_is_rejected() {
        let reg = RegistrationConfig {
            levels: 1,
            ..Default::default()
        };
        let params = RegistrationParams::<f32>::init(&reg, 1.0, 0);
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &params, None, &reg, None, 0).unwrap();
        let f = dir.path().join("tau.2.gtf");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load::<f32>(dir.path()), Err(Error::LengthMismatch { .. })));
    }
}

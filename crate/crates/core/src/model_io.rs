//! Self-describing JSON model files.
//!
//! Tensors are stored as `{"shape": [...], "data": "<base64>"}` where `data`
//! holds little-endian `f64` values in row-major order. Round trips are
//! bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bfm::{BfmModel, Codebook, Temperatures};
use crate::error::{Error, Result};
use crate::features::{DataDistribution, FeatureMap};

pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl Tensor {
    pub fn encode(shape: Vec<usize>, values: &[f64]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self { shape, data: STANDARD.encode(bytes) }
    }

    pub fn decode(&self) -> Result<Vec<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Format(format!("bad base64 tensor payload: {e}")))?;
        let expected: usize = self.shape.iter().product();
        if bytes.len() != expected * 8 {
            return Err(Error::Format(format!(
                "tensor of shape {:?} needs {} bytes, found {}",
                self.shape,
                expected * 8,
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks are 8 bytes")))
            .collect())
    }

    fn matrix(m: &DMatrix<f64>) -> Self {
        let rows: Vec<f64> = m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
        Self::encode(vec![m.nrows(), m.ncols()], &rows)
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::Format(format!("expected a matrix, found shape {:?}", self.shape)));
        }
        let v = self.decode()?;
        Ok(DMatrix::from_row_slice(self.shape[0], self.shape[1], &v))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureRecord {
    pub interp: f64,
    pub policy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub d: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub codebook: Tensor,
    /// Shape `[k, n_states * n_actions, d]`.
    pub psi: Tensor,
    pub policies: Vec<Vec<usize>>,
    pub phi: Tensor,
    pub rho: Tensor,
    pub temperatures: TemperatureRecord,
}

impl ModelFile {
    pub fn from_model(model: &BfmModel) -> Self {
        let k = model.codebook().len();
        let n_sa = model.n_states() * model.n_actions();
        let d = model.dim();
        let mut psi = Vec::with_capacity(k * n_sa * d);
        for t in model.psi_tables() {
            for row in t.row_iter() {
                psi.extend(row.iter().copied());
            }
        }
        let t = model.temperatures();
        Self {
            version: MODEL_VERSION,
            d,
            n_states: model.n_states(),
            n_actions: model.n_actions(),
            gamma: model.discount(),
            codebook: Tensor::matrix(model.codebook().matrix()),
            psi: Tensor::encode(vec![k, n_sa, d], &psi),
            policies: model.greedy_policies().to_vec(),
            phi: Tensor::matrix(model.features().phi()),
            rho: Tensor::encode(vec![model.n_states()], model.rho().rho().as_slice()),
            temperatures: TemperatureRecord { interp: t.interp, policy: t.policy },
        }
    }

    pub fn into_model(self) -> Result<BfmModel> {
        if self.version != MODEL_VERSION {
            return Err(Error::Version { expected: MODEL_VERSION, found: self.version });
        }
        let codebook = Codebook::new(self.codebook.to_matrix()?)?;
        let phi = self.phi.to_matrix()?;
        if phi.nrows() != self.n_states || phi.ncols() != self.d {
            return Err(Error::Format("phi shape disagrees with header".into()));
        }
        let n_sa = self.n_states * self.n_actions;
        let k = codebook.len();
        if self.psi.shape != vec![k, n_sa, self.d] {
            return Err(Error::Format(format!("psi shape {:?} disagrees with header", self.psi.shape)));
        }
        let psi = self.psi.decode()?;
        let psi_tables = psi.chunks_exact(n_sa * self.d).map(|c| DMatrix::from_row_slice(n_sa, self.d, c)).collect();
        if self.rho.shape != vec![self.n_states] {
            return Err(Error::Format("rho shape disagrees with header".into()));
        }
        let rho = DataDistribution::new(DVector::from_vec(self.rho.decode()?))?;
        BfmModel::from_parts(
            codebook,
            psi_tables,
            self.policies,
            FeatureMap::new(phi)?,
            rho,
            Temperatures { interp: self.temperatures.interp, policy: self.temperatures.policy },
            self.gamma,
            self.n_actions,
        )
    }
}

/// Write `contents` to `path` via a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_model(model: &BfmModel, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(&ModelFile::from_model(model))?;
    write_atomic(path, &json)
}

pub fn model_from_json(text: &str) -> Result<BfmModel> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("model file is not valid JSON: {e}")))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == MODEL_VERSION as u64 => {}
        Some(v) => return Err(Error::Version { expected: MODEL_VERSION, found: v as u32 }),
        None => return Err(Error::Format("model file has no version field".into())),
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
    file.into_model()
}

pub fn load_model(path: &Path) -> Result<BfmModel> {
    model_from_json(&fs::read_to_string(path)?)
}

//! Binary containers: mel grids, frame-feature files, and the joint model
//! checkpoint (JSON manifest + little-endian f32 parameter blobs).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{LatentCodec, ModelConfig, ScheduleConfig};
use crate::dsp::{MelNorm, MelSpectrogram, SpectralConfig};
use crate::nn::{Adam, AdamConfig, MomentPair, ParamModel};
use crate::num::Real;
use crate::timeline::ActivityConfig;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` shape mismatch: stored {stored:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
}

// ---------------------------------------------------------------------------
// Mel container: {n_mels: u32, n_frames: u32, frame_rate: f64} + f32 values,
// all little-endian, plus an optional JSON sidecar with (min, max).

/// Sidecar path for a mel container.
pub fn mel_sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Writes a mel grid; when `norm` is given a JSON sidecar records the
/// normalization and the grid is treated as normalized on read.
pub fn write_mel<T: Real>(
    path: &Path,
    mel: &MelSpectrogram<T>,
    norm: Option<&MelNorm>,
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(mel.n_mels() as u32).to_le_bytes())?;
    w.write_all(&(mel.n_frames() as u32).to_le_bytes())?;
    w.write_all(&mel.frame_rate.to_le_bytes())?;
    for &v in mel.values.iter() {
        w.write_all(&(v.to_f64_c() as f32).to_le_bytes())?;
    }
    w.flush()?;
    if let Some(norm) = norm {
        std::fs::write(mel_sidecar_path(path), serde_json::to_string_pretty(norm)?)?;
    }
    Ok(())
}

/// Reads a mel grid; the sidecar, when present, marks it normalized.
pub fn read_mel<T: Real>(path: &Path) -> Result<(MelSpectrogram<T>, Option<MelNorm>), IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut u32buf = [0u8; 4];
    let mut f64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    let n_mels = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let n_frames = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut f64buf)?;
    let frame_rate = f64::from_le_bytes(f64buf);
    let mut data = vec![0u8; n_mels * n_frames * 4];
    r.read_exact(&mut data)
        .map_err(|_| IoError::Malformed("truncated mel payload".into()))?;
    let values = Array2::from_shape_vec(
        (n_mels, n_frames),
        data.chunks_exact(4)
            .map(|c| T::from_f64_c(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect(),
    )
    .map_err(|e| IoError::Malformed(e.to_string()))?;
    let sidecar = mel_sidecar_path(path);
    let norm = if sidecar.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(sidecar)?)?)
    } else {
        None
    };
    Ok((
        MelSpectrogram {
            values,
            frame_rate,
            normalized: norm.is_some(),
        },
        norm,
    ))
}

// ---------------------------------------------------------------------------
// Frame-feature files: {T: u32, D: u32, fps: f64} + row-major f32.

pub fn write_features<T: Real>(
    path: &Path,
    features: &Array2<T>,
    fps: f64,
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(features.nrows() as u32).to_le_bytes())?;
    w.write_all(&(features.ncols() as u32).to_le_bytes())?;
    w.write_all(&fps.to_le_bytes())?;
    for &v in features.iter() {
        w.write_all(&(v.to_f64_c() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features<T: Real>(path: &Path) -> Result<(Array2<T>, f64), IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut u32buf = [0u8; 4];
    let mut f64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    let t = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let d = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut f64buf)?;
    let fps = f64::from_le_bytes(f64buf);
    let mut data = vec![0u8; t * d * 4];
    r.read_exact(&mut data)
        .map_err(|_| IoError::Malformed("truncated feature payload".into()))?;
    let features = Array2::from_shape_vec(
        (t, d),
        data.chunks_exact(4)
            .map(|c| T::from_f64_c(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect(),
    )
    .map_err(|e| IoError::Malformed(e.to_string()))?;
    Ok((features, fps))
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic + u64 manifest length + manifest JSON +
// concatenated f32 tensor data at element offsets recorded in the manifest.

const CKPT_MAGIC: &[u8; 8] = b"STCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: u64,
}

/// Which condition encoder variant a checkpoint stores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CondEncoderKind {
    Learned,
    Pooling { factor: usize },
}

/// Joint checkpoint metadata for denoiser, adapter, condition encoder, and
/// text table (or a detector).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub kind: String,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub dsp: SpectralConfig,
    pub activity: ActivityConfig,
    pub codec: LatentCodec,
    pub denorm: Option<MelNorm>,
    pub vocab: Vec<String>,
    pub has_adapter: bool,
    pub conditioning_scale: f64,
    pub literal_middle_fusion: bool,
    pub cond_encoder: CondEncoderKind,
    pub detector: Option<crate::detector::DetectorConfig>,
    pub next_epoch: usize,
    pub adam_t: u64,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointManifest {
    pub fn new_diffusion(
        model: ModelConfig,
        schedule: ScheduleConfig,
        dsp: SpectralConfig,
        activity: ActivityConfig,
        codec: LatentCodec,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind: "diffusion".into(),
            model,
            schedule,
            dsp,
            activity,
            codec,
            denorm: None,
            vocab: Vec::new(),
            has_adapter: false,
            conditioning_scale: crate::adapter::DEFAULT_CONDITIONING_SCALE,
            literal_middle_fusion: false,
            cond_encoder: CondEncoderKind::Learned,
            detector: None,
            next_epoch: 0,
            adam_t: 0,
            tensors: Vec::new(),
        }
    }
}

/// Collects `(name, shape, f32 data)` from a model's parameters.
pub fn collect_tensors<T: Real>(model: &dyn ParamModel<T>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    model.visit_params_ref(&mut |name, p| {
        out.push((
            name.to_string(),
            p.value.shape().to_vec(),
            p.value.iter().map(|&v| v.to_f64_c() as f32).collect(),
        ));
    });
    out
}

/// Adds the optimizer's moment tensors under `opt.m.` / `opt.v.` prefixes.
pub fn collect_adam_tensors<T: Real>(opt: &Adam<T>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut names: Vec<&String> = opt.state.keys().collect();
    names.sort();
    let mut out = Vec::new();
    for name in names {
        let pair = &opt.state[name];
        out.push((
            format!("opt.m.{name}"),
            pair.m.shape().to_vec(),
            pair.m.iter().map(|&v| v.to_f64_c() as f32).collect(),
        ));
        out.push((
            format!("opt.v.{name}"),
            pair.v.shape().to_vec(),
            pair.v.iter().map(|&v| v.to_f64_c() as f32).collect(),
        ));
    }
    out
}

/// Writes the container; tensor offsets are filled into the manifest.
pub fn write_checkpoint(
    path: &Path,
    mut manifest: CheckpointManifest,
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
) -> Result<(), IoError> {
    let mut offset = 0u64;
    manifest.tensors.clear();
    for (name, shape, data) in &tensors {
        manifest.tensors.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += data.len() as u64;
    }
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_json)?;
    for (_, _, data) in &tensors {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parsed checkpoint: manifest plus tensors by name.
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(IoError::Malformed("bad checkpoint magic".into()));
    }
    let mut lenbuf = [0u8; 8];
    r.read_exact(&mut lenbuf)?;
    let len = u64::from_le_bytes(lenbuf) as usize;
    let mut manifest_json = vec![0u8; len];
    r.read_exact(&mut manifest_json)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_json)?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut tensors = HashMap::new();
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        if start + count > floats.len() {
            return Err(IoError::Malformed(format!(
                "tensor `{}` overruns the data section",
                entry.name
            )));
        }
        tensors.insert(
            entry.name.clone(),
            (entry.shape.clone(), floats[start..start + count].to_vec()),
        );
    }
    Ok(Checkpoint { manifest, tensors })
}

impl Checkpoint {
    /// Loads tensors into a model's parameters by name.
    pub fn load_into<T: Real>(&self, model: &mut dyn ParamModel<T>) -> Result<(), IoError> {
        let mut failure: Option<IoError> = None;
        model.visit_params(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            match self.tensors.get(name) {
                None => failure = Some(IoError::MissingTensor(name.to_string())),
                Some((shape, data)) => {
                    if shape != p.value.shape() {
                        failure = Some(IoError::ShapeMismatch {
                            name: name.to_string(),
                            stored: shape.clone(),
                            expected: p.value.shape().to_vec(),
                        });
                        return;
                    }
                    for (slot, &v) in p.value.iter_mut().zip(data.iter()) {
                        *slot = T::from_f64_c(v as f64);
                    }
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Restores Adam moment state stored under `opt.m.` / `opt.v.`.
    pub fn load_adam<T: Real>(&self, cfg: AdamConfig) -> Adam<T> {
        let mut state = HashMap::new();
        for (name, (shape, data)) in &self.tensors {
            if let Some(base) = name.strip_prefix("opt.m.") {
                let m = ArrayD::from_shape_vec(
                    IxDyn(shape),
                    data.iter().map(|&v| T::from_f64_c(v as f64)).collect(),
                )
                .expect("stored shape is consistent");
                let v_name = format!("opt.v.{base}");
                if let Some((vshape, vdata)) = self.tensors.get(&v_name) {
                    let v = ArrayD::from_shape_vec(
                        IxDyn(vshape),
                        vdata.iter().map(|&v| T::from_f64_c(v as f64)).collect(),
                    )
                    .expect("stored shape is consistent");
                    state.insert(base.to_string(), MomentPair { m, v });
                }
            }
        }
        let mut opt = Adam::new(cfg);
        opt.t = self.manifest.adam_t;
        opt.state = state;
        opt
    }
}

//! Desk-scale latent diffusion stack: V-prediction noise schedule, a toy
//! strided-conv autoencoder, a transformer denoiser with cross-batch
//! self-attention, classifier-free guidance, the two training stages, DDIM
//! sampling and the latent-misalignment diagnostic.

pub mod autoencoder;
pub mod denoiser;
pub mod nn;
pub mod train;

pub use autoencoder::{train_autoencoder, AeConfig, ToyAutoencoder};
pub use denoiser::{cross_batch_attention, denoise_step, CrossBatchDenoiser, DenoiserConfig, SlotInput};
pub use train::{
    latent_mask_diagnostic, relight, relight_no_decomposition, sample_stage1, train_stage1,
    train_stage2, MisalignmentReport, RelightOutput, Stage1Prediction, Stage2Variant, TrainParams,
};

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use nn::{ParamStore, Tensor};

/// Forward-process schedule: cumulative products of 1 - beta_t for a linear
/// beta ramp. `alpha_bar[t]` is defined for t in 0..=t_max with
/// alpha_bar[0] = 1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_max: usize,
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_T_MAX: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(t_max >= 1);
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0f64;
        for t in 0..t_max {
            let beta = if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * t as f64 / (t_max - 1) as f64
            };
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        NoiseSchedule { t_max, alpha_bar }
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_T_MAX, DEFAULT_BETA_START, DEFAULT_BETA_END)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [1, {}]", self.t_max)));
        }
        Ok(())
    }
}

/// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps
pub fn add_noise(z0: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    if z0.dims != eps.dims {
        return Err(Error::ShapeMismatch("add_noise z0 vs eps".into()));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Tensor::from_vec(
        &z0.dims,
        z0.data.iter().zip(eps.data.iter()).map(|(&z, &e)| a * z + b * e).collect(),
    ))
}

/// v_t = sqrt(abar_t) eps - sqrt(1 - abar_t) z_0
pub fn v_target(z0: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    if z0.dims != eps.dims {
        return Err(Error::ShapeMismatch("v_target z0 vs eps".into()));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Tensor::from_vec(
        &z0.dims,
        z0.data.iter().zip(eps.data.iter()).map(|(&z, &e)| a * e - b * z).collect(),
    ))
}

/// Algebraic inversion: z_0 = sqrt(abar_t) z_t - sqrt(1 - abar_t) v_t.
pub fn recover_z0(z_t: &Tensor, v_t: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Tensor::from_vec(
        &z_t.dims,
        z_t.data.iter().zip(v_t.data.iter()).map(|(&z, &v)| a * z - b * v).collect(),
    ))
}

/// eps = sqrt(1 - abar_t) z_t + sqrt(abar_t) v_t.
pub fn predict_eps(z_t: &Tensor, v_t: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Tensor::from_vec(
        &z_t.dims,
        z_t.data.iter().zip(v_t.data.iter()).map(|(&z, &v)| b * z + a * v).collect(),
    ))
}

/// One line of the training log; serialized as JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub t: usize,
    pub l_vpred: f64,
    pub l_ds: f64,
    pub l_ps: f64,
    pub l_rec: f64,
    pub total: f64,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PLCK";
const CHECKPOINT_SCHEMA: u32 = 1;

/// Versioned binary checkpoint: magic, schema, a kind tag, a config echo
/// (JSON) and the named parameter tensors in store order.
pub fn save_checkpoint(path: &Path, kind: &str, config_json: &str, store: &ParamStore) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_SCHEMA.to_le_bytes());
    write_bytes(&mut out, kind.as_bytes());
    write_bytes(&mut out, config_json.as_bytes());
    out.extend_from_slice(&(store.values.len() as u32).to_le_bytes());
    for (name, tensor) in store.names.iter().zip(store.values.iter()) {
        write_bytes(&mut out, name.as_bytes());
        out.extend_from_slice(&(tensor.dims.len() as u32).to_le_bytes());
        for &d in &tensor.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&out).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

/// Load a checkpoint; returns (kind, config JSON, named tensors).
pub fn load_checkpoint(path: &Path) -> Result<(String, String, Vec<(String, Tensor)>)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::format(path, "truncated checkpoint"));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let schema = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if schema != CHECKPOINT_SCHEMA {
        return Err(Error::format(path, format!("unsupported checkpoint schema {schema}")));
    }
    let kind = read_string(&buf, &mut pos, path)?;
    let config = read_string(&buf, &mut pos, path)?;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_string(&buf, &mut pos, path)?;
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        tensors.push((name, Tensor::from_vec(&dims, data)));
    }
    Ok((kind, config, tensors))
}

fn read_string(buf: &[u8], pos: &mut usize, path: &Path) -> Result<String> {
    if *pos + 4 > buf.len() {
        return Err(Error::format(path, "truncated checkpoint"));
    }
    let len = u32::from_le_bytes(buf[*pos..*pos + 4].try_into().unwrap()) as usize;
    *pos += 4;
    if *pos + len > buf.len() {
        return Err(Error::format(path, "truncated checkpoint"));
    }
    let s = String::from_utf8(buf[*pos..*pos + len].to_vec())
        .map_err(|_| Error::format(path, "non-utf8 string in checkpoint"))?;
    *pos += len;
    Ok(s)
}

/// Restore a parameter store from named tensors, verifying the expected
/// layout produced by a freshly constructed model.
pub fn restore_store(store: &mut ParamStore, tensors: Vec<(String, Tensor)>, path: &Path) -> Result<()> {
    if tensors.len() != store.values.len() {
        return Err(Error::format(
            path,
            format!("parameter count mismatch: {} vs {}", tensors.len(), store.values.len()),
        ));
    }
    for (i, (name, tensor)) in tensors.into_iter().enumerate() {
        if store.names[i] != name {
            return Err(Error::format(path, format!("parameter {i} is {name}, expected {}", store.names[i])));
        }
        if store.values[i].dims != tensor.dims {
            return Err(Error::format(path, format!("parameter {name} has unexpected shape")));
        }
        store.values[i] = tensor;
    }
    Ok(())
}

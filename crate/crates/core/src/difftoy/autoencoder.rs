//! Toy strided-convolution autoencoder: exactly 8x spatial downsampling to
//! a 4-channel latent. The decoder opens with a residual global-statistics
//! branch (`z + g_c * normalize(z) + b_c`), which couples every output
//! pixel to every latent cell -- the same nonlocal behavior the
//! latent-masking diagnostic probes -- without discarding the absolute
//! scale the reconstruction needs.
//!
//! Values enter the network through `y = asinh(2x - 1)` so HDR radiance
//! stays in a trainable range; the inverse `x = (sinh(y) + 1) / 2` and its
//! derivative supply the RGB-space chain rule for the stage-2 losses.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::nn::{tanh_backward, tanh_forward, Conv2d, ParamId, ParamStore, TConv2d, Tensor};
use super::{load_checkpoint, restore_store, save_checkpoint};
use crate::error::{Error, Result};
use crate::image::{ColorSpace, Image};
use crate::rng::Rng;

/// Receptive field (in pixels) of one decoded pixel through the three
/// k=4, s=2, p=1 transposed convolutions: 1 -> 4 -> 10 -> 22.
pub const DECODER_RECEPTIVE_FIELD: usize = 22;

pub const LATENT_DOWNSAMPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeConfig {
    pub c1: usize,
    pub c2: usize,
    pub latent_ch: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig { c1: 16, c2: 32, latent_ch: 4 }
    }
}

pub struct ToyAutoencoder {
    pub cfg: AeConfig,
    pub store: ParamStore,
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    norm_g: ParamId,
    norm_b: ParamId,
    dec1: TConv2d,
    dec2: TConv2d,
    dec3: TConv2d,
    latent_mu: ParamId,
    latent_sigma: ParamId,
}

pub fn to_ae_space(x: f32) -> f64 {
    (2.0 * x as f64 - 1.0).asinh()
}

pub fn from_ae_space(y: f64) -> f64 {
    (y.sinh() + 1.0) * 0.5
}

fn from_ae_space_deriv(y: f64) -> f64 {
    y.cosh() * 0.5
}

/// 8x average pool of a [3, H, W] tensor.
fn avgpool8(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.dims[0], x.dims[1], x.dims[2]);
    let (lh, lw) = (h / LATENT_DOWNSAMPLE, w / LATENT_DOWNSAMPLE);
    let mut out = Tensor::zeros(&[c, lh, lw]);
    let inv = 1.0 / (LATENT_DOWNSAMPLE * LATENT_DOWNSAMPLE) as f64;
    for ci in 0..c {
        for cy in 0..lh {
            for cx in 0..lw {
                let mut acc = 0.0;
                for dy in 0..LATENT_DOWNSAMPLE {
                    for dx in 0..LATENT_DOWNSAMPLE {
                        acc += x.data
                            [(ci * h + cy * LATENT_DOWNSAMPLE + dy) * w + cx * LATENT_DOWNSAMPLE + dx];
                    }
                }
                out.data[(ci * lh + cy) * lw + cx] = acc * inv;
            }
        }
    }
    out
}

/// Bilinear taps of an 8x upsample (align-corners = false, edge clamped):
/// for each output pixel, up to four (cell, weight) pairs.
fn up8_taps(py: usize, px: usize, lh: usize, lw: usize) -> [(usize, usize, f64); 4] {
    let ly = ((py as f64 + 0.5) / LATENT_DOWNSAMPLE as f64 - 0.5).clamp(0.0, lh as f64 - 1.0);
    let lx = ((px as f64 + 0.5) / LATENT_DOWNSAMPLE as f64 - 0.5).clamp(0.0, lw as f64 - 1.0);
    let y0 = ly.floor() as usize;
    let x0 = lx.floor() as usize;
    let y1 = (y0 + 1).min(lh - 1);
    let x1 = (x0 + 1).min(lw - 1);
    let fy = ly - y0 as f64;
    let fx = lx - x0 as f64;
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ]
}

pub struct DecodeCache {
    z: Tensor,
    normed: Tensor,
    norm_stats: (f64, f64), // (mean, rstd)
    t1: Tensor,
    t2: Tensor,
    y: Tensor,
}

impl ToyAutoencoder {
    pub fn new(cfg: AeConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let enc1 = Conv2d::new(&mut store, &mut rng, "enc1", 3, cfg.c1, 4, 2, 1);
        let enc2 = Conv2d::new(&mut store, &mut rng, "enc2", cfg.c1, cfg.c2, 4, 2, 1);
        let enc3 = Conv2d::new(&mut store, &mut rng, "enc3", cfg.c2, cfg.latent_ch, 4, 2, 1);
        // Zero-init the layers feeding and mirroring the pooled shortcut:
        // the fresh autoencoder reproduces the shortcut exactly and
        // training only refines residuals.
        store.values[enc3.w].data.fill(0.0);
        let norm_g = store.add("norm.g", Tensor::from_vec(&[cfg.latent_ch], vec![0.1; cfg.latent_ch]));
        let norm_b = store.add("norm.b", Tensor::zeros(&[cfg.latent_ch]));
        let dec1 = TConv2d::new(&mut store, &mut rng, "dec1", cfg.latent_ch, cfg.c2, 4, 2, 1);
        let dec2 = TConv2d::new(&mut store, &mut rng, "dec2", cfg.c2, cfg.c1, 4, 2, 1);
        let dec3 = TConv2d::new(&mut store, &mut rng, "dec3", cfg.c1, 3, 4, 2, 1);
        store.values[dec3.w].data.fill(0.0);
        // Latent standardization for the diffusion stack, calibrated on the
        // training corpus after pretraining. Never touched by Adam (their
        // gradients stay zero).
        let latent_mu = store.add("latent.mu", Tensor::zeros(&[cfg.latent_ch]));
        let latent_sigma =
            store.add("latent.sigma", Tensor::from_vec(&[cfg.latent_ch], vec![1.0; cfg.latent_ch]));
        ToyAutoencoder {
            cfg,
            store,
            enc1,
            enc2,
            enc3,
            norm_g,
            norm_b,
            dec1,
            dec2,
            dec3,
            latent_mu,
            latent_sigma,
        }
    }

    /// Fit the per-channel latent statistics the diffusion stack
    /// standardizes with.
    pub fn calibrate_latent_stats(&mut self, images: &[Image]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::MissingData("latent calibration corpus is empty".into()));
        }
        let ch = self.cfg.latent_ch;
        let mut sum = vec![0.0f64; ch];
        let mut sum2 = vec![0.0f64; ch];
        let mut count = vec![0usize; ch];
        for img in images {
            let z = self.encode(img)?;
            let plane = z.dims[1] * z.dims[2];
            for c in 0..ch {
                for p in 0..plane {
                    let v = z.data[c * plane + p];
                    sum[c] += v;
                    sum2[c] += v * v;
                    count[c] += 1;
                }
            }
        }
        let mut sigmas = vec![0.0f64; ch];
        for c in 0..ch {
            let mean = sum[c] / count[c] as f64;
            let var = (sum2[c] / count[c] as f64 - mean * mean).max(1e-12);
            self.store.values[self.latent_mu].data[c] = mean;
            sigmas[c] = var.sqrt();
        }
        // Floor each sigma relative to the most active channel: a barely
        // used channel must not get its noise amplified into the
        // standardized latent.
        let max_sigma = sigmas.iter().cloned().fold(1e-6, f64::max);
        for c in 0..ch {
            self.store.values[self.latent_sigma].data[c] = sigmas[c].max(0.25 * max_sigma);
        }
        Ok(())
    }

    /// Encode and standardize: the latent the diffusion stack sees.
    pub fn encode_for_diffusion(&self, image: &Image) -> Result<Tensor> {
        let mut z = self.encode(image)?;
        let mu = &self.store.values[self.latent_mu].data;
        let sigma = &self.store.values[self.latent_sigma].data;
        let plane = z.dims[1] * z.dims[2];
        for c in 0..self.cfg.latent_ch {
            for p in 0..plane {
                z.data[c * plane + p] = (z.data[c * plane + p] - mu[c]) / sigma[c];
            }
        }
        Ok(z)
    }

    fn unstandardize(&self, z: &Tensor) -> Tensor {
        let mu = &self.store.values[self.latent_mu].data;
        let sigma = &self.store.values[self.latent_sigma].data;
        let plane = z.dims[1] * z.dims[2];
        let mut raw = z.clone();
        for c in 0..self.cfg.latent_ch {
            for p in 0..plane {
                raw.data[c * plane + p] = z.data[c * plane + p] * sigma[c] + mu[c];
            }
        }
        raw
    }

    /// Decode a standardized latent.
    pub fn decode_from_diffusion(&self, z: &Tensor) -> Result<Image> {
        self.decode(&self.unstandardize(z))
    }

    pub fn decode_from_diffusion_with_cache(&self, z: &Tensor) -> Result<(Image, DecodeCache)> {
        self.decode_with_cache(&self.unstandardize(z))
    }

    /// Backward of [`Self::decode_from_diffusion`]: the raw-latent gradient
    /// scaled by sigma per channel.
    pub fn decode_backward_diffusion(
        &mut self,
        cache: &DecodeCache,
        d_image: &Image,
    ) -> Result<Tensor> {
        let mut dz = self.decode_backward(cache, d_image)?;
        let sigma = self.store.values[self.latent_sigma].data.clone();
        let plane = dz.dims[1] * dz.dims[2];
        for c in 0..self.cfg.latent_ch {
            for p in 0..plane {
                dz.data[c * plane + p] *= sigma[c];
            }
        }
        Ok(dz)
    }

    pub fn latent_dims(&self, image_h: usize, image_w: usize) -> (usize, usize, usize) {
        (self.cfg.latent_ch, image_h / LATENT_DOWNSAMPLE, image_w / LATENT_DOWNSAMPLE)
    }

    fn image_to_tensor(image: &Image) -> Result<Tensor> {
        if image.channels() != 3 {
            return Err(Error::InvalidArgument("autoencoder expects 3-channel images".into()));
        }
        if image.height() % LATENT_DOWNSAMPLE != 0 || image.width() % LATENT_DOWNSAMPLE != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} not divisible by {LATENT_DOWNSAMPLE}",
                image.height(),
                image.width()
            )));
        }
        Ok(Tensor::from_vec(
            &[3, image.height(), image.width()],
            image.data().iter().map(|&v| to_ae_space(v)).collect(),
        ))
    }

    /// Encode an image to the 4-channel latent at 1/8 resolution. The
    /// first three channels carry a fixed average-pool shortcut of the
    /// (transformed) image on top of the learned features, so the latent
    /// always contains the low-frequency signal the decoder mirror taps.
    pub fn encode(&self, image: &Image) -> Result<Tensor> {
        let x = Self::image_to_tensor(image)?;
        Ok(self.encode_tensor(&x).3)
    }

    /// Full encoder pass keeping the activations the backward pass needs.
    fn encode_tensor(&self, x: &Tensor) -> (Tensor, Tensor, Tensor, Tensor) {
        let h1 = tanh_forward(&self.enc1.forward(&self.store, x));
        let h2 = tanh_forward(&self.enc2.forward(&self.store, &h1));
        let mut z = self.enc3.forward(&self.store, &h2);
        let dc = avgpool8(x);
        let plane = z.dims[1] * z.dims[2];
        for c in 0..3 {
            for p in 0..plane {
                z.data[c * plane + p] += dc.data[c * plane + p];
            }
        }
        (x.clone(), h1, h2, z)
    }

    fn decode_inner(&self, z: &Tensor) -> DecodeCache {
        let n = z.numel() as f64;
        let mean = z.data.iter().sum::<f64>() / n;
        let var = z.data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + 1e-6).sqrt();
        let (ch, zh, zw) = (z.dims[0], z.dims[1], z.dims[2]);
        let g = &self.store.values[self.norm_g].data;
        let b = &self.store.values[self.norm_b].data;
        let mut normed = Tensor::zeros(&z.dims);
        for c in 0..ch {
            for i in 0..zh * zw {
                let idx = c * zh * zw + i;
                normed.data[idx] = z.data[idx] + g[c] * (z.data[idx] - mean) * rstd + b[c];
            }
        }
        let a1 = self.dec1.forward(&self.store, &normed);
        let t1 = tanh_forward(&a1);
        let a2 = self.dec2.forward(&self.store, &t1);
        let t2 = tanh_forward(&a2);
        let mut y = self.dec3.forward(&self.store, &t2);
        // Mirror of the encoder's pooled shortcut: bilinear 8x upsample of
        // the first three latent channels.
        let (ih, iw) = (y.dims[1], y.dims[2]);
        for c in 0..3 {
            for py in 0..ih {
                for px in 0..iw {
                    let mut acc = 0.0;
                    for (ty, tx, wgt) in up8_taps(py, px, zh, zw) {
                        acc += wgt * z.data[(c * zh + ty) * zw + tx];
                    }
                    y.data[(c * ih + py) * iw + px] += acc;
                }
            }
        }
        DecodeCache { z: z.clone(), normed, norm_stats: (mean, rstd), t1, t2, y }
    }

    /// Decode a latent back to a linear RGB image.
    pub fn decode(&self, z: &Tensor) -> Result<Image> {
        Ok(self.decode_with_cache(z)?.0)
    }

    pub fn decode_with_cache(&self, z: &Tensor) -> Result<(Image, DecodeCache)> {
        if z.dims.len() != 3 || z.dims[0] != self.cfg.latent_ch {
            return Err(Error::ShapeMismatch("decode latent shape".into()));
        }
        let cache = self.decode_inner(z);
        let (h, w) = (cache.y.dims[1], cache.y.dims[2]);
        let data: Vec<f32> = cache.y.data.iter().map(|&v| from_ae_space(v) as f32).collect();
        let img = Image::from_data(3, h, w, data, ColorSpace::Linear)?;
        Ok((img, cache))
    }

    /// Backpropagate an RGB-space gradient through the decoder to the
    /// latent. Parameter gradients accumulate into the store (the caller
    /// decides whether to use them; stage-2 training keeps the decoder
    /// frozen and never steps them).
    pub fn decode_backward(&mut self, cache: &DecodeCache, d_image: &Image) -> Result<Tensor> {
        if d_image.data().len() != cache.y.numel() {
            return Err(Error::ShapeMismatch("decode_backward gradient shape".into()));
        }
        let dy = Tensor::from_vec(
            &cache.y.dims,
            cache
                .y
                .data
                .iter()
                .zip(d_image.data().iter())
                .map(|(&yv, &g)| g as f64 * from_ae_space_deriv(yv))
                .collect(),
        );
        let dt2 = self.dec3.backward(&mut self.store, &cache.t2, &dy);
        let da2 = tanh_backward(&cache.t2, &dt2);
        let dt1 = self.dec2.backward(&mut self.store, &cache.t1, &da2);
        let da1 = tanh_backward(&cache.t1, &dt1);
        let dnormed = self.dec1.backward(&mut self.store, &cache.normed, &da1);

        // Residual global-norm backward: identity plus the gated
        // normalization branch.
        let z = &cache.z;
        let (ch, zh, zw) = (z.dims[0], z.dims[1], z.dims[2]);
        let plane = zh * zw;
        let n = z.numel() as f64;
        let (mean, rstd) = cache.norm_stats;
        let g = self.store.values[self.norm_g].data.clone();
        {
            let grads = &mut self.store.grads;
            for c in 0..ch {
                let mut dg = 0.0;
                let mut db = 0.0;
                for i in 0..plane {
                    let idx = c * plane + i;
                    let xhat = (z.data[idx] - mean) * rstd;
                    dg += dnormed.data[idx] * xhat;
                    db += dnormed.data[idx];
                }
                grads[self.norm_g].data[c] += dg;
                grads[self.norm_b].data[c] += db;
            }
        }
        let mut mean_dyh = 0.0f64;
        let mut mean_dyh_xhat = 0.0f64;
        let mut dyh = vec![0.0f64; z.numel()];
        for c in 0..ch {
            for i in 0..plane {
                let idx = c * plane + i;
                let v = dnormed.data[idx] * g[c];
                dyh[idx] = v;
                mean_dyh += v;
                mean_dyh_xhat += v * (z.data[idx] - mean) * rstd;
            }
        }
        mean_dyh /= n;
        mean_dyh_xhat /= n;
        let mut dz = Tensor::zeros(&z.dims);
        for idx in 0..z.numel() {
            let xhat = (z.data[idx] - mean) * rstd;
            dz.data[idx] =
                dnormed.data[idx] + rstd * (dyh[idx] - mean_dyh - xhat * mean_dyh_xhat);
        }
        // Adjoint of the bilinear upsample shortcut.
        let (ih, iw) = (dy.dims[1], dy.dims[2]);
        for c in 0..3 {
            for py in 0..ih {
                for px in 0..iw {
                    let g = dy.data[(c * ih + py) * iw + px];
                    if g == 0.0 {
                        continue;
                    }
                    for (ty, tx, wgt) in up8_taps(py, px, zh, zw) {
                        dz.data[(c * zh + ty) * zw + tx] += wgt * g;
                    }
                }
            }
        }
        Ok(dz)
    }

    /// Encoder backward (used only in pretraining).
    fn encode_backward(
        &mut self,
        x: &Tensor,
        h1: &Tensor,
        h2: &Tensor,
        dz: &Tensor,
    ) -> Tensor {
        let dh2 = self.enc3.backward(&mut self.store, h2, dz);
        let da2 = tanh_backward(h2, &dh2);
        let dh1 = self.enc2.backward(&mut self.store, h1, &da2);
        let da1 = tanh_backward(h1, &dh1);
        let mut dx = self.enc1.backward(&mut self.store, x, &da1);
        // Adjoint of the pooled shortcut.
        let (h, w) = (x.dims[1], x.dims[2]);
        let (zh, zw) = (dz.dims[1], dz.dims[2]);
        let inv = 1.0 / (LATENT_DOWNSAMPLE * LATENT_DOWNSAMPLE) as f64;
        for c in 0..3 {
            for cy in 0..zh {
                for cx in 0..zw {
                    let g = dz.data[(c * zh + cy) * zw + cx] * inv;
                    for dy in 0..LATENT_DOWNSAMPLE {
                        for dxp in 0..LATENT_DOWNSAMPLE {
                            dx.data[(c * h + cy * LATENT_DOWNSAMPLE + dy) * w
                                + cx * LATENT_DOWNSAMPLE + dxp] += g;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_string(&self.cfg)
            .map_err(|e| Error::format(path, e.to_string()))?;
        save_checkpoint(path, "autoencoder", &cfg, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kind, cfg_json, tensors) = load_checkpoint(path)?;
        if kind != "autoencoder" {
            return Err(Error::format(path, format!("checkpoint kind {kind:?} is not an autoencoder")));
        }
        let cfg: AeConfig =
            serde_json::from_str(&cfg_json).map_err(|e| Error::format(path, e.to_string()))?;
        let mut ae = ToyAutoencoder::new(cfg, 0);
        restore_store(&mut ae.store, tensors, path)?;
        Ok(ae)
    }
}

/// Weight of the latent rate penalty: the learned latent residual (on top
/// of the pooled shortcut) pays an L2 cost, which keeps latents close to
/// the predictable low-frequency signal -- the same role the KL term plays
/// in a variational latent autoencoder.
pub const LATENT_RATE_WEIGHT: f64 = 0.05;

/// Pretrain the autoencoder on a corpus of images: Adam on per-image
/// RMS-normalized RGB MSE (so easy and hard images contribute equal
/// gradient scale) plus the latent rate penalty, under a short warmup and
/// cosine decay to a tenth of the peak rate. Fully determined by
/// (corpus order, steps, lr, seed).
pub fn train_autoencoder(
    images: &[Image],
    cfg: AeConfig,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<ToyAutoencoder> {
    if images.is_empty() {
        return Err(Error::MissingData("autoencoder corpus is empty".into()));
    }
    let mut ae = ToyAutoencoder::new(cfg, seed);
    let mut rng = Rng::new(seed ^ 0x5EED_AE42);
    let mut adam = super::nn::Adam::new(&ae.store, lr);
    let warmup = (steps / 20).clamp(1, 100);
    for step in 0..steps {
        let warm = ((step + 1) as f64 / warmup as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps.max(1) as f64).cos());
        adam.lr = lr * warm * (0.1 + 0.9 * cos);
        let img = &images[rng.below(images.len())];
        let xt = ToyAutoencoder::image_to_tensor(img)?;
        let (x, h1, h2, z) = ae.encode_tensor(&xt);
        let (recon, cache) = ae.decode_with_cache(&z)?;

        let n = recon.data().len() as f64;
        let mse = recon
            .data()
            .iter()
            .zip(img.data().iter())
            .map(|(&r, &t)| {
                let d = r as f64 - t as f64;
                d * d
            })
            .sum::<f64>()
            / n;
        let inv = 1.0 / (mse + 1e-4).sqrt();
        let d_img = Image::from_data(
            3,
            recon.height(),
            recon.width(),
            recon
                .data()
                .iter()
                .zip(img.data().iter())
                .map(|(&r, &t)| (2.0 * (r as f64 - t as f64) / n * inv) as f32)
                .collect(),
            ColorSpace::Data,
        )?;

        ae.store.zero_grads();
        let mut dz = ae.decode_backward(&cache, &d_img)?;
        // Rate penalty on the learned residual: channels 0-2 relative to
        // the pooled shortcut, channel 3 absolutely.
        let dc = avgpool8(&x);
        let zn = z.numel() as f64;
        let plane = z.dims[1] * z.dims[2];
        for c in 0..z.dims[0] {
            for p in 0..plane {
                let idx = c * plane + p;
                let resid = if c < 3 { z.data[idx] - dc.data[idx] } else { z.data[idx] };
                dz.data[idx] += 2.0 * LATENT_RATE_WEIGHT * resid / zn;
            }
        }
        ae.encode_backward(&x, &h1, &h2, &dz);
        adam.step(&mut ae.store);
    }
    ae.calibrate_latent_stats(images)?;
    Ok(ae)
}

/// Mean reconstruction PSNR of the autoencoder over a corpus (peak 1).
pub fn reconstruction_psnr(ae: &ToyAutoencoder, images: &[Image]) -> Result<f64> {
    let mut acc = 0.0f64;
    for img in images {
        let z = ae.encode(img)?;
        let recon = ae.decode(&z)?;
        let p = crate::image::psnr(&recon, img, 1.0)?;
        acc += p.min(60.0);
    }
    Ok(acc / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_8x_down() {
        let ae = ToyAutoencoder::new(AeConfig::default(), 1);
        let img = Image::filled(3, 32, 32, 0.5, ColorSpace::Linear);
        let z = ae.encode(&img).unwrap();
        assert_eq!(z.dims, vec![4, 4, 4]);
        let back = ae.decode(&z).unwrap();
        assert_eq!((back.height(), back.width()), (32, 32));

        let odd = Image::filled(3, 30, 32, 0.5, ColorSpace::Linear);
        assert!(ae.encode(&odd).is_err());
    }

    #[test]
    fn value_transform_roundtrip() {
        for i in 0..100 {
            let x = i as f32 * 0.05; // 0..5 HDR range
            let y = to_ae_space(x);
            let back = from_ae_space(y);
            assert!((back - x as f64).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn decode_backward_matches_fd() {
        let mut ae = ToyAutoencoder::new(AeConfig { c1: 4, c2: 6, latent_ch: 4 }, 5);
        let mut rng = Rng::new(9);
        let z = Tensor::randn(&[4, 2, 2], 0.7, &mut rng);
        // Loss: weighted sum of decoded pixels (linear in the image).
        let (img, cache) = ae.decode_with_cache(&z).unwrap();
        let coeffs: Vec<f32> =
            (0..img.data().len()).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect();
        let d_img =
            Image::from_data(3, img.height(), img.width(), coeffs.clone(), ColorSpace::Data)
                .unwrap();
        ae.store.zero_grads();
        let dz = ae.decode_backward(&cache, &d_img).unwrap();

        let loss = |zt: &Tensor| -> f64 {
            let out = ae.decode(zt).unwrap();
            out.data()
                .iter()
                .zip(coeffs.iter())
                .map(|(&a, &c)| a as f64 * c as f64)
                .sum::<f64>()
        };
        // h large enough that the f32 image quantization (every output
        // pixel moves through the global norm) stays well under the signal.
        for idx in [0usize, 5, 9, 15] {
            let mut zp = z.clone();
            zp.data[idx] += 5e-3;
            let mut zm = z.clone();
            zm.data[idx] -= 5e-3;
            let fd = (loss(&zp) - loss(&zm)) / 1e-2;
            let rel = (fd - dz.data[idx]).abs() / fd.abs().max(dz.data[idx].abs()).max(1e-6);
            assert!(rel < 1e-3, "idx {idx}: {fd} vs {}", dz.data[idx]);
        }
    }

    #[test]
    fn training_reduces_reconstruction_error() {
        let mut rng = Rng::new(4);
        // Smooth random images.
        let images: Vec<Image> = (0..6)
            .map(|_| {
                let mut img = Image::new(3, 16, 16, ColorSpace::Linear);
                for c in 0..3 {
                    let fx = rng.uniform_in(0.5, 2.0);
                    let fy = rng.uniform_in(0.5, 2.0);
                    let amp = rng.uniform_in(0.1, 0.4);
                    for y in 0..16 {
                        for x in 0..16 {
                            let v = 0.5
                                + amp
                                    * ((x as f64 * fx * 0.3).sin() * (y as f64 * fy * 0.3).cos());
                            img.set(c, y, x, v as f32);
                        }
                    }
                }
                img
            })
            .collect();
        let cfg = AeConfig { c1: 8, c2: 12, latent_ch: 4 };
        let before = {
            let ae = ToyAutoencoder::new(cfg, 7);
            reconstruction_psnr(&ae, &images).unwrap()
        };
        let ae = train_autoencoder(&images, cfg, 150, 3e-3, 7).unwrap();
        let after = reconstruction_psnr(&ae, &images).unwrap();
        assert!(after > before + 2.0, "psnr {before} -> {after}");
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ae = ToyAutoencoder::new(AeConfig::default(), 11);
        let path = dir.path().join("ae.ckpt");
        ae.save(&path).unwrap();
        let back = ToyAutoencoder::load(&path).unwrap();
        assert_eq!(ae.cfg, back.cfg);
        for (a, b) in ae.store.values.iter().zip(back.store.values.iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let images =
            vec![Image::filled(3, 16, 16, 0.4, ColorSpace::Linear), Image::filled(3, 16, 16, 0.7, ColorSpace::Linear)];
        let cfg = AeConfig { c1: 4, c2: 6, latent_ch: 4 };
        let a = train_autoencoder(&images, cfg, 20, 1e-3, 42).unwrap();
        let b = train_autoencoder(&images, cfg, 20, 1e-3, 42).unwrap();
        for (x, y) in a.store.values.iter().zip(b.store.values.iter()) {
            assert_eq!(x.data, y.data);
        }
    }
}

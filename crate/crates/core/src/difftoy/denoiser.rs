//! Transformer denoiser with cross-batch self-attention: each batch slot
//! queries its own tokens while keys and values come from the
//! concatenation of every slot's tokens (self first), so the slots keep
//! each other structurally consistent. One projection set W_q/W_k/W_v is
//! shared by all slots within a block.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::nn::{
    mm, mm_at_acc, mm_bt, softmax_backward, softmax_rows, tanh_backward, tanh_forward, Linear,
    LayerNorm, LayerNormCache, ParamId, ParamStore, Tensor,
};
use super::{load_checkpoint, restore_store, save_checkpoint};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub token_dim: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub latent_ch: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    /// Condition channel budget in units of latent channel groups; unused
    /// groups are zero-padded so every stage shares one architecture.
    pub cond_latents: usize,
    pub label_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            token_dim: 128,
            blocks: 4,
            ffn_mult: 2,
            latent_ch: 4,
            latent_h: 8,
            latent_w: 8,
            cond_latents: 5,
            label_dim: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn tokens(&self) -> usize {
        self.latent_h * self.latent_w
    }
    pub fn in_dim(&self) -> usize {
        self.latent_ch * (1 + self.cond_latents)
    }
    pub fn cond_channels(&self) -> usize {
        self.latent_ch * self.cond_latents
    }
}

/// Inputs of one batch slot.
#[derive(Debug, Clone)]
pub struct SlotInput {
    /// Noisy latent [latent_ch, h, w].
    pub z_t: Tensor,
    /// Condition channels [cond_latents * latent_ch, h, w].
    pub cond: Tensor,
    /// One-hot (or zero) label vector.
    pub label: Vec<f64>,
}

struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

pub struct CrossBatchDenoiser {
    pub cfg: DenoiserConfig,
    pub store: ParamStore,
    patch_embed: Linear,
    pos_embed: ParamId,
    label_embed: Linear,
    time_fc1: Linear,
    time_fc2: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

pub struct AttnCache {
    /// Softmax attention matrices, one [n, n*s] per slot.
    pub attn: Vec<Tensor>,
    /// Concatenation order per slot: slot indices, self first.
    pub order: Vec<Vec<usize>>,
}

/// Scaled softmax attention where slot i's queries attend over the
/// concatenated keys/values of all slots ordered self-first. Shared by the
/// public operation and the denoiser blocks.
fn attention_core(
    qs: &[Tensor],
    ks: &[Tensor],
    vs: &[Tensor],
    dim: usize,
) -> (Vec<Tensor>, AttnCache) {
    let s = qs.len();
    let n = qs[0].dims[0];
    let scale = 1.0 / (dim as f64).sqrt();
    let mut outs = Vec::with_capacity(s);
    let mut cache = AttnCache { attn: Vec::with_capacity(s), order: Vec::with_capacity(s) };
    for i in 0..s {
        let order: Vec<usize> =
            std::iter::once(i).chain((0..s).filter(|&j| j != i)).collect();
        let mut kcat = Vec::with_capacity(n * s * dim);
        let mut vcat = Vec::with_capacity(n * s * dim);
        for &j in &order {
            kcat.extend_from_slice(&ks[j].data);
            vcat.extend_from_slice(&vs[j].data);
        }
        let mut scores = mm_bt(&qs[i].data, &kcat, n, dim, n * s);
        for v in scores.iter_mut() {
            *v *= scale;
        }
        softmax_rows(&mut scores, n, n * s);
        let out = mm(&scores, &vcat, n, n * s, dim);
        outs.push(Tensor::from_vec(&[n, dim], out));
        cache.attn.push(Tensor::from_vec(&[n, n * s], scores));
        cache.order.push(order);
    }
    (outs, cache)
}

/// Backward of [`attention_core`]; returns (dq, dk, dv) per slot.
fn attention_core_backward(
    qs: &[Tensor],
    ks: &[Tensor],
    vs: &[Tensor],
    cache: &AttnCache,
    douts: &[Tensor],
    dim: usize,
) -> (Vec<Tensor>, Vec<Tensor>, Vec<Tensor>) {
    let s = qs.len();
    let n = qs[0].dims[0];
    let scale = 1.0 / (dim as f64).sqrt();
    let mut dq: Vec<Tensor> = (0..s).map(|_| Tensor::zeros(&[n, dim])).collect();
    let mut dk: Vec<Tensor> = (0..s).map(|_| Tensor::zeros(&[n, dim])).collect();
    let mut dv: Vec<Tensor> = (0..s).map(|_| Tensor::zeros(&[n, dim])).collect();
    for i in 0..s {
        let order = &cache.order[i];
        let a = &cache.attn[i];
        let mut kcat = Vec::with_capacity(n * s * dim);
        let mut vcat = Vec::with_capacity(n * s * dim);
        for &j in order {
            kcat.extend_from_slice(&ks[j].data);
            vcat.extend_from_slice(&vs[j].data);
        }
        // dA = dO * Vcat^T ; dVcat = A^T * dO
        let da = mm_bt(&douts[i].data, &vcat, n, dim, n * s);
        let mut dvcat = vec![0.0f64; n * s * dim];
        mm_at_acc(&a.data, &douts[i].data, n, n * s, dim, &mut dvcat);
        // Through softmax, then scale.
        let mut dscore = softmax_backward(&a.data, &da, n, n * s);
        for v in dscore.iter_mut() {
            *v *= scale;
        }
        // dQ = dS * Kcat ; dKcat = dS^T * Q
        let dqi = mm(&dscore, &kcat, n, n * s, dim);
        dq[i].add_scaled(&Tensor::from_vec(&[n, dim], dqi), 1.0);
        let mut dkcat = vec![0.0f64; n * s * dim];
        mm_at_acc(&dscore, &qs[i].data, n, n * s, dim, &mut dkcat);
        for (pos, &j) in order.iter().enumerate() {
            let seg = pos * n * dim..(pos + 1) * n * dim;
            for (t, &v) in dk[j].data.iter_mut().zip(dkcat[seg.clone()].iter()) {
                *t += v;
            }
            for (t, &v) in dv[j].data.iter_mut().zip(dvcat[seg].iter()) {
                *t += v;
            }
        }
    }
    (dq, dk, dv)
}

/// The cross-batch attention operation as a standalone map over token sets
/// (weights [dim, dim], no bias), matching the written q/k/v formulas.
pub fn cross_batch_attention(
    slots: &[Tensor],
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
) -> Result<Vec<Tensor>> {
    if slots.is_empty() {
        return Err(Error::InvalidArgument("cross_batch_attention: no slots".into()));
    }
    let n = slots[0].dims[0];
    let dim = slots[0].dims[1];
    for t in slots {
        if t.dims.len() != 2 || t.dims[0] != n || t.dims[1] != dim {
            return Err(Error::ShapeMismatch("cross_batch_attention token sets".into()));
        }
    }
    for w in [wq, wk, wv] {
        if w.dims != vec![dim, dim] {
            return Err(Error::ShapeMismatch("cross_batch_attention weights".into()));
        }
    }
    let qs: Vec<Tensor> =
        slots.iter().map(|x| Tensor::from_vec(&[n, dim], mm(&x.data, &wq.data, n, dim, dim))).collect();
    let ks: Vec<Tensor> =
        slots.iter().map(|x| Tensor::from_vec(&[n, dim], mm(&x.data, &wk.data, n, dim, dim))).collect();
    let vs: Vec<Tensor> =
        slots.iter().map(|x| Tensor::from_vec(&[n, dim], mm(&x.data, &wv.data, n, dim, dim))).collect();
    Ok(attention_core(&qs, &ks, &vs, dim).0)
}

struct BlockCache {
    ln1: Vec<LayerNormCache>,
    x: Vec<Tensor>,
    q: Vec<Tensor>,
    k: Vec<Tensor>,
    v: Vec<Tensor>,
    attn: AttnCache,
    o: Vec<Tensor>,
    ln2: Vec<LayerNormCache>,
    x2: Vec<Tensor>,
    ft: Vec<Tensor>,
}

pub struct ForwardCache {
    slots: usize,
    tokens_raw: Vec<Tensor>,
    label_rows: Vec<Tensor>,
    time_feat: Tensor,
    time_t1: Tensor,
    blocks: Vec<BlockCache>,
    ln_f: Vec<LayerNormCache>,
    ln_f_out: Vec<Tensor>,
}

fn sinusoidal_time(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f64; dim];
    for k in 0..half {
        let freq = (10000f64).powf(-(k as f64) / half.max(1) as f64);
        let arg = t as f64 * freq;
        data[2 * k] = arg.sin();
        data[2 * k + 1] = arg.cos();
    }
    Tensor::from_vec(&[1, dim], data)
}

impl CrossBatchDenoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let d = cfg.token_dim;
        let patch_embed = Linear::new(&mut store, &mut rng, "patch", cfg.in_dim(), d);
        let pos_embed = store.add("pos", Tensor::randn(&[cfg.tokens(), d], 0.02, &mut rng));
        let label_embed = Linear::new(&mut store, &mut rng, "label", cfg.label_dim, d);
        let time_fc1 = Linear::new(&mut store, &mut rng, "time1", d, d);
        let time_fc2 = Linear::new(&mut store, &mut rng, "time2", d, d);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            blocks.push(Block {
                ln1: LayerNorm::new(&mut store, &format!("b{b}.ln1"), d),
                wq: Linear::new(&mut store, &mut rng, &format!("b{b}.wq"), d, d),
                wk: Linear::new(&mut store, &mut rng, &format!("b{b}.wk"), d, d),
                wv: Linear::new(&mut store, &mut rng, &format!("b{b}.wv"), d, d),
                wo: Linear::new(&mut store, &mut rng, &format!("b{b}.wo"), d, d),
                ln2: LayerNorm::new(&mut store, &format!("b{b}.ln2"), d),
                ff1: Linear::new(&mut store, &mut rng, &format!("b{b}.ff1"), d, cfg.ffn_mult * d),
                ff2: Linear::new(&mut store, &mut rng, &format!("b{b}.ff2"), cfg.ffn_mult * d, d),
            });
        }
        let ln_f = LayerNorm::new(&mut store, "lnf", d);
        let head = Linear::new(&mut store, &mut rng, "head", d, cfg.latent_ch);
        CrossBatchDenoiser {
            cfg,
            store,
            patch_embed,
            pos_embed,
            label_embed,
            time_fc1,
            time_fc2,
            blocks,
            ln_f,
            head,
        }
    }

    fn slot_to_tokens(&self, slot: &SlotInput) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (lc, h, w) = (cfg.latent_ch, cfg.latent_h, cfg.latent_w);
        if slot.z_t.dims != vec![lc, h, w] {
            return Err(Error::ShapeMismatch(format!("slot z_t dims {:?}", slot.z_t.dims)));
        }
        if slot.cond.dims != vec![cfg.cond_channels(), h, w] {
            return Err(Error::ShapeMismatch(format!("slot cond dims {:?}", slot.cond.dims)));
        }
        let n = cfg.tokens();
        let din = cfg.in_dim();
        let mut tokens = vec![0.0f64; n * din];
        for p in 0..n {
            for c in 0..lc {
                tokens[p * din + c] = slot.z_t.data[c * n + p];
            }
            for c in 0..cfg.cond_channels() {
                tokens[p * din + lc + c] = slot.cond.data[c * n + p];
            }
        }
        Ok(Tensor::from_vec(&[n, din], tokens))
    }

    /// Forward pass: one V-prediction per slot.
    pub fn forward(&self, slots: &[SlotInput], t: usize) -> Result<(Vec<Tensor>, ForwardCache)> {
        if slots.is_empty() {
            return Err(Error::InvalidArgument("denoiser needs at least one slot".into()));
        }
        let cfg = &self.cfg;
        let d = cfg.token_dim;
        let n = cfg.tokens();
        let s = slots.len();

        let time_feat = sinusoidal_time(t, d);
        let time_h1 = self.time_fc1.forward(&self.store, &time_feat);
        let time_t1 = tanh_forward(&time_h1);
        let time_row = self.time_fc2.forward(&self.store, &time_t1);

        let mut tokens_raw = Vec::with_capacity(s);
        let mut label_rows = Vec::with_capacity(s);
        let mut h: Vec<Tensor> = Vec::with_capacity(s);
        for slot in slots {
            let raw = self.slot_to_tokens(slot)?;
            let mut emb = self.patch_embed.forward(&self.store, &raw);
            if slot.label.len() != cfg.label_dim {
                return Err(Error::ShapeMismatch("slot label length".into()));
            }
            let label_row = Tensor::from_vec(&[1, cfg.label_dim], slot.label.clone());
            let label_emb = self.label_embed.forward(&self.store, &label_row);
            let pos = &self.store.values[self.pos_embed];
            for p in 0..n {
                for j in 0..d {
                    emb.data[p * d + j] += pos.data[p * d + j] + label_emb.data[j] + time_row.data[j];
                }
            }
            tokens_raw.push(raw);
            label_rows.push(label_row);
            h.push(emb);
        }

        let mut block_caches = Vec::with_capacity(cfg.blocks);
        for block in &self.blocks {
            let mut ln1c = Vec::with_capacity(s);
            let mut xs = Vec::with_capacity(s);
            for hv in &h {
                let (x, c) = block.ln1.forward(&self.store, hv);
                xs.push(x);
                ln1c.push(c);
            }
            let qs: Vec<Tensor> = xs.iter().map(|x| block.wq.forward(&self.store, x)).collect();
            let ks: Vec<Tensor> = xs.iter().map(|x| block.wk.forward(&self.store, x)).collect();
            let vs: Vec<Tensor> = xs.iter().map(|x| block.wv.forward(&self.store, x)).collect();
            let (outs, attn_cache) = attention_core(&qs, &ks, &vs, d);
            let mut h_mid = Vec::with_capacity(s);
            for (i, o) in outs.iter().enumerate() {
                let proj = block.wo.forward(&self.store, o);
                let mut hm = h[i].clone();
                hm.add_scaled(&proj, 1.0);
                h_mid.push(hm);
            }
            let mut ln2c = Vec::with_capacity(s);
            let mut x2s = Vec::with_capacity(s);
            let mut fts = Vec::with_capacity(s);
            let mut h_out = Vec::with_capacity(s);
            for hm in &h_mid {
                let (x2, c2) = block.ln2.forward(&self.store, hm);
                let f1 = block.ff1.forward(&self.store, &x2);
                let ft = tanh_forward(&f1);
                let f2 = block.ff2.forward(&self.store, &ft);
                let mut ho = hm.clone();
                ho.add_scaled(&f2, 1.0);
                x2s.push(x2);
                ln2c.push(c2);
                fts.push(ft);
                h_out.push(ho);
            }
            block_caches.push(BlockCache {
                ln1: ln1c,
                x: xs,
                q: qs,
                k: ks,
                v: vs,
                attn: attn_cache,
                o: outs,
                ln2: ln2c,
                x2: x2s,
                ft: fts,
            });
            h = h_out;
        }

        let mut ln_f_caches = Vec::with_capacity(s);
        let mut ln_f_out = Vec::with_capacity(s);
        let mut v_out = Vec::with_capacity(s);
        for hv in &h {
            let (xf, cf) = self.ln_f.forward(&self.store, hv);
            let y = self.head.forward(&self.store, &xf); // [n, lc]
            let mut v = Tensor::zeros(&[cfg.latent_ch, cfg.latent_h, cfg.latent_w]);
            for p in 0..n {
                for c in 0..cfg.latent_ch {
                    v.data[c * n + p] = y.data[p * cfg.latent_ch + c];
                }
            }
            ln_f_caches.push(cf);
            ln_f_out.push(xf);
            v_out.push(v);
        }

        Ok((
            v_out,
            ForwardCache {
                slots: s,
                tokens_raw,
                label_rows,
                time_feat,
                time_t1,
                blocks: block_caches,
                ln_f: ln_f_caches,
                ln_f_out,
            },
        ))
    }

    /// Backward pass accumulating parameter gradients for dL/dv per slot.
    pub fn backward(&mut self, cache: &ForwardCache, d_v: &[Tensor]) -> Result<()> {
        let cfg = self.cfg;
        let d = cfg.token_dim;
        let n = cfg.tokens();
        let s = cache.slots;
        if d_v.len() != s {
            return Err(Error::ShapeMismatch("backward slot count".into()));
        }

        // Head and final norm.
        let mut dh: Vec<Tensor> = Vec::with_capacity(s);
        for i in 0..s {
            let mut dy = Tensor::zeros(&[n, cfg.latent_ch]);
            for p in 0..n {
                for c in 0..cfg.latent_ch {
                    dy.data[p * cfg.latent_ch + c] = d_v[i].data[c * n + p];
                }
            }
            let dxf = self.head.backward(&mut self.store, &cache.ln_f_out[i], &dy);
            dh.push(self.ln_f.backward(&mut self.store, &cache.ln_f[i], &dxf));
        }

        // Blocks in reverse.
        for bi in (0..self.blocks.len()).rev() {
            let (ln1, ln2) = (self.blocks[bi].ln1, self.blocks[bi].ln2);
            let bc = &cache.blocks[bi];
            // FFN sublayer.
            let mut dh_mid: Vec<Tensor> = Vec::with_capacity(s);
            for i in 0..s {
                let dft = self.blocks_ff2_backward(bi, &bc.ft[i], &dh[i]);
                let df1 = tanh_backward(&bc.ft[i], &dft);
                let dx2 = self.blocks_ff1_backward(bi, &bc.x2[i], &df1);
                let mut dm = ln2.backward(&mut self.store, &bc.ln2[i], &dx2);
                dm.add_scaled(&dh[i], 1.0);
                dh_mid.push(dm);
            }
            // Attention sublayer.
            let mut douts: Vec<Tensor> = Vec::with_capacity(s);
            for i in 0..s {
                douts.push(self.blocks_wo_backward(bi, &bc.o[i], &dh_mid[i]));
            }
            let (dq, dk, dv) =
                attention_core_backward(&bc.q, &bc.k, &bc.v, &bc.attn, &douts, d);
            let mut dh_in: Vec<Tensor> = Vec::with_capacity(s);
            for i in 0..s {
                let mut dx = self.blocks_wq_backward(bi, &bc.x[i], &dq[i]);
                dx.add_scaled(&self.blocks_wk_backward(bi, &bc.x[i], &dk[i]), 1.0);
                dx.add_scaled(&self.blocks_wv_backward(bi, &bc.x[i], &dv[i]), 1.0);
                let mut din = ln1.backward(&mut self.store, &bc.ln1[i], &dx);
                din.add_scaled(&dh_mid[i], 1.0);
                dh_in.push(din);
            }
            dh = dh_in;
        }

        // Embeddings.
        let mut d_time_row = Tensor::zeros(&[1, d]);
        for i in 0..s {
            // Patch embedding.
            let _ = self.patch_embed.backward(&mut self.store, &cache.tokens_raw[i], &dh[i]);
            // Positional embedding: one gradient row per token.
            for p in 0..n {
                for j in 0..d {
                    self.store.grads[self.pos_embed].data[p * d + j] += dh[i].data[p * d + j];
                }
            }
            // Label embedding: broadcast across tokens, so sum the rows.
            let mut drow = Tensor::zeros(&[1, d]);
            for p in 0..n {
                for j in 0..d {
                    drow.data[j] += dh[i].data[p * d + j];
                }
            }
            let _ = self.label_embed.backward(&mut self.store, &cache.label_rows[i], &drow);
            d_time_row.add_scaled(&drow, 1.0);
        }
        let dt1 = self.time_fc2.backward(&mut self.store, &cache.time_t1, &d_time_row);
        let dh1 = tanh_backward(&cache.time_t1, &dt1);
        let _ = self.time_fc1.backward(&mut self.store, &cache.time_feat, &dh1);
        Ok(())
    }

    // Small helpers that avoid borrowing self.blocks while mutating store.
    fn blocks_ff2_backward(&mut self, bi: usize, x: &Tensor, dy: &Tensor) -> Tensor {
        let layer = self.blocks[bi].ff2;
        layer.backward(&mut self.store, x, dy)
    }
    fn blocks_ff1_backward(&mut self, bi: usize, x: &Tensor, dy: &Tensor) -> Tensor {
        let layer = self.blocks[bi].ff1;
        layer.backward(&mut self.store, x, dy)
    }
    fn blocks_wo_backward(&mut self, bi: usize, x: &Tensor, dy: &Tensor) -> Tensor {
        let layer = self.blocks[bi].wo;
        layer.backward(&mut self.store, x, dy)
    }
    fn blocks_wq_backward(&mut self, bi: usize, x: &Tensor, dy: &Tensor) -> Tensor {
        let layer = self.blocks[bi].wq;
        layer.backward(&mut self.store, x, dy)
    }
    fn blocks_wk_backward(&mut self, bi: usize, x: &Tensor, dy: &Tensor) -> Tensor {
        let layer = self.blocks[bi].wk;
        layer.backward(&mut self.store, x, dy)
    }
    fn blocks_wv_backward(&mut self, bi: usize, x: &Tensor, dy: &Tensor) -> Tensor {
        let layer = self.blocks[bi].wv;
        layer.backward(&mut self.store, x, dy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_string(&self.cfg).map_err(|e| Error::format(path, e.to_string()))?;
        save_checkpoint(path, "denoiser", &cfg, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kind, cfg_json, tensors) = load_checkpoint(path)?;
        if kind != "denoiser" {
            return Err(Error::format(path, format!("checkpoint kind {kind:?} is not a denoiser")));
        }
        let cfg: DenoiserConfig =
            serde_json::from_str(&cfg_json).map_err(|e| Error::format(path, e.to_string()))?;
        let mut model = CrossBatchDenoiser::new(cfg, 0);
        restore_store(&mut model.store, tensors, path)?;
        Ok(model)
    }
}

/// Classifier-free guided V-prediction. With `cfg_scale == 1.0` this is a
/// single conditional forward pass (the unconditional pass is skipped
/// entirely); otherwise the conditions are zeroed for the second pass and
/// the two are combined as `v_u + s * (v_c - v_u)`.
pub fn denoise_step(
    model: &CrossBatchDenoiser,
    slots: &[SlotInput],
    t: usize,
    cfg_scale: f64,
) -> Result<Vec<Tensor>> {
    if cfg_scale < 1.0 {
        return Err(Error::InvalidArgument(format!("cfg_scale {cfg_scale} must be >= 1")));
    }
    let (v_cond, _) = model.forward(slots, t)?;
    if cfg_scale == 1.0 {
        return Ok(v_cond);
    }
    let uncond_slots: Vec<SlotInput> = slots
        .iter()
        .map(|s| SlotInput {
            z_t: s.z_t.clone(),
            cond: Tensor::zeros(&s.cond.dims),
            label: s.label.clone(),
        })
        .collect();
    let (v_uncond, _) = model.forward(&uncond_slots, t)?;
    Ok(v_cond
        .iter()
        .zip(v_uncond.iter())
        .map(|(c, u)| {
            Tensor::from_vec(
                &c.dims,
                u.data
                    .iter()
                    .zip(c.data.iter())
                    .map(|(&uv, &cv)| uv + cfg_scale * (cv - uv))
                    .collect(),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config() -> DenoiserConfig {
        DenoiserConfig {
            token_dim: 16,
            blocks: 2,
            ffn_mult: 2,
            latent_ch: 4,
            latent_h: 2,
            latent_w: 4,
            cond_latents: 2,
            label_dim: 4,
        }
    }

    fn random_slots(cfg: &DenoiserConfig, s: usize, rng: &mut Rng) -> Vec<SlotInput> {
        (0..s)
            .map(|i| {
                let mut label = vec![0.0; cfg.label_dim];
                label[i % cfg.label_dim] = 1.0;
                SlotInput {
                    z_t: Tensor::randn(&[cfg.latent_ch, cfg.latent_h, cfg.latent_w], 1.0, rng),
                    cond: Tensor::randn(
                        &[cfg.cond_channels(), cfg.latent_h, cfg.latent_w],
                        1.0,
                        rng,
                    ),
                    label,
                }
            })
            .collect()
    }

    #[test]
    fn identical_slots_identity_weights_give_identical_outputs() {
        let dim = 3;
        let n = 2;
        let mut rng = Rng::new(1);
        let tokens = Tensor::randn(&[n, dim], 1.0, &mut rng);
        let slots = vec![tokens.clone(), tokens.clone(), tokens.clone(), tokens.clone()];
        let eye = {
            let mut t = Tensor::zeros(&[dim, dim]);
            for i in 0..dim {
                t.data[i * dim + i] = 1.0;
            }
            t
        };
        let outs = cross_batch_attention(&slots, &eye, &eye, &eye).unwrap();
        for o in &outs[1..] {
            for (a, b) in o.data.iter().zip(outs[0].data.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    // Single token per slot, 2-dim tokens: softmax over 4 keys by hand.
    #[test]
    fn single_token_case_matches_hand_softmax() {
        let mut rng = Rng::new(2);
        let dim = 2;
        let slots: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[1, dim], 1.0, &mut rng)).collect();
        let wq = Tensor::randn(&[dim, dim], 0.7, &mut rng);
        let wk = Tensor::randn(&[dim, dim], 0.7, &mut rng);
        let wv = Tensor::randn(&[dim, dim], 0.7, &mut rng);
        let outs = cross_batch_attention(&slots, &wq, &wk, &wv).unwrap();

        // Hand computation for slot 0 (order: 0, 1, 2, 3).
        let matvec = |w: &Tensor, x: &Tensor| -> [f64; 2] {
            [
                x.data[0] * w.data[0] + x.data[1] * w.data[2],
                x.data[0] * w.data[1] + x.data[1] * w.data[3],
            ]
        };
        let q = matvec(&wq, &slots[0]);
        let keys: Vec<[f64; 2]> = slots.iter().map(|sl| matvec(&wk, sl)).collect();
        let vals: Vec<[f64; 2]> = slots.iter().map(|sl| matvec(&wv, sl)).collect();
        let scale = 1.0 / (dim as f64).sqrt();
        let scores: Vec<f64> =
            keys.iter().map(|k| (q[0] * k[0] + q[1] * k[1]) * scale).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut expect = [0.0f64; 2];
        for (e, v) in exps.iter().zip(vals.iter()) {
            expect[0] += e / z * v[0];
            expect[1] += e / z * v[1];
        }
        assert!((outs[0].data[0] - expect[0]).abs() < 1e-6);
        assert!((outs[0].data[1] - expect[1]).abs() < 1e-6);
    }

    // The softmax-weighted sum is invariant to reordering of key/value
    // pairs, so permuting the non-self slots changes nothing.
    #[test]
    fn permuting_non_self_slots_is_invariant() {
        let mut rng = Rng::new(3);
        let dim = 4;
        let n = 3;
        let a = Tensor::randn(&[n, dim], 1.0, &mut rng);
        let b = Tensor::randn(&[n, dim], 1.0, &mut rng);
        let c = Tensor::randn(&[n, dim], 1.0, &mut rng);
        let d = Tensor::randn(&[n, dim], 1.0, &mut rng);
        let wq = Tensor::randn(&[dim, dim], 0.5, &mut rng);
        let wk = Tensor::randn(&[dim, dim], 0.5, &mut rng);
        let wv = Tensor::randn(&[dim, dim], 0.5, &mut rng);

        let o1 = cross_batch_attention(
            &[a.clone(), b.clone(), c.clone(), d.clone()],
            &wq,
            &wk,
            &wv,
        )
        .unwrap();
        // Swap the non-self slots for slot 0: (a, d, c, b).
        let o2 = cross_batch_attention(
            &[a.clone(), d.clone(), c.clone(), b.clone()],
            &wq,
            &wk,
            &wv,
        )
        .unwrap();
        for (x, y) in o1[0].data.iter().zip(o2[0].data.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    // Equivariance: permuting all slots together permutes the outputs.
    #[test]
    fn slot_permutation_equivariance() {
        let cfg = micro_config();
        let model = CrossBatchDenoiser::new(cfg, 7);
        let mut rng = Rng::new(4);
        let slots = random_slots(&cfg, 3, &mut rng);
        let (v1, _) = model.forward(&slots, 100).unwrap();
        let permuted = vec![slots[2].clone(), slots[0].clone(), slots[1].clone()];
        let (v2, _) = model.forward(&permuted, 100).unwrap();
        for (a, b) in v1[2].data.iter().zip(v2[0].data.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in v1[0].data.iter().zip(v2[1].data.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cfg_one_is_bitwise_conditional() {
        let cfg = micro_config();
        let model = CrossBatchDenoiser::new(cfg, 8);
        let mut rng = Rng::new(5);
        let slots = random_slots(&cfg, 3, &mut rng);
        let (v_cond, _) = model.forward(&slots, 50).unwrap();
        let stepped = denoise_step(&model, &slots, 50, 1.0).unwrap();
        for (a, b) in v_cond.iter().zip(stepped.iter()) {
            assert_eq!(a.data, b.data);
        }
        assert!(denoise_step(&model, &slots, 50, 0.5).is_err());
    }

    #[test]
    fn cfg_formula() {
        let cfg = micro_config();
        let model = CrossBatchDenoiser::new(cfg, 9);
        let mut rng = Rng::new(6);
        let slots = random_slots(&cfg, 2, &mut rng);
        let v1 = denoise_step(&model, &slots, 10, 1.0).unwrap();
        let v2 = denoise_step(&model, &slots, 10, 2.0).unwrap();
        // v2 = v_u + 2 (v_c - v_u) -> v2 - v_c = v_c - v_u.
        let uncond: Vec<SlotInput> = slots
            .iter()
            .map(|s| SlotInput {
                z_t: s.z_t.clone(),
                cond: Tensor::zeros(&s.cond.dims),
                label: s.label.clone(),
            })
            .collect();
        let (vu, _) = model.forward(&uncond, 10).unwrap();
        for i in 0..slots.len() {
            for j in 0..v1[i].numel() {
                let expect = vu[i].data[j] + 2.0 * (v1[i].data[j] - vu[i].data[j]);
                assert!((v2[i].data[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_token_counts_error() {
        let mut rng = Rng::new(7);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 4], 1.0, &mut rng);
        assert!(cross_batch_attention(&[a, b], &w, &w, &w).is_err());
    }

    // FD spot-check of 50 random parameters on the micro model.
    #[test]
    fn parameter_gradients_match_fd() {
        let cfg = micro_config();
        let mut model = CrossBatchDenoiser::new(cfg, 10);
        let mut rng = Rng::new(11);
        let slots = random_slots(&cfg, 3, &mut rng);
        let target: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[cfg.latent_ch, cfg.latent_h, cfg.latent_w], 1.0, &mut rng))
            .collect();

        let loss_of = |m: &CrossBatchDenoiser| -> f64 {
            let (v, _) = m.forward(&slots, 77).unwrap();
            let mut acc = 0.0;
            let mut count = 0usize;
            for (o, tgt) in v.iter().zip(target.iter()) {
                for (a, b) in o.data.iter().zip(tgt.data.iter()) {
                    acc += (a - b) * (a - b);
                    count += 1;
                }
            }
            acc / count as f64
        };

        let (v, cache) = model.forward(&slots, 77).unwrap();
        let total: usize = v.iter().map(|t| t.numel()).sum();
        let d_v: Vec<Tensor> = v
            .iter()
            .zip(target.iter())
            .map(|(o, tgt)| {
                Tensor::from_vec(
                    &o.dims,
                    o.data
                        .iter()
                        .zip(tgt.data.iter())
                        .map(|(&a, &b)| 2.0 * (a - b) / total as f64)
                        .collect(),
                )
            })
            .collect();
        model.store.zero_grads();
        model.backward(&cache, &d_v).unwrap();

        let n_params = model.store.values.len();
        let mut checked = 0;
        let mut prng = Rng::new(123);
        while checked < 50 {
            let pid = prng.below(n_params);
            let numel = model.store.values[pid].numel();
            let idx = prng.below(numel);
            let an = model.store.grads[pid].data[idx];
            let h = 1e-5;
            let orig = model.store.values[pid].data[idx];
            model.store.values[pid].data[idx] = orig + h;
            let fp = loss_of(&model);
            model.store.values[pid].data[idx] = orig - h;
            let fm = loss_of(&model);
            model.store.values[pid].data[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-7);
            assert!(rel < 1e-3, "param {pid} ({}) idx {idx}: {an} vs {fd} (rel {rel})",
                model.store.names[pid]);
            checked += 1;
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let model = CrossBatchDenoiser::new(micro_config(), 12);
        let path = dir.path().join("d.ckpt");
        model.save(&path).unwrap();
        let back = CrossBatchDenoiser::load(&path).unwrap();
        assert_eq!(model.cfg, back.cfg);
        for (a, b) in model.store.values.iter().zip(back.store.values.iter()) {
            assert_eq!(a.data, b.data);
        }
    }
}

//! Minimal f64 tensor and layer kit with hand-written backprop: linear,
//! layer norm, softmax, tanh, strided (transposed) convolutions and Adam.
//! Everything is deterministic; parameters live in an insertion-ordered
//! store so checkpoints and optimizer state never depend on hash order.

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Tensor {
        Tensor { dims: dims.to_vec(), data: vec![0.0; dims.iter().product()] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), dims.iter().product::<usize>(), "tensor shape/data mismatch");
        Tensor { dims: dims.to_vec(), data }
    }

    pub fn randn(dims: &[usize], std: f64, rng: &mut Rng) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: (0..n).map(|_| rng.normal() * std).collect() }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn scale_in_place(&mut self, k: f64) {
        for v in self.data.iter_mut() {
            *v *= k;
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, k: f64) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += k * b;
        }
    }
}

/// c[m,n] = a[m,k] * b[k,n]
pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// c[m,n] = a[m,k] * b[n,k]^T. Implemented as an explicit transpose of `b`
/// followed by [`mm`]; the transpose is cheap next to the multiply and the
/// accumulation loop vectorizes much better than row-dot products.
pub fn mm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut bt = vec![0.0f64; k * n];
    for j in 0..n {
        for kk in 0..k {
            bt[kk * n + j] = b[j * k + kk];
        }
    }
    mm(a, &bt, m, k, n)
}

/// c[m,n] = a[k,m]^T * b[k,n]; accumulates into `c`.
pub fn mm_at_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

pub type ParamId = usize;

/// Insertion-ordered parameter store; values and grads are parallel arrays
/// so forward passes can read values while backward passes accumulate.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
    pub grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(&value.dims);
        self.names.push(name.to_string());
        self.values.push(value);
        self.grads.push(grad);
        self.values.len() - 1
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            g.data.fill(0.0);
        }
    }

    pub fn total_params(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam with bias correction; state order mirrors the store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.values.iter().map(|t| Tensor::zeros(&t.dims)).collect(),
            v: store.values.iter().map(|t| Tensor::zeros(&t.dims)).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (i, value) in store.values.iter_mut().enumerate() {
            let grad = &store.grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..value.data.len() {
                let g = grad.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * g;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * g * g;
                let mhat = m.data[j] / b1t;
                let vhat = v.data[j] / b2t;
                value.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, din: usize, dout: usize) -> Self {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        let w = Tensor::from_vec(
            &[din, dout],
            (0..din * dout).map(|_| rng.uniform_in(-bound, bound)).collect(),
        );
        let w = store.add(&format!("{name}.w"), w);
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[dout]));
        Linear { w, b, din, dout }
    }

    /// x: [rows, din] -> [rows, dout]
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let rows = x.numel() / self.din;
        let mut y = mm(&x.data, &store.values[self.w].data, rows, self.din, self.dout);
        let b = &store.values[self.b].data;
        for r in 0..rows {
            for j in 0..self.dout {
                y[r * self.dout + j] += b[j];
            }
        }
        Tensor::from_vec(&[rows, self.dout], y)
    }

    /// Accumulates dW/db into the store and returns dx.
    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Tensor {
        let rows = x.numel() / self.din;
        // dW += x^T dy
        {
            let (values, grads) = (&store.values, &mut store.grads);
            let _ = values;
            mm_at_acc(&x.data, &dy.data, rows, self.din, self.dout, &mut grads[self.w].data);
            let db = &mut grads[self.b].data;
            for r in 0..rows {
                for j in 0..self.dout {
                    db[j] += dy.data[r * self.dout + j];
                }
            }
        }
        // dx = dy W^T
        let dx = mm_bt(&dy.data, &store.values[self.w].data, rows, self.dout, self.din);
        Tensor::from_vec(&[rows, self.din], dx)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let g = store.add(&format!("{name}.g"), Tensor::from_vec(&[dim], vec![1.0; dim]));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[dim]));
        LayerNorm { g, b, dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> (Tensor, LayerNormCache) {
        let rows = x.numel() / self.dim;
        let d = self.dim;
        let gamma = &store.values[self.g].data;
        let beta = &store.values[self.b].data;
        let mut y = vec![0.0f64; rows * d];
        let mut xhat = vec![0.0f64; rows * d];
        let mut rstd = vec![0.0f64; rows];
        for r in 0..rows {
            let row = &x.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + 1e-6).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = gamma[j] * h + beta[j];
            }
        }
        (Tensor::from_vec(&x.dims, y), LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &LayerNormCache, dy: &Tensor) -> Tensor {
        let d = self.dim;
        let rows = dy.numel() / d;
        let gamma = store.values[self.g].data.clone();
        {
            let grads = &mut store.grads;
            let dg = &mut grads[self.g].data;
            for r in 0..rows {
                for j in 0..d {
                    dg[j] += dy.data[r * d + j] * cache.xhat[r * d + j];
                }
            }
            let db = &mut grads[self.b].data;
            for r in 0..rows {
                for j in 0..d {
                    db[j] += dy.data[r * d + j];
                }
            }
        }
        let mut dx = vec![0.0f64; rows * d];
        for r in 0..rows {
            let mut mean_dyh = 0.0f64;
            let mut mean_dyh_xhat = 0.0f64;
            for j in 0..d {
                let dyh = dy.data[r * d + j] * gamma[j];
                mean_dyh += dyh;
                mean_dyh_xhat += dyh * cache.xhat[r * d + j];
            }
            mean_dyh /= d as f64;
            mean_dyh_xhat /= d as f64;
            for j in 0..d {
                let dyh = dy.data[r * d + j] * gamma[j];
                dx[r * d + j] =
                    cache.rstd[r] * (dyh - mean_dyh - cache.xhat[r * d + j] * mean_dyh_xhat);
            }
        }
        Tensor::from_vec(&dy.dims, dx)
    }
}

/// Row-wise softmax.
pub fn softmax_rows(x: &mut [f64], rows: usize, n: usize) {
    for r in 0..rows {
        let row = &mut x[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// dx for y = softmax(x) given y and dy: y .* (dy - sum(dy .* y)).
pub fn softmax_backward(y: &[f64], dy: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let mut dx = vec![0.0f64; rows * n];
    for r in 0..rows {
        let yr = &y[r * n..(r + 1) * n];
        let dyr = &dy[r * n..(r + 1) * n];
        let dot: f64 = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for j in 0..n {
            dx[r * n + j] = yr[j] * (dyr[j] - dot);
        }
    }
    dx
}

pub fn tanh_forward(x: &Tensor) -> Tensor {
    Tensor::from_vec(&x.dims, x.data.iter().map(|&v| v.tanh()).collect())
}

/// dx given the tanh output `y`.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    Tensor::from_vec(
        &y.dims,
        y.data.iter().zip(dy.data.iter()).map(|(&t, &d)| d * (1.0 - t * t)).collect(),
    )
}

/// Strided convolution, weight layout [cout, cin, k, k].
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let fan_out = (cout * k * k) as f64;
        let bound = (6.0 / (fan_in + fan_out)).sqrt();
        let w = Tensor::from_vec(
            &[cout, cin, k, k],
            (0..cout * cin * k * k).map(|_| rng.uniform_in(-bound, bound)).collect(),
        );
        let w = store.add(&format!("{name}.w"), w);
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv2d { w, b, cin, cout, k, stride, pad }
    }

    pub fn out_size(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Gather the receptive fields into rows: [oh*ow, cin*k*k].
    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let (h, w) = (x.dims[1], x.dims[2]);
        let patch = self.cin * self.k * self.k;
        let mut cols = vec![0.0f64; oh * ow * patch];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * patch;
                for ci in 0..self.cin {
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = (ci * h + iy as usize) * w;
                        let dst = row + (ci * self.k + ky) * self.k;
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[dst + kx] = x.data[src + ix as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Weight as a [cin*k*k, cout] matrix.
    fn weight_matrix(&self, store: &ParamStore) -> Vec<f64> {
        let patch = self.cin * self.k * self.k;
        let weight = &store.values[self.w].data;
        let mut wt = vec![0.0f64; patch * self.cout];
        for co in 0..self.cout {
            for p in 0..patch {
                wt[p * self.cout + co] = weight[co * patch + p];
            }
        }
        wt
    }

    /// x: [cin, h, w] -> [cout, oh, ow]
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let (h, w) = (x.dims[1], x.dims[2]);
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let patch = self.cin * self.k * self.k;
        let cols = self.im2col(x, oh, ow);
        let wt = self.weight_matrix(store);
        let rows = mm(&cols, &wt, oh * ow, patch, self.cout);
        let bias = &store.values[self.b].data;
        let mut y = vec![0.0f64; self.cout * oh * ow];
        for p in 0..oh * ow {
            for co in 0..self.cout {
                y[co * oh * ow + p] = rows[p * self.cout + co] + bias[co];
            }
        }
        Tensor::from_vec(&[self.cout, oh, ow], y)
    }

    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Tensor {
        let (h, w) = (x.dims[1], x.dims[2]);
        let (oh, ow) = (dy.dims[1], dy.dims[2]);
        let patch = self.cin * self.k * self.k;
        // dy as rows [oh*ow, cout].
        let mut dy_rows = vec![0.0f64; oh * ow * self.cout];
        for co in 0..self.cout {
            for p in 0..oh * ow {
                dy_rows[p * self.cout + co] = dy.data[co * oh * ow + p];
            }
        }
        let cols = self.im2col(x, oh, ow);
        {
            let grads = &mut store.grads;
            // dW += cols^T dy_rows, scattered back to [cout, cin, k, k].
            let mut dwt = vec![0.0f64; patch * self.cout];
            mm_at_acc(&cols, &dy_rows, oh * ow, patch, self.cout, &mut dwt);
            for co in 0..self.cout {
                for p in 0..patch {
                    grads[self.w].data[co * patch + p] += dwt[p * self.cout + co];
                }
            }
            let db = &mut grads[self.b].data;
            for p in 0..oh * ow {
                for co in 0..self.cout {
                    db[co] += dy_rows[p * self.cout + co];
                }
            }
        }
        // dx via col2im of dy_rows * wt^T.
        let wt = self.weight_matrix(store);
        let dcols = mm_bt(&dy_rows, &wt, oh * ow, self.cout, patch);
        let mut dx = vec![0.0f64; x.numel()];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * patch;
                for ci in 0..self.cin {
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = (ci * h + iy as usize) * w;
                        let src = row + (ci * self.k + ky) * self.k;
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[dst + ix as usize] += dcols[src + kx];
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&x.dims, dx)
    }
}

/// Transposed strided convolution (fractional stride), weight layout
/// [cin, cout, k, k]; output size is stride * input size for k = 2 * stride
/// and pad = stride / ... the usual k=4, s=2, p=1 doubling configuration.
#[derive(Debug, Clone, Copy)]
pub struct TConv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl TConv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let fan_out = (cout * k * k) as f64;
        let bound = (6.0 / (fan_in + fan_out)).sqrt();
        let w = Tensor::from_vec(
            &[cin, cout, k, k],
            (0..cin * cout * k * k).map(|_| rng.uniform_in(-bound, bound)).collect(),
        );
        let w = store.add(&format!("{name}.w"), w);
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[cout]));
        TConv2d { w, b, cin, cout, k, stride, pad }
    }

    pub fn out_size(&self, h: usize) -> usize {
        (h - 1) * self.stride + self.k - 2 * self.pad
    }

    /// x transposed to rows: [h*w, cin].
    fn input_rows(&self, x: &Tensor) -> Vec<f64> {
        let hw = x.dims[1] * x.dims[2];
        let mut rows = vec![0.0f64; hw * self.cin];
        for ci in 0..self.cin {
            for p in 0..hw {
                rows[p * self.cin + ci] = x.data[ci * hw + p];
            }
        }
        rows
    }

    /// x: [cin, h, w] -> [cout, oh, ow]. The weight buffer [cin, cout*k*k]
    /// is already the matrix the row-product needs; rows scatter into the
    /// strided output.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let (h, w) = (x.dims[1], x.dims[2]);
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let ckk = self.cout * self.k * self.k;
        let rows = self.input_rows(x);
        let cols_out = mm(&rows, &store.values[self.w].data, h * w, self.cin, ckk);
        let bias = &store.values[self.b].data;
        let mut y = vec![0.0f64; self.cout * oh * ow];
        for co in 0..self.cout {
            y[co * oh * ow..(co + 1) * oh * ow].fill(bias[co]);
        }
        for iy in 0..h {
            for ix in 0..w {
                let row = (iy * w + ix) * ckk;
                for co in 0..self.cout {
                    for ky in 0..self.k {
                        let oy = (iy * self.stride + ky) as isize - self.pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let dst = (co * oh + oy as usize) * ow;
                        let src = row + (co * self.k + ky) * self.k;
                        for kx in 0..self.k {
                            let ox = (ix * self.stride + kx) as isize - self.pad as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            y[dst + ox as usize] += cols_out[src + kx];
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[self.cout, oh, ow], y)
    }

    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Tensor {
        let (h, w) = (x.dims[1], x.dims[2]);
        let (oh, ow) = (dy.dims[1], dy.dims[2]);
        let ckk = self.cout * self.k * self.k;
        // Gather dy into rows matching the forward scatter.
        let mut dcols = vec![0.0f64; h * w * ckk];
        for iy in 0..h {
            for ix in 0..w {
                let row = (iy * w + ix) * ckk;
                for co in 0..self.cout {
                    for ky in 0..self.k {
                        let oy = (iy * self.stride + ky) as isize - self.pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let src = (co * oh + oy as usize) * ow;
                        let dst = row + (co * self.k + ky) * self.k;
                        for kx in 0..self.k {
                            let ox = (ix * self.stride + kx) as isize - self.pad as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            dcols[dst + kx] = dy.data[src + ox as usize];
                        }
                    }
                }
            }
        }
        let rows = self.input_rows(x);
        {
            let grads = &mut store.grads;
            mm_at_acc(&rows, &dcols, h * w, self.cin, ckk, &mut grads[self.w].data);
            let db = &mut grads[self.b].data;
            for co in 0..self.cout {
                let mut acc = 0.0;
                for p in 0..oh * ow {
                    acc += dy.data[co * oh * ow + p];
                }
                db[co] += acc;
            }
        }
        let dx_rows = mm_bt(&dcols, &store.values[self.w].data, h * w, ckk, self.cin);
        let mut dx = vec![0.0f64; x.numel()];
        for ci in 0..self.cin {
            for p in 0..h * w {
                dx[ci * h * w + p] = dx_rows[p * self.cin + ci];
            }
        }
        Tensor::from_vec(&x.dims, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_param(
        f: &mut dyn FnMut(&ParamStore) -> f64,
        store: &ParamStore,
        pid: ParamId,
        idx: usize,
        h: f64,
    ) -> f64 {
        let mut sp = store.clone();
        sp.values[pid].data[idx] += h;
        let fp = f(&sp);
        let mut sm = store.clone();
        sm.values[pid].data[idx] -= h;
        let fm = f(&sm);
        (fp - fm) / (2.0 * h)
    }

    #[test]
    fn matmul_agrees_with_naive() {
        let mut rng = Rng::new(1);
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let c = mm(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                assert!((c[i * n + j] - acc).abs() < 1e-12);
            }
        }
        // bt: a[m,k] * b[n,k]^T
        let bt: Vec<f64> = (0..n * k).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let c2 = mm_bt(&a, &bt, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * bt[j * k + kk];
                }
                assert!((c2[i * n + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_gradients_match_fd() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let target = Tensor::randn(&[4, 2], 1.0, &mut rng);

        let mut f = |s: &ParamStore| {
            let y = lin.forward(s, &x);
            y.data.iter().zip(target.data.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>()
        };

        let y = lin.forward(&store, &x);
        let dy = Tensor::from_vec(
            &[4, 2],
            y.data.iter().zip(target.data.iter()).map(|(&a, &b)| 2.0 * (a - b)).collect(),
        );
        store.zero_grads();
        let dx = lin.backward(&mut store, &x, &dy);

        for idx in [0usize, 3, 5] {
            let fd = fd_param(&mut f, &store, lin.w, idx, 1e-6);
            let an = store.grads[lin.w].data[idx];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "w[{idx}]: {an} vs {fd}");
        }
        let fd_b = fd_param(&mut f, &store, lin.b, 1, 1e-6);
        assert!((fd_b - store.grads[lin.b].data[1]).abs() < 1e-6 * (1.0 + fd_b.abs()));

        // dx via FD over the input.
        let mut fx = |xt: &Tensor| {
            let y = lin.forward(&store, xt);
            y.data.iter().zip(target.data.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>()
        };
        for idx in [0usize, 7, 11] {
            let mut xp = x.clone();
            xp.data[idx] += 1e-6;
            let mut xm = x.clone();
            xm.data[idx] -= 1e-6;
            let fd = (fx(&xp) - fx(&xm)) / 2e-6;
            assert!((fd - dx.data[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn layernorm_gradients_match_fd() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 6);
        // Non-unit gamma so the gamma path is exercised.
        for (i, v) in store.values[ln.g].data.iter_mut().enumerate() {
            *v = 0.5 + 0.2 * i as f64;
        }
        let x = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let target = Tensor::randn(&[5, 6], 1.0, &mut rng);

        let loss = |s: &ParamStore, xt: &Tensor| {
            let (y, _) = ln.forward(s, xt);
            y.data.iter().zip(target.data.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>()
        };

        let (y, cache) = ln.forward(&store, &x);
        let dy = Tensor::from_vec(
            &[5, 6],
            y.data.iter().zip(target.data.iter()).map(|(&a, &b)| 2.0 * (a - b)).collect(),
        );
        store.zero_grads();
        let dx = ln.backward(&mut store, &cache, &dy);

        for idx in [0usize, 13, 29] {
            let mut xp = x.clone();
            xp.data[idx] += 1e-6;
            let mut xm = x.clone();
            xm.data[idx] -= 1e-6;
            let fd = (loss(&store, &xp) - loss(&store, &xm)) / 2e-6;
            assert!((fd - dx.data[idx]).abs() < 1e-5 * (1.0 + fd.abs()), "{idx}: {fd} vs {}", dx.data[idx]);
        }
        let mut fg = |s: &ParamStore| loss(s, &x);
        for idx in [0usize, 5] {
            let fd = fd_param(&mut fg, &store, ln.g, idx, 1e-6);
            assert!((fd - store.grads[ln.g].data[idx]).abs() < 1e-5 * (1.0 + fd.abs()));
            let fdb = fd_param(&mut fg, &store, ln.b, idx, 1e-6);
            assert!((fdb - store.grads[ln.b].data[idx]).abs() < 1e-5 * (1.0 + fdb.abs()));
        }
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let mut rng = Rng::new(4);
        let x: Vec<f64> = (0..12).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let coeff: Vec<f64> = (0..12).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let f = |xv: &[f64]| {
            let mut y = xv.to_vec();
            softmax_rows(&mut y, 3, 4);
            y.iter().zip(&coeff).map(|(&a, &c)| a * c).sum::<f64>()
        };
        let mut y = x.clone();
        softmax_rows(&mut y, 3, 4);
        let dx = softmax_backward(&y, &coeff, 3, 4);
        for idx in 0..12 {
            let mut xp = x.clone();
            xp[idx] += 1e-6;
            let mut xm = x.clone();
            xm[idx] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - dx[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn conv_and_tconv_gradients_match_fd() {
        let mut rng = Rng::new(5);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, &mut rng, "c", 2, 3, 4, 2, 1);
        let tconv = TConv2d::new(&mut store, &mut rng, "t", 3, 2, 4, 2, 1);
        let x = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
        let target = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);

        let run = |s: &ParamStore, xt: &Tensor| {
            let mid = conv.forward(s, xt);
            let act = tanh_forward(&mid);
            let out = tconv.forward(s, &act);
            out.data
                .iter()
                .zip(target.data.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
        };

        // Analytic backward.
        let mid = conv.forward(&store, &x);
        let act = tanh_forward(&mid);
        let out = tconv.forward(&store, &act);
        assert_eq!(out.dims, vec![2, 8, 8]);
        let dout = Tensor::from_vec(
            &out.dims,
            out.data.iter().zip(target.data.iter()).map(|(&a, &b)| 2.0 * (a - b)).collect(),
        );
        store.zero_grads();
        let dact = tconv.backward(&mut store, &act, &dout);
        let dmid = tanh_backward(&act, &dact);
        let dx = conv.backward(&mut store, &x, &dmid);

        let mut f = |s: &ParamStore| run(s, &x);
        for (pid, idx) in [(conv.w, 0usize), (conv.w, 17), (conv.b, 2), (tconv.w, 5), (tconv.b, 0)] {
            let fd = fd_param(&mut f, &store, pid, idx, 1e-6);
            let an = store.grads[pid].data[idx];
            assert!((fd - an).abs() < 1e-5 * (1.0 + fd.abs()), "param {pid}[{idx}]: {an} vs {fd}");
        }
        for idx in [0usize, 60, 127] {
            let mut xp = x.clone();
            xp.data[idx] += 1e-6;
            let mut xm = x.clone();
            xm.data[idx] -= 1e-6;
            let fd = (run(&store, &xp) - run(&store, &xm)) / 2e-6;
            assert!((fd - dx.data[idx]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn conv_shapes_double_and_halve() {
        let mut rng = Rng::new(6);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, &mut rng, "c", 3, 8, 4, 2, 1);
        let tconv = TConv2d::new(&mut store, &mut rng, "t", 8, 3, 4, 2, 1);
        let x = Tensor::zeros(&[3, 16, 16]);
        let y = conv.forward(&store, &x);
        assert_eq!(y.dims, vec![8, 8, 8]);
        let z = tconv.forward(&store, &y);
        assert_eq!(z.dims, vec![3, 16, 16]);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]));
        let mut adam = Adam::new(&store, 0.05);
        for _ in 0..500 {
            store.zero_grads();
            let x = &store.values[p];
            let g: Vec<f64> = x.data.iter().map(|&v| 2.0 * v).collect();
            store.grads[p].data.copy_from_slice(&g);
            adam.step(&mut store);
        }
        assert!(store.values[p].data.iter().all(|&v| v.abs() < 1e-2));
    }
}

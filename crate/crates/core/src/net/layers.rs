//! Layers with explicit forward caches and backward passes.

use super::params::{Grads, ParamId, ParamKind, ParamStore};
use super::tensor::Tensor;

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, all with explicit
/// row and column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted bounds cover every element touched by the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    in_shape: [usize; 4],
    /// im2col matrix per image, `[in_c*kh*kw, oh*ow]`.
    cols: Vec<Vec<f64>>,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: [usize; 2],
        stride: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Self {
        let [kh, kw] = kernel;
        let weight = store.add(format!("{name}.weight"), vec![out_c, in_c, kh, kw], ParamKind::Weight, weights);
        let bias = bias.map(|b| store.add(format!("{name}.bias"), vec![out_c], ParamKind::Weight, b));
        Self {
            weight,
            bias,
            in_c,
            out_c,
            kh,
            kw,
            stride,
        }
    }

    fn pad(&self) -> (usize, usize) {
        (self.kh / 2, self.kw / 2)
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (ph, pw) = self.pad();
        ((h + 2 * ph - self.kh) / self.stride + 1, (w + 2 * pw - self.kw) / self.stride + 1)
    }

    fn k_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    /// Fill `cols` with the im2col rows for output rows `oy0..oy1`.
    fn im2col(&self, x: &[f64], h: usize, w: usize, ow: usize, oy0: usize, oy1: usize, cols: &mut [f64]) {
        let (ph, pw) = self.pad();
        let p = (oy1 - oy0) * ow;
        for ci in 0..self.in_c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in oy0..oy1 {
                        let seg = &mut dst[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                        let iy = (oy * self.stride + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            seg.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in seg.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - pw as isize;
                            *d = if ix >= 0 && ix < w as isize { src[ix as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, dcols: &[f64], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
        let (ph, pw) = self.pad();
        let p = oh * ow;
        for ci in 0..self.in_c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &dcols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - pw as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, params: &ParamStore, x: &Tensor, keep_cache: bool) -> (Tensor, Option<ConvCache>) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_dims(x.h, x.w);
        let p = oh * ow;
        let k = self.k_len();
        let weight = params.get(self.weight);
        let mut out = Tensor::zeros(x.n, self.out_c, oh, ow);
        let mut cache = keep_cache.then(|| ConvCache {
            in_shape: x.shape(),
            cols: Vec::with_capacity(x.n),
        });
        // Bound the im2col buffer when no cache is kept.
        let rows_per_chunk = if keep_cache {
            oh
        } else {
            (1 << 20).max(k * ow) / (k * ow).max(1)
        }
        .clamp(1, oh.max(1));

        for i in 0..x.n {
            let img = x.image(i);
            let out_img = out.image_mut(i);
            let mut oy0 = 0;
            while oy0 < oh {
                let oy1 = (oy0 + rows_per_chunk).min(oh);
                let pc = (oy1 - oy0) * ow;
                let mut cols = vec![0.0; k * pc];
                self.im2col(img, x.h, x.w, ow, oy0, oy1, &mut cols);
                gemm(
                    self.out_c,
                    k,
                    pc,
                    weight,
                    k,
                    1,
                    &cols,
                    pc,
                    1,
                    0.0,
                    &mut out_img[oy0 * ow..],
                    p,
                    1,
                );
                if let Some(c) = cache.as_mut() {
                    c.cols.push(cols);
                }
                oy0 = oy1;
            }
            if let Some(b) = self.bias {
                let bias = params.get(b);
                for (o, bv) in bias.iter().enumerate() {
                    for v in &mut out_img[o * p..(o + 1) * p] {
                        *v += bv;
                    }
                }
            }
        }
        (out, cache)
    }

    pub fn backward(&self, params: &ParamStore, cache: &ConvCache, dy: &Tensor, grads: &mut Grads) -> Tensor {
        let [n, _, h, w] = cache.in_shape;
        let (oh, ow) = (dy.h, dy.w);
        let p = oh * ow;
        let k = self.k_len();
        let weight = params.get(self.weight);
        let mut dx = Tensor::zeros(n, self.in_c, h, w);
        let mut dcols = vec![0.0; k * p];
        for i in 0..n {
            let dy_img = dy.image(i);
            let cols = &cache.cols[i];
            // dW += dY[out_c x P] * cols^T[P x K]
            gemm(self.out_c, p, k, dy_img, p, 1, cols, 1, p, 1.0, grads.get_mut(self.weight), k, 1);
            // dcols = W^T[K x out_c] * dY[out_c x P]
            gemm(k, self.out_c, p, weight, 1, k, dy_img, p, 1, 0.0, &mut dcols, p, 1);
            self.col2im_add(&dcols, h, w, oh, ow, dx.image_mut(i));
            if let Some(b) = self.bias {
                let gb = grads.get_mut(b);
                for (o, g) in gb.iter_mut().enumerate() {
                    *g += dy_img[o * p..(o + 1) * p].iter().sum::<f64>();
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

/// Batch statistics to fold into the running estimates after a training
/// forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    running_mean: ParamId,
    running_var: ParamId,
    momentum: f64,
    mean: Vec<f64>,
    unbiased_var: Vec<f64>,
}

impl BnUpdate {
    pub fn apply(&self, params: &mut ParamStore) {
        let m = self.momentum;
        for (r, b) in params.get_mut(self.running_mean).iter_mut().zip(&self.mean) {
            *r = super::params::to_f32_grid((1.0 - m) * *r + m * b);
        }
        for (r, b) in params.get_mut(self.running_var).iter_mut().zip(&self.unbiased_var) {
            *r = super::params::to_f32_grid((1.0 - m) * *r + m * b);
        }
    }
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        let c = channels;
        Self {
            gamma: store.add(format!("{name}.gamma"), vec![c], ParamKind::Weight, vec![1.0; c]),
            beta: store.add(format!("{name}.beta"), vec![c], ParamKind::Weight, vec![0.0; c]),
            running_mean: store.add(format!("{name}.running_mean"), vec![c], ParamKind::Buffer, vec![0.0; c]),
            running_var: store.add(format!("{name}.running_var"), vec![c], ParamKind::Buffer, vec![1.0; c]),
            channels,
            eps,
            momentum,
        }
    }

    pub fn forward_eval(&self, params: &ParamStore, x: &Tensor) -> Tensor {
        let gamma = params.get(self.gamma);
        let beta = params.get(self.beta);
        let mean = params.get(self.running_mean);
        let var = params.get(self.running_var);
        let hw = x.h * x.w;
        let mut y = x.clone();
        for i in 0..x.n {
            let img = y.image_mut(i);
            for c in 0..self.channels {
                let scale = gamma[c] / (var[c] + self.eps).sqrt();
                let shift = beta[c] - mean[c] * scale;
                for v in &mut img[c * hw..(c + 1) * hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        y
    }

    pub fn forward_train(&self, params: &ParamStore, x: &Tensor) -> (Tensor, BnCache, BnUpdate) {
        let gamma = params.get(self.gamma);
        let beta = params.get(self.beta);
        let hw = x.h * x.w;
        let count = (x.n * hw) as f64;
        let mut mean = vec![0.0; self.channels];
        let mut var = vec![0.0; self.channels];
        for i in 0..x.n {
            let img = x.image(i);
            for c in 0..self.channels {
                mean[c] += img[c * hw..(c + 1) * hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..x.n {
            let img = x.image(i);
            for c in 0..self.channels {
                var[c] += img[c * hw..(c + 1) * hw].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut xhat = x.clone();
        let mut y = x.clone();
        for i in 0..x.n {
            let xh = xhat.image_mut(i);
            for c in 0..self.channels {
                for v in &mut xh[c * hw..(c + 1) * hw] {
                    *v = (*v - mean[c]) * inv_std[c];
                }
            }
            let yi = y.image_mut(i);
            let xh = xhat.image(i);
            for c in 0..self.channels {
                for (o, v) in yi[c * hw..(c + 1) * hw].iter_mut().zip(&xh[c * hw..(c + 1) * hw]) {
                    *o = gamma[c] * v + beta[c];
                }
            }
        }
        let unbiased = if count > 1.0 {
            var.iter().map(|v| v * count / (count - 1.0)).collect()
        } else {
            var.clone()
        };
        let update = BnUpdate {
            running_mean: self.running_mean,
            running_var: self.running_var,
            momentum: self.momentum,
            mean,
            unbiased_var: unbiased,
        };
        (y, BnCache { xhat, inv_std }, update)
    }

    pub fn backward(&self, params: &ParamStore, cache: &BnCache, dy: &Tensor, grads: &mut Grads) -> Tensor {
        let gamma = params.get(self.gamma);
        let hw = dy.h * dy.w;
        let count = (dy.n * hw) as f64;
        let mut sum_dy = vec![0.0; self.channels];
        let mut sum_dy_xhat = vec![0.0; self.channels];
        for i in 0..dy.n {
            let d = dy.image(i);
            let xh = cache.xhat.image(i);
            for c in 0..self.channels {
                let r = c * hw..(c + 1) * hw;
                sum_dy[c] += d[r.clone()].iter().sum::<f64>();
                sum_dy_xhat[c] += d[r.clone()].iter().zip(&xh[r]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        for (g, s) in grads.get_mut(self.gamma).iter_mut().zip(&sum_dy_xhat) {
            *g += s;
        }
        for (g, s) in grads.get_mut(self.beta).iter_mut().zip(&sum_dy) {
            *g += s;
        }
        let mut dx = dy.clone();
        for i in 0..dy.n {
            let xh = cache.xhat.image(i);
            let dxi = dx.image_mut(i);
            for c in 0..self.channels {
                let k = gamma[c] * cache.inv_std[c] / count;
                let r = c * hw..(c + 1) * hw;
                for (v, xv) in dxi[r.clone()].iter_mut().zip(&xh[r]) {
                    *v = k * (count * *v - sum_dy[c] - xv * sum_dy_xhat[c]);
                }
            }
        }
        dx
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient of ReLU given its output.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, v) in dx.data.iter_mut().zip(&y.data) {
        if *v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    in_shape: [usize; 4],
    argmax: Vec<usize>,
}

impl MaxPool2d {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1)
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, PoolCache) {
        let (oh, ow) = self.out_dims(x.h, x.w);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        let mut argmax = vec![0; out.data.len()];
        let mut o = 0;
        for plane in 0..x.n * x.c {
            let base = plane * x.h * x.w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let idx = base + (oy * self.stride + ky) * x.w + ox * self.stride + kx;
                            if x.data[idx] > best {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.data[o] = best;
                    argmax[o] = best_idx;
                    o += 1;
                }
            }
        }
        (
            out,
            PoolCache {
                in_shape: x.shape(),
                argmax,
            },
        )
    }

    pub fn backward(&self, cache: &PoolCache, dy: &Tensor) -> Tensor {
        let [n, c, h, w] = cache.in_shape;
        let mut dx = Tensor::zeros(n, c, h, w);
        for (g, &idx) in dy.data.iter().zip(&cache.argmax) {
            dx.data[idx] += g;
        }
        dx
    }
}

/// Mean over the spatial axes: `n x c x h x w` to `n x c x 1 x 1`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let hw = x.h * x.w;
    let data = x.data.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Tensor::matrix(x.n, x.c, data)
}

pub fn global_avg_pool_backward(in_shape: [usize; 4], dy: &Tensor) -> Tensor {
    let [n, c, h, w] = in_shape;
    let hw = h * w;
    let mut dx = Tensor::zeros(n, c, h, w);
    for (plane, g) in dx.data.chunks_mut(hw).zip(&dy.data) {
        plane.fill(g / hw as f64);
    }
    dx
}

/// Fully connected layer on `n x in x 1 x 1` tensors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), vec![outputs, inputs], ParamKind::Weight, weights),
            bias: store.add(format!("{name}.bias"), vec![outputs], ParamKind::Weight, bias),
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, params: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.image_len(), self.inputs, "linear input width");
        let mut y = Tensor::zeros(x.n, self.outputs, 1, 1);
        let bias = params.get(self.bias);
        for i in 0..x.n {
            y.image_mut(i).copy_from_slice(bias);
        }
        // Y[n x out] += X[n x in] * W^T[in x out]
        gemm(
            x.n,
            self.inputs,
            self.outputs,
            &x.data,
            self.inputs,
            1,
            params.get(self.weight),
            1,
            self.inputs,
            1.0,
            &mut y.data,
            self.outputs,
            1,
        );
        y
    }

    pub fn backward(&self, params: &ParamStore, x: &Tensor, dy: &Tensor, grads: &mut Grads) -> Tensor {
        // dW[out x in] += dY^T[out x n] * X[n x in]
        gemm(
            self.outputs,
            x.n,
            self.inputs,
            &dy.data,
            1,
            self.outputs,
            &x.data,
            self.inputs,
            1,
            1.0,
            grads.get_mut(self.weight),
            self.inputs,
            1,
        );
        let gb = grads.get_mut(self.bias);
        for i in 0..dy.n {
            for (g, d) in gb.iter_mut().zip(dy.image(i)) {
                *g += d;
            }
        }
        // dX[n x in] = dY[n x out] * W[out x in]
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        gemm(
            x.n,
            self.outputs,
            self.inputs,
            &dy.data,
            self.outputs,
            1,
            params.get(self.weight),
            self.inputs,
            1,
            0.0,
            &mut dx.data,
            self.inputs,
            1,
        );
        dx
    }
}

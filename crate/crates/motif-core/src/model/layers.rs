//! Convolutional building blocks with explicit reverse-mode backward passes.
//!
//! Feature maps are rank-3 tensors laid out `[channels][freq][time]`.

use matrixmultiply::dgemm;

use super::store::{Gradients, ParamId, ParameterStore};
use super::tensor::Tensor;

/// 2D convolution, stride 1, zero padding `k/2` (shape preserving).
///
/// Convolutions that feed a `ChannelNorm` run without a bias: the norm
/// subtracts the per-channel mean, which would cancel it exactly.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

/// row-major C[m][n] = A[m][k] * B[k][n] (+ C when beta = 1)
fn gemm_rrr(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// row-major C[m][n] = A^T (A is [k][m]) * B[k][n]
fn gemm_trr(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// row-major C[m][n] = A[m][k] * B^T (B is [n][k])
fn gemm_rtr(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold `x` ([C][H][W], zero padding p) into columns [C*k*k][H*W].
fn im2col(x: &Tensor, k: usize, out: &mut Vec<f64>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let p = k / 2;
    out.clear();
    out.resize(c * k * k * h * w, 0.0);
    let xs = x.data();
    let hw = h * w;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * hw;
                for i in 0..h {
                    let si = i as isize + ki as isize - p as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = (ch * h + si as usize) * w;
                    let dst = row + i * w;
                    let jo = kj as isize - p as isize;
                    let (j0, j1) = (jo.max(0) - jo, (w as isize).min(w as isize - jo));
                    for j in j0 as usize..j1 as usize {
                        out[dst + j] = xs[src + (j as isize + jo) as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add columns [C*k*k][H*W] back into an image [C][H][W].
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, x_grad: &mut Tensor) {
    let p = k / 2;
    let hw = h * w;
    let xg = x_grad.data_mut();
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * hw;
                for i in 0..h {
                    let si = i as isize + ki as isize - p as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let dst = (ch * h + si as usize) * w;
                    let src = row + i * w;
                    let jo = kj as isize - p as isize;
                    let (j0, j1) = (jo.max(0) - jo, (w as isize).min(w as isize - jo));
                    for j in j0 as usize..j1 as usize {
                        xg[dst + (j as isize + jo) as usize] += cols[src + j];
                    }
                }
            }
        }
    }
}

impl Conv2d {
    pub fn forward(&self, ps: &ParameterStore, x: &Tensor) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(c, self.in_ch, "conv input channels");
        let hw = h * w;
        let kk = self.in_ch * self.kernel * self.kernel;
        let mut cols = Vec::new();
        im2col(x, self.kernel, &mut cols);
        let mut y = Tensor::zeros(&[self.out_ch, h, w]);
        gemm_rrr(
            self.out_ch,
            kk,
            hw,
            ps.value(self.weight).data(),
            &cols,
            y.data_mut(),
            0.0,
        );
        if let Some(bias) = self.bias {
            let bias = ps.value(bias).data();
            for o in 0..self.out_ch {
                let b = bias[o];
                for v in &mut y.data_mut()[o * hw..(o + 1) * hw] {
                    *v += b;
                }
            }
        }
        y
    }

    /// Returns the gradient w.r.t. the layer input and accumulates parameter
    /// gradients into `grads`.
    pub fn backward(
        &self,
        ps: &ParameterStore,
        x: &Tensor,
        grad_y: &Tensor,
        grads: &mut Gradients,
    ) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hw = h * w;
        let kk = self.in_ch * self.kernel * self.kernel;
        let mut cols = Vec::new();
        im2col(x, self.kernel, &mut cols);

        if let Some(bias) = self.bias {
            let gb = grads.tensor_mut(bias).data_mut();
            for o in 0..self.out_ch {
                gb[o] += grad_y.data()[o * hw..(o + 1) * hw].iter().sum::<f64>();
            }
        }
        // weight grad: [out][kk] += grad_y [out][hw] * cols^T [hw][kk]
        gemm_rtr(
            self.out_ch,
            hw,
            kk,
            grad_y.data(),
            &cols,
            grads.tensor_mut(self.weight).data_mut(),
            1.0,
        );
        // input grad via col2im of W^T * grad_y
        let mut gcols = vec![0.0; kk * hw];
        gemm_trr(
            kk,
            self.out_ch,
            hw,
            ps.value(self.weight).data(),
            grad_y.data(),
            &mut gcols,
            0.0,
        );
        let mut gx = Tensor::zeros(&[c, h, w]);
        col2im(&gcols, c, h, w, self.kernel, &mut gx);
        gx
    }
}

/// Batch-independent per-channel normalization over the spatial extent,
/// with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl ChannelNorm {
    fn moments(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var)
    }

    pub fn forward(&self, ps: &ParameterStore, x: &Tensor) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hw = h * w;
        let gamma = ps.value(self.gamma).data();
        let beta = ps.value(self.beta).data();
        let mut y = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let xs = &x.data()[ch * hw..(ch + 1) * hw];
            let (mean, var) = Self::moments(xs);
            let inv = 1.0 / (var + self.eps).sqrt();
            let (g, b) = (gamma[ch], beta[ch]);
            for (yv, xv) in y.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().zip(xs) {
                *yv = g * (xv - mean) * inv + b;
            }
        }
        y
    }

    pub fn backward(
        &self,
        ps: &ParameterStore,
        x: &Tensor,
        grad_y: &Tensor,
        grads: &mut Gradients,
    ) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hw = h * w;
        let n = hw as f64;
        let gamma = ps.value(self.gamma).data();
        let mut gx = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let xs = &x.data()[ch * hw..(ch + 1) * hw];
            let gy = &grad_y.data()[ch * hw..(ch + 1) * hw];
            let (mean, var) = Self::moments(xs);
            let inv = 1.0 / (var + self.eps).sqrt();
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for (g, xv) in gy.iter().zip(xs) {
                sum_g += g;
                sum_gx += g * (xv - mean) * inv;
            }
            grads.tensor_mut(self.gamma).data_mut()[ch] += sum_gx;
            grads.tensor_mut(self.beta).data_mut()[ch] += sum_g;
            let gch = gamma[ch];
            let out = &mut gx.data_mut()[ch * hw..(ch + 1) * hw];
            for ((o, g), xv) in out.iter_mut().zip(gy).zip(xs) {
                let xhat = (xv - mean) * inv;
                *o = gch * inv * (*g - sum_g / n - xhat * sum_gx / n);
            }
        }
        gx
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LeakyRelu {
    pub slope: f64,
}

impl LeakyRelu {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        for v in y.data_mut() {
            if *v < 0.0 {
                *v *= self.slope;
            }
        }
        y
    }

    pub fn backward(&self, x: &Tensor, grad_y: &Tensor) -> Tensor {
        let mut gx = grad_y.clone();
        for (g, xv) in gx.data_mut().iter_mut().zip(x.data()) {
            if *xv < 0.0 {
                *g *= self.slope;
            }
        }
        gx
    }
}

/// Max pooling with window == stride; trailing rows/cols that do not fill a
/// window are dropped.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool {
    pub kh: usize,
    pub kw: usize,
}

impl MaxPool {
    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.kh, w / self.kw)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = self.out_shape(h, w);
        let mut y = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for di in 0..self.kh {
                        for dj in 0..self.kw {
                            let v = x.at3(ch, i * self.kh + di, j * self.kw + dj);
                            if v > m {
                                m = v;
                            }
                        }
                    }
                    *y.at3_mut(ch, i, j) = m;
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Tensor, grad_y: &Tensor) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = self.out_shape(h, w);
        let mut gx = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    // first max in scan order receives the gradient
                    let mut m = f64::NEG_INFINITY;
                    let mut arg = (0, 0);
                    for di in 0..self.kh {
                        for dj in 0..self.kw {
                            let v = x.at3(ch, i * self.kh + di, j * self.kw + dj);
                            if v > m {
                                m = v;
                                arg = (i * self.kh + di, j * self.kw + dj);
                            }
                        }
                    }
                    *gx.at3_mut(ch, arg.0, arg.1) += grad_y.at3(ch, i, j);
                }
            }
        }
        gx
    }
}

/// Adaptive average pooling to a fixed output extent; region bounds follow
/// the floor/ceil convention so the regions tile the input exactly.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveAvgPool {
    pub out_h: usize,
    pub out_w: usize,
}

impl AdaptiveAvgPool {
    fn bounds(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let lo = i * n_in / n_out;
        let hi = ((i + 1) * n_in).div_ceil(n_out);
        (lo, hi)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut y = Tensor::zeros(&[c, self.out_h, self.out_w]);
        for ch in 0..c {
            for i in 0..self.out_h {
                let (i0, i1) = Self::bounds(i, h, self.out_h);
                for j in 0..self.out_w {
                    let (j0, j1) = Self::bounds(j, w, self.out_w);
                    let mut s = 0.0;
                    for ii in i0..i1 {
                        for jj in j0..j1 {
                            s += x.at3(ch, ii, jj);
                        }
                    }
                    *y.at3_mut(ch, i, j) = s / ((i1 - i0) * (j1 - j0)) as f64;
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Tensor, grad_y: &Tensor) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut gx = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for i in 0..self.out_h {
                let (i0, i1) = Self::bounds(i, h, self.out_h);
                for j in 0..self.out_w {
                    let (j0, j1) = Self::bounds(j, w, self.out_w);
                    let share = grad_y.at3(ch, i, j) / ((i1 - i0) * (j1 - j0)) as f64;
                    for ii in i0..i1 {
                        for jj in j0..j1 {
                            *gx.at3_mut(ch, ii, jj) += share;
                        }
                    }
                }
            }
        }
        gx
    }
}

/// One stage of the backbone.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Norm(ChannelNorm),
    Act(LeakyRelu),
    Pool(MaxPool),
    AdaptPool(AdaptiveAvgPool),
}

impl Layer {
    pub fn forward(&self, ps: &ParameterStore, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv(l) => l.forward(ps, x),
            Layer::Norm(l) => l.forward(ps, x),
            Layer::Act(l) => l.forward(x),
            Layer::Pool(l) => l.forward(x),
            Layer::AdaptPool(l) => l.forward(x),
        }
    }

    pub fn backward(
        &self,
        ps: &ParameterStore,
        x: &Tensor,
        grad_y: &Tensor,
        grads: &mut Gradients,
    ) -> Tensor {
        match self {
            Layer::Conv(l) => l.backward(ps, x, grad_y, grads),
            Layer::Norm(l) => l.backward(ps, x, grad_y, grads),
            Layer::Act(l) => l.backward(x, grad_y),
            Layer::Pool(l) => l.backward(x, grad_y),
            Layer::AdaptPool(l) => l.backward(x, grad_y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::store::Initializer;

    #[test]
    fn conv_identity_kernel() {
        let mut ps = ParameterStore::new();
        // 1x1 kernel, single channel, weight 1, bias 0 -> identity
        let w = ps.register("w", Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]));
        let b = ps.register("b", Tensor::zeros(&[1]));
        let conv = Conv2d {
            weight: w,
            bias: Some(b),
            in_ch: 1,
            out_ch: 1,
            kernel: 1,
        };
        let x = Tensor::from_vec(&[1, 2, 3], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(conv.forward(&ps, &x).data(), x.data());
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut init = Initializer::new(5);
        let mut ps = ParameterStore::new();
        let (cin, cout, k, h, w) = (3, 2, 3, 5, 7);
        let wt = ps.register("w", init.uniform(&[cout, cin, k, k], cin * k * k));
        let bt = ps.register("b", init.uniform(&[cout], cin * k * k));
        let conv = Conv2d {
            weight: wt,
            bias: Some(bt),
            in_ch: cin,
            out_ch: cout,
            kernel: k,
        };
        let x = init.uniform(&[cin, h, w], 1);
        let y = conv.forward(&ps, &x);

        let wd = ps.value(wt).data();
        let bd = ps.value(bt).data();
        let p = (k / 2) as isize;
        for o in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut s = bd[o];
                    for c in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let si = i as isize + ki as isize - p;
                                let sj = j as isize + kj as isize - p;
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                s += wd[((o * cin + c) * k + ki) * k + kj]
                                    * x.at3(c, si as usize, sj as usize);
                            }
                        }
                    }
                    assert!((y.at3(o, i, j) - s).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn maxpool_and_adaptive_shapes() {
        let x = Tensor::zeros(&[2, 84, 646]);
        let p = MaxPool { kh: 2, kw: 2 };
        assert_eq!(p.forward(&x).shape(), &[2, 42, 323]);
        let a = AdaptiveAvgPool {
            out_h: 1,
            out_w: 11,
        };
        assert_eq!(a.forward(&x).shape(), &[2, 1, 11]);
        // regions tile the input: backward of ones sums to n_cells
        let mut gy = Tensor::zeros(&[2, 1, 11]);
        gy.fill(1.0);
        let gx = a.backward(&x, &gy);
        let total: f64 = gx.data().iter().sum();
        assert!((total - 22.0).abs() < 1e-9);
    }

    #[test]
    fn channel_norm_zero_mean_unit_var() {
        let mut ps = ParameterStore::new();
        let g = ps.register("g", Tensor::from_vec(&[1], vec![1.0]));
        let b = ps.register("b", Tensor::zeros(&[1]));
        let norm = ChannelNorm {
            gamma: g,
            beta: b,
            eps: 1e-5,
        };
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = norm.forward(&ps, &x);
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

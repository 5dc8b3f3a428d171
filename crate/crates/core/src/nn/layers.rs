//! Layers with explicit forward/backward passes over NCHW `f32` tensors.
//!
//! A layer caches what its backward pass needs only when `train` is set on
//! the forward call; `backward` must follow a training forward and
//! accumulates parameter gradients.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView4, ArrayViewMut2, Axis};
use rand_distr::{Distribution, Normal};

use super::Param;
use crate::rng::Rng;

pub type Tensor = Array4<f32>;

/// Upper bound on im2col buffer size per chunk, in elements.
const COLS_BUDGET: usize = 1 << 21;

fn kaiming(rng: &mut Rng, len: usize, fan_in: usize, gain: f32) -> Vec<f32> {
    let std = gain / (fan_in as f32).sqrt();
    let normal = Normal::new(0.0f32, std).expect("finite std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// Gain for leaky-ReLU networks with negative slope `a`.
pub fn leaky_gain(a: f32) -> f32 {
    (2.0 / (1.0 + a * a)).sqrt()
}

/// Square convolution with stride 1 and "same" zero padding (`k` odd).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// `[cout, cin * k * k]`
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, bias: bool, gain: f32, rng: &mut Rng) -> Self {
        assert!(k % 2 == 1, "odd kernel sizes only");
        let fan_in = cin * k * k;
        Self {
            cin,
            cout,
            k,
            weight: Param::new(vec![cout, fan_in], kaiming(rng, cout * fan_in, fan_in, gain)),
            bias: bias.then(|| Param::zeros(vec![cout])),
            input: None,
        }
    }

    fn weight_view(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.cout, self.cin * self.k * self.k), &self.weight.value)
            .expect("weight shape")
    }

    fn chunk_len(&self, hw: usize) -> usize {
        (COLS_BUDGET / (self.cin * self.k * self.k * hw).max(1)).max(1)
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let hw = h * w;
        let mut out = Tensor::zeros((n, self.cout, h, w));
        let wv = self.weight_view();
        let step = self.chunk_len(hw);
        for start in (0..n).step_by(step) {
            let end = (start + step).min(n);
            let cols = im2col(x.slice(s![start..end, .., .., ..]), self.k);
            let mut res = Array2::<f32>::zeros((self.cout, (end - start) * hw));
            general_mat_mul(1.0, &wv, &cols, 0.0, &mut res);
            scatter_rows(&res, &mut out, start, hw);
        }
        if let Some(b) = &self.bias {
            for (co, &bv) in b.value.iter().enumerate() {
                out.slice_mut(s![.., co, .., ..]).mapv_inplace(|v| v + bv);
            }
        }
        if train {
            self.input = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without training forward");
        let (n, _, h, w) = x.dim();
        let hw = h * w;
        let mut dx = Tensor::zeros(x.dim());
        let fan_in = self.cin * self.k * self.k;
        let wv = ArrayView2::from_shape((self.cout, fan_in), &self.weight.value)
            .expect("weight shape");
        let mut dw = ArrayViewMut2::from_shape((self.cout, fan_in), &mut self.weight.grad)
            .expect("weight grad shape");
        let step = (COLS_BUDGET / (fan_in * hw).max(1)).max(1);
        for start in (0..n).step_by(step) {
            let end = (start + step).min(n);
            let cols = im2col(x.slice(s![start..end, .., .., ..]), self.k);
            let g = gather_rows(grad.slice(s![start..end, .., .., ..]));
            general_mat_mul(1.0, &g, &cols.t(), 1.0, &mut dw);
            let mut dcols = Array2::<f32>::zeros((fan_in, (end - start) * hw));
            general_mat_mul(1.0, &wv.t(), &g, 0.0, &mut dcols);
            col2im(&dcols, dx.slice_mut(s![start..end, .., .., ..]), self.k);
        }
        if let Some(b) = &mut self.bias {
            for (co, gb) in b.grad.iter_mut().enumerate() {
                *gb += grad.slice(s![.., co, .., ..]).sum();
            }
        }
        dx
    }
}

/// `[n, c, h, w]` -> `[c * k * k, n * h * w]` with zero padding `k / 2`.
fn im2col(x: ArrayView4<'_, f32>, k: usize) -> Array2<f32> {
    let x = x.as_standard_layout();
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let pad = (k / 2) as isize;
    let src_all = x.as_slice().expect("standard layout");
    let mut cols = Array2::<f32>::zeros((c * k * k, n * hw));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().expect("contiguous row");
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                // Output column xo reads input column xo + dx.
                let lo = (-dx).max(0) as usize;
                let hi = (w as isize - dx.max(0)) as usize;
                for s_ in 0..n {
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = ((s_ * c + ci) * h + sy as usize) * w;
                        let base = s_ * hw + y * w;
                        dst[base + lo..base + hi].copy_from_slice(
                            &src_all[src_row + (lo as isize + dx) as usize
                                ..src_row + (hi as isize + dx) as usize],
                        );
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulating into `dx`.
fn col2im(cols: &Array2<f32>, mut dx: ndarray::ArrayViewMut4<'_, f32>, k: usize) {
    let (n, c, h, w) = dx.dim();
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = cols.row(row);
                let src = src.as_slice().expect("contiguous row");
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                let (lo, hi) = ((-dxo).max(0) as usize, (w as isize - dxo.max(0)) as usize);
                for s_ in 0..n {
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let base = s_ * hw + y * w;
                        let mut drow = dx.slice_mut(s![s_, ci, sy as usize, ..]);
                        for xo in lo..hi {
                            drow[(xo as isize + dxo) as usize] += src[base + xo];
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, h, w]` -> `[c, n * h * w]`.
fn gather_rows(x: ArrayView4<'_, f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let mut out = Array2::<f32>::zeros((c, n * hw));
    for s_ in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![s_, ci, .., ..]);
            let mut dst = out.slice_mut(s![ci, s_ * hw..(s_ + 1) * hw]);
            match plane.as_slice() {
                Some(src) => dst.as_slice_mut().expect("row").copy_from_slice(src),
                None => dst.iter_mut().zip(plane.iter()).for_each(|(d, v)| *d = *v),
            }
        }
    }
    out
}

/// Inverse of [`gather_rows`] writing samples `start..` of `out`.
fn scatter_rows(res: &Array2<f32>, out: &mut Tensor, start: usize, hw: usize) {
    let rows = res.nrows();
    let n = res.ncols() / hw;
    for s_ in 0..n {
        for r in 0..rows {
            let src = res.slice(s![r, s_ * hw..(s_ + 1) * hw]);
            let mut dst = out.slice_mut(s![start + s_, r, .., ..]);
            dst.as_slice_mut()
                .expect("contiguous plane")
                .copy_from_slice(src.as_slice().expect("row"));
        }
    }
}

/// 2x2 transposed convolution with stride 2; doubles the spatial size.
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    pub cin: usize,
    pub cout: usize,
    /// `[cin, cout * 4]`, inner order `(co, a, b)`.
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl ConvTranspose2x2 {
    pub fn new(cin: usize, cout: usize, gain: f32, rng: &mut Rng) -> Self {
        Self {
            cin,
            cout,
            weight: Param::new(vec![cin, cout * 4], kaiming(rng, cin * cout * 4, cin, gain)),
            bias: Param::zeros(vec![cout]),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.cin, "transposed conv input channels");
        let hw = h * w;
        let xs = gather_rows(x.view());
        let wv = ArrayView2::from_shape((self.cin, self.cout * 4), &self.weight.value)
            .expect("weight shape");
        let mut y = Array2::<f32>::zeros((self.cout * 4, n * hw));
        general_mat_mul(1.0, &wv.t(), &xs, 0.0, &mut y);
        let mut out = Tensor::zeros((n, self.cout, 2 * h, 2 * w));
        for s_ in 0..n {
            for co in 0..self.cout {
                let b = self.bias.value[co];
                let mut plane = out.slice_mut(s![s_, co, .., ..]);
                for a in 0..2 {
                    for bb in 0..2 {
                        let src = y.slice(s![co * 4 + a * 2 + bb, s_ * hw..(s_ + 1) * hw]);
                        for yy in 0..h {
                            for xx in 0..w {
                                plane[[2 * yy + a, 2 * xx + bb]] = src[yy * w + xx] + b;
                            }
                        }
                    }
                }
            }
        }
        if train {
            self.input = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("transposed conv backward without forward");
        let (n, _, h, w) = x.dim();
        let hw = h * w;
        let mut g = Array2::<f32>::zeros((self.cout * 4, n * hw));
        for s_ in 0..n {
            for co in 0..self.cout {
                let plane = grad.slice(s![s_, co, .., ..]);
                self.bias.grad[co] += plane.sum();
                for a in 0..2 {
                    for bb in 0..2 {
                        let mut dst = g.slice_mut(s![co * 4 + a * 2 + bb, s_ * hw..(s_ + 1) * hw]);
                        for yy in 0..h {
                            for xx in 0..w {
                                dst[yy * w + xx] = plane[[2 * yy + a, 2 * xx + bb]];
                            }
                        }
                    }
                }
            }
        }
        let xs = gather_rows(x.view());
        let mut dw = ArrayViewMut2::from_shape((self.cin, self.cout * 4), &mut self.weight.grad)
            .expect("weight grad shape");
        general_mat_mul(1.0, &xs, &g.t(), 1.0, &mut dw);
        let wv = ArrayView2::from_shape((self.cin, self.cout * 4), &self.weight.value)
            .expect("weight shape");
        let mut dxs = Array2::<f32>::zeros((self.cin, n * hw));
        general_mat_mul(1.0, &wv, &g, 0.0, &mut dxs);
        let mut dx = Tensor::zeros(x.dim());
        scatter_rows(&dxs, &mut dx, 0, hw);
        dx
    }
}

/// Per-sample, per-channel normalization without affine parameters.
#[derive(Debug, Clone, Default)]
pub struct InstanceNorm {
    pub eps: f32,
    cache: Option<(Tensor, Array2<f32>)>,
}

impl InstanceNorm {
    pub fn new() -> Self {
        Self {
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.dim();
        let m = (h * w) as f32;
        let mut out = x.clone();
        let mut inv_std = Array2::<f32>::zeros((n, c));
        for s_ in 0..n {
            for ci in 0..c {
                let mut plane = out.slice_mut(s![s_, ci, .., ..]);
                let mean = plane.sum() / m;
                let var = plane.fold(0.0f32, |acc, &v| acc + (v - mean) * (v - mean)) / m;
                let inv = 1.0 / (var + self.eps).sqrt();
                plane.mapv_inplace(|v| (v - mean) * inv);
                inv_std[[s_, ci]] = inv;
            }
        }
        if train {
            self.cache = Some((out.clone(), inv_std));
        }
        out
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("norm backward without forward");
        let (n, c, h, w) = grad.dim();
        let m = (h * w) as f32;
        let mut dx = grad.clone();
        for s_ in 0..n {
            for ci in 0..c {
                let xh = xhat.slice(s![s_, ci, .., ..]);
                let mut g = dx.slice_mut(s![s_, ci, .., ..]);
                let g_mean = g.sum() / m;
                let gx_mean = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f32>() / m;
                let inv = inv_std[[s_, ci]];
                g.zip_mut_with(&xh, |gv, &xv| *gv = inv * (*gv - g_mean - xv * gx_mean));
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct LeakyRelu {
    pub slope: f32,
    input: Option<Tensor>,
}

impl LeakyRelu {
    pub fn new(slope: f32) -> Self {
        Self { slope, input: None }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let a = self.slope;
        let out = x.mapv(|v| if v > 0.0 { v } else { a * v });
        if train {
            self.input = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("activation backward without forward");
        let a = self.slope;
        let mut dx = grad.clone();
        dx.zip_mut_with(&x, |g, &v| {
            if v <= 0.0 {
                *g *= a
            }
        });
        dx
    }
}

/// 2x2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    cache: Option<((usize, usize, usize, usize), Vec<u8>)>,
}

impl MaxPool2 {
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros((n, c, oh, ow));
        let mut arg = Vec::with_capacity(if train { n * c * oh * ow } else { 0 });
        for s_ in 0..n {
            for ci in 0..c {
                let plane = x.slice(s![s_, ci, .., ..]);
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = plane[[2 * y, 2 * xx]];
                        let mut bi = 0u8;
                        for (i, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                            let v = plane[[2 * y + dy, 2 * xx + dx]];
                            if v > best {
                                best = v;
                                bi = i as u8 + 1;
                            }
                        }
                        out[[s_, ci, y, xx]] = best;
                        if train {
                            arg.push(bi);
                        }
                    }
                }
            }
        }
        if train {
            self.cache = Some(((n, c, h, w), arg));
        }
        out
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (dims, arg) = self.cache.take().expect("pool backward without forward");
        let mut dx = Tensor::zeros(dims);
        let (n, c, oh, ow) = grad.dim();
        let mut it = arg.into_iter();
        for s_ in 0..n {
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let (dy, dxo) = match it.next().expect("argmax") {
                            0 => (0, 0),
                            1 => (0, 1),
                            2 => (1, 0),
                            _ => (1, 1),
                        };
                        dx[[s_, ci, 2 * y + dy, 2 * xx + dxo]] += grad[[s_, ci, y, xx]];
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer on `[n, in]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub fin: usize,
    pub fout: usize,
    /// `[fout, fin]`
    pub weight: Param,
    pub bias: Param,
    input: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(fin: usize, fout: usize, rng: &mut Rng) -> Self {
        Self {
            fin,
            fout,
            weight: Param::new(vec![fout, fin], kaiming(rng, fout * fin, fin, 1.0)),
            bias: Param::zeros(vec![fout]),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        let wv = ArrayView2::from_shape((self.fout, self.fin), &self.weight.value).expect("shape");
        let mut out = x.dot(&wv.t());
        let b = Array1::from(self.bias.value.clone());
        out += &b;
        if train {
            self.input = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, grad: &Array2<f32>) -> Array2<f32> {
        let x = self.input.take().expect("linear backward without forward");
        let mut dw = ArrayViewMut2::from_shape((self.fout, self.fin), &mut self.weight.grad)
            .expect("shape");
        general_mat_mul(1.0, &grad.t(), &x, 1.0, &mut dw);
        for (gb, col) in self.bias.grad.iter_mut().zip(grad.axis_iter(Axis(1))) {
            *gb += col.sum();
        }
        let wv = ArrayView2::from_shape((self.fout, self.fin), &self.weight.value).expect("shape");
        grad.dot(&wv)
    }
}

/// Global average pool: `[n, c, h, w]` -> `[n, c]`.
pub fn global_avg_pool(x: &Tensor) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let m = (h * w) as f32;
    Array2::from_shape_fn((n, c), |(s_, ci)| x.slice(s![s_, ci, .., ..]).sum() / m)
}

pub fn global_avg_pool_backward(grad: &Array2<f32>, dims: (usize, usize, usize, usize)) -> Tensor {
    let (_, _, h, w) = dims;
    let m = (h * w) as f32;
    Tensor::from_shape_fn(dims, |(s_, ci, _, _)| grad[[s_, ci]] / m)
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial dims")
}

pub fn split_channels(g: &Tensor, first: usize) -> (Tensor, Tensor) {
    (
        g.slice(s![.., ..first, .., ..]).to_owned(),
        g.slice(s![.., first.., .., ..]).to_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Direct 3x3 convolution used as an oracle for the im2col path.
    fn naive_conv(x: &Tensor, wt: &[f32], cout: usize, k: usize) -> Tensor {
        let (n, c, h, w) = x.dim();
        let p = (k / 2) as isize;
        Tensor::from_shape_fn((n, cout, h, w), |(s_, co, y, xx)| {
            let mut acc = 0.0f32;
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - p;
                        let sx = xx as isize + kx as isize - p;
                        if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                            acc += wt[((co * c + ci) * k + ky) * k + kx]
                                * x[[s_, ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn rand_tensor(dims: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        Tensor::from_shape_fn(dims, |_| normal.sample(&mut r))
    }

    #[test]
    fn conv_matches_direct_loop() {
        for k in [1, 3] {
            let mut r = rng::seeded(1);
            let mut conv = Conv2d::new(3, 4, k, false, 1.0, &mut r);
            let x = rand_tensor((2, 3, 5, 7), 2);
            let got = conv.forward(&x, false);
            let want = naive_conv(&x, &conv.weight.value, 4, k);
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    /// Scalar loss sum(out * probe) so its gradient wrt out is `probe`.
    fn check_input_grad(
        mut f: impl FnMut(&Tensor, bool) -> Tensor,
        mut b: impl FnMut(&Tensor) -> Tensor,
        x: &Tensor,
        tol: f32,
    ) {
        let out = f(x, true);
        let probe = rand_tensor(out.dim(), 99);
        let dx = b(&probe);
        let eps = 1e-2f32;
        for idx in [0usize, 7, 19, x.len() / 2, x.len() - 1] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let lp: f32 = (f(&xp, false) * &probe).sum();
            let lm: f32 = (f(&xm, false) * &probe).sum();
            let fd = (lp - lm) / (2.0 * eps);
            let an = dx.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs()),
                "index {idx}: fd {fd} analytic {an}"
            );
        }
    }

    #[test]
    fn conv_input_gradient() {
        let mut r = rng::seeded(3);
        let conv = std::cell::RefCell::new(Conv2d::new(2, 3, 3, true, 1.0, &mut r));
        let x = rand_tensor((2, 2, 6, 5), 4);
        check_input_grad(
            |x, t| conv.borrow_mut().forward(x, t),
            |g| conv.borrow_mut().backward(g),
            &x,
            2e-2,
        );
    }

    #[test]
    fn conv_weight_gradient() {
        let mut r = rng::seeded(5);
        let mut conv = Conv2d::new(2, 2, 3, false, 1.0, &mut r);
        let x = rand_tensor((2, 2, 4, 4), 6);
        let out = conv.forward(&x, true);
        let probe = rand_tensor(out.dim(), 7);
        conv.backward(&probe);
        let an = conv.weight.grad.clone();
        let eps = 1e-2f32;
        for idx in 0..conv.weight.value.len() {
            let orig = conv.weight.value[idx];
            conv.weight.value[idx] = orig + eps;
            let lp = (conv.forward(&x, false) * &probe).sum();
            conv.weight.value[idx] = orig - eps;
            let lm = (conv.forward(&x, false) * &probe).sum();
            conv.weight.value[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - an[idx]).abs() <= 2e-2 * (1.0 + fd.abs()), "{fd} vs {}", an[idx]);
        }
    }

    #[test]
    fn transposed_conv_gradient_and_shape() {
        let mut r = rng::seeded(8);
        let up = std::cell::RefCell::new(ConvTranspose2x2::new(3, 2, 1.0, &mut r));
        let x = rand_tensor((2, 3, 3, 4), 9);
        assert_eq!(up.borrow_mut().forward(&x, false).dim(), (2, 2, 6, 8));
        check_input_grad(
            |x, t| up.borrow_mut().forward(x, t),
            |g| up.borrow_mut().backward(g),
            &x,
            2e-2,
        );
    }

    #[test]
    fn norm_and_activation_gradients() {
        let norm = std::cell::RefCell::new(InstanceNorm::new());
        let x = rand_tensor((2, 3, 4, 4), 10);
        check_input_grad(
            |x, t| norm.borrow_mut().forward(x, t),
            |g| norm.borrow_mut().backward(g),
            &x,
            3e-2,
        );
        let act = std::cell::RefCell::new(LeakyRelu::new(0.2));
        check_input_grad(
            |x, t| act.borrow_mut().forward(x, t),
            |g| act.borrow_mut().backward(g),
            &x,
            2e-2,
        );
    }

    #[test]
    fn instance_norm_zero_input_is_zero() {
        let mut norm = InstanceNorm::new();
        let out = norm.forward(&Tensor::zeros((1, 2, 4, 4)), false);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut pool = MaxPool2::default();
        let x = Tensor::from_shape_vec((1, 1, 2, 2), vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let out = pool.forward(&x, true);
        assert_eq!(out[[0, 0, 0, 0]], 5.0);
        let dx = pool.backward(&Tensor::from_elem((1, 1, 1, 1), 2.0));
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_gradient() {
        let mut r = rng::seeded(11);
        let mut lin = Linear::new(3, 2, &mut r);
        let x = Array2::from_shape_vec((2, 3), vec![0.1, -0.4, 0.3, 1.0, 0.2, -0.7]).unwrap();
        lin.forward(&x, true);
        let g = Array2::from_shape_vec((2, 2), vec![1.0, 0.5, -1.0, 2.0]).unwrap();
        let dx = lin.backward(&g);
        let w = ArrayView2::from_shape((2, 3), &lin.weight.value).unwrap().to_owned();
        assert_eq!(dx, g.dot(&w));
        assert_eq!(lin.bias.grad, vec![0.0, 2.5]);
    }

    #[test]
    fn gap_of_constant_is_constant() {
        let x = Tensor::from_elem((2, 3, 4, 4), 0.75);
        assert!(global_avg_pool(&x).iter().all(|&v| v == 0.75));
    }
}

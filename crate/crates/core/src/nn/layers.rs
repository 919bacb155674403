use super::param::{Init, Layer, Mode, Module, Param};
use super::tensor::{gemm, Real, Tensor};

const INIT_STD: f64 = 0.02;

fn take<C>(cache: &mut Option<C>, layer: &str) -> C {
    cache
        .take()
        .unwrap_or_else(|| panic!("{layer}: backward without a training-mode forward"))
}

fn add_column_sums<T: Real>(dst: &mut [T], m: &[T]) {
    let n = dst.len();
    for row in m.chunks_exact(n) {
        for (d, &v) in dst.iter_mut().zip(row) {
            *d += v;
        }
    }
}

/// Affine map over the last dimension. Weight is stored `(in, out)`.
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_dim: usize,
    out_dim: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, bias: bool, init: &mut Init) -> Self {
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                &[in_dim, out_dim],
                init.trunc_normal(in_dim * out_dim, INIT_STD),
            ),
            bias: bias.then(|| Param::filled(format!("{name}.bias"), &[out_dim], 0.0)),
            in_dim,
            out_dim,
            cache: None,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

impl<T: Real> Layer<T> for Linear<T> {
    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        assert_eq!(x.last_dim(), self.in_dim, "linear input width");
        let m = x.rows();
        let mut y = vec![T::zero(); m * self.out_dim];
        if let Some(b) = &self.bias {
            for row in y.chunks_exact_mut(self.out_dim) {
                row.copy_from_slice(&b.value);
            }
        }
        let beta = if self.bias.is_some() { T::one() } else { T::zero() };
        gemm(false, false, m, self.out_dim, self.in_dim, T::one(), x.data(), &self.weight.value, beta, &mut y);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = self.out_dim;
        if mode == Mode::Train {
            self.cache = Some(x);
        }
        Tensor::from_vec(&shape, y)
    }

    fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let x = take(&mut self.cache, "linear");
        let m = x.rows();
        gemm(true, false, self.in_dim, self.out_dim, m, T::one(), x.data(), dy.data(), T::one(), self.weight.grad_mut());
        if let Some(b) = &mut self.bias {
            add_column_sums(b.grad_mut(), dy.data());
        }
        let mut dx = vec![T::zero(); m * self.in_dim];
        gemm(false, true, m, self.in_dim, self.out_dim, T::one(), dy.data(), &self.weight.value, T::zero(), &mut dx);
        Tensor::from_vec(x.shape(), dx)
    }
}

struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: [usize; 4],
}

/// 2-D convolution on NHWC tensors via im2col. Weight is stored
/// `(k·k·in, out)` with rows ordered `(ky, kx, in)`.
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
    in_ch: usize,
    out_ch: usize,
    cache: Option<ConvCache<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: &mut Init,
    ) -> Self {
        let fan = kernel * kernel * in_ch;
        Conv2d {
            weight: Param::new(format!("{name}.weight"), &[fan, out_ch], init.trunc_normal(fan * out_ch, INIT_STD)),
            bias: Param::filled(format!("{name}.bias"), &[out_ch], 0.0),
            kernel,
            stride,
            pad,
            in_ch,
            out_ch,
            cache: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Visits `(column offset, input offset)` pairs of channel runs to copy for each output pixel.
    fn for_each_patch(&self, shape: [usize; 4], mut f: impl FnMut(usize, usize)) {
        let [n, h, w, c] = shape;
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let kk = k * k * c;
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * kk;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((b * h + iy as usize) * w + ix as usize) * c;
                            f(row + (ky * k + kx) * c, src);
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let (n, h, w, c) = x.dims4();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (ho, wo) = self.output_size(h, w);
        let shape = [n, h, w, c];
        let cols = if self.is_pointwise() {
            x.into_data()
        } else {
            let kk = self.kernel * self.kernel * c;
            let mut cols = vec![T::zero(); n * ho * wo * kk];
            let src = x.data();
            self.for_each_patch(shape, |dst, s| cols[dst..dst + c].copy_from_slice(&src[s..s + c]));
            cols
        };
        let m = n * ho * wo;
        let mut y = vec![T::zero(); m * self.out_ch];
        for row in y.chunks_exact_mut(self.out_ch) {
            row.copy_from_slice(&self.bias.value);
        }
        let fan = self.kernel * self.kernel * self.in_ch;
        gemm(false, false, m, self.out_ch, fan, T::one(), &cols, &self.weight.value, T::one(), &mut y);
        if mode == Mode::Train {
            self.cache = Some(ConvCache { cols, in_shape: shape });
        }
        Tensor::from_vec(&[n, ho, wo, self.out_ch], y)
    }

    fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let ConvCache { cols, in_shape } = take(&mut self.cache, "conv2d");
        let fan = self.kernel * self.kernel * self.in_ch;
        let m = dy.rows();
        gemm(true, false, fan, self.out_ch, m, T::one(), &cols, dy.data(), T::one(), self.weight.grad_mut());
        add_column_sums(self.bias.grad_mut(), dy.data());
        let mut dcols = vec![T::zero(); m * fan];
        gemm(false, true, m, fan, self.out_ch, T::one(), dy.data(), &self.weight.value, T::zero(), &mut dcols);
        if self.is_pointwise() {
            return Tensor::from_vec(&in_shape, dcols);
        }
        let c = self.in_ch;
        let mut dx = vec![T::zero(); in_shape.iter().product()];
        self.for_each_patch(in_shape, |col, s| {
            for (d, &v) in dx[s..s + c].iter_mut().zip(&dcols[col..col + c]) {
                *d += v;
            }
        });
        Tensor::from_vec(&in_shape, dx)
    }
}

/// Depthwise `k×k` convolution, stride 1, zero padding `k/2`. Weight `(k, k, channels)`.
pub struct DepthwiseConv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    kernel: usize,
    channels: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Real> DepthwiseConv2d<T> {
    pub fn new(name: &str, channels: usize, kernel: usize, init: &mut Init) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        DepthwiseConv2d {
            weight: Param::new(
                format!("{name}.weight"),
                &[kernel, kernel, channels],
                init.trunc_normal(kernel * kernel * channels, INIT_STD),
            ),
            bias: Param::filled(format!("{name}.bias"), &[channels], 0.0),
            kernel,
            channels,
            cache: None,
        }
    }

    /// Calls `f(out_offset, in_offset, weight_offset)` for every valid tap.
    fn for_each_tap(&self, shape: (usize, usize, usize, usize), mut f: impl FnMut(usize, usize, usize)) {
        let (n, h, w, c) = shape;
        let k = self.kernel;
        let pad = (k / 2) as isize;
        for b in 0..n {
            for oy in 0..h {
                for ox in 0..w {
                    let out = ((b * h + oy) * w + ox) * c;
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let inp = ((b * h + iy as usize) * w + ix as usize) * c;
                            f(out, inp, (ky * k + kx) * c);
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Module<T> for DepthwiseConv2d<T> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<T: Real> Layer<T> for DepthwiseConv2d<T> {
    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let dims = x.dims4();
        let c = self.channels;
        assert_eq!(dims.3, c, "depthwise channels");
        let mut y = vec![T::zero(); x.numel()];
        for px in y.chunks_exact_mut(c) {
            px.copy_from_slice(&self.bias.value);
        }
        let (xs, ws) = (x.data(), &self.weight.value);
        self.for_each_tap(dims, |o, i, k| {
            for ((yv, &xv), &wv) in y[o..o + c].iter_mut().zip(&xs[i..i + c]).zip(&ws[k..k + c]) {
                *yv += xv * wv;
            }
        });
        let shape = x.shape().to_vec();
        if mode == Mode::Train {
            self.cache = Some(x);
        }
        Tensor::from_vec(&shape, y)
    }

    fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let x = take(&mut self.cache, "depthwise conv");
        let dims = x.dims4();
        let c = self.channels;
        add_column_sums(self.bias.grad_mut(), dy.data());
        let mut dx = vec![T::zero(); x.numel()];
        let mut dw = vec![T::zero(); self.weight.len()];
        let (xs, ws, g) = (x.data(), &self.weight.value, dy.data());
        self.for_each_tap(dims, |o, i, k| {
            let gy = &g[o..o + c];
            for ((d, &gv), &wv) in dx[i..i + c].iter_mut().zip(gy).zip(&ws[k..k + c]) {
                *d += gv * wv;
            }
            for ((d, &gv), &xv) in dw[k..k + c].iter_mut().zip(gy).zip(&xs[i..i + c]) {
                *d += gv * xv;
            }
        });
        for (a, b) in self.weight.grad_mut().iter_mut().zip(dw) {
            *a += b;
        }
        Tensor::from_vec(x.shape(), dx)
    }
}

struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    shape: Vec<usize>,
}

/// Layer normalization over the last dimension.
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    eps: f64,
    cache: Option<NormCache<T>>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(name: &str, dim: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: Param::filled(format!("{name}.weight"), &[dim], 1.0),
            beta: Param::filled(format!("{name}.bias"), &[dim], 0.0),
            eps,
            cache: None,
        }
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

impl<T: Real> Layer<T> for LayerNorm<T> {
    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let c = x.last_dim();
        assert_eq!(c, self.gamma.len(), "layer norm width");
        let inv_c = T::cast(1.0 / c as f64);
        let eps = T::cast(self.eps);
        let mut y = vec![T::zero(); x.numel()];
        let mut xhat = if mode == Mode::Train { vec![T::zero(); x.numel()] } else { Vec::new() };
        let mut rstds = Vec::with_capacity(x.rows());
        for (r, (xr, yr)) in x.data().chunks_exact(c).zip(y.chunks_exact_mut(c)).enumerate() {
            let mean = xr.iter().copied().sum::<T>() * inv_c;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rstd = T::one() / (var + eps).sqrt();
            for (j, (yv, &xv)) in yr.iter_mut().zip(xr).enumerate() {
                let h = (xv - mean) * rstd;
                if mode == Mode::Train {
                    xhat[r * c + j] = h;
                }
                *yv = h * self.gamma.value[j] + self.beta.value[j];
            }
            rstds.push(rstd);
        }
        if mode == Mode::Train {
            self.cache = Some(NormCache { xhat, rstd: rstds, shape: x.shape().to_vec() });
        }
        Tensor::from_vec(x.shape(), y)
    }

    fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let NormCache { xhat, rstd, shape } = take(&mut self.cache, "layer norm");
        let c = self.gamma.len();
        let inv_c = T::cast(1.0 / c as f64);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); dy.numel()];
        let mut dxhat = vec![T::zero(); c];
        for (r, (gr, hr)) in dy.data().chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
            let (mut s1, mut s2) = (T::zero(), T::zero());
            for j in 0..c {
                dgamma[j] += gr[j] * hr[j];
                dbeta[j] += gr[j];
                dxhat[j] = gr[j] * self.gamma.value[j];
                s1 += dxhat[j];
                s2 += dxhat[j] * hr[j];
            }
            let (m1, m2) = (s1 * inv_c, s2 * inv_c);
            for j in 0..c {
                dx[r * c + j] = rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
            }
        }
        for (a, b) in self.gamma.grad_mut().iter_mut().zip(dgamma) {
            *a += b;
        }
        for (a, b) in self.beta.grad_mut().iter_mut().zip(dbeta) {
            *a += b;
        }
        Tensor::from_vec(&shape, dx)
    }
}

/// Batch normalization over the last (channel) dimension; statistics are
/// taken over every other dimension. Works for `(N, C)` and NHWC tensors.
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    eps: f64,
    momentum: f64,
    cache: Option<NormCache<T>>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::filled(format!("{name}.weight"), &[channels], 1.0),
            beta: Param::filled(format!("{name}.bias"), &[channels], 0.0),
            running_mean: Param::buffer(format!("{name}.running_mean"), &[channels], vec![T::zero(); channels]),
            running_var: Param::buffer(format!("{name}.running_var"), &[channels], vec![T::one(); channels]),
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

impl<T: Real> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let c = x.last_dim();
        assert_eq!(c, self.gamma.len(), "batch norm channels");
        let m = x.rows();
        let eps = T::cast(self.eps);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                add_column_sums(&mut mean, x.data());
                let inv_m = T::cast(1.0 / m as f64);
                mean.iter_mut().for_each(|v| *v *= inv_m);
                let mut var = vec![T::zero(); c];
                for row in x.data().chunks_exact(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v *= inv_m);
                let mom = T::cast(self.momentum);
                let unbias = if m > 1 { T::cast(m as f64 / (m - 1) as f64) } else { T::one() };
                for j in 0..c {
                    let rm = &mut self.running_mean.value[j];
                    *rm = (T::one() - mom) * *rm + mom * mean[j];
                    let rv = &mut self.running_var.value[j];
                    *rv = (T::one() - mom) * *rv + mom * var[j] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.value.clone(), self.running_var.value.clone()),
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut y = vec![T::zero(); x.numel()];
        let mut xhat = if mode == Mode::Train { vec![T::zero(); x.numel()] } else { Vec::new() };
        for (r, (xr, yr)) in x.data().chunks_exact(c).zip(y.chunks_exact_mut(c)).enumerate() {
            for j in 0..c {
                let h = (xr[j] - mean[j]) * rstd[j];
                if mode == Mode::Train {
                    xhat[r * c + j] = h;
                }
                yr[j] = h * self.gamma.value[j] + self.beta.value[j];
            }
        }
        if mode == Mode::Train {
            self.cache = Some(NormCache { xhat, rstd, shape: x.shape().to_vec() });
        }
        Tensor::from_vec(x.shape(), y)
    }

    fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let NormCache { xhat, rstd, shape } = take(&mut self.cache, "batch norm");
        let c = self.gamma.len();
        let m = dy.rows();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (gr, hr) in dy.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
            for j in 0..c {
                sum_dy[j] += gr[j];
                sum_dy_xhat[j] += gr[j] * hr[j];
            }
        }
        let inv_m = T::cast(1.0 / m as f64);
        let mut dx = vec![T::zero(); dy.numel()];
        for (r, (gr, hr)) in dy.data().chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
            for j in 0..c {
                dx[r * c + j] = self.gamma.value[j]
                    * rstd[j]
                    * (gr[j] - sum_dy[j] * inv_m - hr[j] * sum_dy_xhat[j] * inv_m);
            }
        }
        for (a, b) in self.gamma.grad_mut().iter_mut().zip(sum_dy_xhat) {
            *a += b;
        }
        for (a, b) in self.beta.grad_mut().iter_mut().zip(sum_dy) {
            *a += b;
        }
        Tensor::from_vec(&shape, dx)
    }
}

/// GELU, `x·Φ(x)`.
#[derive(Default)]
pub struct Gelu<T> {
    grad: Option<Vec<T>>,
}

impl<T: Real> Gelu<T> {
    pub fn new() -> Self {
        Gelu { grad: None }
    }
}

impl<T: Real> Module<T> for Gelu<T> {
    fn visit(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}
}

impl<T: Real> Layer<T> for Gelu<T> {
    fn forward(&mut self, mut x: Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Train {
            let grad = x
                .data_mut()
                .iter_mut()
                .map(|v| {
                    let (y, d) = v.gelu_with_grad();
                    *v = y;
                    d
                })
                .collect();
            self.grad = Some(grad);
        } else {
            x.data_mut().iter_mut().for_each(|v| *v = v.gelu_with_grad().0);
        }
        x
    }

    fn backward(&mut self, mut dy: Tensor<T>) -> Tensor<T> {
        let grad = take(&mut self.grad, "gelu");
        for (g, d) in dy.data_mut().iter_mut().zip(grad) {
            *g *= d;
        }
        dy
    }
}

#[derive(Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { mask: None }
    }
}

impl<T: Real> Module<T> for Relu {
    fn visit(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}
}

impl<T: Real> Layer<T> for Relu {
    fn forward(&mut self, mut x: Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Train {
            self.mask = Some(x.data().iter().map(|&v| v > T::zero()).collect());
        }
        x.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        x
    }

    fn backward(&mut self, mut dy: Tensor<T>) -> Tensor<T> {
        let mask = take(&mut self.mask, "relu");
        for (g, keep) in dy.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = T::zero();
            }
        }
        dy
    }
}

/// Per-channel learnable scale, initialized to a small constant.
pub struct LayerScale<T> {
    pub gamma: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> LayerScale<T> {
    pub fn new(name: &str, channels: usize, init_value: f64) -> Self {
        LayerScale {
            gamma: Param::filled(name, &[channels], init_value),
            cache: None,
        }
    }
}

impl<T: Real> Module<T> for LayerScale<T> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
    }
}

impl<T: Real> Layer<T> for LayerScale<T> {
    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let c = self.gamma.len();
        let mut y = x.clone();
        for row in y.data_mut().chunks_exact_mut(c) {
            for (v, &g) in row.iter_mut().zip(&self.gamma.value) {
                *v *= g;
            }
        }
        if mode == Mode::Train {
            self.cache = Some(x);
        }
        y
    }

    fn backward(&mut self, mut dy: Tensor<T>) -> Tensor<T> {
        let x = take(&mut self.cache, "layer scale");
        let c = self.gamma.len();
        let dg = self.gamma.grad_mut();
        for (gr, xr) in dy.data().chunks_exact(c).zip(x.data().chunks_exact(c)) {
            for j in 0..c {
                dg[j] += gr[j] * xr[j];
            }
        }
        for row in dy.data_mut().chunks_exact_mut(c) {
            for (v, &g) in row.iter_mut().zip(&self.gamma.value) {
                *v *= g;
            }
        }
        dy
    }
}

/// Non-overlapping max pooling with kernel = stride = `factor`.
pub struct MaxPool<T> {
    factor: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> MaxPool<T> {
    pub fn new(factor: usize) -> Self {
        assert!(factor >= 1);
        MaxPool { factor, cache: None, _marker: std::marker::PhantomData }
    }
}

impl<T: Real> Module<T> for MaxPool<T> {
    fn visit(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}
}

impl<T: Real> Layer<T> for MaxPool<T> {
    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let f = self.factor;
        if f == 1 {
            if mode == Mode::Train {
                self.cache = Some((Vec::new(), x.shape().to_vec()));
            }
            return x;
        }
        let (n, h, w, c) = x.dims4();
        assert!(h % f == 0 && w % f == 0, "max pool: {h}x{w} not divisible by {f}");
        let (ho, wo) = (h / f, w / f);
        let xs = x.data();
        let mut y = vec![T::neg_infinity(); n * ho * wo * c];
        let mut arg = vec![0usize; y.len()];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = ((b * ho + oy) * wo + ox) * c;
                    for dy in 0..f {
                        for dx in 0..f {
                            let i = ((b * h + oy * f + dy) * w + ox * f + dx) * c;
                            for j in 0..c {
                                if xs[i + j] > y[o + j] {
                                    y[o + j] = xs[i + j];
                                    arg[o + j] = i + j;
                                }
                            }
                        }
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.cache = Some((arg, x.shape().to_vec()));
        }
        Tensor::from_vec(&[n, ho, wo, c], y)
    }

    fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let (arg, shape) = take(&mut self.cache, "max pool");
        if self.factor == 1 {
            return dy;
        }
        let mut dx = vec![T::zero(); shape.iter().product()];
        for (&i, &g) in arg.iter().zip(dy.data()) {
            dx[i] += g;
        }
        Tensor::from_vec(&shape, dx)
    }
}

/// `(N, H, W, C) -> (N, C)` spatial mean.
#[derive(Default)]
pub struct GlobalAvgPool {
    shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { shape: None }
    }
}

impl<T: Real> Module<T> for GlobalAvgPool {
    fn visit(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}
}

impl<T: Real> Layer<T> for GlobalAvgPool {
    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let (n, h, w, c) = x.dims4();
        let inv = T::cast(1.0 / (h * w) as f64);
        let mut y = vec![T::zero(); n * c];
        for (b, sample) in x.data().chunks_exact(h * w * c).enumerate() {
            add_column_sums(&mut y[b * c..(b + 1) * c], sample);
        }
        y.iter_mut().for_each(|v| *v *= inv);
        if mode == Mode::Train {
            self.shape = Some(x.shape().to_vec());
        }
        Tensor::from_vec(&[n, c], y)
    }

    fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let shape = take(&mut self.shape, "global average pool");
        let (h, w, c) = (shape[1], shape[2], shape[3]);
        let inv = T::cast(1.0 / (h * w) as f64);
        let mut dx = vec![T::zero(); shape.iter().product()];
        for (b, sample) in dx.chunks_exact_mut(h * w * c).enumerate() {
            let g = &dy.data()[b * c..(b + 1) * c];
            for px in sample.chunks_exact_mut(c) {
                for (d, &v) in px.iter_mut().zip(g) {
                    *d = v * inv;
                }
            }
        }
        Tensor::from_vec(&shape, dx)
    }
}

/// Space-to-depth by 2: `(N, H, W, C) -> (N, H/2, W/2, 4C)` with channel
/// groups ordered `(0,0), (1,0), (0,1), (1,1)` as `(dy, dx)` offsets.
#[derive(Default)]
pub struct PatchGather {
    shape: Option<[usize; 4]>,
}

impl PatchGather {
    pub fn new() -> Self {
        PatchGather { shape: None }
    }

    const OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

    fn for_each(shape: [usize; 4], mut f: impl FnMut(usize, usize)) {
        let [n, h, w, c] = shape;
        let (ho, wo) = (h / 2, w / 2);
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for (g, (dy, dx)) in Self::OFFSETS.iter().enumerate() {
                        let src = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                        let dst = ((b * ho + oy) * wo + ox) * 4 * c + g * c;
                        f(dst, src);
                    }
                }
            }
        }
    }
}

impl<T: Real> Module<T> for PatchGather {
    fn visit(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}
}

impl<T: Real> Layer<T> for PatchGather {
    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let (n, h, w, c) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "patch merging needs even size, got {h}x{w}");
        let mut y = vec![T::zero(); x.numel()];
        let xs = x.data();
        Self::for_each([n, h, w, c], |d, s| y[d..d + c].copy_from_slice(&xs[s..s + c]));
        if mode == Mode::Train {
            self.shape = Some([n, h, w, c]);
        }
        Tensor::from_vec(&[n, h / 2, w / 2, 4 * c], y)
    }

    fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let shape = take(&mut self.shape, "patch gather");
        let c = shape[3];
        let mut dx = vec![T::zero(); dy.numel()];
        let g = dy.data();
        Self::for_each(shape, |d, s| dx[s..s + c].copy_from_slice(&g[d..d + c]));
        Tensor::from_vec(&shape, dx)
    }
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential<T> {
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Real> Sequential<T> {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Layer<T> + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn with(mut self, layer: impl Layer<T> + 'static) -> Self {
        self.push(layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Real> Module<T> for Sequential<T> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in &mut self.layers {
            l.visit(f);
        }
    }
}

impl<T: Real> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        self.layers.iter_mut().fold(x, |x, l| l.forward(x, mode))
    }

    fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        self.layers.iter_mut().rev().fold(dy, |g, l| l.backward(g))
    }
}

/// `y = x + f(x)`.
pub struct Residual<T> {
    inner: Box<dyn Layer<T>>,
}

impl<T: Real> Residual<T> {
    pub fn new(inner: impl Layer<T> + 'static) -> Self {
        Residual { inner: Box::new(inner) }
    }
}

impl<T: Real> Module<T> for Residual<T> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.inner.visit(f);
    }
}

impl<T: Real> Layer<T> for Residual<T> {
    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut y = self.inner.forward(x.clone(), mode);
        y.add_assign(&x);
        y
    }

    fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let mut dx = self.inner.backward(dy.clone());
        dx.add_assign(&dy);
        dx
    }
}

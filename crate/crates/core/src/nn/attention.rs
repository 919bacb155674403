use super::layers::Linear;
use super::param::{Init, Layer, Mode, Module, Param};
use super::tensor::{gemm_strided, Mat, Real, Tensor};

const MASK_VALUE: f64 = -100.0;

struct AttnCache<T> {
    qkv: Vec<T>,
    batch: usize,
}

/// Multi-head self-attention inside non-overlapping windows of an NHWC
/// feature map, with a learned relative position bias and optional cyclic
/// shift. Tokens in the same window but from different pre-shift regions
/// are kept apart by an additive mask.
pub struct WindowAttention<T> {
    qkv: Linear<T>,
    proj: Linear<T>,
    pub relative_bias: Param<T>,
    dim: usize,
    heads: usize,
    window: usize,
    shift: usize,
    height: usize,
    width: usize,
    /// `perm[t]` is the pixel feeding window-ordered token `t`.
    perm: Vec<usize>,
    /// `(tokens², )` table index per query/key pair within a window.
    bias_index: Vec<usize>,
    /// `(windows, tokens, tokens)` additive mask, present when shifted.
    mask: Option<Vec<T>>,
    probs: Vec<T>,
    cache: Option<AttnCache<T>>,
}

impl<T: Real> WindowAttention<T> {
    /// When the feature map is no larger than `window`, the window shrinks to
    /// the map and shifting is disabled.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shifted: bool,
        height: usize,
        width: usize,
        init: &mut Init,
    ) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        let (window, shift) = if height.min(width) <= window {
            (height.min(width), 0)
        } else {
            (window, if shifted { window / 2 } else { 0 })
        };
        assert!(
            height % window == 0 && width % window == 0,
            "{height}x{width} map is not tiled by {window}x{window} windows"
        );
        let table = (2 * window - 1) * (2 * window - 1);
        let mut attn = WindowAttention {
            qkv: Linear::new(&format!("{name}.qkv"), dim, 3 * dim, true, init),
            proj: Linear::new(&format!("{name}.proj"), dim, dim, true, init),
            relative_bias: Param::new(
                format!("{name}.relative_position_bias_table"),
                &[table, heads],
                init.trunc_normal(table * heads, 0.02),
            ),
            dim,
            heads,
            window,
            shift,
            height,
            width,
            perm: Vec::new(),
            bias_index: Vec::new(),
            mask: None,
            probs: Vec::new(),
            cache: None,
        };
        attn.build_tables();
        attn
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    fn tokens(&self) -> usize {
        self.window * self.window
    }

    fn windows(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    fn build_tables(&mut self) {
        let (ws, s, h, w) = (self.window, self.shift, self.height, self.width);
        let (nwy, nwx) = (h / ws, w / ws);
        let n = ws * ws;
        self.perm = Vec::with_capacity(h * w);
        for wy in 0..nwy {
            for wx in 0..nwx {
                for py in 0..ws {
                    for px in 0..ws {
                        let y = (wy * ws + py + s) % h;
                        let x = (wx * ws + px + s) % w;
                        self.perm.push(y * w + x);
                    }
                }
            }
        }
        let span = 2 * ws - 1;
        self.bias_index = (0..n * n)
            .map(|ij| {
                let (i, j) = (ij / n, ij % n);
                let (yi, xi) = (i / ws, i % ws);
                let (yj, xj) = (j / ws, j % ws);
                (yi + ws - 1 - yj) * span + (xi + ws - 1 - xj)
            })
            .collect();
        self.mask = (s > 0).then(|| {
            let region = |v: usize, len: usize| {
                if v < len - ws {
                    0
                } else if v < len - s {
                    1
                } else {
                    2
                }
            };
            let mut mask = vec![T::zero(); nwy * nwx * n * n];
            for wy in 0..nwy {
                for wx in 0..nwx {
                    let ids: Vec<usize> = (0..n)
                        .map(|t| region(wy * ws + t / ws, h) * 3 + region(wx * ws + t % ws, w))
                        .collect();
                    let base = (wy * nwx + wx) * n * n;
                    for i in 0..n {
                        for j in 0..n {
                            if ids[i] != ids[j] {
                                mask[base + i * n + j] = T::cast(MASK_VALUE);
                            }
                        }
                    }
                }
            }
            mask
        });
    }

    /// Attention probabilities from the last forward pass, laid out
    /// `(batch, window, head, query, key)`.
    pub fn last_attention(&self) -> &[T] {
        &self.probs
    }

    /// Window-ordered token index to pixel index (row-major within one image).
    pub fn token_pixels(&self) -> &[usize] {
        &self.perm
    }

    fn gather(&self, x: &[T], batch: usize) -> Vec<T> {
        let (c, hw) = (self.dim, self.height * self.width);
        let mut out = vec![T::zero(); x.len()];
        for b in 0..batch {
            for (t, &p) in self.perm.iter().enumerate() {
                let dst = (b * hw + t) * c;
                let src = (b * hw + p) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
        out
    }

    fn scatter(&self, tokens: &[T], batch: usize) -> Vec<T> {
        let (c, hw) = (self.dim, self.height * self.width);
        let mut out = vec![T::zero(); tokens.len()];
        for b in 0..batch {
            for (t, &p) in self.perm.iter().enumerate() {
                let src = (b * hw + t) * c;
                let dst = (b * hw + p) * c;
                out[dst..dst + c].copy_from_slice(&tokens[src..src + c]);
            }
        }
        out
    }

    fn scale(&self) -> T {
        T::cast(((self.dim / self.heads) as f64).powf(-0.5))
    }
}

impl<T: Real> Module<T> for WindowAttention<T> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.qkv.visit(f);
        f(&mut self.relative_bias);
        self.proj.visit(f);
    }
}

impl<T: Real> Layer<T> for WindowAttention<T> {
    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let (batch, h, w, c) = x.dims4();
        assert_eq!((h, w, c), (self.height, self.width, self.dim), "window attention input geometry");
        let tokens = Tensor::from_vec(&[batch * h * w, c], self.gather(x.data(), batch));
        let qkv = self.qkv.forward(tokens, mode).into_data();

        let (n, nw, heads) = (self.tokens(), self.windows(), self.heads);
        let d = c / heads;
        let row = 3 * c;
        let scale = self.scale();
        // relative position bias plus shift mask, per (window, head)
        let mask_windows = if self.mask.is_some() { nw } else { 1 };
        let mut logit_bias = vec![T::zero(); mask_windows * heads * n * n];
        for (wh, dst) in logit_bias.chunks_exact_mut(n * n).enumerate() {
            let (win, hd) = (wh / heads, wh % heads);
            for (ij, v) in dst.iter_mut().enumerate() {
                *v = self.relative_bias.value[self.bias_index[ij] * heads + hd];
            }
            if let Some(mask) = &self.mask {
                for (v, &m) in dst.iter_mut().zip(&mask[win * n * n..(win + 1) * n * n]) {
                    *v += m;
                }
            }
        }
        let flush = T::cast(-60.0);
        let mut probs = vec![T::zero(); batch * nw * heads * n * n];
        let mut out = vec![T::zero(); batch * h * w * c];
        for bw in 0..batch * nw {
            let tok0 = bw * n;
            let win = if self.mask.is_some() { bw % nw } else { 0 };
            for hd in 0..heads {
                let p = &mut probs[(bw * heads + hd) * n * n..][..n * n];
                p.copy_from_slice(&logit_bias[(win * heads + hd) * n * n..][..n * n]);
                let q = Mat::rows(tok0 * row + hd * d, row);
                let k = Mat::transposed(tok0 * row + c + hd * d, row);
                gemm_strided(n, d, n, scale, &qkv, q, &qkv, k, T::one(), p, Mat::rows(0, n));
                for r in p.chunks_exact_mut(n) {
                    let max = r.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for v in r.iter_mut() {
                        // flushing negligible weights to zero keeps f32 products out of the subnormal range
                        let z = *v - max;
                        *v = if z < flush { T::zero() } else { z.fast_exp() };
                        sum += *v;
                    }
                    let inv = T::one() / sum;
                    r.iter_mut().for_each(|v| *v *= inv);
                }
                let v = Mat::rows(tok0 * row + 2 * c + hd * d, row);
                let o = Mat::rows(tok0 * c + hd * d, c);
                gemm_strided(n, n, d, T::one(), p, Mat::rows(0, n), &qkv, v, T::zero(), &mut out, o);
            }
        }
        let y = self.proj.forward(Tensor::from_vec(&[batch * h * w, c], out), mode);
        let y = self.scatter(y.data(), batch);
        if mode == Mode::Train {
            self.cache = Some(AttnCache { qkv, batch });
        }
        self.probs = probs;
        Tensor::from_vec(&[batch, h, w, c], y)
    }

    fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let AttnCache { qkv, batch } = self
            .cache
            .take()
            .expect("window attention: backward without a training-mode forward");
        let (h, w, c) = (self.height, self.width, self.dim);
        let dtok = Tensor::from_vec(&[batch * h * w, c], self.gather(dy.data(), batch));
        let dout = self.proj.backward(dtok).into_data();

        let (n, nw, heads) = (self.tokens(), self.windows(), self.heads);
        let d = c / heads;
        let row = 3 * c;
        let scale = self.scale();
        let mut dqkv = vec![T::zero(); qkv.len()];
        let mut dp = vec![T::zero(); n * n];
        let mut dbias = vec![T::zero(); self.relative_bias.len()];
        for bw in 0..batch * nw {
            let tok0 = bw * n;
            for hd in 0..heads {
                let p = &self.probs[(bw * heads + hd) * n * n..][..n * n];
                let q = tok0 * row + hd * d;
                let k = q + c;
                let v = q + 2 * c;
                let o = tok0 * c + hd * d;
                // dP = dO · Vᵀ
                gemm_strided(n, d, n, T::one(), &dout, Mat::rows(o, c), &qkv, Mat::transposed(v, row), T::zero(), &mut dp, Mat::rows(0, n));
                // dV = Pᵀ · dO
                gemm_strided(n, n, d, T::one(), p, Mat::transposed(0, n), &dout, Mat::rows(o, c), T::zero(), &mut dqkv, Mat::rows(v, row));
                // softmax backward in place: dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for (dr, pr) in dp.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
                    let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (g, &pv) in dr.iter_mut().zip(pr) {
                        *g = pv * (*g - dot);
                    }
                }
                for (ij, &g) in dp.iter().enumerate() {
                    dbias[self.bias_index[ij] * heads + hd] += g;
                }
                // dQ = scale · dS · K ; dK = scale · dSᵀ · Q
                gemm_strided(n, n, d, scale, &dp, Mat::rows(0, n), &qkv, Mat::rows(k, row), T::zero(), &mut dqkv, Mat::rows(q, row));
                gemm_strided(n, n, d, scale, &dp, Mat::transposed(0, n), &qkv, Mat::rows(q, row), T::zero(), &mut dqkv, Mat::rows(k, row));
            }
        }
        for (a, b) in self.relative_bias.grad_mut().iter_mut().zip(dbias) {
            *a += b;
        }
        let dtokens = self.qkv.backward(Tensor::from_vec(&[batch * h * w, row], dqkv));
        Tensor::from_vec(&[batch, h, w, c], self.scatter(dtokens.data(), batch))
    }
}

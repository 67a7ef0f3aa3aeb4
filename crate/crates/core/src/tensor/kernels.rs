//! Raw slice kernels shared by the graph and the eager ops.

use super::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. `stats` receives `(mean, rstd)` per row.
pub(crate) fn layer_norm_forward<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    d: usize,
    out: &mut [T],
    stats: &mut [T],
) {
    let eps = T::from_f64(LN_EPS);
    let inv_d = T::one() / T::from_f64(d as f64);
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for i in 0..d {
            or[i] = (xr[i] - mean) * rstd * gain[i] + bias[i];
        }
        stats[2 * r] = mean;
        stats[2 * r + 1] = rstd;
    }
}

/// Accumulates gradients of a row-wise layer norm into `dx`, `dgain`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    stats: &[T],
    dy: &[T],
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let inv_d = T::one() / T::from_f64(d as f64);
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for (r, (xr, dyr)) in x.chunks_exact(d).zip(dy.chunks_exact(d)).enumerate() {
        let mean = stats[2 * r];
        let rstd = stats[2 * r + 1];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..d {
            xhat[i] = (xr[i] - mean) * rstd;
            dxhat[i] = dyr[i] * gain[i];
            dgain[i] += dyr[i] * xhat[i];
            dbias[i] += dyr[i];
            sum_dxhat += dxhat[i];
            sum_dxhat_xhat += dxhat[i] * xhat[i];
        }
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rstd * (dxhat[i] - inv_d * sum_dxhat - xhat[i] * inv_d * sum_dxhat_xhat);
        }
    }
}

/// In-place, max-shifted softmax over rows of length `n`.
pub(crate) fn softmax_rows<T: Real>(data: &mut [T], n: usize) {
    for row in data.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// `dx += y ∘ (dy − Σ dy∘y)` row-wise.
pub(crate) fn softmax_backward_rows<T: Real>(y: &[T], dy: &[T], dx: &mut [T], n: usize) {
    for ((yr, dyr), dxr) in y.chunks_exact(n).zip(dy.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for i in 0..n {
            dxr[i] += yr[i] * (dyr[i] - dot);
        }
    }
}

/// Exact GeLU, `x·Φ(x)`.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// `y[n, out] = x[n, in] · wᵀ + b`, `w` stored `[out, in]`.
pub(crate) fn linear_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    n: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); n * d_out];
    if let Some(b) = b {
        for row in y.chunks_exact_mut(d_out) {
            row.copy_from_slice(b);
        }
    }
    T::gemm(
        n,
        d_in,
        d_out,
        T::one(),
        x,
        d_in as isize,
        1,
        w,
        1,
        d_in as isize,
        T::one(),
        &mut y,
        d_out as isize,
        1,
    );
    y
}

/// Accumulates input, weight and bias gradients of [`linear_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    d_in: usize,
    d_out: usize,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        // dx[n, in] += dy[n, out] · w[out, in]
        T::gemm(
            n,
            d_out,
            d_in,
            T::one(),
            dy,
            d_out as isize,
            1,
            w,
            d_in as isize,
            1,
            T::one(),
            dx,
            d_in as isize,
            1,
        );
    }
    if let Some(dw) = dw {
        // dw[out, in] += dyᵀ[out, n] · x[n, in]
        T::gemm(
            d_out,
            n,
            d_in,
            T::one(),
            dy,
            1,
            d_out as isize,
            x,
            d_in as isize,
            1,
            T::one(),
            dw,
            d_in as isize,
            1,
        );
    }
    if let Some(db) = db {
        for row in dy.chunks_exact(d_out) {
            for (g, &v) in db.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
}

/// Geometry of a 3×3, padding-1 convolution over NHWC activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub const KERNEL: usize = 3;

    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 - Self::KERNEL) / self.stride + 1,
            (self.width + 2 - Self::KERNEL) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        Self::KERNEL * Self::KERNEL * self.c_in
    }

    pub fn n_patches(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.batch * ho * wo
    }
}

/// Unfolds NHWC input into `[batch·ho·wo, 9·c_in]` patches, ordered (ky, kx, c).
pub(crate) fn im2col<T: Real>(x: &[T], g: ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let pl = g.patch_len();
    let mut cols = vec![T::zero(); g.n_patches() * pl];
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let p = ((b * ho + oy) * wo + ox) * pl;
                for ky in 0..3 {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * g.c_in;
                        let dst = p + (ky * 3 + kx) * g.c_in;
                        cols[dst..dst + g.c_in].copy_from_slice(&x[src..src + g.c_in]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub(crate) fn col2im<T: Real>(dcols: &[T], g: ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let pl = g.patch_len();
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let p = ((b * ho + oy) * wo + ox) * pl;
                for ky in 0..3 {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * g.c_in;
                        let src = p + (ky * 3 + kx) * g.c_in;
                        for c in 0..g.c_in {
                            dx[dst + c] += dcols[src + c];
                        }
                    }
                }
            }
        }
    }
}

/// Images per im2col chunk in [`conv_forward`] / [`conv_backward`]; keeps the
/// patch buffer cache-sized instead of materializing the whole batch.
const CONV_CHUNK: usize = 8;

fn conv_chunks(g: ConvGeom) -> impl Iterator<Item = (usize, ConvGeom)> {
    (0..g.batch).step_by(CONV_CHUNK).map(move |b0| (b0, ConvGeom { batch: CONV_CHUNK.min(g.batch - b0), ..g }))
}

/// 3×3 convolution `[batch, h, w, c_in] → [batch, ho, wo, c_out]`, `w: [c_out, 9·c_in]`.
pub(crate) fn conv_forward<T: Real>(x: &[T], w: &[T], b: &[T], g: ConvGeom, c_out: usize) -> Vec<T> {
    let in_img = g.height * g.width * g.c_in;
    let (ho, wo) = g.out_hw();
    let out_img = ho * wo * c_out;
    let mut y = Vec::with_capacity(g.batch * out_img);
    for (b0, sub) in conv_chunks(g) {
        let cols = im2col(&x[b0 * in_img..(b0 + sub.batch) * in_img], sub);
        y.extend(linear_forward(&cols, w, Some(b), sub.n_patches(), g.patch_len(), c_out));
    }
    y
}

/// Accumulates the gradients of [`conv_forward`], recomputing patches chunk by chunk.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: ConvGeom,
    c_out: usize,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let in_img = g.height * g.width * g.c_in;
    let (ho, wo) = g.out_hw();
    let out_img = ho * wo * c_out;
    let pl = g.patch_len();
    for (b0, sub) in conv_chunks(g) {
        let xs = &x[b0 * in_img..(b0 + sub.batch) * in_img];
        let dys = &dy[b0 * out_img..(b0 + sub.batch) * out_img];
        let n = sub.n_patches();
        let cols = im2col(xs, sub);
        let mut dcols = dx.is_some().then(|| vec![T::zero(); n * pl]);
        linear_backward(&cols, w, dys, n, pl, c_out, dcols.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
        if let (Some(dx), Some(dcols)) = (dx.as_deref_mut(), dcols) {
            col2im(&dcols, sub, &mut dx[b0 * in_img..(b0 + sub.batch) * in_img]);
        }
    }
}

/// Multi-head scaled dot-product attention over `[batch, seq, hidden]`.
///
/// Returns the context `[batch, seq, hidden]` and the attention
/// probabilities `[batch, heads, seq, seq]`.
pub(crate) fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    batch: usize,
    seq: usize,
    hidden: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = hidden / heads;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut out = vec![T::zero(); batch * seq * hidden];
    let hs = hidden as isize;
    for b in 0..batch {
        let base = b * seq * hidden;
        for h in 0..heads {
            let off = base + h * dh;
            let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            // scores = scale · Q Kᵀ
            T::gemm(seq, dh, seq, scale, &q[off..], hs, 1, &k[off..], 1, hs, T::zero(), p, seq as isize, 1);
            softmax_rows(p, seq);
            // out_h = P V
            T::gemm(seq, seq, dh, T::one(), p, seq as isize, 1, &v[off..], hs, 1, T::zero(), &mut out[off..], hs, 1);
        }
    }
    (out, probs)
}

/// Accumulates dq, dk, dv for [`attention_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    batch: usize,
    seq: usize,
    hidden: usize,
    heads: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let dh = hidden / heads;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let hs = hidden as isize;
    let ss = seq as isize;
    let mut dp = vec![T::zero(); seq * seq];
    let mut ds = vec![T::zero(); seq * seq];
    for b in 0..batch {
        let base = b * seq * hidden;
        for h in 0..heads {
            let off = base + h * dh;
            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            // dP = dO Vᵀ
            T::gemm(seq, dh, seq, T::one(), &dout[off..], hs, 1, &v[off..], 1, hs, T::zero(), &mut dp, ss, 1);
            // dV += Pᵀ dO
            T::gemm(seq, seq, dh, T::one(), p, 1, ss, &dout[off..], hs, 1, T::one(), &mut dv[off..], hs, 1);
            ds.iter_mut().for_each(|x| *x = T::zero());
            softmax_backward_rows(p, &dp, &mut ds, seq);
            // dQ += scale · dS K ; dK += scale · dSᵀ Q
            T::gemm(seq, seq, dh, scale, &ds, ss, 1, &k[off..], hs, 1, T::one(), &mut dq[off..], hs, 1);
            T::gemm(seq, seq, dh, scale, &ds, 1, ss, &q[off..], hs, 1, T::one(), &mut dk[off..], hs, 1);
        }
    }
}

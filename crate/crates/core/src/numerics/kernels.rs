//! Raw forward/backward kernels on flat slices. The graph wraps these; they
//! are public so tests and the evaluation path can call them directly.

use super::Real;

/// Geometry of a same-size 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn pad(&self) -> usize {
        (self.k - 1) / 2
    }

    /// Valid output range along one axis for kernel tap `t`.
    #[inline]
    fn span(len: usize, t: usize, pad: usize) -> (usize, usize) {
        // output index o reads input o + t - pad
        let lo = pad.saturating_sub(t);
        let hi = (len + pad).saturating_sub(t).min(len);
        (lo, hi.max(lo))
    }
}

/// Dot product with eight independent partial sums, so the loop vectorises;
/// the summation order is fixed, so results are reproducible.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    s + tail
}

/// Unfolds `input` into `[c_in*k*k, h*w]`: row `(ci*k+ky)*k+kx` holds channel
/// `ci` shifted by the tap, zero outside the image.
fn im2col<T: Real>(input: &[T], dims: ConvDims) -> Vec<T> {
    let ConvDims { c_in, h, w, k, .. } = dims;
    let pad = dims.pad();
    let hw = h * w;
    let mut col = vec![T::zero(); c_in * k * k * hw];
    for ci in 0..c_in {
        let inp = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let (ylo, yhi) = ConvDims::span(h, ky, pad);
            for kx in 0..k {
                let (xlo, xhi) = ConvDims::span(w, kx, pad);
                let dst = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in ylo..yhi {
                    let iy = y + ky - pad;
                    dst[y * w + xlo..y * w + xhi]
                        .copy_from_slice(&inp[iy * w + xlo + kx - pad..iy * w + xhi + kx - pad]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters `col` back onto `g_input`.
fn col2im_add<T: Real>(col: &[T], dims: ConvDims, g_input: &mut [T]) {
    let ConvDims { c_in, h, w, k, .. } = dims;
    let pad = dims.pad();
    let hw = h * w;
    for ci in 0..c_in {
        let gi = &mut g_input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let (ylo, yhi) = ConvDims::span(h, ky, pad);
            for kx in 0..k {
                let (xlo, xhi) = ConvDims::span(w, kx, pad);
                let src = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in ylo..yhi {
                    let iy = y + ky - pad;
                    let dst = &mut gi[iy * w + xlo + kx - pad..iy * w + xhi + kx - pad];
                    for (d, &v) in dst.iter_mut().zip(&src[y * w + xlo..y * w + xhi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

pub fn conv2d_forward<T: Real>(
    input: &[T],
    kernel: &[T],
    bias: &[T],
    dims: ConvDims,
    out: &mut [T],
) {
    let ConvDims { c_in, c_out, h, w, k } = dims;
    let hw = h * w;
    let rows = c_in * k * k;
    let unfolded;
    let col = if k == 1 {
        input
    } else {
        unfolded = im2col(input, dims);
        &unfolded[..]
    };
    for co in 0..c_out {
        let o = &mut out[co * hw..(co + 1) * hw];
        o.iter_mut().for_each(|v| *v = bias[co]);
        for r in 0..rows {
            let wv = kernel[co * rows + r];
            if wv != T::zero() {
                axpy(o, wv, &col[r * hw..(r + 1) * hw]);
            }
        }
    }
}

/// Accumulates gradients of a same-size convolution into the `g_*` slices
/// (any of which may be `None` when not required).
pub fn conv2d_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    dims: ConvDims,
    g_input: Option<&mut [T]>,
    g_kernel: Option<&mut [T]>,
    g_bias: Option<&mut [T]>,
) {
    let ConvDims { c_in, c_out, h, w, k } = dims;
    let hw = h * w;
    let rows = c_in * k * k;
    if let Some(gb) = g_bias {
        for co in 0..c_out {
            gb[co] += grad_out[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
    }
    if let Some(gk) = g_kernel {
        let unfolded;
        let col = if k == 1 {
            input
        } else {
            unfolded = im2col(input, dims);
            &unfolded[..]
        };
        for co in 0..c_out {
            let go = &grad_out[co * hw..(co + 1) * hw];
            for r in 0..rows {
                gk[co * rows + r] += dot(go, &col[r * hw..(r + 1) * hw]);
            }
        }
    }
    if let Some(gi) = g_input {
        if k == 1 {
            for co in 0..c_out {
                let go = &grad_out[co * hw..(co + 1) * hw];
                for r in 0..rows {
                    axpy(&mut gi[r * hw..(r + 1) * hw], kernel[co * rows + r], go);
                }
            }
        } else {
            let mut gcol = vec![T::zero(); rows * hw];
            for co in 0..c_out {
                let go = &grad_out[co * hw..(co + 1) * hw];
                for r in 0..rows {
                    axpy(&mut gcol[r * hw..(r + 1) * hw], kernel[co * rows + r], go);
                }
            }
            col2im_add(&gcol, dims, gi);
        }
    }
}

/// `out[r, o] = bias[o] + sum_i weight[o, i] * input[r, i]`
pub fn linear_forward<T: Real>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    d_in: usize,
    d_out: usize,
    out: &mut [T],
) {
    for (row, orow) in input.chunks_exact(d_in).zip(out.chunks_exact_mut(d_out)) {
        for (o, ov) in orow.iter_mut().enumerate() {
            let wrow = &weight[o * d_in..(o + 1) * d_in];
            let mut acc = bias[o];
            for (&a, &b) in wrow.iter().zip(row) {
                acc += a * b;
            }
            *ov = acc;
        }
    }
}

pub fn linear_backward<T: Real>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    d_in: usize,
    d_out: usize,
    mut g_input: Option<&mut [T]>,
    mut g_weight: Option<&mut [T]>,
    mut g_bias: Option<&mut [T]>,
) {
    let rows = input.len() / d_in;
    for r in 0..rows {
        let row = &input[r * d_in..(r + 1) * d_in];
        let grow = &grad_out[r * d_out..(r + 1) * d_out];
        for (o, &g) in grow.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            if let Some(gb) = g_bias.as_deref_mut() {
                gb[o] += g;
            }
            if let Some(gw) = g_weight.as_deref_mut() {
                for (gv, &x) in gw[o * d_in..(o + 1) * d_in].iter_mut().zip(row) {
                    *gv += g * x;
                }
            }
            if let Some(gi) = g_input.as_deref_mut() {
                let wrow = &weight[o * d_in..(o + 1) * d_in];
                for (gv, &wv) in gi[r * d_in..(r + 1) * d_in].iter_mut().zip(wrow) {
                    *gv += g * wv;
                }
            }
        }
    }
}

/// One bilinear tap: flat cell index and interpolation weight, plus the
/// derivative of the weight with respect to the two location coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Tap<T> {
    pub cell: usize,
    pub weight: T,
    pub d_x: T,
    pub d_y: T,
}

/// The in-bounds taps for sampling an `h x w` lattice at `(x, y)`, where `x`
/// indexes the first spatial axis. Cells outside the lattice are dropped,
/// which is zero padding. At exact lattice coordinates the neighbourhood is
/// `floor(x)..=floor(x)+1`, so location derivatives there are the slopes
/// toward the next cell.
pub fn bilinear_taps<T: Real>(h: usize, w: usize, x: T, y: T) -> ([Option<Tap<T>>; 4], usize) {
    let mut taps = [None; 4];
    let mut n = 0;
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let one = T::one();
    let (Some(x0), Some(y0)) = (x0f.to_i64(), y0f.to_i64()) else {
        return (taps, 0);
    };
    let corners = [
        (x0, y0, (one - fx) * (one - fy), -(one - fy), -(one - fx)),
        (x0 + 1, y0, fx * (one - fy), one - fy, -fx),
        (x0, y0 + 1, (one - fx) * fy, -fy, one - fx),
        (x0 + 1, y0 + 1, fx * fy, fy, fx),
    ];
    for (cx, cy, weight, d_x, d_y) in corners {
        if cx < 0 || cy < 0 || cx >= h as i64 || cy >= w as i64 {
            continue;
        }
        taps[n] = Some(Tap {
            cell: cx as usize * w + cy as usize,
            weight,
            d_x,
            d_y,
        });
        n += 1;
    }
    (taps, n)
}

/// Bilinear sample of a channel-first `[c, h, w]` grid.
pub fn bilinear_sample<T: Real>(feature: &[T], c: usize, h: usize, w: usize, x: T, y: T) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); c];
    let (taps, n) = bilinear_taps(h, w, x, y);
    for tap in taps[..n].iter().flatten() {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += tap.weight * feature[ch * hw + tap.cell];
        }
    }
    out
}

/// Shape bookkeeping for the fused deformable sampling kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformDims {
    /// Number of query rows.
    pub queries: usize,
    /// Value lattice height (first spatial axis).
    pub h: usize,
    /// Value lattice width.
    pub w: usize,
    pub heads: usize,
    pub points: usize,
    pub head_dim: usize,
}

/// For every query row and head, sums `weight * sample(value_head, loc)` over
/// the sampled points. `value` is cell-major `[h*w, heads*head_dim]`,
/// `locs` is `[queries, heads*points*2]`, `weights` is `[queries, heads*points]`;
/// output is `[queries, heads*head_dim]`.
pub fn deform_sample_forward<T: Real>(
    value: &[T],
    locs: &[T],
    weights: &[T],
    dims: DeformDims,
    out: &mut [T],
) {
    let DeformDims { queries, h, w, heads, points, head_dim } = dims;
    let cv = heads * head_dim;
    out.iter_mut().for_each(|v| *v = T::zero());
    for q in 0..queries {
        for hd in 0..heads {
            let orow = &mut out[q * cv + hd * head_dim..q * cv + (hd + 1) * head_dim];
            for j in 0..points {
                let k = hd * points + j;
                let a = weights[q * heads * points + k];
                let x = locs[(q * heads * points + k) * 2];
                let y = locs[(q * heads * points + k) * 2 + 1];
                let (taps, n) = bilinear_taps(h, w, x, y);
                for tap in taps[..n].iter().flatten() {
                    let coef = a * tap.weight;
                    let vrow = &value[tap.cell * cv + hd * head_dim..tap.cell * cv + (hd + 1) * head_dim];
                    for (o, &v) in orow.iter_mut().zip(vrow) {
                        *o += coef * v;
                    }
                }
            }
        }
    }
}

pub fn deform_sample_backward<T: Real>(
    value: &[T],
    locs: &[T],
    weights: &[T],
    grad_out: &[T],
    dims: DeformDims,
    mut g_value: Option<&mut [T]>,
    mut g_locs: Option<&mut [T]>,
    mut g_weights: Option<&mut [T]>,
) {
    let DeformDims { queries, h, w, heads, points, head_dim } = dims;
    let cv = heads * head_dim;
    for q in 0..queries {
        for hd in 0..heads {
            let grow = &grad_out[q * cv + hd * head_dim..q * cv + (hd + 1) * head_dim];
            for j in 0..points {
                let k = q * heads * points + hd * points + j;
                let a = weights[k];
                let x = locs[k * 2];
                let y = locs[k * 2 + 1];
                let (taps, n) = bilinear_taps(h, w, x, y);
                let mut g_a = T::zero();
                let mut g_x = T::zero();
                let mut g_y = T::zero();
                for tap in taps[..n].iter().flatten() {
                    let base = tap.cell * cv + hd * head_dim;
                    let vrow = &value[base..base + head_dim];
                    let dot: T = grow.iter().zip(vrow).map(|(&g, &v)| g * v).sum();
                    g_a += tap.weight * dot;
                    g_x += tap.d_x * dot;
                    g_y += tap.d_y * dot;
                    if let Some(gv) = g_value.as_deref_mut() {
                        let coef = a * tap.weight;
                        for (gvv, &g) in gv[base..base + head_dim].iter_mut().zip(grow) {
                            *gvv += coef * g;
                        }
                    }
                }
                if let Some(gw) = g_weights.as_deref_mut() {
                    gw[k] += g_a;
                }
                if let Some(gl) = g_locs.as_deref_mut() {
                    gl[k * 2] += a * g_x;
                    gl[k * 2 + 1] += a * g_y;
                }
            }
        }
    }
}

/// Numerically stable `ln(1 + e^z)`.
#[inline]
pub fn softplus<T: Real>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Penalty-reduced focal loss summed over all cells (not normalised) and its
/// derivative with respect to the logit. Positive cells are those whose
/// target equals exactly one.
#[inline]
pub fn focal_term<T: Real>(logit: T, target: T, alpha: i32, beta: i32) -> (T, T) {
    let p = sigmoid(logit);
    let one = T::one();
    let a = T::of(alpha as f64);
    if target == one {
        let log_p = -softplus(-logit);
        let q = one - p;
        let loss = -q.powi(alpha) * log_p;
        let grad = a * p * q.powi(alpha) * log_p - q.powi(alpha + 1);
        (loss, grad)
    } else {
        let log_q = -softplus(logit);
        let wt = (one - target).powi(beta);
        let loss = -wt * p.powi(alpha) * log_q;
        let grad = -wt * (a * p.powi(alpha) * (one - p) * log_q - p.powi(alpha + 1));
        (loss, grad)
    }
}

#![allow(clippy::too_many_arguments)]

//! Explicit-loop reference implementations of the attention stacks, written
//! against plain `f64` slices so they share no code with the graph kernels.
//! Features are channel-first `[c, x, y]`; parameters are fetched by name.

pub type Params<'a> = &'a dyn Fn(&str) -> Vec<f64>;

/// Tent-weighted sum over every lattice cell; equals bilinear interpolation
/// with zero padding outside the lattice.
pub fn sample(feat: &[f64], c: usize, h: usize, w: usize, px: f64, py: f64) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for i in 0..h {
        for j in 0..w {
            let k = (1.0 - (px - i as f64).abs()).max(0.0) * (1.0 - (py - j as f64).abs()).max(0.0);
            if k == 0.0 {
                continue;
            }
            for ch in 0..c {
                out[ch] += k * feat[(ch * h + i) * w + j];
            }
        }
    }
    out
}

/// `W v + b` for a `[d_out, d_in]` weight stored under `name`.
pub fn affine(p: Params, name: &str, v: &[f64]) -> Vec<f64> {
    let w = p(&format!("{name}.weight"));
    let b = p(&format!("{name}.bias"));
    let d_in = v.len();
    (0..b.len())
        .map(|o| b[o] + (0..d_in).map(|i| w[o * d_in + i] * v[i]).sum::<f64>())
        .collect()
}

fn column(f: &[f64], c: usize, cells: usize, cell: usize) -> Vec<f64> {
    (0..c).map(|ch| f[ch * cells + cell]).collect()
}

/// Residual deformable attention of `query` `[s, h, w]` over `feature`
/// `[c_v, h, w]` with `m` heads and `n` points per head.
pub fn deform_attn(
    p: Params,
    prefix: &str,
    query: &[f64],
    feature: &[f64],
    s: usize,
    c_v: usize,
    h: usize,
    w: usize,
    m: usize,
    n: usize,
) -> Vec<f64> {
    let cells = h * w;
    let d = s / m;
    let wv = p(&format!("{prefix}.value.weight"));
    let bv = p(&format!("{prefix}.value.bias"));
    let ones = vec![1.0; cells];
    let mut out = vec![0.0; s * cells];
    for i in 0..h {
        for j in 0..w {
            let cell = i * w + j;
            let q = column(query, s, cells, cell);
            let off = affine(p, &format!("{prefix}.offset"), &q);
            let logits = affine(p, &format!("{prefix}.attn"), &q);
            let mut agg = vec![0.0; s];
            for head in 0..m {
                let row = &logits[head * n..(head + 1) * n];
                let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|l| (l - top).exp()).sum();
                for k in 0..n {
                    let a = (row[k] - top).exp() / z;
                    let px = i as f64 + off[(head * n + k) * 2];
                    let py = j as f64 + off[(head * n + k) * 2 + 1];
                    // sample the raw feature, then project; the bias rides on
                    // the sampled mass of a constant map
                    let raw = sample(feature, c_v, h, w, px, py);
                    let mass = sample(&ones, 1, h, w, px, py)[0];
                    for e in 0..d {
                        let o = head * d + e;
                        let v = bv[o] * mass + (0..c_v).map(|c| wv[o * c_v + c] * raw[c]).sum::<f64>();
                        agg[o] += a * v;
                    }
                }
            }
            let proj = affine(p, &format!("{prefix}.output"), &agg);
            for ch in 0..s {
                out[ch * cells + cell] = q[ch] + proj[ch];
            }
        }
    }
    out
}

/// Residual two-layer perceptron applied at every cell.
pub fn ffn(p: Params, prefix: &str, x: &[f64], s: usize, cells: usize) -> Vec<f64> {
    let mut out = vec![0.0; s * cells];
    for cell in 0..cells {
        let v = column(x, s, cells, cell);
        let hid: Vec<f64> = affine(p, &format!("{prefix}.ffn1"), &v).into_iter().map(|a| a.max(0.0)).collect();
        let o = affine(p, &format!("{prefix}.ffn2"), &hid);
        for ch in 0..s {
            out[ch * cells + cell] = v[ch] + o[ch];
        }
    }
    out
}

/// Shapes of one recouple branch: `s` query channels, `i` invariant
/// channels, `o` channels of the other modality's raw feature.
#[derive(Clone, Copy, Debug)]
pub struct BranchDims {
    pub s: usize,
    pub i: usize,
    pub o: usize,
    pub h: usize,
    pub w: usize,
    pub heads: usize,
    pub points: usize,
}

/// One recouple layer of one branch: self-attention, cross-attention into
/// the other modality's invariant feature, cross-attention into its raw
/// feature, feed-forward.
pub fn recouple_branch(
    p: Params,
    base: &str,
    query: &[f64],
    other_invariant: &[f64],
    other_raw: &[f64],
    dims: BranchDims,
) -> Vec<f64> {
    let BranchDims { s, i, o, h, w, heads, points } = dims;
    let q = deform_attn(p, &format!("{base}.self_attn"), query, query, s, s, h, w, heads, points);
    let q = deform_attn(p, &format!("{base}.cross_inv"), &q, other_invariant, s, i, h, w, heads, points);
    let q = deform_attn(p, &format!("{base}.cross_other"), &q, other_raw, s, o, h, w, heads, points);
    ffn(p, base, &q, s, h * w)
}

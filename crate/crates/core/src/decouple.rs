//! Modality decouple module: per-modality input encoders, the shared
//! modality-invariant encoder with its similarity/difference losses, and the
//! query-based modality-specific encoders built on deformable attention.

use crate::error::{Error, Result};
use crate::model::{DiffForm, Modality, ModelConfig};
use crate::nn::{self, Init};
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};

/// Invariant and specific features of both modalities, channel-first.
#[derive(Clone, Copy, Debug)]
pub struct DecoupledFeatures {
    pub invariant_camera: Var,
    pub invariant_lidar: Var,
    pub specific_camera: Var,
    pub specific_lidar: Var,
}

pub fn declare_input_encoders(init: &mut Init, cfg: &ModelConfig) -> Result<()> {
    init.conv("enc_cam.conv1", cfg.camera_channels, cfg.camera_in, 3)?;
    init.conv("enc_cam.conv2", cfg.camera_channels, cfg.camera_channels, 3)?;
    init.conv("enc_lidar.conv1", cfg.lidar_channels, cfg.lidar_in, 3)?;
    init.conv("enc_lidar.conv2", cfg.lidar_channels, cfg.lidar_channels, 3)
}

/// Two conv + ReLU blocks per modality; returns `(F_c, F_l)`.
pub fn input_encode<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    camera: Var,
    lidar: Var,
) -> Result<(Var, Var)> {
    let c = nn::conv_relu(g, p, "enc_cam.conv1", camera)?;
    let c = nn::conv_relu(g, p, "enc_cam.conv2", c)?;
    let l = nn::conv_relu(g, p, "enc_lidar.conv1", lidar)?;
    let l = nn::conv_relu(g, p, "enc_lidar.conv2", l)?;
    Ok((c, l))
}

pub fn declare_invariant(init: &mut Init, cfg: &ModelConfig) -> Result<()> {
    let i = cfg.invariant_channels;
    init.conv_plain("inv.proj_cam", i, cfg.camera_channels, 1)?;
    init.conv_plain("inv.proj_lidar", i, cfg.lidar_channels, 1)?;
    init.conv("inv.shared.conv1", i, i, 3)?;
    init.conv_plain("inv.shared.conv2", i, i, 3)
}

/// Applies the shared encoder to an already projected `[I, X, Y]` feature.
pub fn shared_invariant<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
    let h = nn::conv_relu(g, p, "inv.shared.conv1", x)?;
    nn::conv(g, p, "inv.shared.conv2", h)
}

/// Per-modality 1x1 projections into `I` channels followed by one encoder
/// whose parameters are bound once and used for both paths.
pub fn invariant_encode<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    f_c: Var,
    f_l: Var,
) -> Result<(Var, Var)> {
    let pc = nn::conv(g, p, "inv.proj_cam", f_c)?;
    let pl = nn::conv(g, p, "inv.proj_lidar", f_l)?;
    Ok((shared_invariant(g, p, pc)?, shared_invariant(g, p, pl)?))
}

/// One deformable attention block: offsets and per-head softmax weights are
/// predicted from the query, values are projected per head, sampled
/// bilinearly at `reference + offset`, combined, projected back, and added to
/// the query.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformAttnLayer {
    pub prefix: String,
    pub query_dim: usize,
    pub value_dim: usize,
    pub heads: usize,
    pub points: usize,
}

impl DeformAttnLayer {
    pub fn new(prefix: impl Into<String>, query_dim: usize, value_dim: usize, heads: usize, points: usize) -> Self {
        Self {
            prefix: prefix.into(),
            query_dim,
            value_dim,
            heads,
            points,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.query_dim / self.heads
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn declare(&self, init: &mut Init) -> Result<()> {
        if self.heads == 0 || self.points == 0 || !self.query_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attention {}: {} query channels not divisible into {} heads",
                self.prefix, self.query_dim, self.heads
            )));
        }
        let (m, n, s) = (self.heads, self.points, self.query_dim);
        init.linear_zero(&self.name("offset"), m * n * 2, s)?;
        init.linear_plain(&self.name("attn"), m * n, s)?;
        init.linear_plain(&self.name("value"), m * self.head_dim(), self.value_dim)?;
        init.linear_plain(&self.name("output"), s, m * self.head_dim())
    }

    /// Cell-major form: `query` is `[x*y, S]`, `value` is `[x*y, C_v]` on the
    /// same `x` by `y` lattice. Returns `[x*y, S]`.
    pub fn forward_cells<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        query: Var,
        value: Var,
        x: usize,
        y: usize,
    ) -> Result<Var> {
        let (m, n) = (self.heads, self.points);
        let cells = x * y;
        if g.shape(query) != [cells, self.query_dim] || g.shape(value) != [cells, self.value_dim] {
            return Err(Error::Config(format!(
                "attention {}: query {:?}, value {:?} on {x}x{y}",
                self.prefix,
                g.shape(query),
                g.shape(value)
            )));
        }
        let offsets = nn::linear(g, p, &self.name("offset"), query)?;
        let refs = g.constant(reference_points(x, y, m * n));
        let locs = g.add(offsets, refs)?;
        let logits = nn::linear(g, p, &self.name("attn"), query)?;
        let logits = g.reshape(logits, &[cells * m, n])?;
        let weights = g.softmax(logits)?;
        let weights = g.reshape(weights, &[cells, m * n])?;
        let v = nn::linear(g, p, &self.name("value"), value)?;
        let agg = g.deform_sample(v, locs, weights, x, y, m, n)?;
        let out = nn::linear(g, p, &self.name("output"), agg)?;
        g.add(query, out)
    }

    /// Channel-first form: `query` `[S, X, Y]`, `feature` `[C_v, X, Y]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        query: Var,
        feature: Var,
    ) -> Result<Var> {
        let qs = g.shape(query).to_vec();
        if qs.len() != 3 || g.shape(feature)[1..] != qs[1..] {
            return Err(Error::Config(format!(
                "attention {}: query {:?} and feature {:?} must share a grid",
                self.prefix,
                qs,
                g.shape(feature)
            )));
        }
        let q = g.to_cells(query)?;
        let v = g.to_cells(feature)?;
        let out = self.forward_cells(g, p, q, v, qs[1], qs[2])?;
        g.from_cells(out, qs[1], qs[2])
    }
}

/// `[x*y, 2*k]`: each cell's own lattice coordinates repeated `k` times.
pub fn reference_points<T: Real>(x: usize, y: usize, k: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(x * y * k * 2);
    for i in 0..x {
        for j in 0..y {
            for _ in 0..k {
                data.push(T::of(i as f64));
                data.push(T::of(j as f64));
            }
        }
    }
    Tensor::new(data, &[x * y, k * 2]).expect("reference shape")
}

pub(crate) fn ffn_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.ffn1"), format!("{prefix}.ffn2"))
}

pub(crate) fn declare_ffn(init: &mut Init, prefix: &str, dim: usize, hidden: usize) -> Result<()> {
    let (a, b) = ffn_names(prefix);
    init.linear(&a, hidden, dim)?;
    init.linear_plain(&b, dim, hidden)
}

/// `x + W2 relu(W1 x + b1) + b2` over cell-major rows.
pub(crate) fn ffn<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let (a, b) = ffn_names(prefix);
    let h = nn::linear(g, p, &a, x)?;
    let h = g.relu(h);
    let o = nn::linear(g, p, &b, h)?;
    g.add(x, o)
}

fn specific_prefix(m: Modality) -> &'static str {
    match m {
        Modality::Camera => "spec_cam",
        Modality::Lidar => "spec_lidar",
    }
}

/// Layers of one modality-specific encoder.
pub fn specific_layers(cfg: &ModelConfig, m: Modality) -> Vec<(DeformAttnLayer, DeformAttnLayer, String)> {
    let prefix = specific_prefix(m);
    let s = cfg.specific_channels;
    let own = cfg.modality_channels(m);
    (0..cfg.decouple_layers)
        .map(|l| {
            let base = format!("{prefix}.layer{l}");
            (
                DeformAttnLayer::new(format!("{base}.self_attn"), s, s, cfg.heads, cfg.points),
                DeformAttnLayer::new(format!("{base}.intra"), s, own, cfg.heads, cfg.points),
                base,
            )
        })
        .collect()
}

pub fn declare_query_grid(init: &mut Init, prefix: &str, cfg: &ModelConfig) -> Result<()> {
    let s = cfg.specific_channels;
    init.uniform(&format!("{prefix}.query.embed"), &[s, cfg.grid_x, cfg.grid_y], 0.1)?;
    init.linear(&format!("{prefix}.query.pos1"), s, 2)?;
    init.linear_plain(&format!("{prefix}.query.pos2"), s, s)
}

/// Learned embedding plus an MLP position encoding of normalised cell
/// coordinates, cell-major `[x*y, S]`.
pub fn query_grid<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, prefix: &str, cfg: &ModelConfig) -> Result<Var> {
    let embed = g.param(p, &format!("{prefix}.query.embed"))?;
    let embed = g.to_cells(embed)?;
    let coords = g.constant(nn::normalized_coords(cfg.grid_x, cfg.grid_y));
    let h = nn::linear(g, p, &format!("{prefix}.query.pos1"), coords)?;
    let h = g.relu(h);
    let pos = nn::linear(g, p, &format!("{prefix}.query.pos2"), h)?;
    g.add(embed, pos)
}

pub fn declare_specific(init: &mut Init, cfg: &ModelConfig, m: Modality) -> Result<()> {
    declare_query_grid(init, specific_prefix(m), cfg)?;
    for (self_attn, intra, base) in specific_layers(cfg, m) {
        self_attn.declare(init)?;
        intra.declare(init)?;
        declare_ffn(init, &base, cfg.specific_channels, cfg.ffn_hidden)?;
    }
    Ok(())
}

/// Self-attention over the query grid, intra-attention over the same
/// modality's feature, then a feed-forward block, per layer. Returns
/// `[S, X, Y]`.
pub fn specific_encode<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    m: Modality,
    feature: Var,
) -> Result<Var> {
    let (x, y) = (cfg.grid_x, cfg.grid_y);
    let mut q = query_grid(g, p, specific_prefix(m), cfg)?;
    let value = g.to_cells(feature)?;
    for (self_attn, intra, base) in specific_layers(cfg, m) {
        q = self_attn.forward_cells(g, p, q, q, x, y)?;
        q = intra.forward_cells(g, p, q, value, x, y)?;
        q = ffn(g, p, &base, q)?;
    }
    g.from_cells(q, x, y)
}

/// Mean squared difference between camera and LiDAR invariant features.
pub fn loss_sim<T: Real>(g: &mut Graph<T>, f_ic: Var, f_il: Var) -> Result<Var> {
    let d = g.sub(f_ic, f_il)?;
    let d2 = g.square(d);
    Ok(g.mean(d2))
}

/// Orthogonality penalty between invariant and specific features. With
/// [`DiffForm::Squared`] the per-cell channel inner products are squared,
/// summed over cells and both modalities, and divided by `2 * I * X * Y`.
/// [`DiffForm::Raw`] sums the unsquared products over cells and both
/// modalities and divides by `I * X * Y`.
pub fn loss_diff<T: Real>(
    g: &mut Graph<T>,
    f_ic: Var,
    f_sc: Var,
    f_il: Var,
    f_sl: Var,
    form: DiffForm,
) -> Result<Var> {
    let s = g.shape(f_ic).to_vec();
    if g.shape(f_sc) != s.as_slice() || g.shape(f_il) != s.as_slice() || g.shape(f_sl) != s.as_slice() {
        return Err(Error::Config(format!(
            "loss_diff needs invariant and specific features of equal shape, got {:?}, {:?}, {:?}, {:?}",
            s,
            g.shape(f_sc),
            g.shape(f_il),
            g.shape(f_sl)
        )));
    }
    let numel = T::of(s.iter().product::<usize>() as f64);
    let mut terms = Vec::with_capacity(2);
    for (a, b) in [(f_ic, f_sc), (f_il, f_sl)] {
        let prod = g.mul(a, b)?;
        let dots = g.sum_channels(prod)?;
        let dots = match form {
            DiffForm::Squared => g.square(dots),
            DiffForm::Raw => dots,
        };
        terms.push(g.sum(dots));
    }
    let total = g.add(terms[0], terms[1])?;
    let denom = match form {
        DiffForm::Squared => T::of(2.0) * numel,
        DiffForm::Raw => numel,
    };
    Ok(g.scale(total, T::one() / denom))
}

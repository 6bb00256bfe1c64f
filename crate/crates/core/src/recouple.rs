//! Modality recouple module: cross-modal recouple layers, the three fusion
//! experts, the soft router, weighted fusion, and the routing entropy term.

use crate::decouple::{declare_ffn, ffn, DeformAttnLayer};
use crate::error::{Error, Result};
use crate::model::{Modality, ModelConfig, RouterMode};
use crate::nn::{self, Init};
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};

/// Attention stack of one recouple layer for one modality branch.
#[derive(Clone, Debug)]
pub struct RecoupleLayer {
    pub self_attn: DeformAttnLayer,
    /// Samples the other modality's invariant feature; absent when the
    /// decouple module is disabled.
    pub cross_invariant: Option<DeformAttnLayer>,
    /// Samples the other modality's raw encoder feature.
    pub cross_other: DeformAttnLayer,
    pub ffn_prefix: String,
}

fn branch_prefix(m: Modality) -> &'static str {
    match m {
        Modality::Camera => "rec_cam",
        Modality::Lidar => "rec_lidar",
    }
}

pub fn recouple_layers(cfg: &ModelConfig, m: Modality, with_invariant: bool) -> Vec<RecoupleLayer> {
    let s = cfg.specific_channels;
    let other = cfg.modality_channels(m.other());
    (0..cfg.recouple_layers)
        .map(|l| {
            let base = format!("{}.layer{l}", branch_prefix(m));
            RecoupleLayer {
                self_attn: DeformAttnLayer::new(format!("{base}.self_attn"), s, s, cfg.heads, cfg.points),
                cross_invariant: with_invariant.then(|| {
                    DeformAttnLayer::new(
                        format!("{base}.cross_inv"),
                        s,
                        cfg.invariant_channels,
                        cfg.heads,
                        cfg.points,
                    )
                }),
                cross_other: DeformAttnLayer::new(format!("{base}.cross_other"), s, other, cfg.heads, cfg.points),
                ffn_prefix: base,
            }
        })
        .collect()
}

pub fn declare_recouple(init: &mut Init, cfg: &ModelConfig, with_invariant: bool) -> Result<()> {
    for m in [Modality::Camera, Modality::Lidar] {
        for layer in recouple_layers(cfg, m, with_invariant) {
            layer.self_attn.declare(init)?;
            if let Some(ci) = &layer.cross_invariant {
                ci.declare(init)?;
            }
            layer.cross_other.declare(init)?;
            declare_ffn(init, &layer.ffn_prefix, cfg.specific_channels, cfg.ffn_hidden)?;
        }
    }
    Ok(())
}

/// Inputs to the cross-modal recouple stage, all channel-first.
#[derive(Clone, Copy, Debug)]
pub struct RecoupleInputs {
    /// Starting query path of the camera branch (`[S, X, Y]`).
    pub camera_query: Var,
    pub lidar_query: Var,
    /// Raw encoder outputs `F_c`, `F_l`.
    pub camera_feature: Var,
    pub lidar_feature: Var,
    /// Invariant features `F_ic`, `F_il`, when decoupling is active.
    pub invariant: Option<(Var, Var)>,
}

/// Camera branch: self-attention, cross-attention into `F_il`, cross-attention
/// into `F_l`, feed-forward; the LiDAR branch mirrors it with `F_ic` and
/// `F_c`. Returns the enhanced `[S, X, Y]` camera and LiDAR features.
pub fn cross_recouple<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    inputs: RecoupleInputs,
) -> Result<(Var, Var)> {
    let (x, y) = (cfg.grid_x, cfg.grid_y);
    let with_inv = inputs.invariant.is_some();
    let to_cells = |g: &mut Graph<T>, v: Var| g.to_cells(v);
    let fc = to_cells(g, inputs.camera_feature)?;
    let fl = to_cells(g, inputs.lidar_feature)?;
    let inv = match inputs.invariant {
        Some((ic, il)) => Some((to_cells(g, ic)?, to_cells(g, il)?)),
        None => None,
    };
    let mut out = Vec::with_capacity(2);
    for (m, query) in [
        (Modality::Camera, inputs.camera_query),
        (Modality::Lidar, inputs.lidar_query),
    ] {
        let mut q = g.to_cells(query)?;
        // the camera branch reads LiDAR sources and vice versa
        let (other_feat, other_inv) = match m {
            Modality::Camera => (fl, inv.map(|(_, il)| il)),
            Modality::Lidar => (fc, inv.map(|(ic, _)| ic)),
        };
        for layer in recouple_layers(cfg, m, with_inv) {
            q = layer.self_attn.forward_cells(g, p, q, q, x, y)?;
            if let (Some(att), Some(src)) = (&layer.cross_invariant, other_inv) {
                q = att.forward_cells(g, p, q, src, x, y)?;
            }
            q = layer.cross_other.forward_cells(g, p, q, other_feat, x, y)?;
            q = ffn(g, p, &layer.ffn_prefix, q)?;
        }
        out.push(g.from_cells(q, x, y)?);
    }
    Ok((out[0], out[1]))
}

pub const EXPERT_NAMES: [&str; 3] = ["experts.cam", "experts.lidar", "experts.joint"];

/// `shared_input` gives every expert the concatenated `[F_c, F_l]`.
pub fn declare_experts(init: &mut Init, cfg: &ModelConfig, shared_input: bool) -> Result<()> {
    let (s, f) = (cfg.specific_channels, cfg.fused_channels);
    let inputs = if shared_input { [2 * s; 3] } else { [s, s, 2 * s] };
    for (name, c_in) in EXPERT_NAMES.iter().zip(inputs) {
        init.conv(&format!("{name}.conv1"), f, c_in, 3)?;
        init.conv_plain(&format!("{name}.conv2"), f, f, 1)?;
    }
    Ok(())
}

fn expert<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let h = nn::conv_relu(g, p, &format!("{name}.conv1"), x)?;
    nn::conv(g, p, &format!("{name}.conv2"), h)
}

/// `E_c(F_c)`, `E_l(F_l)`, `E_f([F_c, F_l])`, camera channels first in the
/// concatenation.
pub fn expert_forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    enh_c: Var,
    enh_l: Var,
    shared_input: bool,
) -> Result<[Var; 3]> {
    let joint = g.concat(&[enh_c, enh_l])?;
    let (in_c, in_l) = if shared_input { (joint, joint) } else { (enh_c, enh_l) };
    Ok([
        expert(g, p, EXPERT_NAMES[0], in_c)?,
        expert(g, p, EXPERT_NAMES[1], in_l)?,
        expert(g, p, EXPERT_NAMES[2], joint)?,
    ])
}

pub fn declare_router(init: &mut Init, cfg: &ModelConfig) -> Result<()> {
    init.conv("router.conv1", cfg.router_hidden, 2 * cfg.specific_channels, 3)?;
    init.conv_plain("router.conv2", 3, cfg.router_hidden, 1)
}

/// Two convolutions over `[F_c, F_l]` giving three expert logits, then a
/// softmax over experts: per cell, or once per sample after spatial pooling.
/// Returns `[3, X, Y]` ordered camera, LiDAR, joint.
pub fn router_weights<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    enh_c: Var,
    enh_l: Var,
) -> Result<Var> {
    let (x, y) = (cfg.grid_x, cfg.grid_y);
    let joint = g.concat(&[enh_c, enh_l])?;
    let h = nn::conv_relu(g, p, "router.conv1", joint)?;
    let logits = nn::conv(g, p, "router.conv2", h)?;
    match cfg.router_mode {
        RouterMode::PerCell => softmax_cells(g, logits),
        RouterMode::PerSample => {
            let pooled = g.mean_cells(logits)?;
            let w = g.softmax(pooled)?;
            g.broadcast_cells(w, x, y)
        }
    }
}

/// Softmax over the channel axis of `[k, x, y]` at every cell.
pub fn softmax_cells<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let cells = g.to_cells(logits)?;
    let w = g.softmax(cells)?;
    g.from_cells(w, s[1], s[2])
}

/// Per-cell weighted sum of the three experts; weights `[3, X, Y]` are
/// broadcast over channels.
pub fn fuse<T: Real>(g: &mut Graph<T>, experts: [Var; 3], weights: Var) -> Result<Var> {
    let ws = g.shape(weights).to_vec();
    if ws.len() != 3 || ws[0] != 3 {
        return Err(Error::Config(format!("fuse: weights {ws:?} are not [3, x, y]")));
    }
    let mut acc = None;
    for (e, &expert) in experts.iter().enumerate() {
        let w = g.slice(weights, e, 1)?;
        let term = g.mul_cells(expert, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("three experts"))
}

/// Hard top-1 fusion: each cell takes only its highest-weight expert. The
/// selection is a constant, so no gradient reaches the router through it.
pub fn fuse_top1<T: Real>(g: &mut Graph<T>, experts: [Var; 3], weights: Var) -> Result<Var> {
    let ws = g.shape(weights).to_vec();
    let cells = ws[1] * ws[2];
    let w = g.data(weights);
    let mut mask = vec![T::zero(); 3 * cells];
    for c in 0..cells {
        let mut best = 0;
        for e in 1..3 {
            if w[e * cells + c] > w[best * cells + c] {
                best = e;
            }
        }
        mask[best * cells + c] = T::one();
    }
    let mask = g.constant(Tensor::new(mask, &ws)?);
    fuse(g, experts, mask)
}

/// Mean over cells of `-sum_i W_i ln W_i`.
pub fn loss_entropy<T: Real>(g: &mut Graph<T>, weights: Var) -> Result<Var> {
    let cells = g.to_cells(weights)?;
    g.entropy(cells)
}

/// Plain-array view of router weights for reporting.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertWeights {
    pub camera: Vec<f64>,
    pub lidar: Vec<f64>,
    pub joint: Vec<f64>,
}

impl ExpertWeights {
    pub fn from_graph<T: Real>(g: &Graph<T>, weights: Var) -> Self {
        let d = g.data(weights);
        let cells = d.len() / 3;
        let take = |e: usize| d[e * cells..(e + 1) * cells].iter().map(|v| v.to_f64_lossy()).collect();
        Self {
            camera: take(0),
            lidar: take(1),
            joint: take(2),
        }
    }

    pub fn means(&self) -> [f64; 3] {
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        [m(&self.camera), m(&self.lidar), m(&self.joint)]
    }
}

use crate::detect::{decode_output, Detection};
use crate::error::Result;
use crate::metrics::{self, CkaRow, ReportRow, RobustnessReport};
use crate::model::Model;
use crate::numerics::{Graph, ParamStore, Var};
use crate::par::{self, Parallelism};
use crate::recouple::ExpertWeights;
use crate::scenesim::{
    apply_corruption, CorruptionKind, CorruptionSpec, Item, ModalityRender, Severity, SimConfig, Target,
};

use super::config::EvalConfig;

/// One flattened `[C, X, Y]` feature map per scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureRows {
    pub width: usize,
    pub rows: Vec<f64>,
}

impl FeatureRows {
    fn push_scene(&mut self, data: &[f32]) {
        self.width = data.len();
        self.rows.extend(data.iter().map(|&v| v as f64));
    }

    pub fn rms(&self) -> f64 {
        (self.rows.iter().map(|v| v * v).sum::<f64>() / self.rows.len().max(1) as f64).sqrt()
    }
}

/// Decoupled features pooled over a set of scenes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    pub invariant_camera: FeatureRows,
    pub invariant_lidar: FeatureRows,
    pub specific_camera: FeatureRows,
    pub specific_lidar: FeatureRows,
}

/// Result of running one render through the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub detections: Vec<Detection>,
    pub router: Option<ExpertWeights>,
    /// `(F_ic, F_il, F_sc, F_sl)`, channel-first.
    pub decoupled: Option<[Vec<f32>; 4]>,
}

pub fn infer(model: &Model, params: &ParamStore<f32>, render: &ModalityRender, ecfg: &EvalConfig) -> Result<Inference> {
    let mc = &model.cfg;
    let mut g = Graph::<f32>::new();
    let fwd = model.forward(&mut g, params, &render.camera, &render.lidar)?;
    g.check_finite()?;
    let take = |g: &Graph<f32>, v: Var| g.data(v).to_vec();
    Ok(Inference {
        detections: decode_output(
            &g,
            &fwd.head,
            mc.num_classes,
            mc.grid_x,
            mc.grid_y,
            ecfg.max_dets,
            ecfg.score_floor,
        ),
        router: fwd.router.map(|w| ExpertWeights::from_graph(&g, w)),
        decoupled: fwd.decoupled.map(|d| {
            [
                take(&g, d.invariant_camera),
                take(&g, d.invariant_lidar),
                take(&g, d.specific_camera),
                take(&g, d.specific_lidar),
            ]
        }),
    })
}

/// Aggregate over the validation set under one corruption.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEval {
    pub spec: CorruptionSpec,
    pub map: f64,
    /// Mean camera, LiDAR and joint expert weight over all cells and scenes.
    pub router_mean: Option<[f64; 3]>,
    /// RMS over both invariant feature maps.
    pub invariant_rms: Option<f64>,
    pub features: Option<FeatureSet>,
}

pub fn evaluate_condition(
    model: &Model,
    params: &ParamStore<f32>,
    items: &[Item],
    spec: &CorruptionSpec,
    sim: &SimConfig,
    ecfg: &EvalConfig,
    keep_features: bool,
) -> Result<ConditionEval> {
    let mut dets = Vec::with_capacity(items.len());
    let mut router_sum = [0.0; 3];
    let mut router_seen = false;
    let (mut inv_sq, mut inv_n) = (0.0, 0usize);
    let mut features = FeatureSet::default();
    for item in items {
        let render = if spec.kind == CorruptionKind::None {
            item.render.clone()
        } else {
            apply_corruption(&item.scene, &item.render, spec, sim)?
        };
        let out = infer(model, params, &render, ecfg)?;
        dets.push(out.detections);
        if let Some(w) = out.router {
            router_seen = true;
            for (s, m) in router_sum.iter_mut().zip(w.means()) {
                *s += m;
            }
        }
        if let Some([ic, il, sc, sl]) = out.decoupled {
            for v in ic.iter().chain(&il) {
                inv_sq += (*v as f64) * (*v as f64);
            }
            inv_n += ic.len() + il.len();
            if keep_features {
                features.invariant_camera.push_scene(&ic);
                features.invariant_lidar.push_scene(&il);
                features.specific_camera.push_scene(&sc);
                features.specific_lidar.push_scene(&sl);
            }
        }
    }
    let truths: Vec<_> = items.iter().map(|i| i.scene.clone()).collect();
    let n = items.len().max(1) as f64;
    Ok(ConditionEval {
        spec: *spec,
        map: metrics::map(&dets, &truths, model.cfg.num_classes, &ecfg.ap),
        router_mean: router_seen.then(|| router_sum.map(|s| s / n)),
        invariant_rms: (inv_n > 0).then(|| (inv_sq / inv_n as f64).sqrt()),
        features: (keep_features && inv_n > 0).then_some(features),
    })
}

/// Invariant and specific CKA of the modalities `spec` corrupts, averaged
/// when both are hit.
pub fn cka_row(spec: &CorruptionSpec, clean: &FeatureSet, corrupted: &FeatureSet) -> Result<CkaRow> {
    let pair = |a: &FeatureRows, b: &FeatureRows| metrics::cka(&a.rows, a.width, &b.rows, b.width);
    let mut inv = Vec::new();
    let mut spc = Vec::new();
    if spec.hits_camera() || spec.kind == CorruptionKind::None {
        inv.push(pair(&clean.invariant_camera, &corrupted.invariant_camera)?);
        spc.push(pair(&clean.specific_camera, &corrupted.specific_camera)?);
    }
    if spec.hits_lidar() || spec.kind == CorruptionKind::None {
        inv.push(pair(&clean.invariant_lidar, &corrupted.invariant_lidar)?);
        spc.push(pair(&clean.specific_lidar, &corrupted.specific_lidar)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(CkaRow {
        spec: *spec,
        invariant: mean(&inv),
        specific: mean(&spc),
    })
}

/// Everything the corruption sweep measures.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixOutput {
    pub report: RobustnessReport,
    pub clean: ConditionEval,
    /// Per corruption, in `specs` order, without stored features.
    pub conditions: Vec<ConditionEval>,
}

/// Clean evaluation, then every corruption in `specs` over all of `items`.
/// Cells run in parallel (capped by `BDR_NUM_THREADS`); parameters are only
/// read. With `with_cka`, each cell also gets a clean-versus-corrupted CKA
/// row for models that have decoupled features.
pub fn eval_matrix(
    model: &Model,
    params: &ParamStore<f32>,
    items: &[Item],
    specs: &[CorruptionSpec],
    sim: &SimConfig,
    ecfg: &EvalConfig,
    with_cka: bool,
    mode: Parallelism,
) -> Result<MatrixOutput> {
    model.check_params(params)?;
    for s in specs {
        s.validate()?;
    }
    let mut clean = evaluate_condition(model, params, items, &CorruptionSpec::none(), sim, ecfg, with_cka)?;
    let clean_features = clean.features.take();
    let results = par::with_thread_cap(|| {
        par::map(mode, specs, |_, spec| -> Result<(ConditionEval, Option<CkaRow>)> {
            let keep = clean_features.is_some();
            let mut cond = evaluate_condition(model, params, items, spec, sim, ecfg, keep)?;
            let row = match (&clean_features, cond.features.take()) {
                (Some(c), Some(f)) => Some(cka_row(spec, c, &f)?),
                _ => None,
            };
            Ok((cond, row))
        })
    });
    let mut conditions = Vec::with_capacity(specs.len());
    let mut cka_rows = Vec::new();
    for r in results {
        let (cond, row) = r?;
        cka_rows.extend(row);
        conditions.push(cond);
    }
    let rows = conditions
        .iter()
        .map(|c| ReportRow {
            spec: c.spec,
            map: c.map,
        })
        .collect();
    Ok(MatrixOutput {
        report: RobustnessReport::new(clean.map, rows, cka_rows)?,
        clean,
        conditions,
    })
}

/// The fixed corruption sweep: sensor-reduction kinds on their own modality,
/// weather and blur on each modality alone, LiDAR crosstalk and camera low
/// light, all at light and heavy severity, plus fog, snow and motion blur on
/// both modalities at heavy severity.
pub fn standard_matrix() -> Vec<CorruptionSpec> {
    use CorruptionKind::*;
    let mut out = Vec::new();
    let both = [Severity::Light, Severity::Heavy];
    let single: [(CorruptionKind, &[Target]); 8] = [
        (FovReduce, &[Target::Lidar]),
        (BeamReduce, &[Target::Lidar]),
        (ViewDrop, &[Target::Camera]),
        (Fog, &[Target::Lidar, Target::Camera]),
        (Snow, &[Target::Lidar, Target::Camera]),
        (MotionBlur, &[Target::Lidar, Target::Camera]),
        (Crosstalk, &[Target::Lidar]),
        (LowLight, &[Target::Camera]),
    ];
    for (kind, targets) in single {
        for &t in targets {
            for s in both {
                out.push(CorruptionSpec::new(kind, t, s));
            }
        }
    }
    for kind in [Fog, Snow, MotionBlur] {
        out.push(CorruptionSpec::new(kind, Target::Both, Severity::Heavy));
    }
    out.sort();
    out
}

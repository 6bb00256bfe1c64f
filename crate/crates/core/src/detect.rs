//! Dense centre-based detection head, target assignment, detection loss,
//! decoding, and the auxiliary head on invariant features.

use crate::error::Result;
use crate::model::AuxInput;
use crate::nn::{self, Init};
use crate::numerics::{kernels, Graph, ParamStore, Real, Var};
use crate::scenesim::Scene;

/// Focal loss exponents (penalty-reduced variant).
pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
/// Initial heatmap bias, a prior foreground probability of about 0.1.
pub const HEATMAP_PRIOR_BIAS: f64 = -2.19;

/// Graph handles of one head evaluation.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[K, X, Y]` class logits.
    pub heatmap: Var,
    /// `[2, X, Y]` sub-cell centre offsets.
    pub offset: Var,
    /// `[2, X, Y]` log length and log width.
    pub size_log: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub score: f64,
}

/// Dense regression targets for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap {
    pub num_classes: usize,
    pub grid_x: usize,
    pub grid_y: usize,
    /// `[K, X, Y]`, peak exactly 1 at each object's centre cell.
    pub heatmap: Vec<f64>,
    /// `[2, X, Y]`, set at centre cells only.
    pub offset: Vec<f64>,
    /// `[2, X, Y]`, log sizes at centre cells only.
    pub size_log: Vec<f64>,
    /// `[X, Y]`, one at centre cells.
    pub mask: Vec<f64>,
    pub num_objects: usize,
}

pub fn declare_head(init: &mut Init, prefix: &str, c_in: usize, hidden: usize, num_classes: usize) -> Result<()> {
    init.conv(&format!("{prefix}.shared1"), hidden, c_in, 3)?;
    init.conv(&format!("{prefix}.shared2"), hidden, hidden, 3)?;
    init.conv_plain(&format!("{prefix}.heatmap"), num_classes, hidden, 1)?;
    if let Some(b) = init.store.get_mut(&format!("{prefix}.heatmap.bias")) {
        b.data_mut().iter_mut().for_each(|v| *v = HEATMAP_PRIOR_BIAS);
    }
    init.conv_plain(&format!("{prefix}.offset"), 2, hidden, 1)?;
    init.conv_plain(&format!("{prefix}.size"), 2, hidden, 1)
}

/// Two shared 3x3 convolutions, then 1x1 branches for heatmap, offset, size.
pub fn head_forward<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, prefix: &str, features: Var) -> Result<HeadOutput> {
    let h = nn::conv_relu(g, p, &format!("{prefix}.shared1"), features)?;
    let h = nn::conv_relu(g, p, &format!("{prefix}.shared2"), h)?;
    Ok(HeadOutput {
        heatmap: nn::conv(g, p, &format!("{prefix}.heatmap"), h)?,
        offset: nn::conv(g, p, &format!("{prefix}.offset"), h)?,
        size_log: nn::conv(g, p, &format!("{prefix}.size"), h)?,
    })
}

/// Gaussian spread for an object footprint.
pub fn gaussian_sigma(size: [f64; 2]) -> f64 {
    (size[0].min(size[1]) / 3.0).max(1.0)
}

/// Centre cell of a continuous position (cells are centred on integers).
pub fn center_cell(center: [f64; 2], grid_x: usize, grid_y: usize) -> (usize, usize) {
    let i = (center[0].round().max(0.0) as usize).min(grid_x - 1);
    let j = (center[1].round().max(0.0) as usize).min(grid_y - 1);
    (i, j)
}

pub fn assign_targets(scene: &Scene, num_classes: usize, grid_x: usize, grid_y: usize) -> TargetMap {
    let cells = grid_x * grid_y;
    let mut t = TargetMap {
        num_classes,
        grid_x,
        grid_y,
        heatmap: vec![0.0; num_classes * cells],
        offset: vec![0.0; 2 * cells],
        size_log: vec![0.0; 2 * cells],
        mask: vec![0.0; cells],
        num_objects: scene.objects.len(),
    };
    for obj in &scene.objects {
        let (ci, cj) = center_cell(obj.center, grid_x, grid_y);
        let sigma = gaussian_sigma(obj.size);
        let heat = &mut t.heatmap[obj.class * cells..(obj.class + 1) * cells];
        for i in 0..grid_x {
            for j in 0..grid_y {
                let d2 = (i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                let cell = &mut heat[i * grid_y + j];
                if v > *cell {
                    *cell = v;
                }
            }
        }
        let c = ci * grid_y + cj;
        t.mask[c] = 1.0;
        t.offset[c] = obj.center[0] - ci as f64;
        t.offset[cells + c] = obj.center[1] - cj as f64;
        t.size_log[c] = obj.size[0].ln();
        t.size_log[cells + c] = obj.size[1].ln();
    }
    t
}

/// Individual terms of the detection loss.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub total: Var,
    pub focal: Var,
    pub offset: Var,
    pub size: Var,
}

/// Focal heatmap loss plus L1 offset and log-size losses at centre cells,
/// each normalised by the object count (at least one), unit weights.
pub fn detection_loss<T: Real>(g: &mut Graph<T>, out: &HeadOutput, tgt: &TargetMap) -> Result<DetectionLoss> {
    let norm = T::one() / T::of(tgt.num_objects.max(1) as f64);
    let conv = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
    let mask = conv(&tgt.mask);
    let focal = g.focal_loss(out.heatmap, &conv(&tgt.heatmap), norm, FOCAL_ALPHA, FOCAL_BETA)?;
    let offset = g.masked_l1(out.offset, &conv(&tgt.offset), &mask, norm)?;
    let size = g.masked_l1(out.size_log, &conv(&tgt.size_log), &mask, norm)?;
    let total = g.add(focal, offset)?;
    let total = g.add(total, size)?;
    Ok(DetectionLoss {
        total,
        focal,
        offset,
        size,
    })
}

/// Local-maximum decoding of dense head outputs given as plain arrays
/// (`heatmap` logits `[K, X, Y]`, `offset` and `size_log` `[2, X, Y]`).
pub fn decode(
    heatmap: &[f64],
    offset: &[f64],
    size_log: &[f64],
    num_classes: usize,
    grid_x: usize,
    grid_y: usize,
    max_dets: usize,
    score_floor: f64,
) -> Vec<Detection> {
    let cells = grid_x * grid_y;
    let score = |k: usize, i: usize, j: usize| kernels::sigmoid(heatmap[k * cells + i * grid_y + j]);
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for k in 0..num_classes {
        for i in 0..grid_x {
            for j in 0..grid_y {
                let s = score(k, i, j);
                if s <= score_floor {
                    continue;
                }
                let mut peak = true;
                'nb: for a in i.saturating_sub(1)..=(i + 1).min(grid_x - 1) {
                    for b in j.saturating_sub(1)..=(j + 1).min(grid_y - 1) {
                        if (a, b) != (i, j) && score(k, a, b) > s {
                            peak = false;
                            break 'nb;
                        }
                    }
                }
                if peak {
                    cands.push((s, k, i * grid_y + j));
                }
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cands
        .into_iter()
        .take(max_dets)
        .map(|(s, k, c)| {
            let (i, j) = (c / grid_y, c % grid_y);
            Detection {
                class: k,
                center: [i as f64 + offset[c], j as f64 + offset[cells + c]],
                size: [size_log[c].exp(), size_log[cells + c].exp()],
                score: s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON),
            }
        })
        .collect()
}

/// Decodes a head evaluated on a graph.
pub fn decode_output<T: Real>(
    g: &Graph<T>,
    out: &HeadOutput,
    num_classes: usize,
    grid_x: usize,
    grid_y: usize,
    max_dets: usize,
    score_floor: f64,
) -> Vec<Detection> {
    let f = |v: Var| g.data(v).iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>();
    decode(
        &f(out.heatmap),
        &f(out.offset),
        &f(out.size_log),
        num_classes,
        grid_x,
        grid_y,
        max_dets,
        score_floor,
    )
}

pub const AUX_HEAD: &str = "aux_head";

/// One shared auxiliary head applied to `F_ic` and to `F_il` separately,
/// losses averaged; or, with [`AuxInput::Combined`], applied once to their
/// mean.
pub fn aux_invariant_loss<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    f_ic: Var,
    f_il: Var,
    tgt: &TargetMap,
    mode: AuxInput,
) -> Result<Var> {
    match mode {
        AuxInput::Separate => {
            let oc = head_forward(g, p, AUX_HEAD, f_ic)?;
            let lc = detection_loss(g, &oc, tgt)?.total;
            let ol = head_forward(g, p, AUX_HEAD, f_il)?;
            let ll = detection_loss(g, &ol, tgt)?.total;
            let s = g.add(lc, ll)?;
            Ok(g.scale(s, T::of(0.5)))
        }
        AuxInput::Combined => {
            let s = g.add(f_ic, f_il)?;
            let m = g.scale(s, T::of(0.5));
            let o = head_forward(g, p, AUX_HEAD, m)?;
            Ok(detection_loss(g, &o, tgt)?.total)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::scenesim::{gen_scene, SceneObject, SimConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const K: usize = 3;
    const X: usize = 7;
    const Y: usize = 6;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.gen_range(-bound..bound)).collect(), shape).unwrap()
    }

    fn head_params(seed: u64) -> ParamStore<f64> {
        let mut init = Init::new(seed);
        declare_head(&mut init, "head", 4, 5, K).unwrap();
        declare_head(&mut init, AUX_HEAD, 4, 5, K).unwrap();
        init.finish()
    }

    fn obj(class: usize, center: [f64; 2], size: [f64; 2]) -> SceneObject {
        SceneObject {
            class,
            center,
            size,
            geometry: vec![1.0],
            appearance: vec![1.0],
        }
    }

    fn scene(objects: Vec<SceneObject>) -> Scene {
        Scene {
            objects,
            ego: [3.0, 2.5],
            seed: 0,
        }
    }

    #[test]
    fn head_is_zero_preserving_and_stable() {
        let mut p = head_params(0);
        for id in 0..p.len() {
            if p.name(id).ends_with(".bias") {
                p.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[4, X, Y]));
        let o = head_forward(&mut g, &p, "head", f).unwrap();
        for v in [o.heatmap, o.offset, o.size_log] {
            assert!(g.data(v).iter().all(|&x| x == 0.0));
        }
        assert_eq!(g.shape(o.heatmap), [K, X, Y]);
        assert_eq!(g.shape(o.offset), [2, X, Y]);

        let p = head_params(0);
        let feat = random_tensor(&mut ChaCha8Rng::seed_from_u64(0), &[4, X, Y], 1.0);
        let run = || {
            let mut g = Graph::new();
            let f = g.constant(feat.clone());
            let o = head_forward(&mut g, &p, "head", f).unwrap();
            g.data(o.heatmap).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let p = head_params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feat = random_tensor(&mut rng, &[4, X, Y], 1.0);
        let tgt = assign_targets(&scene(vec![obj(1, [2.3, 3.6], [2.0, 3.0]), obj(0, [5.0, 1.2], [1.5, 1.5])]), K, X, Y);
        let f = |g: &mut Graph<f64>, p: &ParamStore<f64>| {
            let x = g.constant(feat.clone());
            let o = head_forward(g, p, "head", x)?;
            Ok(detection_loss(g, &o, &tgt)?.total)
        };
        let coords: Vec<_> = crate::numerics::sample_coords(&p, 200, 0)
            .into_iter()
            .filter(|&(id, _)| p.name(id).starts_with("head."))
            .collect();
        let report = crate::numerics::grad_check(f, &p, &coords, 1e-6).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn empty_scene_has_empty_targets() {
        let t = assign_targets(&scene(vec![]), K, X, Y);
        assert!(t.heatmap.iter().chain(&t.offset).chain(&t.size_log).chain(&t.mask).all(|&v| v == 0.0));
        assert_eq!(t.num_objects, 0);
    }

    #[test]
    fn centred_object_peaks_at_one_with_zero_offset() {
        let t = assign_targets(&scene(vec![obj(2, [4.0, 1.0], [3.0, 2.0])]), K, X, Y);
        let c = 4 * Y + 1;
        assert_eq!(t.heatmap[2 * X * Y + c], 1.0);
        assert_eq!((t.offset[c], t.offset[X * Y + c]), (0.0, 0.0));
        assert_eq!(t.mask.iter().sum::<f64>(), 1.0);
        assert_eq!(t.mask[c], 1.0);
        assert_eq!(t.size_log[c], 3f64.ln());
    }

    #[test]
    fn gaussian_matches_formula() {
        let objects = vec![obj(0, [1.4, 4.2], [4.5, 6.0]), obj(0, [5.6, 1.3], [2.0, 1.2]), obj(1, [3.1, 2.9], [3.3, 3.3])];
        let t = assign_targets(&scene(objects.clone()), K, X, Y);
        for k in 0..K {
            for i in 0..X {
                for j in 0..Y {
                    let want = objects
                        .iter()
                        .filter(|o| o.class == k)
                        .map(|o| {
                            let (ci, cj) = (o.center[0].round(), o.center[1].round());
                            let s = (o.size[0].min(o.size[1]) / 3.0).max(1.0);
                            let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                            (-d2 / (2.0 * s * s)).exp()
                        })
                        .fold(0.0, f64::max);
                    assert!((t.heatmap[(k * X + i) * Y + j] - want).abs() <= 1e-12);
                }
            }
        }
    }

    struct Pred {
        heat: Tensor<f64>,
        off: Tensor<f64>,
        size: Tensor<f64>,
    }

    fn loss_of(pred: &Pred, tgt: &TargetMap) -> [f64; 4] {
        let mut g = Graph::new();
        let out = HeadOutput {
            heatmap: g.constant(pred.heat.clone()),
            offset: g.constant(pred.off.clone()),
            size_log: g.constant(pred.size.clone()),
        };
        let l = detection_loss(&mut g, &out, tgt).unwrap();
        [l.total, l.focal, l.offset, l.size].map(|v| g.scalar(v))
    }

    fn loss_oracle(pred: &Pred, tgt: &TargetMap) -> f64 {
        let n = tgt.num_objects.max(1) as f64;
        let mut focal = 0.0;
        for (&z, &t) in pred.heat.data().iter().zip(&tgt.heatmap) {
            let p = 1.0 / (1.0 + (-z).exp());
            focal -= if t == 1.0 {
                (1.0 - p).powi(2) * p.ln()
            } else {
                (1.0 - t).powi(4) * p.powi(2) * (1.0 - p).ln()
            };
        }
        let cells = X * Y;
        let mut reg = 0.0;
        for c in 0..cells {
            for a in 0..2 {
                let k = a * cells + c;
                reg += tgt.mask[c] * ((pred.off.data()[k] - tgt.offset[k]).abs() + (pred.size.data()[k] - tgt.size_log[k]).abs());
            }
        }
        (focal + reg) / n
    }

    #[test]
    fn loss_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = SimConfig { grid_x: X, grid_y: Y, min_objects: 1, max_objects: 3, ..SimConfig::default() };
        for seed in 0..10 {
            let tgt = assign_targets(&gen_scene(seed, &cfg), K, X, Y);
            let pred = Pred {
                heat: random_tensor(&mut rng, &[K, X, Y], 4.0),
                off: random_tensor(&mut rng, &[2, X, Y], 1.0),
                size: random_tensor(&mut rng, &[2, X, Y], 1.0),
            };
            let got = loss_of(&pred, &tgt);
            assert!((got[0] - loss_oracle(&pred, &tgt)).abs() <= 1e-10, "seed {seed}");
            assert!(got.iter().all(|&v| v >= 0.0));
        }
    }

    fn ideal(tgt: &TargetMap, logit: f64) -> Pred {
        let cells = X * Y;
        let mut heat = vec![-logit; K * cells];
        for (k, v) in heat.iter_mut().enumerate() {
            if tgt.heatmap[k] == 1.0 && tgt.mask[k % cells] == 1.0 {
                *v = logit;
            }
        }
        Pred {
            heat: Tensor::new(heat, &[K, X, Y]).unwrap(),
            off: Tensor::new(tgt.offset.clone(), &[2, X, Y]).unwrap(),
            size: Tensor::new(tgt.size_log.clone(), &[2, X, Y]).unwrap(),
        }
    }

    #[test]
    fn loss_vanishes_along_the_saturation_path() {
        let tgt = assign_targets(&scene(vec![obj(0, [1.2, 1.4], [2.0, 2.0]), obj(2, [5.4, 4.1], [3.0, 2.2])]), K, X, Y);
        let mut last = f64::INFINITY;
        for step in 1..=20 {
            let l = loss_of(&ideal(&tgt, step as f64), &tgt)[0];
            assert!(l < last, "step {step}: {l} !< {last}");
            last = l;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn empty_scene_with_low_logits_costs_nothing() {
        let tgt = assign_targets(&scene(vec![]), K, X, Y);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = Pred {
            heat: Tensor::full(&[K, X, Y], -20.0),
            off: random_tensor(&mut rng, &[2, X, Y], 1.0),
            size: random_tensor(&mut rng, &[2, X, Y], 1.0),
        };
        let [_, focal, off, size] = loss_of(&pred, &tgt);
        assert!(focal < 1e-12);
        assert_eq!((off, size), (0.0, 0.0));
    }

    fn run_decode(heat: &[f64], floor: f64) -> Vec<Detection> {
        let zeros = vec![0.0; 2 * X * Y];
        decode(heat, &zeros, &zeros, K, X, Y, 1000, floor)
    }

    #[test]
    fn decode_trivial_cases() {
        assert!(run_decode(&vec![0.0; K * X * Y], 0.5).is_empty());
        let mut heat = vec![-8.0; K * X * Y];
        heat[(X + 3) * Y + 2] = 6.0;
        let d = run_decode(&heat, 0.1);
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].class, d[0].center), (1, [3.0, 2.0]));
        assert!(d[0].score > 0.0 && d[0].score < 1.0);
    }

    #[test]
    fn decode_matches_brute_force_peaks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            // coarse values make ties common
            let heat: Vec<f64> = (0..K * X * Y).map(|_| rng.gen_range(-4..=4) as f64).collect();
            let floor = 0.3;
            let got: Vec<(usize, usize, usize)> = run_decode(&heat, floor)
                .iter()
                .map(|d| (d.class, d.center[0] as usize, d.center[1] as usize))
                .collect();
            let mut want = Vec::new();
            for k in 0..K {
                for i in 0..X as i64 {
                    for j in 0..Y as i64 {
                        let at = |a: i64, b: i64| heat[(k * X + a as usize) * Y + b as usize];
                        let v = at(i, j);
                        if 1.0 / (1.0 + (-v).exp()) <= floor {
                            continue;
                        }
                        let mut peak = true;
                        for a in i - 1..=i + 1 {
                            for b in j - 1..=j + 1 {
                                if a >= 0 && b >= 0 && a < X as i64 && b < Y as i64 && at(a, b) > v {
                                    peak = false;
                                }
                            }
                        }
                        if peak {
                            want.push((k, i as usize, j as usize));
                        }
                    }
                }
            }
            let mut got_sorted = got.clone();
            got_sorted.sort();
            want.sort();
            assert_eq!(got_sorted, want);
        }
    }

    #[test]
    fn targets_round_trip_through_decode() {
        let cfg = SimConfig::default();
        for seed in 0..50 {
            let s = gen_scene(seed, &cfg);
            let (x, y) = (cfg.grid_x, cfg.grid_y);
            let tgt = assign_targets(&s, K, x, y);
            let cells = x * y;
            let heat: Vec<f64> = (0..K * cells)
                .map(|k| if tgt.heatmap[k] == 1.0 && tgt.mask[k % cells] == 1.0 { 10.0 } else { -10.0 })
                .collect();
            let dets = decode(&heat, &tgt.offset, &tgt.size_log, K, x, y, 100, 0.5);
            assert_eq!(dets.len(), s.objects.len());
            for o in &s.objects {
                let d = dets
                    .iter()
                    .find(|d| (d.center[0] - o.center[0]).hypot(d.center[1] - o.center[1]) < 0.01)
                    .expect("object decoded");
                assert_eq!(d.class, o.class);
                assert!((d.size[0] - o.size[0]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn aux_loss_uses_only_the_aux_head() {
        let p = head_params(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tgt = assign_targets(&scene(vec![obj(1, [3.3, 2.2], [2.0, 2.0])]), K, X, Y);
        let fi = random_tensor(&mut rng, &[4, X, Y], 1.0);

        let mut g = Graph::new();
        let (a, b) = (g.variable(fi.clone()), g.variable(fi.clone()));
        let l = aux_invariant_loss(&mut g, &p, a, b, &tgt, AuxInput::Separate).unwrap();
        let value = g.scalar(l);
        g.backward(l).unwrap();
        assert!(g.grad(a).unwrap().iter().any(|&v| v != 0.0));
        assert_eq!(g.grad(a), g.grad(b));
        assert!(g.bound_params().iter().all(|n| n.starts_with(AUX_HEAD)));
        assert!(g.param_grads(&p).get(p.id("head.shared1.weight").unwrap()).iter().all(|&v| v == 0.0));

        // equal inputs: the average equals either sub-loss
        let mut g = Graph::new();
        let x = g.constant(fi.clone());
        let o = head_forward(&mut g, &p, AUX_HEAD, x).unwrap();
        let single = detection_loss(&mut g, &o, &tgt).unwrap().total;
        assert!((g.scalar(single) - value).abs() < 1e-14);

        // zero features against the explicit composition
        let zero = Tensor::zeros(&[4, X, Y]);
        let mut g = Graph::new();
        let (a, b) = (g.constant(zero.clone()), g.constant(zero.clone()));
        let l = aux_invariant_loss(&mut g, &p, a, b, &tgt, AuxInput::Combined).unwrap();
        let mut h = Graph::new();
        let z = h.constant(zero);
        let o = head_forward(&mut h, &p, AUX_HEAD, z).unwrap();
        let c = detection_loss(&mut h, &o, &tgt).unwrap().total;
        assert_eq!(g.scalar(l), h.scalar(c));
    }
}

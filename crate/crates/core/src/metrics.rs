//! Detection quality (AP, mAP), robustness aggregation (mRR) and linear CKA.

use serde::{Deserialize, Serialize};

use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::scenesim::{CorruptionSpec, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct APConfig {
    /// Centre-distance thresholds in grid cells.
    pub thresholds: Vec<f64>,
}

impl Default for APConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
        }
    }
}

impl APConfig {
    pub fn validate(&self) -> Result<()> {
        let sorted = self.thresholds.windows(2).all(|w| w[0] < w[1]);
        if self.thresholds.is_empty() || !sorted || self.thresholds.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Config(format!(
                "AP thresholds must be positive and strictly increasing, got {:?}",
                self.thresholds
            )));
        }
        Ok(())
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Greedy centre-distance matching over detections pooled across scenes and
/// sorted by descending score; area under the all-points interpolated
/// precision/recall curve. Zero when the class has no ground truth.
pub fn average_precision(dets: &[Vec<Detection>], truths: &[Scene], class: usize, threshold: f64) -> f64 {
    let total: usize = truths
        .iter()
        .map(|s| s.objects.iter().filter(|o| o.class == class).count())
        .sum();
    if total == 0 {
        return 0.0;
    }
    let mut pool: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(s, d)| d.iter().filter(|d| d.class == class).map(move |d| (s, d)))
        .collect();
    pool.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = truths.iter().map(|s| vec![false; s.objects.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(pool.len());
    for (k, (s, d)) in pool.iter().enumerate() {
        let best = truths
            .get(*s)
            .into_iter()
            .flat_map(|sc| sc.objects.iter().enumerate())
            .filter(|(i, o)| o.class == class && !used[*s][*i])
            .map(|(i, o)| (i, dist(o.center, d.center)))
            .filter(|&(_, r)| r <= threshold)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = best {
            used[*s][i] = true;
            tp += 1;
        }
        curve.push((tp as f64 / total as f64, tp as f64 / (k + 1) as f64));
    }
    // precision envelope from the right
    let mut ap = 0.0;
    let mut env = 0.0f64;
    let mut prev_recall = vec![0.0; curve.len()];
    for k in 1..curve.len() {
        prev_recall[k] = curve[k - 1].0;
    }
    for k in (0..curve.len()).rev() {
        env = env.max(curve[k].1);
        ap += (curve[k].0 - prev_recall[k]) * env;
    }
    ap
}

/// Mean AP over thresholds and over the classes present in `truths`.
pub fn map(dets: &[Vec<Detection>], truths: &[Scene], num_classes: usize, cfg: &APConfig) -> f64 {
    let present: Vec<usize> = (0..num_classes)
        .filter(|&k| truths.iter().any(|s| s.objects.iter().any(|o| o.class == k)))
        .collect();
    if present.is_empty() || cfg.thresholds.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &k in &present {
        for &t in &cfg.thresholds {
            sum += average_precision(dets, truths, k, t);
        }
    }
    sum / (present.len() * cfg.thresholds.len()) as f64
}

/// Mean resilience rate, as a percentage.
pub fn mrr(clean: f64, corrupted: &[f64]) -> Result<f64> {
    if !(clean > 0.0) {
        return Err(Error::UndefinedMetric(format!("mRR with clean mAP {clean}")));
    }
    if corrupted.is_empty() {
        return Err(Error::UndefinedMetric("mRR over an empty corruption list".into()));
    }
    Ok(100.0 * corrupted.iter().map(|m| m / clean).sum::<f64>() / corrupted.len() as f64)
}

fn centered(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    x.iter().enumerate().map(|(i, v)| v - mean[i % d]).collect()
}

/// `X^T Y` for row-major `x` (`n x dx`) and `y` (`n x dy`), as `dx x dy`.
fn cross_cols(x: &[f64], dx: usize, y: &[f64], dy: usize) -> Vec<f64> {
    let mut out = vec![0.0; dx * dy];
    for (rx, ry) in x.chunks_exact(dx).zip(y.chunks_exact(dy)) {
        for (i, &a) in rx.iter().enumerate() {
            for (o, &b) in out[i * dy..(i + 1) * dy].iter_mut().zip(ry) {
                *o += a * b;
            }
        }
    }
    out
}

/// `X X^T` for row-major `x` (`n x d`).
fn sample_gram(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = x[i * d..(i + 1) * d].iter().zip(&x[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

/// Linear CKA between row-aligned samples `a` (`n x da`) and `b` (`n x db`).
/// Wide inputs go through the `n x n` sample Gram matrices, narrow ones
/// through the feature-space products; both give the same value.
pub fn cka(a: &[f64], da: usize, b: &[f64], db: usize) -> Result<f64> {
    if da == 0 || db == 0 || !a.len().is_multiple_of(da) || !b.len().is_multiple_of(db) || a.len() / da != b.len() / db {
        return Err(Error::Config(format!(
            "cka: {} values of width {da} and {} values of width {db} are not row-aligned",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() / da;
    if n < 2 {
        return Err(Error::UndefinedMetric("cka needs at least two samples".into()));
    }
    let (ac, bc) = (centered(a, n, da), centered(b, n, db));
    let sq = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
    let (num, na, nb) = if n * n <= da * db {
        let (ka, kb) = (sample_gram(&ac, n, da), sample_gram(&bc, n, db));
        (dot(&ka, &kb), sq(&ka).sqrt(), sq(&kb).sqrt())
    } else {
        (
            sq(&cross_cols(&bc, db, &ac, da)),
            sq(&cross_cols(&ac, da, &ac, da)).sqrt(),
            sq(&cross_cols(&bc, db, &bc, db)).sqrt(),
        )
    };
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedMetric("cka of a zero-variance feature set".into()));
    }
    Ok((num / (na * nb)).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportRow {
    pub spec: CorruptionSpec,
    pub map: f64,
}

/// Clean-versus-corrupted similarity of invariant and specific features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CkaRow {
    pub spec: CorruptionSpec,
    pub invariant: f64,
    /// Specific features of the corrupted modality (the mean over both
    /// modalities when both are hit).
    pub specific: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RobustnessReport {
    pub clean_map: f64,
    pub rows: Vec<ReportRow>,
    /// Percentage.
    pub mrr: f64,
    pub cka_rows: Vec<CkaRow>,
}

impl RobustnessReport {
    /// Builds a report with rows sorted and mRR computed from them. An empty
    /// corruption list yields an mRR of 100.
    pub fn new(clean_map: f64, mut rows: Vec<ReportRow>, mut cka_rows: Vec<CkaRow>) -> Result<Self> {
        rows.sort_by_key(|a| a.spec);
        cka_rows.sort_by_key(|a| a.spec);
        let maps: Vec<f64> = rows.iter().map(|r| r.map).collect();
        let mrr = if maps.is_empty() { 100.0 } else { mrr(clean_map, &maps)? };
        Ok(Self {
            clean_map,
            rows,
            mrr,
            cka_rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesim::SceneObject;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obj(class: usize, x: f64, y: f64) -> SceneObject {
        SceneObject {
            class,
            center: [x, y],
            size: [2.0, 2.0],
            geometry: vec![],
            appearance: vec![],
        }
    }

    fn scene(objects: Vec<SceneObject>) -> Scene {
        Scene {
            objects,
            ego: [0.0, 0.0],
            seed: 0,
        }
    }

    fn det(class: usize, x: f64, y: f64, score: f64) -> Detection {
        Detection {
            class,
            center: [x, y],
            size: [2.0, 2.0],
            score,
        }
    }

    /// Exhaustive oracle: interpolated precision at each distinct recall
    /// level, summed as a step function over recall gains.
    fn ap_oracle(flags: &[bool], total: usize) -> f64 {
        let mut points = Vec::new();
        let mut tp = 0;
        for (k, &f) in flags.iter().enumerate() {
            tp += f as usize;
            points.push((tp as f64 / total as f64, tp as f64 / (k + 1) as f64));
        }
        let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
        levels.dedup();
        let mut ap = 0.0;
        let mut last = 0.0;
        for r in levels {
            let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            ap += (r - last) * p;
            last = r;
        }
        ap
    }

    #[test]
    fn exact_detections_give_unit_ap() {
        let truths = vec![scene(vec![obj(0, 3.0, 4.0), obj(0, 10.0, 10.0)])];
        let dets = vec![vec![det(0, 3.0, 4.0, 0.9), det(0, 10.0, 10.0, 0.8)]];
        assert_eq!(average_precision(&dets, &truths, 0, 0.5), 1.0);
        assert_eq!(map(&dets, &truths, 1, &APConfig::default()), 1.0);
    }

    #[test]
    fn no_detections_give_zero() {
        let truths = vec![scene(vec![obj(0, 3.0, 4.0)])];
        assert_eq!(average_precision(&[vec![]], &truths, 0, 1.0), 0.0);
        assert_eq!(map(&[vec![]], &truths, 3, &APConfig::default()), 0.0);
    }

    #[test]
    fn crafted_case_matches_oracle() {
        let truths = vec![scene(vec![obj(1, 2.0, 2.0), obj(1, 8.0, 8.0)]), scene(vec![obj(1, 5.0, 5.0)])];
        // scores: 0.9 hit, 0.8 miss (too far), 0.7 hit, 0.6 duplicate of first truth
        let dets = vec![
            vec![det(1, 2.1, 2.0, 0.9), det(1, 20.0, 20.0, 0.8), det(1, 2.0, 2.2, 0.6)],
            vec![det(1, 5.0, 5.3, 0.7)],
        ];
        let ap = average_precision(&dets, &truths, 1, 1.0);
        let want = ap_oracle(&[true, false, true, false], 3);
        assert!((ap - want).abs() < 1e-12, "{ap} vs {want}");
        assert!((want - (1.0 / 3.0 + 1.0 / 3.0 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn removing_false_positive_never_lowers_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let truths = vec![scene((0..4).map(|_| obj(0, rng.gen_range(0.0..16.0), rng.gen_range(0.0..16.0))).collect())];
            let mut dets: Vec<Detection> = truths[0]
                .objects
                .iter()
                .map(|o| det(0, o.center[0] + rng.gen_range(-0.3..0.3), o.center[1], rng.gen_range(0.0..1.0)))
                .collect();
            dets.push(det(0, 100.0, 100.0, rng.gen_range(0.0..1.0)));
            let with = average_precision(&[dets.clone()], &truths, 0, 1.0);
            dets.pop();
            let without = average_precision(&[dets], &truths, 0, 1.0);
            assert!(without >= with - 1e-15);
        }
    }

    #[test]
    fn map_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truths: Vec<Scene> = (0..4)
            .map(|_| {
                scene(
                    (0..3)
                        .map(|_| obj(rng.gen_range(0..3), rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)))
                        .collect(),
                )
            })
            .collect();
        let dets: Vec<Vec<Detection>> = truths
            .iter()
            .map(|s| {
                s.objects
                    .iter()
                    .map(|o| det(o.class, o.center[0] + rng.gen_range(-2.0..2.0), o.center[1], rng.gen_range(0.0..1.0)))
                    .collect()
            })
            .collect();
        let cfg = APConfig::default();
        let mut sum = 0.0;
        let mut n = 0;
        for k in 0..3 {
            if truths.iter().any(|s| s.objects.iter().any(|o| o.class == k)) {
                for &t in &cfg.thresholds {
                    sum += average_precision(&dets, &truths, k, t);
                    n += 1;
                }
            }
        }
        assert!((map(&dets, &truths, 3, &cfg) - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn mrr_values() {
        assert!((mrr(0.4, &[0.4, 0.4]).unwrap() - 100.0).abs() < 1e-12);
        assert!(matches!(mrr(0.0, &[0.1]), Err(Error::UndefinedMetric(_))));
        let a = mrr(0.5, &[0.1, 0.3]).unwrap();
        let b = mrr(1.5, &[0.3, 0.9]).unwrap();
        assert!((a - b).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut s = 0.0;
        for v in &vals {
            s += v / 0.8;
        }
        assert!((mrr(0.8, &vals).unwrap() - 100.0 * s / 9.0).abs() < 1e-12);
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
        (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn cka_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d) = (200, 4);
        let a = random_matrix(&mut rng, n, d);
        let b = random_matrix(&mut rng, n, 3);
        assert!((cka(&a, d, &a, d).unwrap() - 1.0).abs() < 1e-12);
        // rotate the first two columns
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let mut rot = a.clone();
        for r in 0..n {
            let (x, y) = (a[r * d], a[r * d + 1]);
            rot[r * d] = c * x - s * y;
            rot[r * d + 1] = s * x + c * y;
        }
        assert!((cka(&a, d, &rot, d).unwrap() - 1.0).abs() < 1e-10);
        let ab = cka(&a, d, &b, 3).unwrap();
        assert!((ab - cka(&b, 3, &a, d).unwrap()).abs() < 1e-10);
        let scaled: Vec<f64> = a.iter().map(|v| 3.5 * v).collect();
        assert!((ab - cka(&scaled, d, &b, 3).unwrap()).abs() < 1e-10);
        assert!(matches!(cka(&[1.0; 8], 2, &a[..8], 2), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn cka_wide_and_narrow_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, d) = (6, 5);
        let a = random_matrix(&mut rng, n, d);
        let b: Vec<f64> = a.iter().map(|v| v + 0.5 * rng.gen_range(-1.0..1.0)).collect();
        // padding both with the same constant columns leaves CKA unchanged
        // but moves it onto the sample-Gram path
        let pad = |x: &[f64]| -> Vec<f64> {
            x.chunks(d).flat_map(|r| r.iter().copied().chain((0..10).map(|k| k as f64))).collect()
        };
        let narrow = cka(&a, d, &b, d).unwrap();
        let wide = cka(&pad(&a), d + 10, &pad(&b), d + 10).unwrap();
        assert!((narrow - wide).abs() < 1e-12, "{narrow} vs {wide}");
        assert!(narrow < 1.0 && narrow > 0.3);
    }

    #[test]
    fn cka_independent_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let worst = (0..20)
            .map(|_| {
                let a = random_matrix(&mut rng, 1000, 8);
                let b = random_matrix(&mut rng, 1000, 8);
                cka(&a, 8, &b, 8).unwrap()
            })
            .fold(0.0, f64::max);
        assert!(worst < 0.2, "{worst}");
    }

    #[test]
    fn report_sorts_rows_and_defaults_mrr() {
        use crate::scenesim::{CorruptionKind, Severity, Target};
        let r = RobustnessReport::new(0.5, vec![], vec![]).unwrap();
        assert_eq!(r.mrr, 100.0);
        let rows = vec![
            ReportRow {
                spec: CorruptionSpec::new(CorruptionKind::Snow, Target::Lidar, Severity::Heavy),
                map: 0.25,
            },
            ReportRow {
                spec: CorruptionSpec::new(CorruptionKind::Fog, Target::Camera, Severity::Light),
                map: 0.5,
            },
        ];
        let r = RobustnessReport::new(0.5, rows, vec![]).unwrap();
        assert_eq!(r.rows[0].spec.kind, CorruptionKind::Fog);
        assert!((r.mrr - 75.0).abs() < 1e-12);
    }
}

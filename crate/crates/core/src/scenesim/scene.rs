use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{mix_seed, SimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    /// Centre in grid units; cell `(i, j)` is centred on `(i, j)`.
    pub center: [f64; 2],
    /// Extent along the first and second grid axes.
    pub size: [f64; 2],
    /// Unit-norm code visible only to the LiDAR render.
    pub geometry: Vec<f64>,
    /// Unit-norm code visible only to the camera render.
    pub appearance: Vec<f64>,
}

impl SceneObject {
    /// Inclusive cell ranges `[i0, i1] x [j0, j1]` covered by the footprint.
    /// A cell belongs to the footprint when its centre lies in the half-open
    /// box `[c - s/2, c + s/2)` on each axis.
    pub fn cell_box(&self) -> ([i64; 2], [i64; 2]) {
        let range = |c: f64, s: f64| {
            let lo = (c - s / 2.0).ceil() as i64;
            let hi = (c + s / 2.0).ceil() as i64 - 1;
            [lo, hi]
        };
        (
            range(self.center[0], self.size[0]),
            range(self.center[1], self.size[1]),
        )
    }

    pub fn contains_cell(&self, i: i64, j: i64) -> bool {
        let ([i0, i1], [j0, j1]) = self.cell_box();
        (i0..=i1).contains(&i) && (j0..=j1).contains(&j)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub ego: [f64; 2],
    pub seed: u64,
}

/// Flat `x * grid_y + y` indices of every footprint cell of `obj`.
pub fn footprint_cells(obj: &SceneObject, cfg: &SimConfig) -> Vec<usize> {
    let ([i0, i1], [j0, j1]) = obj.cell_box();
    let mut out = Vec::new();
    for i in i0.max(0)..=i1.min(cfg.grid_x as i64 - 1) {
        for j in j0.max(0)..=j1.min(cfg.grid_y as i64 - 1) {
            out.push(i as usize * cfg.grid_y + j as usize);
        }
    }
    out
}

/// Open-rectangle intersection test, with an optional clearance gap.
pub fn overlaps(a: &SceneObject, b: &SceneObject, gap: f64) -> bool {
    (a.center[0] - b.center[0]).abs() < (a.size[0] + b.size[0]) / 2.0 + gap
        && (a.center[1] - b.center[1]).abs() < (a.size[1] + b.size[1]) / 2.0 + gap
}

const PLACEMENT_GAP: f64 = 0.5;
const EGO_CLEARANCE: f64 = 2.0;
const MAX_TRIES: usize = 64;

/// Size ranges per class: larger class ids are larger objects.
fn size_range(class: usize) -> ([f64; 2], [f64; 2]) {
    let c = class as f64;
    ([1.5 + 1.75 * c, 3.0 + 1.75 * c], [1.5 + 0.75 * c, 2.5 + 0.75 * c])
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        return e;
    }
    v.into_iter().map(|x| x / n).collect()
}

/// Fixed per-class prototype codes; `stream` separates geometry from
/// appearance.
fn prototype(class: usize, dim: usize, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(0xC0DE ^ stream, class as u64));
    unit((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
}

fn latent_code(class: usize, cfg: &SimConfig, stream: u64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let proto = prototype(class, cfg.code_dim, stream);
    let scale = cfg.code_spread / (cfg.code_dim as f64).sqrt();
    unit(
        proto
            .iter()
            .map(|p| {
                let z: f64 = StandardNormal.sample(rng);
                p + scale * z
            })
            .collect(),
    )
}

/// Rejection-samples a scene. Objects that cannot be placed after a bounded
/// number of tries are dropped, so the call never fails.
pub fn gen_scene(seed: u64, cfg: &SimConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5CE4E));
    let ego = cfg.ego();
    let target = if cfg.max_objects == 0 {
        0
    } else {
        rng.gen_range(cfg.min_objects..=cfg.max_objects)
    };
    let mut objects: Vec<SceneObject> = Vec::with_capacity(target);
    for _ in 0..target {
        let class = rng.gen_range(0..cfg.num_classes);
        let (lr, wr) = size_range(class);
        let mut placed = None;
        for _ in 0..MAX_TRIES {
            let mut size = [rng.gen_range(lr[0]..lr[1]), rng.gen_range(wr[0]..wr[1])];
            if rng.gen_bool(0.5) {
                size.swap(0, 1);
            }
            let lo = [size[0] / 2.0 - 0.5, size[1] / 2.0 - 0.5];
            let hi = [
                cfg.grid_x as f64 - 0.5 - size[0] / 2.0,
                cfg.grid_y as f64 - 0.5 - size[1] / 2.0,
            ];
            if lo[0] >= hi[0] || lo[1] >= hi[1] {
                continue;
            }
            let center = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1])];
            let near_ego = (center[0] - ego[0]).abs() < size[0] / 2.0 + EGO_CLEARANCE
                && (center[1] - ego[1]).abs() < size[1] / 2.0 + EGO_CLEARANCE;
            let candidate = SceneObject {
                class,
                center,
                size,
                geometry: Vec::new(),
                appearance: Vec::new(),
            };
            if near_ego || objects.iter().any(|o| overlaps(o, &candidate, PLACEMENT_GAP)) {
                continue;
            }
            placed = Some(candidate);
            break;
        }
        if let Some(mut obj) = placed {
            obj.geometry = latent_code(class, cfg, 1, &mut rng);
            obj.appearance = latent_code(class, cfg, 2, &mut rng);
            objects.push(obj);
        }
    }
    Scene { objects, ego, seed }
}

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{footprint_cells, mix_seed, Scene, SimConfig};

const LIDAR_NOISE_STREAM: u64 = 0x11DA;
const CAMERA_NOISE_STREAM: u64 = 0xCA3E;

/// Channel-first single-precision grid `[channels, x, y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub channels: usize,
    pub x: usize,
    pub y: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn zeros(channels: usize, x: usize, y: usize) -> Self {
        Self {
            channels,
            x,
            y,
            data: vec![0.0; channels * x * y],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.x + i) * self.y + j
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[self.idx(c, i, j)]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f32) {
        let k = self.idx(c, i, j);
        self.data[k] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.x * self.y;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.x * self.y;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// The two sensor inputs of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityRender {
    /// `[occupancy, range, geometry code.., noise..]`
    pub lidar: Grid,
    /// `[class one-hot.., appearance code..]`
    pub camera: Grid,
}

/// Camera sector containing the azimuth of `(px, py)` seen from `ego`.
pub fn sector_of(px: f64, py: f64, ego: [f64; 2], sectors: usize) -> usize {
    let mut az = (py - ego[1]).atan2(px - ego[0]);
    if az < 0.0 {
        az += 2.0 * PI;
    }
    ((az / (2.0 * PI / sectors as f64)) as usize).min(sectors - 1)
}

fn fill_noise(data: &mut [f32], std: f64, seed: u64) {
    if std <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("positive std");
    for v in data {
        *v += normal.sample(&mut rng) as f32;
    }
}

/// Ray-box entry distance for a ray from `o` along unit `d`, if the ray
/// enters the box at a non-negative distance.
fn ray_box(o: [f64; 2], d: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..2 {
        if d[a].abs() < 1e-15 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
        } else {
            let ta = (lo[a] - o[a]) / d[a];
            let tb = (hi[a] - o[a]) / d[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    (t0 <= t1 && t0 >= 0.0).then_some(t0)
}

/// Casts `beams` equally spaced rays over an arc of `fov_deg` degrees centred
/// on the +x axis and marks the first footprint cell each ray enters.
pub fn render_lidar(scene: &Scene, cfg: &SimConfig, beams: usize, fov_deg: f64) -> Grid {
    let mut g = Grid::zeros(cfg.lidar_channels(), cfg.grid_x, cfg.grid_y);
    let noise_off = 2 + cfg.code_dim;
    for c in noise_off..g.channels {
        let seed = mix_seed(mix_seed(scene.seed, LIDAR_NOISE_STREAM), c as u64);
        fill_noise(g.channel_mut(c), cfg.lidar_noise_std, seed);
    }
    let ego = scene.ego;
    let fov = fov_deg.to_radians();
    let boxes: Vec<_> = scene
        .objects
        .iter()
        .map(|o| {
            let ([i0, i1], [j0, j1]) = o.cell_box();
            (
                [i0 as f64 - 0.5, j0 as f64 - 0.5],
                [i1 as f64 + 0.5, j1 as f64 + 0.5],
                [i0, i1, j0, j1],
            )
        })
        .collect();
    for k in 0..beams.max(1) {
        let theta = -fov / 2.0 + (k as f64 + 0.5) * fov / beams as f64;
        let d = [theta.cos(), theta.sin()];
        let nearest = boxes
            .iter()
            .enumerate()
            .filter_map(|(n, (lo, hi, _))| ray_box(ego, d, *lo, *hi).map(|t| (t, n)))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let Some((t, n)) = nearest else { continue };
        let [i0, i1, j0, j1] = boxes[n].2;
        let p = [ego[0] + (t + 1e-9) * d[0], ego[1] + (t + 1e-9) * d[1]];
        let i = (p[0].round() as i64).clamp(i0, i1) as usize;
        let j = (p[1].round() as i64).clamp(j0, j1) as usize;
        let obj = &scene.objects[n];
        let range = (i as f64 - ego[0]).hypot(j as f64 - ego[1]) / cfg.max_range();
        g.set(0, i, j, 1.0);
        g.set(1, i, j, range as f32);
        for (c, &v) in obj.geometry.iter().enumerate() {
            g.set(2 + c, i, j, v as f32);
        }
    }
    g
}

/// Paints objects whose centre falls in an active sector. With `blur`, each
/// cell averages a box whose radius grows with its range from the ego.
pub fn render_camera(scene: &Scene, cfg: &SimConfig, active: &[bool], blur: bool) -> Grid {
    let (nx, ny) = (cfg.grid_x, cfg.grid_y);
    let mut sharp = Grid::zeros(cfg.camera_channels(), nx, ny);
    let ego = scene.ego;
    let is_active = |s: usize| active.get(s).copied().unwrap_or(false);
    for obj in &scene.objects {
        if !is_active(sector_of(obj.center[0], obj.center[1], ego, cfg.sectors)) {
            continue;
        }
        for cell in footprint_cells(obj, cfg) {
            let (i, j) = (cell / ny, cell % ny);
            sharp.set(obj.class, i, j, 1.0);
            for (c, &v) in obj.appearance.iter().enumerate() {
                sharp.set(cfg.num_classes + c, i, j, v as f32);
            }
        }
    }
    let mut g = if blur {
        let mut out = Grid::zeros(sharp.channels, nx, ny);
        for i in 0..nx {
            for j in 0..ny {
                let range = (i as f64 - ego[0]).hypot(j as f64 - ego[1]);
                let r = (range / cfg.blur_step).floor() as i64;
                let mut acc = vec![0.0f64; sharp.channels];
                let mut n = 0.0;
                for a in (i as i64 - r).max(0)..=(i as i64 + r).min(nx as i64 - 1) {
                    for b in (j as i64 - r).max(0)..=(j as i64 + r).min(ny as i64 - 1) {
                        for (c, v) in acc.iter_mut().enumerate() {
                            *v += sharp.get(c, a as usize, b as usize) as f64;
                        }
                        n += 1.0;
                    }
                }
                for (c, v) in acc.iter().enumerate() {
                    out.set(c, i, j, (v / n) as f32);
                }
            }
        }
        out
    } else {
        sharp
    };
    for c in 0..g.channels {
        let seed = mix_seed(mix_seed(scene.seed, CAMERA_NOISE_STREAM), c as u64);
        fill_noise(g.channel_mut(c), cfg.camera_noise_std, seed);
    }
    for i in 0..nx {
        for j in 0..ny {
            if !is_active(sector_of(i as f64, j as f64, ego, cfg.sectors)) {
                for c in 0..g.channels {
                    g.set(c, i, j, 0.0);
                }
            }
        }
    }
    g
}

/// Clean render with the configured beams, field of view, and all sectors.
pub fn render(scene: &Scene, cfg: &SimConfig) -> ModalityRender {
    ModalityRender {
        lidar: render_lidar(scene, cfg, cfg.beams, cfg.fov_deg),
        camera: render_camera(scene, cfg, &vec![true; cfg.sectors], true),
    }
}

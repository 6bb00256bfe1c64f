use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::render::{render_camera, render_lidar, Grid, ModalityRender};
use super::{mix_seed, Scene, SimConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    None,
    BeamReduce,
    FovReduce,
    ViewDrop,
    Fog,
    Snow,
    MotionBlur,
    Crosstalk,
    LowLight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Lidar,
    Camera,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Severity {
    Light,
    Moderate,
    Heavy,
}

macro_rules! string_enum {
    ($ty:ident { $($var:ident => $s:literal),* $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$var),*];

            pub fn as_str(self) -> &'static str {
                match self { $($ty::$var => $s),* }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$var),)*
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

string_enum!(CorruptionKind {
    None => "none",
    BeamReduce => "beam-reduce",
    FovReduce => "fov-reduce",
    ViewDrop => "view-drop",
    Fog => "fog",
    Snow => "snow",
    MotionBlur => "motion-blur",
    Crosstalk => "crosstalk",
    LowLight => "low-light",
});

string_enum!(Target {
    Lidar => "lidar",
    Camera => "camera",
    Both => "both",
});

string_enum!(Severity {
    Light => "light",
    Moderate => "moderate",
    Heavy => "heavy",
});

impl Severity {
    fn pick<T: Copy>(self, table: [T; 3]) -> T {
        table[self as usize]
    }
}

/// Concrete transform parameters resolved from `(kind, severity)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CorruptionParams {
    None,
    /// Fraction of the clean beam count kept.
    BeamReduce { keep: f64 },
    FovReduce { fov_deg: f64 },
    ViewDrop { views: usize },
    Fog {
        /// LiDAR hits beyond `cutoff * grid_radius` are attenuated.
        cutoff: f64,
        /// Survival `exp(-(r - cutoff) / decay)`; zero removes every hit past the cutoff.
        decay: f64,
        contrast: f64,
        blur: usize,
    },
    Snow { rate: f64 },
    MotionBlur { length: usize },
    Crosstalk { rate: f64 },
    LowLight { gain: f64, noise: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub target: Target,
    pub severity: Severity,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, target: Target, severity: Severity) -> Self {
        Self {
            kind,
            target,
            severity,
            seed: 0,
        }
    }

    pub fn none() -> Self {
        Self::new(CorruptionKind::None, Target::Both, Severity::Light)
    }

    /// Severity table. Every kind is monotone from light to heavy.
    pub fn params(&self) -> CorruptionParams {
        let s = self.severity;
        match self.kind {
            CorruptionKind::None => CorruptionParams::None,
            CorruptionKind::BeamReduce => CorruptionParams::BeamReduce {
                keep: s.pick([0.5, 0.25, 0.125]),
            },
            CorruptionKind::FovReduce => CorruptionParams::FovReduce {
                fov_deg: s.pick([180.0, 120.0, 90.0]),
            },
            CorruptionKind::ViewDrop => CorruptionParams::ViewDrop {
                views: s.pick([5, 3, 1]),
            },
            CorruptionKind::Fog => CorruptionParams::Fog {
                cutoff: s.pick([0.8, 0.5, 0.3]),
                decay: s.pick([2.0, 1.0, 0.0]),
                contrast: s.pick([0.7, 0.45, 0.25]),
                blur: s.pick([1, 1, 2]),
            },
            CorruptionKind::Snow => CorruptionParams::Snow {
                rate: s.pick([0.01, 0.03, 0.08]),
            },
            CorruptionKind::MotionBlur => CorruptionParams::MotionBlur {
                length: s.pick([2, 4, 7]),
            },
            CorruptionKind::Crosstalk => CorruptionParams::Crosstalk {
                rate: s.pick([0.005, 0.015, 0.04]),
            },
            CorruptionKind::LowLight => CorruptionParams::LowLight {
                gain: s.pick([0.6, 0.35, 0.15]),
                noise: s.pick([0.05, 0.1, 0.15]),
            },
        }
    }

    /// Targets each kind may act on.
    pub fn allowed_targets(kind: CorruptionKind) -> &'static [Target] {
        match kind {
            CorruptionKind::None => &[Target::Lidar, Target::Camera, Target::Both],
            CorruptionKind::BeamReduce | CorruptionKind::FovReduce | CorruptionKind::Crosstalk => {
                &[Target::Lidar]
            }
            CorruptionKind::ViewDrop | CorruptionKind::LowLight => &[Target::Camera],
            CorruptionKind::Fog | CorruptionKind::Snow | CorruptionKind::MotionBlur => {
                &[Target::Lidar, Target::Camera, Target::Both]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !Self::allowed_targets(self.kind).contains(&self.target) {
            return Err(Error::Config(format!(
                "corruption {} cannot target {}",
                self.kind, self.target
            )));
        }
        Ok(())
    }

    pub fn hits_lidar(&self) -> bool {
        self.kind != CorruptionKind::None && matches!(self.target, Target::Lidar | Target::Both)
    }

    pub fn hits_camera(&self) -> bool {
        self.kind != CorruptionKind::None && matches!(self.target, Target::Camera | Target::Both)
    }

    /// `kind:target:severity`
    pub fn label(&self) -> String {
        format!("{}:{}:{}", self.kind, self.target, self.severity)
    }
}

impl FromStr for CorruptionSpec {
    type Err = Error;

    /// Parses `kind[:target[:severity]]`; target defaults to the first allowed
    /// one and severity to heavy.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind: CorruptionKind = parts.next().unwrap_or_default().parse()?;
        let target = match parts.next() {
            Some(t) => t.parse()?,
            None => CorruptionSpec::allowed_targets(kind)[0],
        };
        let severity = match parts.next() {
            Some(v) => v.parse()?,
            None => Severity::Heavy,
        };
        if parts.next().is_some() {
            return Err(Error::Config(format!("malformed corruption {s:?}")));
        }
        let spec = CorruptionSpec::new(kind, target, severity);
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-scene random stream for a corruption. Severity is deliberately not
/// mixed in, so heavier settings reuse the same draws and stay nested.
fn stream(spec: &CorruptionSpec, scene: &Scene, side: u64) -> ChaCha8Rng {
    let tag = (spec.kind as u64) << 4 | side;
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(spec.seed, scene.seed), tag))
}

const LIDAR_SIDE: u64 = 1;
const CAMERA_SIDE: u64 = 2;

fn cell_range(i: usize, j: usize, ego: [f64; 2]) -> f64 {
    (i as f64 - ego[0]).hypot(j as f64 - ego[1])
}

fn clear_hit(g: &mut Grid, code_dim: usize, i: usize, j: usize) {
    for c in 0..2 + code_dim {
        g.set(c, i, j, 0.0);
    }
}

fn spurious_hit(g: &mut Grid, cfg: &SimConfig, i: usize, j: usize, intensity: f32, ego: [f64; 2], rng: &mut ChaCha8Rng) {
    g.set(0, i, j, intensity);
    g.set(1, i, j, (cell_range(i, j, ego) / cfg.max_range()) as f32);
    let scale = 1.0 / (cfg.code_dim as f64).sqrt();
    for c in 0..cfg.code_dim {
        let z: f64 = StandardNormal.sample(rng);
        g.set(2 + c, i, j, (z * scale) as f32);
    }
}

/// Mean over `length` cells trailing along -x (ego motion along +x).
fn motion_blur(g: &Grid, length: usize) -> Grid {
    let mut out = g.clone();
    for c in 0..g.channels {
        for i in 0..g.x {
            for j in 0..g.y {
                let taps = length.min(i + 1);
                let s: f32 = (0..taps).map(|t| g.get(c, i - t, j)).sum();
                out.set(c, i, j, s / taps as f32);
            }
        }
    }
    out
}

fn box_blur(g: &Grid, r: usize) -> Grid {
    if r == 0 {
        return g.clone();
    }
    let mut out = g.clone();
    let r = r as i64;
    for c in 0..g.channels {
        for i in 0..g.x as i64 {
            for j in 0..g.y as i64 {
                let mut s = 0.0f32;
                let mut n = 0.0f32;
                for a in (i - r).max(0)..=(i + r).min(g.x as i64 - 1) {
                    for b in (j - r).max(0)..=(j + r).min(g.y as i64 - 1) {
                        s += g.get(c, a as usize, b as usize);
                        n += 1.0;
                    }
                }
                out.set(c, i as usize, j as usize, s / n);
            }
        }
    }
    out
}

fn corrupt_lidar(scene: &Scene, g: &Grid, spec: &CorruptionSpec, cfg: &SimConfig) -> Grid {
    let ego = scene.ego;
    let mut rng = stream(spec, scene, LIDAR_SIDE);
    let mut code_rng = stream(spec, scene, LIDAR_SIDE | 8);
    match spec.params() {
        CorruptionParams::BeamReduce { keep } => {
            let beams = ((cfg.beams as f64 * keep).round() as usize).max(1);
            render_lidar(scene, cfg, beams, cfg.fov_deg)
        }
        CorruptionParams::FovReduce { fov_deg } => {
            // keep the clean angular resolution
            let beams = ((cfg.beams as f64 * fov_deg / 360.0).round() as usize).max(1);
            render_lidar(scene, cfg, beams, fov_deg)
        }
        CorruptionParams::Fog { cutoff, decay, .. } => {
            let mut out = g.clone();
            let r_cut = cutoff * cfg.grid_radius();
            for i in 0..g.x {
                for j in 0..g.y {
                    let u: f64 = rng.gen();
                    if g.get(0, i, j) <= 0.0 {
                        continue;
                    }
                    let r = cell_range(i, j, ego);
                    if r <= r_cut {
                        continue;
                    }
                    let survive = decay > 0.0 && u < (-(r - r_cut) / decay).exp();
                    if !survive {
                        clear_hit(&mut out, cfg.code_dim, i, j);
                    }
                }
            }
            out
        }
        CorruptionParams::Snow { rate } => {
            let mut out = g.clone();
            for i in 0..g.x {
                for j in 0..g.y {
                    let u: f64 = rng.gen();
                    if u < rate {
                        spurious_hit(&mut out, cfg, i, j, 1.0, ego, &mut code_rng);
                    }
                }
            }
            out
        }
        CorruptionParams::Crosstalk { rate } => {
            let mut out = g.clone();
            let radius = 0.5 * cfg.grid_radius();
            let near = (0..g.x)
                .flat_map(|i| (0..g.y).map(move |j| (i, j)))
                .filter(|&(i, j)| cell_range(i, j, ego) <= radius)
                .count()
                .max(1);
            let p = (rate * (g.x * g.y) as f64 / near as f64).min(1.0);
            for i in 0..g.x {
                for j in 0..g.y {
                    let u: f64 = rng.gen();
                    let intensity: f64 = rng.gen_range(0.2..1.0);
                    if cell_range(i, j, ego) <= radius && u < p {
                        spurious_hit(&mut out, cfg, i, j, intensity as f32, ego, &mut code_rng);
                    }
                }
            }
            out
        }
        CorruptionParams::MotionBlur { length } => motion_blur(g, length),
        _ => g.clone(),
    }
}

fn corrupt_camera(scene: &Scene, g: &Grid, spec: &CorruptionSpec, cfg: &SimConfig) -> Grid {
    let mut rng = stream(spec, scene, CAMERA_SIDE);
    match spec.params() {
        CorruptionParams::ViewDrop { views } => {
            let mut order: Vec<usize> = (0..cfg.sectors).collect();
            let mut pick = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x71E5));
            for k in (1..order.len()).rev() {
                order.swap(k, pick.gen_range(0..=k));
            }
            let mut active = vec![false; cfg.sectors];
            for &s in order.iter().take(views.min(cfg.sectors)) {
                active[s] = true;
            }
            render_camera(scene, cfg, &active, true)
        }
        CorruptionParams::Fog { contrast, blur, .. } => {
            let mut out = g.clone();
            let cells = (g.x * g.y) as f32;
            for c in 0..g.channels {
                let ch = out.channel_mut(c);
                let mean = ch.iter().sum::<f32>() / cells;
                for v in ch.iter_mut() {
                    *v = mean + (*v - mean) * contrast as f32;
                }
            }
            box_blur(&out, blur)
        }
        CorruptionParams::Snow { rate } => {
            let mut out = g.clone();
            for i in 0..g.x {
                for j in 0..g.y {
                    let u: f64 = rng.gen();
                    if u < rate {
                        for c in 0..g.channels {
                            out.set(c, i, j, 0.8);
                        }
                    }
                }
            }
            out
        }
        CorruptionParams::MotionBlur { length } => motion_blur(g, length),
        CorruptionParams::LowLight { gain, noise } => {
            let normal = Normal::new(0.0, noise).expect("positive noise");
            let mut out = g.clone();
            for v in out.data.iter_mut() {
                *v = *v * gain as f32 + normal.sample(&mut rng) as f32;
            }
            out
        }
        _ => g.clone(),
    }
}

/// Applies one corruption to a clean render. Sensor-reduction kinds re-render
/// the affected modality from the scene; `Both` applies the same severity to
/// both sides.
pub fn apply_corruption(
    scene: &Scene,
    render: &ModalityRender,
    spec: &CorruptionSpec,
    cfg: &SimConfig,
) -> Result<ModalityRender> {
    spec.validate()?;
    let mut out = render.clone();
    if spec.hits_lidar() {
        out.lidar = corrupt_lidar(scene, &render.lidar, spec, cfg);
    }
    if spec.hits_camera() {
        out.camera = corrupt_camera(scene, &render.camera, spec, cfg);
    }
    Ok(out)
}

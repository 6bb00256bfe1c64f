//! Synthetic dual-sensor scenes on a bird's-eye-view grid.
//!
//! Objects are axis-aligned rectangles. A LiDAR-like render ray-casts from
//! the ego cell and paints occupancy, range, and a per-object geometry code
//! on the first cell each ray hits; a camera-like render paints class
//! one-hots and a per-object appearance code over whole footprints in the
//! active azimuth sectors, blurred with range. Both renders carry noise.
//! Geometry codes only ever reach the LiDAR grid and appearance codes only
//! the camera grid, while object presence and class cues reach both.

mod corrupt;
mod dataset;
mod render;
mod scene;

pub use corrupt::{
    apply_corruption, CorruptionKind, CorruptionParams, CorruptionSpec, Severity, Target,
};
pub use dataset::{make_dataset, read_dataset, write_dataset, DatasetHeader, Item, Split};
pub use render::{render, render_camera, render_lidar, sector_of, Grid, ModalityRender};
pub use scene::{footprint_cells, gen_scene, overlaps, Scene, SceneObject};

use serde::{Deserialize, Serialize};

/// Everything the generator and renderers need. Defaults are the desk-scale
/// setting: a 32x32 grid, three classes, four-dimensional latent codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub grid_x: usize,
    pub grid_y: usize,
    pub num_classes: usize,
    pub code_dim: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Azimuth rays of the clean LiDAR render.
    pub beams: usize,
    pub fov_deg: f64,
    /// Camera azimuth sectors (each `360 / sectors` degrees wide).
    pub sectors: usize,
    pub lidar_noise_channels: usize,
    pub lidar_noise_std: f64,
    pub camera_noise_std: f64,
    /// Camera blur radius grows by one cell per this many cells of range.
    pub blur_step: f64,
    /// Spread of latent codes around their class prototype.
    pub code_spread: f64,
    /// Item `i` belongs to the validation split iff `i % val_stride == val_stride - 1`.
    pub val_stride: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            grid_x: 32,
            grid_y: 32,
            num_classes: 3,
            code_dim: 4,
            min_objects: 3,
            max_objects: 8,
            beams: 64,
            fov_deg: 360.0,
            sectors: 6,
            lidar_noise_channels: 1,
            lidar_noise_std: 0.1,
            camera_noise_std: 0.05,
            blur_step: 8.0,
            code_spread: 0.6,
            val_stride: 6,
        }
    }
}

impl SimConfig {
    pub fn lidar_channels(&self) -> usize {
        2 + self.code_dim + self.lidar_noise_channels
    }

    pub fn camera_channels(&self) -> usize {
        self.num_classes + self.code_dim
    }

    pub fn ego(&self) -> [f64; 2] {
        [
            (self.grid_x as f64 - 1.0) / 2.0,
            (self.grid_y as f64 - 1.0) / 2.0,
        ]
    }

    /// Half the grid diagonal; the normaliser for range channels.
    pub fn max_range(&self) -> f64 {
        (self.grid_x as f64).hypot(self.grid_y as f64) / 2.0
    }

    /// Half the smaller grid side; the reference radius for range-based
    /// corruption parameters.
    pub fn grid_radius(&self) -> f64 {
        self.grid_x.min(self.grid_y) as f64 / 2.0
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = self.grid_x < 4
            || self.grid_y < 4
            || self.num_classes == 0
            || self.code_dim == 0
            || self.min_objects > self.max_objects
            || self.beams == 0
            || !(self.fov_deg > 0.0 && self.fov_deg <= 360.0)
            || self.sectors == 0
            || self.val_stride == 0
            || self.blur_step <= 0.0;
        if bad {
            return Err(crate::Error::Config(format!("invalid simulator config: {self:?}")));
        }
        Ok(())
    }
}

/// SplitMix64 finaliser, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

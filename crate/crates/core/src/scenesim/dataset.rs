use std::path::Path;

use super::render::{render, Grid, ModalityRender};
use super::{gen_scene, mix_seed, Scene, SceneObject, SimConfig};
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};

pub const DATASET_MAGIC: &[u8; 4] = b"BDRD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    /// Position in the generated sequence; decides the split.
    pub index: u64,
    pub scene: Scene,
    pub render: ModalityRender,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    All,
    Train,
    Val,
}

impl Split {
    pub fn contains(self, index: u64, val_stride: usize) -> bool {
        let stride = val_stride.max(1) as u64;
        let is_val = index % stride == stride - 1;
        match self {
            Split::All => true,
            Split::Train => !is_val,
            Split::Val => is_val,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Split::All),
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Generates items `0..n` and keeps those in `split`. Scene `i` is seeded by
/// `(seed, i)`, so the train and validation splits of one seed never share a
/// scene and regenerate identically.
pub fn make_dataset(n: usize, seed: u64, cfg: &SimConfig, split: Split, mode: Parallelism) -> Result<Vec<Item>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    cfg.validate()?;
    let indices: Vec<u64> = (0..n as u64)
        .filter(|&i| split.contains(i, cfg.val_stride))
        .collect();
    Ok(par::map(mode, &indices, |_, &index| {
        let scene = gen_scene(mix_seed(seed, index), cfg);
        let render = render(&scene, cfg);
        Item {
            index,
            scene,
            render,
        }
    }))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub count: u32,
    pub grid_x: u32,
    pub grid_y: u32,
    pub lidar_channels: u32,
    pub camera_channels: u32,
    pub code_dim: u32,
    pub num_classes: u32,
}

impl DatasetHeader {
    /// Whether the stored geometry matches a simulator config.
    pub fn check(&self, cfg: &SimConfig) -> Result<()> {
        let ok = self.grid_x as usize == cfg.grid_x
            && self.grid_y as usize == cfg.grid_y
            && self.lidar_channels as usize == cfg.lidar_channels()
            && self.camera_channels as usize == cfg.camera_channels()
            && self.code_dim as usize == cfg.code_dim
            && self.num_classes as usize == cfg.num_classes;
        if !ok {
            return Err(Error::Config(format!(
                "dataset header {self:?} does not match simulator config"
            )));
        }
        Ok(())
    }
}

pub fn write_dataset(path: &Path, items: &[Item], cfg: &SimConfig) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [
        DATASET_VERSION,
        items.len() as u32,
        cfg.grid_x as u32,
        cfg.grid_y as u32,
        cfg.lidar_channels() as u32,
        cfg.camera_channels() as u32,
        cfg.code_dim as u32,
        cfg.num_classes as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for item in items {
        buf.extend_from_slice(&item.index.to_le_bytes());
        buf.extend_from_slice(&item.scene.seed.to_le_bytes());
        buf.extend_from_slice(&(item.scene.objects.len() as u32).to_le_bytes());
        for o in &item.scene.objects {
            buf.extend_from_slice(&(o.class as u32).to_le_bytes());
            for v in o.center.iter().chain(&o.size).chain(&o.geometry).chain(&o.appearance) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for grid in [&item.render.lidar, &item.render.camera] {
            for v in &grid.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(format!(
                "{}: needed {} bytes at offset {}, file has {}",
                self.path.display(),
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Item>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(4)? != DATASET_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "BDRD",
        });
    }
    let version = cur.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let header = DatasetHeader {
        version,
        count: cur.u32()?,
        grid_x: cur.u32()?,
        grid_y: cur.u32()?,
        lidar_channels: cur.u32()?,
        camera_channels: cur.u32()?,
        code_dim: cur.u32()?,
        num_classes: cur.u32()?,
    };
    let (gx, gy) = (header.grid_x as usize, header.grid_y as usize);
    let g = header.code_dim as usize;
    let ego = [(gx as f64 - 1.0) / 2.0, (gy as f64 - 1.0) / 2.0];
    let mut items = Vec::with_capacity(header.count as usize);
    for _ in 0..header.count {
        let index = cur.u64()?;
        let seed = cur.u64()?;
        let n = cur.u32()? as usize;
        let mut objects = Vec::with_capacity(n);
        for _ in 0..n {
            let class = cur.u32()? as usize;
            let center = [cur.f64()?, cur.f64()?];
            let size = [cur.f64()?, cur.f64()?];
            let geometry = (0..g).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            let appearance = (0..g).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            objects.push(SceneObject {
                class,
                center,
                size,
                geometry,
                appearance,
            });
        }
        let lc = header.lidar_channels as usize;
        let cc = header.camera_channels as usize;
        let lidar = Grid {
            channels: lc,
            x: gx,
            y: gy,
            data: cur.f32s(lc * gx * gy)?,
        };
        let camera = Grid {
            channels: cc,
            x: gx,
            y: gy,
            data: cur.f32s(cc * gx * gy)?,
        };
        items.push(Item {
            index,
            scene: Scene { objects, ego, seed },
            render: ModalityRender { lidar, camera },
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Parse(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - cur.pos
        )));
    }
    Ok((header, items))
}

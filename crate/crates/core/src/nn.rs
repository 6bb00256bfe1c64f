//! Parameter declaration and the small layer vocabulary shared by the model
//! modules. A layer named `foo` owns `foo.weight` and `foo.bias`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};

/// Seeded parameter initialiser writing into a double-precision store.
pub struct Init {
    pub store: ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    self.rng.gen_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        self.store.insert(name, Tensor::new(data, shape)?)?;
        Ok(())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, value))?;
        Ok(())
    }

    /// Weights uniform in `±sqrt(gain / fan_in)`, biases in `±1 / sqrt(fan_in)`.
    fn affine(&mut self, name: &str, wshape: &[usize], fan_in: usize, gain: f64) -> Result<()> {
        let fan = fan_in.max(1) as f64;
        self.uniform(&format!("{name}.weight"), wshape, (gain / fan).sqrt())?;
        self.uniform(&format!("{name}.bias"), &[wshape[0]], 1.0 / fan.sqrt())
    }

    /// Convolution followed by a rectifier (He scaling).
    pub fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<()> {
        self.affine(name, &[c_out, c_in, k, k], c_in * k * k, 6.0)
    }

    /// Convolution with a linear output (unit-variance scaling).
    pub fn conv_plain(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<()> {
        self.affine(name, &[c_out, c_in, k, k], c_in * k * k, 3.0)
    }

    pub fn linear(&mut self, name: &str, d_out: usize, d_in: usize) -> Result<()> {
        self.affine(name, &[d_out, d_in], d_in, 6.0)
    }

    pub fn linear_plain(&mut self, name: &str, d_out: usize, d_in: usize) -> Result<()> {
        self.affine(name, &[d_out, d_in], d_in, 3.0)
    }

    pub fn linear_zero(&mut self, name: &str, d_out: usize, d_in: usize) -> Result<()> {
        self.constant(&format!("{name}.weight"), &[d_out, d_in], 0.0)?;
        self.constant(&format!("{name}.bias"), &[d_out], 0.0)
    }

    pub fn finish(self) -> ParamStore<f64> {
        self.store
    }
}

pub fn conv<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.weight"))?;
    let b = g.param(p, &format!("{name}.bias"))?;
    g.conv2d(x, w, b)
}

pub fn conv_relu<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let y = conv(g, p, name, x)?;
    Ok(g.relu(y))
}

pub fn linear<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.weight"))?;
    let b = g.param(p, &format!("{name}.bias"))?;
    g.linear(x, w, b)
}

/// Cell-major `[x*y, 2]` coordinates normalised to `[0, 1]`.
pub fn normalized_coords<T: Real>(x: usize, y: usize) -> Tensor<T> {
    let sx = (x.max(2) - 1) as f64;
    let sy = (y.max(2) - 1) as f64;
    let mut data = Vec::with_capacity(x * y * 2);
    for i in 0..x {
        for j in 0..y {
            data.push(T::of(i as f64 / sx));
            data.push(T::of(j as f64 / sy));
        }
    }
    Tensor::new(data, &[x * y, 2]).expect("coords shape")
}

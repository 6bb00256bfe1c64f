//! Dense array kernels and a tape-based reverse-mode gradient engine.
//!
//! Everything is generic over [`Real`] so the same model code runs in single
//! precision for training and in double precision for finite-difference
//! checks.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use gradcheck::{grad_check, sample_coords, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamStore};
pub use tensor::Tensor;

/// Scalar type the engine runs on (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + Debug
    + Default
    + 'static
{
    /// Lossy conversion from a double literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

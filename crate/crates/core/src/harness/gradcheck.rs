use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::assign_targets;
use crate::error::Result;
use crate::model::{LossWeights, Model, ModelConfig, ModelVariant};
use crate::numerics::{grad_check, sample_coords, GradCheckReport, Graph, ParamStore, Tensor};
use crate::par::Parallelism;
use crate::scenesim::{make_dataset, Item, SimConfig, Split};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Small grid with the default model widths.
pub fn micro_sim() -> SimConfig {
    SimConfig {
        grid_x: 10,
        grid_y: 10,
        min_objects: 2,
        max_objects: 3,
        ..SimConfig::default()
    }
}

/// Initial parameters moved off the non-smooth points of the model: the
/// zero-initialised offset predictors are randomised so sample locations are
/// fractional rather than exactly on lattice points.
pub fn smooth_params(model: &Model, seed: u64) -> Result<ParamStore<f64>> {
    let mut p = model.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = p.sorted_names().filter(|n| n.contains(".offset.")).map(str::to_string).collect();
    for name in names {
        let t = p.get_mut(&name).expect("listed");
        let shape = t.shape().to_vec();
        let data = (0..t.numel()).map(|_| rng.gen_range(-0.3..0.3)).collect();
        *t = Tensor::new(data, &shape)?;
    }
    Ok(p)
}

/// Mean training loss of `batch` under `model`, as a graph node.
pub fn batch_loss(
    g: &mut Graph<f64>,
    model: &Model,
    p: &ParamStore<f64>,
    batch: &[Item],
    weights: &LossWeights,
) -> Result<crate::numerics::Var> {
    let mc = &model.cfg;
    let mut acc = None;
    for item in batch {
        let fwd = model.forward(g, p, &item.render.camera, &item.render.lidar)?;
        let tgt = assign_targets(&item.scene, mc.num_classes, mc.grid_x, mc.grid_y);
        let t = model.loss(g, p, &fwd, &tgt, weights)?.total;
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    let total = acc.expect("non-empty batch");
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

/// Finite-difference check of the full-variant training loss on a two-scene
/// micro-batch in double precision.
pub fn gradcheck_full(seed: u64, coords: usize) -> Result<GradCheckReport> {
    let sim = micro_sim();
    let mut mc = ModelConfig::for_sim(&sim);
    mc.variant = ModelVariant::Full;
    let model = Model::new(mc)?;
    let params = smooth_params(&model, seed)?;
    let batch = make_dataset(2, seed, &sim, Split::All, Parallelism::Sequential)?;
    let weights = LossWeights::default();
    let picks = sample_coords(&params, coords, seed);
    grad_check(
        |g, p| batch_loss(g, &model, p, &batch, &weights),
        &params,
        &picks,
        1e-5,
    )
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::detect::{assign_targets, TargetMap};
use crate::error::{Error, Result};
use crate::model::{LossTerms, Model, LOSS_COMPONENTS};
use crate::numerics::{Gradients, Graph, ParamStore};
use crate::par::{self, Parallelism};
use crate::scenesim::{mix_seed, Item};

/// Mean of every loss component over one epoch, in [`LOSS_COMPONENTS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: [f64; 6],
}

impl EpochLog {
    pub fn get(&self, component: &str) -> Option<f64> {
        LOSS_COMPONENTS.iter().position(|c| *c == component).map(|i| self.losses[i])
    }
}

/// Decoupled weight decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Gradients<f32>,
    v: Gradients<f32>,
    step: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>) -> Self {
        Self {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let lr = cfg.learning_rate as f32;
        let (eps, wd) = (cfg.adam_eps as f32, cfg.weight_decay as f32);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for id in 0..params.len() {
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            let v = self.v.get_mut(id);
            let w = params.value_mut(id).data_mut();
            for k in 0..w.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                w[k] -= lr * (update + wd * w[k]);
            }
        }
    }
}

fn sample_gradient(
    model: &Model,
    params: &ParamStore<f32>,
    item: &Item,
    target: &TargetMap,
    cfg: &TrainConfig,
) -> Result<(Gradients<f32>, [f64; 6])> {
    let mut g = Graph::<f32>::new();
    let fwd = model.forward(&mut g, params, &item.render.camera, &item.render.lidar)?;
    let terms: LossTerms = model.loss(&mut g, params, &fwd, target, &cfg.loss)?;
    g.check_finite()?;
    g.backward(terms.total)?;
    let grads = g.param_grads(params);
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            node: terms.total.index(),
            op: "gradient",
        });
    }
    Ok((grads, terms.values(&g)))
}

/// Trains from the seeded initialisation on clean renders. Per-sample
/// gradients may be computed in parallel but are reduced in a fixed order,
/// so the result depends only on the inputs. `on_epoch` sees each epoch's
/// mean losses as soon as they are known.
pub fn train(
    model: &Model,
    data: &[Item],
    cfg: &TrainConfig,
    mode: Parallelism,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ParamStore<f32>, Vec<EpochLog>)> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    cfg.validate()?;
    let mc = &model.cfg;
    let targets: Vec<TargetMap> = data
        .iter()
        .map(|it| assign_targets(&it.scene, mc.num_classes, mc.grid_x, mc.grid_y))
        .collect();
    let mut params = model.init_params(cfg.seed)?.cast::<f32>();
    let mut opt = AdamW::new(&params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = [0.0; 6];
        for batch in order.chunks(cfg.batch_size) {
            let results = par::map(mode, batch, |_, &i| sample_gradient(model, &params, &data[i], &targets[i], cfg));
            let mut total = Gradients::zeros_like(&params);
            for r in results {
                let (grads, values) = r?;
                total.accumulate(&grads);
                for (s, v) in sums.iter_mut().zip(values) {
                    *s += v;
                }
            }
            total.scale(1.0 / batch.len() as f32);
            if cfg.grad_clip > 0.0 {
                let norm = total.l2_norm();
                if norm > cfg.grad_clip as f32 {
                    total.scale(cfg.grad_clip as f32 / norm);
                }
            }
            opt.step(&mut params, &total, cfg);
        }
        let entry = EpochLog {
            epoch,
            losses: sums.map(|s| s / data.len() as f64),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelVariant};
    use crate::scenesim::{make_dataset, SimConfig, Split};

    fn tiny() -> (SimConfig, ModelConfig) {
        let sim = SimConfig {
            grid_x: 8,
            grid_y: 8,
            min_objects: 1,
            max_objects: 2,
            ..SimConfig::default()
        };
        let mut mc = ModelConfig::for_sim(&sim);
        mc.camera_channels = 4;
        mc.lidar_channels = 4;
        mc.invariant_channels = 4;
        mc.specific_channels = 4;
        mc.fused_channels = 4;
        (sim, mc)
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let (sim, mc) = tiny();
        let model = Model::new(mc).unwrap();
        let data = make_dataset(2, 0, &sim, Split::All, Parallelism::Sequential).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            seed: 7,
            ..TrainConfig::default()
        };
        let (p, log) = train(&model, &data, &cfg, Parallelism::Sequential, |_| {}).unwrap();
        assert!(log.is_empty());
        assert_eq!(p.fingerprint(), model.init_params(7).unwrap().cast::<f32>().fingerprint());
    }

    #[test]
    fn training_is_deterministic_across_modes() {
        let (sim, mut mc) = tiny();
        mc.variant = ModelVariant::Full;
        let model = Model::new(mc).unwrap();
        let data = make_dataset(5, 1, &sim, Split::All, Parallelism::Sequential).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let (a, la) = train(&model, &data, &cfg, Parallelism::Sequential, |_| {}).unwrap();
        let (b, lb) = train(&model, &data, &cfg, Parallelism::Parallel, |_| {}).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(la, lb);
        assert!(la[0].get("aux").unwrap() > 0.0);
    }

    #[test]
    fn shared_invariant_encoder_stays_shared() {
        // the two invariant paths read the same tensors, so after any number
        // of steps there is still exactly one copy of the shared weights
        let (sim, mc) = tiny();
        let model = Model::new(mc).unwrap();
        let data = make_dataset(3, 2, &sim, Split::All, Parallelism::Sequential).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let (p, _) = train(&model, &data, &cfg, Parallelism::Sequential, |_| {}).unwrap();
        assert_eq!(p.names().filter(|n| n.starts_with("inv.shared.")).count(), 4);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (_, mc) = tiny();
        let model = Model::new(mc).unwrap();
        assert!(train(&model, &[], &TrainConfig::default(), Parallelism::Sequential, |_| {}).is_err());
    }
}

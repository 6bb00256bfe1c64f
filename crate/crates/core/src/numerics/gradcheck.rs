use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - n| / max(1e-8, |a| + |n|)`.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name, element index, analytic and numeric derivative at the
    /// worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Picks `count` distinct `(param id, element)` coordinates, cycling over the
/// parameters so every tensor is visited before any is visited twice.
pub fn sample_coords(store: &ParamStore<f64>, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = store.num_scalars();
    let count = count.min(total);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    let mut pid = 0;
    while out.len() < count {
        let n = store.value(pid).numel();
        let taken = seen.range((pid, 0)..(pid + 1, 0)).count();
        if taken < n {
            loop {
                let e = rng.gen_range(0..n);
                if seen.insert((pid, e)) {
                    out.push((pid, e));
                    break;
                }
            }
        }
        pid = (pid + 1) % store.len();
    }
    out
}

/// Compares reverse-mode gradients of a scalar graph function against
/// central differences `(f(θ+ε) - f(θ-ε)) / 2ε` at the given coordinates.
pub fn grad_check<F>(
    f: F,
    params: &ParamStore<f64>,
    coords: &[(usize, usize)],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(&mut g, params)?;
    g.backward(root)?;
    let analytic = g.param_grads(params);
    drop(g);

    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let root = f(&mut g, p)?;
        g.check_finite()?;
        Ok(g.scalar(root))
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for &(pid, e) in coords {
        let orig = work.value(pid).data()[e];
        work.value_mut(pid).data_mut()[e] = orig + eps;
        let up = eval(&work)?;
        work.value_mut(pid).data_mut()[e] = orig - eps;
        let down = eval(&work)?;
        work.value_mut(pid).data_mut()[e] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.get(pid)[e];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        report.coords_checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((params.name(pid).to_string(), e, a, numeric));
        }
    }
    Ok(report)
}

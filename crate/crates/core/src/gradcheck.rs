//! Central finite differences for auditing reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Tape, Tensor4, Var};
use crate::error::Result;
use crate::model::{ParamGroup, ParamStore};

/// Outcome of comparing analytic against numeric derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradComparison {
    /// Number of coordinates compared.
    pub checked: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the checked coordinates.
    pub rel_error: f64,
    pub max_abs_diff: f64,
}

impl GradComparison {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol
    }
}

/// Picks up to `max` distinct coordinates out of `n`, all of them when `n <= max`.
pub fn pick_indices<R: Rng + ?Sized>(n: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut idx = sample(rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Central-difference estimate of `d f / d x[i]` for each `i` in `indices`.
///
/// The step actually taken is measured after rounding to `f32`, so the
/// quotient uses the true spacing of the two probe points.
pub fn central_differences<F>(x: &Tensor4, indices: &[usize], step: f32, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor4) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = x.data()[i];
        let hi = orig + step;
        let lo = orig - step;
        probe.data_mut()[i] = hi;
        let f_hi = f(&probe)?;
        probe.data_mut()[i] = lo;
        let f_lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((f_hi - f_lo) / (hi as f64 - lo as f64));
    }
    Ok(out)
}

/// Norm-wise relative error; two all-zero vectors compare equal.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradComparison {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    let max_abs_diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    GradComparison {
        checked: analytic.len(),
        rel_error: if denom == 0.0 { 0.0 } else { diff / denom },
        max_abs_diff,
    }
}

/// Checks the tape gradients of `sum(probe * build(inputs))` for every input
/// against central differences on at most `max_coords` coordinates each. The
/// probe weights are uniform in `[-1, 1)` and drawn from `seed`.
pub fn check_graph<F>(inputs: &[Tensor4], build: F, max_coords: usize, step: f32, seed: u64) -> Result<Vec<GradComparison>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let y = build(&mut tape, &vars)?;
    let d = tape.dims(y);
    let probe = Tensor4::from_vec(d, (0..d.numel()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let l = tape.weighted_sum(y, probe.clone())?;
    tape.backward(l)?;

    let mut out = Vec::with_capacity(inputs.len());
    for (k, x) in inputs.iter().enumerate() {
        let idx = pick_indices(x.numel(), max_coords, &mut rng);
        let numeric = central_differences(x, &idx, step, |xp| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, xi)| t.leaf(if j == k { xp.clone() } else { xi.clone() }))
                .collect();
            let y = build(&mut t, &vs)?;
            let l = t.weighted_sum(y, probe.clone())?;
            t.scalar(l)
        })?;
        let grad = tape.grad(vars[k]);
        let analytic: Vec<f64> = idx
            .iter()
            .map(|&i| grad.map_or(0.0, |g| g.data()[i] as f64))
            .collect();
        out.push(compare(&analytic, &numeric));
    }
    Ok(out)
}

/// Checks the parameter gradients of a scalar loss built from `store`,
/// pooling the sampled coordinates of each parameter group.
pub fn check_store<F>(
    store: &ParamStore,
    loss: F,
    max_per_param: usize,
    step: f32,
    seed: u64,
) -> Result<Vec<(ParamGroup, GradComparison)>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    work.clear_grads();
    let mut tape = Tape::new();
    let l = loss(&mut tape, &work)?;
    tape.backward(l)?;
    tape.accumulate_param_grads(work.params_mut())?;

    let mut pooled: Vec<(ParamGroup, Vec<f64>, Vec<f64>)> = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).numel();
        let idx = pick_indices(n, max_per_param, &mut rng);
        let analytic: Vec<f64> = idx.iter().map(|&i| work.get(id).grad.data()[i] as f64).collect();
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = store.get(id).value.data()[i];
            let (hi, lo) = (orig + step, orig - step);
            let mut eval = |v: f32| -> Result<f64> {
                work.params_mut()[id.index()].value.data_mut()[i] = v;
                let mut t = Tape::new();
                let l = loss(&mut t, &work)?;
                t.scalar(l)
            };
            let (f_hi, f_lo) = (eval(hi)?, eval(lo)?);
            work.params_mut()[id.index()].value.data_mut()[i] = orig;
            numeric.push((f_hi - f_lo) / (hi as f64 - lo as f64));
        }
        let group = store.group(id);
        match pooled.iter_mut().find(|(g, _, _)| *g == group) {
            Some((_, a, b)) => {
                a.extend(analytic);
                b.extend(numeric);
            }
            None => pooled.push((group, analytic, numeric)),
        }
    }
    Ok(pooled.into_iter().map(|(g, a, n)| (g, compare(&a, &n))).collect())
}

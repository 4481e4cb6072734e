//! Quick gradient and invariant checks run by `cellcount selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Dims, Tape, Tensor4, Var};
use crate::error::Result;
use crate::gradcheck::{check_graph, check_store, GradComparison};
use crate::model::{build_params, forward, Arch, ModelSpec, ParamGroup, ParamStore};
use crate::targets::{density_map, make_lrgt, proximity_map, CentroidList, KernelSpec, Point, ProximitySpec};
use crate::trainer::combined_loss;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Check::new(name, passed, detail),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }
}

fn uniform(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::from_vec(dims, (0..dims.numel()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("length matches dims")
}

/// Distinct values at least 0.01 apart and away from 0, so small probes never
/// cross a ReLU kink or change a max-pool winner.
fn separated(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor4 {
    let n = dims.numel();
    let mut vals: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0 + 0.5) * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor4::from_vec(dims, vals).expect("length matches dims")
}

fn worst(cs: &[GradComparison]) -> f64 {
    cs.iter().map(|c| c.rel_error).fold(0.0, f64::max)
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Per-op gradient checks at step 1e-3 against tolerance `tol`.
pub fn op_gradient_checks(tol: f64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases: Vec<(&str, Vec<Tensor4>, Build)> = vec![
        (
            "conv3x3",
            vec![
                uniform(Dims::new(2, 3, 6, 5), &mut rng),
                uniform(Dims::new(4, 3, 3, 3), &mut rng),
                uniform(Dims::new(1, 4, 1, 1), &mut rng),
            ],
            |t, v| t.conv2d_same(v[0], v[1], v[2]),
        ),
        (
            "conv1x1",
            vec![
                uniform(Dims::new(1, 4, 4, 4), &mut rng),
                uniform(Dims::new(2, 4, 1, 1), &mut rng),
                uniform(Dims::new(1, 2, 1, 1), &mut rng),
            ],
            |t, v| t.conv2d_same(v[0], v[1], v[2]),
        ),
        ("relu", vec![separated(Dims::new(2, 3, 4, 4), &mut rng)], |t, v| Ok(t.relu(v[0]))),
        ("maxpool2", vec![separated(Dims::new(2, 2, 6, 4), &mut rng)], |t, v| t.maxpool2(v[0])),
        ("upsample2", vec![uniform(Dims::new(2, 2, 3, 5), &mut rng)], |t, v| {
            Ok(t.upsample_bilinear2(v[0]))
        }),
        (
            "concat",
            vec![uniform(Dims::new(2, 2, 3, 3), &mut rng), uniform(Dims::new(2, 3, 3, 3), &mut rng)],
            |t, v| t.concat_channels(v[0], v[1]),
        ),
        (
            "mse",
            vec![uniform(Dims::new(3, 1, 4, 4), &mut rng), uniform(Dims::new(3, 1, 4, 4), &mut rng)],
            |t, v| {
                let target = t.constant(t.value(v[1]).clone());
                t.mse_loss(v[0], target)
            },
        ),
        ("sq_norm", vec![uniform(Dims::new(1, 2, 3, 3), &mut rng), uniform(Dims::new(2, 1, 2, 2), &mut rng)], |t, v| {
            Ok(t.sq_norm(&[v[0], v[1]]))
        }),
        (
            "add",
            vec![uniform(Dims::new(2, 2, 3, 3), &mut rng), uniform(Dims::new(2, 2, 3, 3), &mut rng)],
            |t, v| t.add(v[0], v[1]),
        ),
        ("scale", vec![uniform(Dims::new(1, 3, 4, 2), &mut rng)], |t, v| Ok(t.scale(v[0], -1.7))),
        ("sum", vec![uniform(Dims::new(2, 3, 2, 2), &mut rng)], |t, v| t.sum(v[0])),
        ("weighted_sum", vec![uniform(Dims::new(1, 2, 3, 3), &mut rng), uniform(Dims::new(1, 2, 3, 3), &mut rng)], |t, v| {
            let w = t.value(v[1]).clone();
            t.weighted_sum(v[0], w)
        }),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, build)| {
            let r = check_graph(&inputs, build, 400, 1e-3, 7).map(|cs| {
                // Targets and weights enter as constants, so only the first input is checked.
                let cs = if matches!(name, "mse" | "weighted_sum") { &cs[..1] } else { &cs[..] };
                let w = worst(cs);
                (w < tol, format!("max relative error {w:.2e} (tol {tol:.0e})"))
            });
            Check::from_result(&format!("gradient {name}"), r)
        })
        .collect()
}

/// Combined training loss of a model on one random input with random targets.
fn toy_loss(tape: &mut Tape, store: &ParamStore, x: &Tensor4, targets: &[Tensor4; 4]) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let out = forward(tape, store, xv, store.has_aux())?;
    let full = tape.constant(targets[0].clone());
    let lr = [
        tape.constant(targets[1].clone()),
        tape.constant(targets[2].clone()),
        tape.constant(targets[3].clone()),
    ];
    Ok(combined_loss(tape, &out, full, lr, [1.0 / 64.0, 1.0 / 16.0, 1.0 / 4.0], 0.01)?.total)
}

pub fn toy_problem(size: usize, seed: u64) -> (Tensor4, [Tensor4; 4]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor4::from_vec(
        Dims::new(1, 3, size, size),
        (0..3 * size * size).map(|_| rng.random::<f32>()).collect(),
    )
    .expect("length matches dims");
    let full = Tensor4::from_vec(
        Dims::new(1, 1, size, size),
        (0..size * size).map(|_| rng.random::<f32>()).collect(),
    )
    .expect("length matches dims");
    let [a, b, c] = make_lrgt(&full).expect("size is a multiple of 8");
    (x, [full, a, b, c])
}

/// Zero biases put dead units exactly on the ReLU kink, where central
/// differences disagree with the one-sided analytic derivative.
pub fn jitter_biases(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.params_mut() {
        if p.name.ends_with(".bias") {
            for v in p.value.data_mut() {
                *v = rng.random_range(0.01..0.1);
            }
        }
    }
}

/// End-to-end check of the combined loss w.r.t. every parameter group of a
/// C-FCRN with auxiliary heads on a `(1, 3, 16, 16)` input.
pub fn model_gradient_check(width_divisor: usize, tol: f64) -> Vec<Check> {
    let r: Result<Vec<(ParamGroup, GradComparison)>> = (|| {
        let mut store = build_params(&ModelSpec::new(Arch::Cfcrn, true).narrowed(width_divisor), 3)?;
        jitter_biases(&mut store, 11);
        let (x, targets) = toy_problem(16, 5);
        let groups = check_store(&store, |t, s| toy_loss(t, s, &x, &targets), 12, 1e-3, 9)?;
        Ok(groups)
    })();
    match r {
        Ok(groups) => groups
            .into_iter()
            .map(|(g, c)| {
                Check::new(
                    &format!("gradient end-to-end {g:?}"),
                    c.passes(tol),
                    format!("relative error {:.2e} over {} coords (tol {tol:.0e})", c.rel_error, c.checked),
                )
            })
            .collect(),
        Err(e) => vec![Check::new("gradient end-to-end", false, format!("error: {e}"))],
    }
}

fn random_list(rng: &mut ChaCha8Rng, h: usize, w: usize, max_cells: usize) -> CentroidList {
    let n = rng.random_range(0..=max_cells);
    let pts = (0..n)
        .map(|_| Point {
            x: rng.random_range(0..w),
            y: rng.random_range(0..h),
        })
        .collect();
    CentroidList::new("r", w, h, pts).expect("points are in range")
}

pub fn counting_identity(trials: usize, tol: f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let r = (|| {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let list = random_list(&mut rng, 48, 64, 50);
            let map = density_map(&list, &KernelSpec::default())?;
            worst = worst.max((map.sum() - list.count() as f64).abs());
        }
        Ok((worst < tol, format!("max |sum - N| = {worst:.2e} over {trials} lists")))
    })();
    Check::from_result("counting identity", r)
}

pub fn lrgt_conservation(trials: usize, tol: f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let r = (|| {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let full = Tensor4::from_map(64, 64, (0..64 * 64).map(|_| rng.random::<f32>()).collect())?;
            let total = full.sum();
            for lr in make_lrgt(&full)? {
                worst = worst.max((lr.sum() - total).abs());
            }
        }
        Ok((worst < tol, format!("max mass change {worst:.2e} over {trials} maps")))
    })();
    Check::from_result("lrgt conservation", r)
}

/// Auxiliary losses of one forward pass, main loss first.
pub fn head_losses(store: &ParamStore, x: &Tensor4, targets: &[Tensor4; 4]) -> Result<[f64; 4]> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = forward(&mut tape, store, xv, true)?;
    let full = tape.constant(targets[0].clone());
    let lr = [
        tape.constant(targets[1].clone()),
        tape.constant(targets[2].clone()),
        tape.constant(targets[3].clone()),
    ];
    let t = combined_loss(&mut tape, &out, full, lr, [1.0; 3], 0.0)?;
    let aux = t.aux.expect("heads ran");
    Ok([tape.scalar(t.main)?, tape.scalar(aux[0])?, tape.scalar(aux[1])?, tape.scalar(aux[2])?])
}

pub fn gradient_partition(width_divisor: usize) -> Check {
    let r = (|| {
        let mut store = build_params(&ModelSpec::new(Arch::Cfcrn, true).narrowed(width_divisor), 8)?;
        let (x, targets) = toy_problem(32, 13);
        let before = head_losses(&store, &x, &targets)?;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for id in store.ids_in(ParamGroup::Theta4).collect::<Vec<_>>() {
            for v in store.params_mut()[id.index()].value.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let after = head_losses(&store, &x, &targets)?;
        let aux_delta = (1..4).map(|k| (after[k] - before[k]).abs()).fold(0.0, f64::max);
        let main_delta = (after[0] - before[0]).abs();
        Ok((
            aux_delta < 1e-6 && main_delta > 0.0,
            format!("max |dL_k| = {aux_delta:.1e}, |dL| = {main_delta:.3e}"),
        ))
    })();
    Check::from_result("deep-supervision partition", r)
}

pub fn format_round_trips() -> Check {
    let r = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = uniform(Dims::new(2, 3, 4, 5), &mut rng);
        let mut buf = Vec::new();
        t.write_to(&mut buf)?;
        let tensor_ok = Tensor4::read_from(&buf[..])? == t;
        let store = build_params(&ModelSpec::new(Arch::Cfcrn, true).narrowed(8), 1)?;
        let mut ck = Vec::new();
        store.write_checkpoint(&mut ck)?;
        let back = ParamStore::read_checkpoint(&ck[..])?;
        let store_ok = back
            .params()
            .iter()
            .zip(store.params())
            .all(|(a, b)| a.name == b.name && a.value.data().iter().map(|v| v.to_bits()).eq(b.value.data().iter().map(|v| v.to_bits())))
            && back.len() == store.len();
        Ok((tensor_ok && store_ok, format!("tensor {tensor_ok}, checkpoint {store_ok}")))
    })();
    Check::from_result("format round-trips", r)
}

pub fn proximity_endpoints() -> Check {
    let r = (|| {
        let spec = ProximitySpec::default();
        let list = CentroidList::new("p", 64, 64, vec![Point { x: 10, y: 10 }, Point { x: 50, y: 40 }])?;
        let map = proximity_map(&list, &spec)?;
        let at_centroids = list.points.iter().all(|p| map.get(0, 0, p.y, p.x) == 1.0);
        let beyond = map.get(0, 0, 10, 25) == 0.0 && map.get(0, 0, 63, 0) == 0.0 && spec.value_at(15.0) == 0.0;
        Ok((at_centroids && beyond, format!("1 at centroids: {at_centroids}, 0 at D >= d: {beyond}")))
    })();
    Check::from_result("proximity endpoints", r)
}

/// The whole suite.
pub fn run() -> Vec<Check> {
    let mut checks = op_gradient_checks(1e-3);
    checks.extend(model_gradient_check(1, 1e-2));
    checks.push(counting_identity(100, 1e-4));
    checks.push(lrgt_conservation(100, 1e-4));
    checks.push(gradient_partition(8));
    checks.push(format_round_trips());
    checks.push(proximity_endpoints());
    checks
}

#[cfg(test)]
mod tests {
    #[test]
    fn suite_passes() {
        for c in super::run() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}

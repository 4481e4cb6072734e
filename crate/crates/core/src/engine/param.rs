use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::{Dims, Tensor4};
use crate::error::{Error, Result};

/// Position of a parameter inside its store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn from_index(index: usize) -> Self {
        ParamId(index)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor together with its gradient and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor4,
    pub grad: Tensor4,
    pub momentum: Tensor4,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Tensor4) -> Self {
        let dims = value.dims();
        ParamTensor {
            name: name.into(),
            value,
            grad: Tensor4::zeros(dims),
            momentum: Tensor4::zeros(dims),
        }
    }

    pub fn zeros(name: impl Into<String>, dims: Dims) -> Self {
        ParamTensor::new(name, Tensor4::zeros(dims))
    }

    pub fn dims(&self) -> Dims {
        self.value.dims()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn clear_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Orthogonally initialized tensor: viewed as a `dims.batch x rest` matrix,
/// its rows are orthonormal (its columns when `rest < dims.batch`).
///
/// Drawn as the sign-corrected Q factor of a standard-normal matrix.
pub fn orthogonal_init<R: Rng + ?Sized>(name: impl Into<String>, dims: Dims, rng: &mut R) -> ParamTensor {
    let rows = dims.batch;
    let cols = dims.sample();
    if rows == 0 || cols == 0 {
        return ParamTensor::zeros(name, dims);
    }
    let (tall, short) = (rows.max(cols), rows.min(cols));
    // Column-major fill keeps the draw order independent of nalgebra internals.
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            data.push(v as f32);
        }
    }
    ParamTensor::new(name, Tensor4::from_vec(dims, data).expect("dims match"))
}

/// Sign convention of the momentum update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    /// `m <- beta*m + (1-beta)*lr*g; w <- w - m`.
    #[default]
    Descent,
    /// `d <- beta*d - (1-beta)*lr*g; w <- w - d`, which climbs the loss.
    /// Only kept for auditing the printed update rule.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub beta: f32,
    /// Strength of the `lambda * ||w||^2` penalty; adds `2*lambda*w` to the gradient.
    pub lambda: f32,
    pub rule: UpdateRule,
}

/// One momentum-SGD step over every parameter, then clears the gradients.
///
/// Fails without touching any value if a gradient is not finite.
pub fn sgd_momentum_step(params: &mut [ParamTensor], cfg: SgdConfig) -> Result<()> {
    if !(0.0..1.0).contains(&cfg.beta) {
        return Err(Error::usage(format!("momentum must lie in [0, 1), got {}", cfg.beta)));
    }
    if let Some(p) = params.iter().find(|p| p.grad.has_non_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient in parameter '{}'",
            p.name
        )));
    }
    let step = (1.0 - cfg.beta) * cfg.lr;
    for p in params.iter_mut() {
        let value = p.value.data_mut();
        let grad = p.grad.data();
        let mom = p.momentum.data_mut();
        for ((w, &g), m) in value.iter_mut().zip(grad).zip(mom.iter_mut()) {
            let total = g + 2.0 * cfg.lambda * *w;
            match cfg.rule {
                UpdateRule::Descent => *m = cfg.beta * *m + step * total,
                UpdateRule::Literal => *m = cfg.beta * *m - step * total,
            }
            *w -= *m;
        }
        p.clear_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one(value: f32, grad: f32) -> ParamTensor {
        let mut p = ParamTensor::new("w", Tensor4::scalar(value));
        p.grad = Tensor4::scalar(grad);
        p
    }

    fn gram_error(p: &ParamTensor) -> f64 {
        let rows = p.dims().batch;
        let cols = p.dims().sample();
        let d = p.value.data();
        let (n, dot): (usize, Box<dyn Fn(usize, usize) -> f64>) = if rows <= cols {
            (rows, Box::new(|i, j| (0..cols).map(|t| d[i * cols + t] as f64 * d[j * cols + t] as f64).sum()))
        } else {
            (cols, Box::new(|i, j| (0..rows).map(|t| d[t * cols + i] as f64 * d[t * cols + j] as f64).sum()))
        };
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(i, j) - want).abs());
            }
        }
        worst
    }

    #[test]
    fn orthogonal_rows_for_wide_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = orthogonal_init("k", Dims::new(64, 32, 3, 3), &mut rng);
        assert!(gram_error(&p) < 1e-5);
        for r in 0..64 {
            let norm: f64 = p.value.data()[r * 288..(r + 1) * 288].iter().map(|&v| (v as f64).powi(2)).sum();
            assert!((norm.sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn orthogonal_columns_for_tall_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = orthogonal_init("k", Dims::new(32, 3, 1, 1), &mut rng);
        assert!(gram_error(&p) < 1e-5);
    }

    #[test]
    fn orthogonal_init_is_deterministic() {
        let a = orthogonal_init("k", Dims::new(8, 4, 3, 3), &mut ChaCha8Rng::seed_from_u64(9));
        let b = orthogonal_init("k", Dims::new(8, 4, 3, 3), &mut ChaCha8Rng::seed_from_u64(9));
        let bits = |p: &ParamTensor| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn plain_gradient_descent_when_no_momentum() {
        let mut ps = vec![one(2.0, 0.5)];
        let cfg = SgdConfig { lr: 0.1, beta: 0.0, lambda: 0.0, rule: UpdateRule::Descent };
        sgd_momentum_step(&mut ps, cfg).unwrap();
        assert!((ps[0].value.data()[0] - 1.95).abs() < 1e-7);
        assert_eq!(ps[0].grad.data()[0], 0.0);
    }

    #[test]
    fn coasts_on_momentum_with_zero_grad() {
        let mut ps = vec![one(1.0, 0.0)];
        ps[0].momentum = Tensor4::scalar(0.2);
        let cfg = SgdConfig { lr: 0.1, beta: 0.5, lambda: 0.0, rule: UpdateRule::Descent };
        sgd_momentum_step(&mut ps, cfg).unwrap();
        assert!((ps[0].value.data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn hand_computed_update_with_penalty() {
        let mut ps = vec![one(1.0, 1.0)];
        let cfg = SgdConfig { lr: 0.1, beta: 0.99, lambda: 0.01, rule: UpdateRule::Descent };
        sgd_momentum_step(&mut ps, cfg).unwrap();
        assert!((ps[0].momentum.data()[0] - 0.00102).abs() < 1e-8);
        assert!((ps[0].value.data()[0] - 0.99898).abs() < 1e-7);
    }

    #[test]
    fn literal_rule_moves_uphill() {
        let mut ps = vec![one(1.0, 1.0)];
        let cfg = SgdConfig { lr: 0.1, beta: 0.0, lambda: 0.0, rule: UpdateRule::Literal };
        sgd_momentum_step(&mut ps, cfg).unwrap();
        assert!((ps[0].value.data()[0] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut ps = vec![one(1.0, 0.0), one(1.0, f32::NAN)];
        ps[1].name = "bad".into();
        let cfg = SgdConfig { lr: 0.1, beta: 0.9, lambda: 0.0, rule: UpdateRule::Descent };
        let err = sgd_momentum_step(&mut ps, cfg).unwrap_err();
        assert!(err.to_string().contains("bad"));
        assert_eq!(ps[0].value.data()[0], 1.0);
    }

    #[test]
    fn rejects_momentum_of_one() {
        let mut ps = vec![one(1.0, 0.0)];
        let cfg = SgdConfig { lr: 0.1, beta: 1.0, lambda: 0.0, rule: UpdateRule::Descent };
        assert!(sgd_momentum_step(&mut ps, cfg).is_err());
    }
}

//! Deeply supervised training: patch sampling, augmentation, the combined loss
//! and the momentum-SGD loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{sgd_momentum_step, Dims, SgdConfig, Tape, Tensor4, UpdateRule, Var};
use crate::error::{Error, Result};
use crate::model::{build_params, forward, ForwardOutput, ModelSpec, ParamStore};
use crate::targets::{make_lrgt, DensityTarget, LR_FACTORS};

/// Learning rates tried by [`select_lr`] unless configured otherwise.
pub const DEFAULT_LR_CANDIDATES: [f32; 6] = [0.05, 0.01, 0.005, 0.0001, 0.0005, 0.001];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weights of the three auxiliary losses, coarsest head first.
    pub alpha: [f32; 3],
    /// Strength of the squared-norm penalty over every parameter.
    pub lambda: f32,
    pub beta: f32,
    pub lr: f32,
    pub lr_candidates: Vec<f32>,
    /// Share of `epochs` spent on each learning-rate probe.
    pub probe_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patches_per_image: usize,
    pub patch_size: usize,
    /// Factor applied to every target map; predictions are divided by it when counting.
    pub amplification: f32,
    /// Rotations are drawn uniformly from `[0, rotation_deg]`.
    pub rotation_deg: f32,
    pub flips: bool,
    pub seed: u64,
    pub rule: UpdateRule,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Compute the validation loss every this many epochs (and always after the last).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: [1.0 / 64.0, 1.0 / 16.0, 1.0 / 4.0],
            lambda: 0.01,
            beta: 0.99,
            lr: 0.001,
            lr_candidates: DEFAULT_LR_CANDIDATES.to_vec(),
            probe_fraction: 0.05,
            batch_size: 100,
            epochs: 6000,
            patches_per_image: 100,
            patch_size: 128,
            amplification: 100.0,
            rotation_deg: 40.0,
            flips: true,
            seed: 0,
            rule: UpdateRule::Descent,
            checkpoint_every: 0,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if let Some(a) = self.alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return bad(format!("alpha weights must lie in [0, 1], got {a}"));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.lr_candidates.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return bad("lr candidates must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(8) {
            return bad(format!("patch_size must be a positive multiple of 8, got {}", self.patch_size));
        }
        if !(self.amplification > 0.0 && self.amplification.is_finite()) {
            return bad(format!("amplification must be positive, got {}", self.amplification));
        }
        if !(0.0..=360.0).contains(&self.rotation_deg) {
            return bad(format!("rotation_deg must lie in [0, 360], got {}", self.rotation_deg));
        }
        if !(0.0..=1.0).contains(&self.probe_fraction) {
            return bad(format!("probe_fraction must lie in [0, 1], got {}", self.probe_fraction));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        // The penalty is part of the loss graph, so the optimizer adds none.
        SgdConfig {
            lr: self.lr,
            beta: self.beta,
            lambda: 0.0,
            rule: self.rule,
        }
    }

    /// Length of one learning-rate probe.
    pub fn probe_epochs(&self) -> usize {
        ((self.epochs as f64 * self.probe_fraction).round() as usize).max(1)
    }
}

/// One preprocessed image with its unamplified targets.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    /// `(1, C, H, W)` with values in `[0, 1]`.
    pub image: Tensor4,
    pub target: DensityTarget,
}

impl Example {
    pub fn new(id: impl Into<String>, image: Tensor4, target: DensityTarget) -> Result<Self> {
        let (i, t) = (image.dims(), target.full.dims());
        if i.batch != 1 || t.batch != 1 || t.channels != 1 || (i.height, i.width) != (t.height, t.width) {
            return Err(Error::shape(format!("image {i} and density map {t} do not align")));
        }
        Ok(Example {
            id: id.into(),
            image,
            target,
        })
    }
}

/// An aligned crop of an image and its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: Tensor4,
    pub target: DensityTarget,
}

/// Crops rows `y0..y0+h`, columns `x0..x0+w` of every channel of a batch-1 tensor.
pub fn crop(t: &Tensor4, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor4> {
    let d = t.dims();
    if d.batch != 1 || y0 + h > d.height || x0 + w > d.width {
        return Err(Error::shape(format!("crop {h}x{w} at ({y0}, {x0}) does not fit {d}")));
    }
    let mut out = Vec::with_capacity(d.channels * h * w);
    for c in 0..d.channels {
        for y in y0..y0 + h {
            let start = t.offset(0, c, y, x0);
            out.extend_from_slice(&t.data()[start..start + w]);
        }
    }
    Tensor4::from_vec(Dims::new(1, d.channels, h, w), out)
}

/// `n` random `size x size` crops of `ex`. Offsets are multiples of 8 so the
/// low-resolution targets are cut from the image-level maps without resampling.
pub fn sample_patches<R: Rng + ?Sized>(ex: &Example, n: usize, size: usize, rng: &mut R) -> Result<Vec<Patch>> {
    let d = ex.image.dims();
    if d.height < size || d.width < size {
        return Err(Error::usage(format!(
            "image '{}' ({}x{}) is smaller than the {size}x{size} patch",
            ex.id, d.height, d.width
        )));
    }
    if !size.is_multiple_of(8) {
        return Err(Error::usage(format!("patch size {size} is not a multiple of 8")));
    }
    let (max_y, max_x) = ((d.height - size) / 8, (d.width - size) / 8);
    (0..n)
        .map(|_| {
            let y0 = 8 * rng.random_range(0..=max_y);
            let x0 = 8 * rng.random_range(0..=max_x);
            let mut lr = Vec::with_capacity(3);
            for (k, f) in LR_FACTORS.iter().enumerate() {
                lr.push(crop(&ex.target.lr[k], y0 / f, x0 / f, size / f, size / f)?);
            }
            Ok(Patch {
                image: crop(&ex.image, y0, x0, size, size)?,
                target: DensityTarget {
                    full: crop(&ex.target.full, y0, x0, size, size)?,
                    lr: [lr.remove(0), lr.remove(0), lr.remove(0)],
                },
            })
        })
        .collect()
}

/// A rotation about the patch center followed by optional flips.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Augmentation {
    pub angle_deg: f32,
    pub hflip: bool,
    pub vflip: bool,
}

impl Augmentation {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_angle_deg: f32, flips: bool) -> Self {
        let angle_deg = if max_angle_deg > 0.0 {
            rng.random_range(0.0..=max_angle_deg)
        } else {
            0.0
        };
        let (hflip, vflip) = if flips {
            (rng.random_bool(0.5), rng.random_bool(0.5))
        } else {
            (false, false)
        };
        Augmentation {
            angle_deg,
            hflip,
            vflip,
        }
    }

    /// Applies the transform to every plane of `t`.
    pub fn apply_map(&self, t: &Tensor4) -> Tensor4 {
        let mut out = if self.angle_deg != 0.0 {
            rotate(t, self.angle_deg)
        } else {
            t.clone()
        };
        let d = out.dims();
        let (h, w) = (d.height, d.width);
        for plane in out.data_mut().chunks_mut(h * w) {
            if self.hflip {
                plane.chunks_mut(w).for_each(|row| row.reverse());
            }
            if self.vflip {
                for y in 0..h / 2 {
                    let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
                    top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
                }
            }
        }
        out
    }

    /// Transforms image and density alike, then rebuilds the low-resolution
    /// targets from the transformed density.
    pub fn apply(&self, p: &Patch) -> Result<Patch> {
        if *self == Augmentation::default() {
            return Ok(p.clone());
        }
        let full = self.apply_map(&p.target.full);
        Ok(Patch {
            image: self.apply_map(&p.image),
            target: DensityTarget {
                lr: make_lrgt(&full)?,
                full,
            },
        })
    }
}

/// Bilinear rotation by `angle_deg` counter-clockwise about the plane center;
/// samples falling outside the frame read as zero.
fn rotate(t: &Tensor4, angle_deg: f32) -> Tensor4 {
    let d = t.dims();
    let (h, w) = (d.height, d.width);
    let (sin, cos) = (angle_deg as f64).to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Tensor4::zeros(d);
    for (src, dst) in t.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        let at = |y: i64, x: i64| {
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                0.0
            } else {
                src[y as usize * w + x as usize] as f64
            }
        };
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sx = cos * dx - sin * dy + cx;
                let sy = sin * dx + cos * dy + cy;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
                dst[y * w + x] = v as f32;
            }
        }
    }
    out
}

/// Random augmentation drawn from the ranges in `cfg`.
pub fn augment<R: Rng + ?Sized>(p: &Patch, cfg: &TrainConfig, rng: &mut R) -> Result<Patch> {
    Augmentation::random(rng, cfg.rotation_deg, cfg.flips).apply(p)
}

/// Loss nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// Final-output squared error.
    pub main: Var,
    /// Squared errors of the auxiliary maps, when the heads ran.
    pub aux: Option<[Var; 3]>,
    pub penalty: Var,
}

/// Builds `L + sum_k alpha_k L_k + lambda * ||params||^2` on the tape. The
/// targets are expected to carry the amplification already.
pub fn combined_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    full: Var,
    lr: [Var; 3],
    alpha: [f32; 3],
    lambda: f32,
) -> Result<LossTerms> {
    let main = tape.mse_loss(out.density, full)?;
    let mut total = main;
    let aux = match out.aux {
        Some(maps) => {
            let mut terms = [main; 3];
            for k in 0..3 {
                terms[k] = tape.mse_loss(maps[k], lr[k])?;
                let weighted = tape.scale(terms[k], alpha[k]);
                total = tape.add(total, weighted)?;
            }
            Some(terms)
        }
        None => None,
    };
    let params: Vec<Var> = out.bound.iter().map(|&(_, v)| v).collect();
    let norm = tape.sq_norm(&params);
    let penalty = tape.scale(norm, lambda);
    total = tape.add(total, penalty)?;
    Ok(LossTerms {
        total,
        main,
        aux,
        penalty,
    })
}

/// Stacked inputs and amplified targets of one batch.
struct Batch {
    images: Tensor4,
    full: Tensor4,
    lr: [Tensor4; 3],
}

fn make_batch(patches: &[Patch], amplification: f32) -> Result<Batch> {
    let stack = |f: &dyn Fn(&Patch) -> &Tensor4| Tensor4::stack(&patches.iter().map(f).collect::<Vec<_>>());
    let amp = |mut t: Tensor4| {
        t.scale(amplification);
        t
    };
    Ok(Batch {
        images: stack(&|p| &p.image)?,
        full: amp(stack(&|p| &p.target.full)?),
        lr: [
            amp(stack(&|p| &p.target.lr[0])?),
            amp(stack(&|p| &p.target.lr[1])?),
            amp(stack(&|p| &p.target.lr[2])?),
        ],
    })
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub main: f64,
    pub aux: Option<[f64; 3]>,
    pub penalty: f64,
}

/// Evaluates the combined loss of a batch of patches. With `grads` the
/// parameter gradients are accumulated into `store`.
pub fn batch_loss(store: &mut ParamStore, patches: &[Patch], cfg: &TrainConfig, grads: bool) -> Result<StepLosses> {
    let batch = make_batch(patches, cfg.amplification)?;
    let mut tape = Tape::new();
    let x = tape.constant(batch.images);
    let out = forward(&mut tape, store, x, store.has_aux())?;
    let full = tape.constant(batch.full);
    let [l1, l2, l3] = batch.lr;
    let lr = [tape.constant(l1), tape.constant(l2), tape.constant(l3)];
    let terms = combined_loss(&mut tape, &out, full, lr, cfg.alpha, cfg.lambda)?;
    let losses = StepLosses {
        total: tape.scalar(terms.total)?,
        main: tape.scalar(terms.main)?,
        aux: match terms.aux {
            Some(a) => Some([tape.scalar(a[0])?, tape.scalar(a[1])?, tape.scalar(a[2])?]),
            None => None,
        },
        penalty: tape.scalar(terms.penalty)?,
    };
    if grads && losses.total.is_finite() {
        tape.backward(terms.total)?;
        tape.accumulate_param_grads(store.params_mut())?;
    }
    Ok(losses)
}

/// Mean final-output loss over whole images, with amplified targets.
pub fn validation_loss(store: &ParamStore, data: &[Example], amplification: f32) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::usage("validation set is empty"));
    }
    let mut sum = 0.0;
    for ex in data {
        let mut tape = Tape::new();
        let x = tape.constant(ex.image.clone());
        let out = forward(&mut tape, store, x, false)?;
        let mut target = ex.target.full.clone();
        target.scale(amplification);
        let t = tape.constant(target);
        let l = tape.mse_loss(out.density, t)?;
        sum += tape.scalar(l)?;
    }
    Ok(sum / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    /// Mean combined loss over the epoch's batches.
    pub train_lcmb: f64,
    /// Mean final-output loss over the epoch's batches.
    pub train_l: f64,
    pub val_l: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Per-run output directory: config snapshot, loss log and checkpoints.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    losses: BufWriter<File>,
}

impl RunDir {
    pub const CONFIG: &'static str = "config.toml";
    pub const LOSSES: &'static str = "losses.csv";
    pub const FINAL: &'static str = "model.dckp";
    pub const LAST_GOOD: &'static str = "last_good.dckp";

    /// Creates `root`, writes the config snapshot and starts the loss log.
    pub fn create(root: impl AsRef<Path>, config_snapshot: &str) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(&root, e))?;
        let cfg = root.join(Self::CONFIG);
        fs::write(&cfg, config_snapshot).map_err(|e| Error::io(&cfg, e))?;
        let path = root.join(Self::LOSSES);
        let mut losses = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        writeln!(losses, "epoch,train_lcmb,val_l").map_err(|e| Error::io(&path, e))?;
        Ok(RunDir { root, losses })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:05}.dckp"))
    }

    fn log(&mut self, r: &EpochRecord) -> Result<()> {
        let val = r.val_l.map(|v| v.to_string()).unwrap_or_default();
        let path = self.root.join(Self::LOSSES);
        writeln!(self.losses, "{},{},{}", r.epoch, r.train_lcmb, val)
            .and_then(|_| self.losses.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Owns the parameters and the sampling stream of one training run.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub state: TrainState,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // Stream 0 initializes parameters; sampling draws from its own stream.
        rng.set_stream(1);
        Ok(Trainer {
            cfg,
            state: TrainState {
                store,
                epoch: 0,
                history: Vec::new(),
            },
            rng,
        })
    }

    /// Fresh parameters for `spec` drawn from the configured seed.
    pub fn from_spec(cfg: TrainConfig, spec: &ModelSpec) -> Result<Self> {
        let store = build_params(spec, cfg.seed)?;
        Trainer::new(cfg, store)
    }

    pub fn store(&self) -> &ParamStore {
        &self.state.store
    }

    /// One pass over freshly sampled, augmented patches of `train`. On a
    /// non-finite loss or gradient the parameters are rolled back to their
    /// state at the start of the epoch and an error is returned.
    pub fn train_epoch(&mut self, train: &[Example], val: &[Example]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::usage("training set is empty"));
        }
        let snapshot = self.state.store.clone();
        let cfg = &self.cfg;
        let mut patches = Vec::with_capacity(train.len() * cfg.patches_per_image);
        for ex in train {
            for p in sample_patches(ex, cfg.patches_per_image, cfg.patch_size, &mut self.rng)? {
                patches.push(augment(&p, cfg, &mut self.rng)?);
            }
        }
        patches.shuffle(&mut self.rng);
        if patches.is_empty() {
            return Err(Error::usage("no patches sampled; patches_per_image is 0"));
        }

        let epoch = self.state.epoch + 1;
        let (mut lcmb, mut l) = (0.0, 0.0);
        for chunk in patches.chunks(cfg.batch_size) {
            let step = batch_loss(&mut self.state.store, chunk, cfg, true).and_then(|losses| {
                if !losses.total.is_finite() {
                    return Err(Error::Numerical(format!("combined loss became {}", losses.total)));
                }
                sgd_momentum_step(self.state.store.params_mut(), cfg.sgd())?;
                Ok(losses)
            });
            match step {
                Ok(losses) => {
                    let share = chunk.len() as f64 / patches.len() as f64;
                    lcmb += losses.total * share;
                    l += losses.main * share;
                }
                Err(e) => {
                    self.state.store = snapshot;
                    return Err(match e {
                        Error::Numerical(msg) => Error::Numerical(format!(
                            "{msg} in epoch {epoch}; parameters restored to the end of epoch {}",
                            epoch - 1
                        )),
                        other => other,
                    });
                }
            }
        }

        let val_l = if !val.is_empty() && (epoch.is_multiple_of(cfg.val_every.max(1)) || epoch == cfg.epochs) {
            Some(validation_loss(&self.state.store, val, cfg.amplification)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_lcmb: lcmb,
            train_l: l,
            val_l,
        };
        self.state.epoch = epoch;
        self.state.history.push(record);
        Ok(record)
    }

    /// Runs the remaining configured epochs. With a run directory, every epoch
    /// is logged, checkpoints are written on schedule, and the final model is
    /// saved; after a numerical failure the restored parameters are saved as
    /// the last good checkpoint before the error is returned.
    pub fn fit(&mut self, train: &[Example], val: &[Example], run: Option<&mut RunDir>) -> Result<()> {
        self.fit_observed(train, val, run, |_| {})
    }

    /// [`Trainer::fit`] calling `on_epoch` after every completed epoch.
    pub fn fit_observed(
        &mut self,
        train: &[Example],
        val: &[Example],
        mut run: Option<&mut RunDir>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        while self.state.epoch < self.cfg.epochs {
            let record = match self.train_epoch(train, val) {
                Ok(r) => r,
                Err(e) => {
                    if let (Error::Numerical(_), Some(run)) = (&e, run.as_deref()) {
                        self.state.store.save(run.root().join(RunDir::LAST_GOOD))?;
                    }
                    return Err(e);
                }
            };
            if let Some(run) = run.as_deref_mut() {
                run.log(&record)?;
                let every = self.cfg.checkpoint_every;
                if every > 0 && record.epoch % every == 0 {
                    self.state.store.save(run.checkpoint_path(record.epoch))?;
                }
            }
            on_epoch(&record);
        }
        if let Some(run) = run {
            self.state.store.save(run.root().join(RunDir::FINAL))?;
        }
        Ok(())
    }
}

/// Outcome of one learning-rate probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub lr: f32,
    /// Final validation loss, or training loss without a validation set;
    /// `None` when the probe diverged.
    pub score: Option<f64>,
}

/// Trains a fresh model briefly with each candidate rate and returns the one
/// with the lowest final loss, together with every probe outcome.
pub fn select_lr(
    candidates: &[f32],
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    spec: &ModelSpec,
) -> Result<(f32, Vec<ProbeResult>)> {
    match candidates {
        [] => return Err(Error::usage("no learning-rate candidates")),
        [only] => {
            return Ok((
                *only,
                vec![ProbeResult {
                    lr: *only,
                    score: None,
                }],
            ))
        }
        _ => {}
    }
    let mut probes = Vec::with_capacity(candidates.len());
    for &lr in candidates {
        let probe_cfg = TrainConfig {
            lr,
            epochs: cfg.probe_epochs(),
            val_every: usize::MAX,
            checkpoint_every: 0,
            ..cfg.clone()
        };
        let mut trainer = Trainer::from_spec(probe_cfg, spec)?;
        let score = match trainer.fit(train, val, None) {
            Ok(()) => trainer
                .state
                .history
                .last()
                .map(|r| r.val_l.unwrap_or(r.train_lcmb))
                .filter(|s| s.is_finite()),
            Err(Error::Numerical(_)) => None,
            Err(e) => return Err(e),
        };
        probes.push(ProbeResult { lr, score });
    }
    let best = probes
        .iter()
        .filter_map(|p| p.score.map(|s| (p.lr, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    match best {
        Some((lr, _)) => Ok((lr, probes)),
        None => Err(Error::Numerical(format!(
            "every learning-rate probe diverged: {candidates:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use rand::Rng;
    use crate::targets::{CentroidList, KernelSpec, Point};
    use proptest::prelude::*;

    fn example(h: usize, w: usize, points: &[(usize, usize)], seed: u64) -> Example {
        let pts = points.iter().map(|&(x, y)| Point { x, y }).collect();
        let list = CentroidList::new("ex", w, h, pts).unwrap();
        let target = DensityTarget::from_centroids(&list, &KernelSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.random::<f32>()).collect();
        let image = Tensor4::from_vec(Dims::new(1, 3, h, w), data).unwrap();
        Example::new("ex", image, target).unwrap()
    }

    #[test]
    fn default_config_values() {
        let c = TrainConfig::default();
        assert_eq!(c.alpha, [1.0 / 64.0, 1.0 / 16.0, 1.0 / 4.0]);
        assert_eq!((c.lambda, c.beta, c.batch_size), (0.01, 0.99, 100));
        assert_eq!(c.lr_candidates, vec![0.05, 0.01, 0.005, 0.0001, 0.0005, 0.001]);
        assert_eq!(c.sgd().lambda, 0.0);
        c.validate().unwrap();
        assert_eq!(c.probe_epochs(), 300);
    }

    #[test]
    fn config_rejects_bad_values() {
        for cfg in [
            TrainConfig { beta: 1.0, ..Default::default() },
            TrainConfig { alpha: [0.0, 1.5, 0.0], ..Default::default() },
            TrainConfig { patch_size: 100, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn patches_align_with_lr_targets() {
        let ex = example(64, 48, &[(5, 5), (30, 40), (47, 63), (20, 10)], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let patches = sample_patches(&ex, 20, 16, &mut rng).unwrap();
        assert_eq!(patches.len(), 20);
        for p in &patches {
            assert_eq!(p.image.dims(), Dims::new(1, 3, 16, 16));
            let rebuilt = make_lrgt(&p.target.full).unwrap();
            for k in 0..3 {
                assert_eq!(p.target.lr[k].dims(), rebuilt[k].dims());
                for (a, b) in p.target.lr[k].data().iter().zip(rebuilt[k].data()) {
                    assert!((a - b).abs() < 1e-6);
                }
                assert!((p.target.lr[k].sum() - p.target.full.sum()).abs() < 1e-4);
            }
        }
        assert!(sample_patches(&ex, 0, 16, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn whole_image_patch_is_the_image() {
        let ex = example(32, 32, &[(10, 12)], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = &sample_patches(&ex, 1, 32, &mut rng).unwrap()[0];
        assert_eq!(p.image, ex.image);
        assert_eq!(p.target, ex.target);
    }

    #[test]
    fn small_image_is_a_usage_error() {
        let ex = example(16, 16, &[], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_patches(&ex, 1, 32, &mut rng), Err(Error::Usage(_))));
    }

    #[test]
    fn identity_augmentation() {
        let ex = example(32, 32, &[(10, 12)], 4);
        let p = Patch {
            image: ex.image.clone(),
            target: ex.target.clone(),
        };
        assert_eq!(Augmentation::default().apply(&p).unwrap(), p);
    }

    #[test]
    fn flips_are_involutions() {
        let ex = example(16, 24, &[(3, 4)], 5);
        for (h, v) in [(true, false), (false, true), (true, true)] {
            let a = Augmentation {
                angle_deg: 0.0,
                hflip: h,
                vflip: v,
            };
            let once = a.apply_map(&ex.image);
            assert_ne!(once, ex.image);
            assert_eq!(a.apply_map(&once), ex.image);
        }
        let h = Augmentation {
            hflip: true,
            ..Default::default()
        };
        let t = Tensor4::from_map(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(h.apply_map(&t).data(), &[3., 2., 1., 6., 5., 4.]);
        let v = Augmentation {
            vflip: true,
            ..Default::default()
        };
        assert_eq!(v.apply_map(&t).data(), &[4., 5., 6., 1., 2., 3.]);
    }

    #[test]
    fn quarter_turn_is_exact_on_square_planes() {
        let t = Tensor4::from_map(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let r = rotate(&t, 90.0);
        // Counter-clockwise as displayed: the right column becomes the top row.
        for (a, b) in r.data().iter().zip([2., 4., 1., 3.]) {
            assert!((a - b).abs() < 1e-5, "{:?}", r.data());
        }
    }

    #[test]
    fn rotation_roughly_conserves_interior_mass() {
        let ex = example(64, 64, &[(32, 32), (25, 40), (40, 22)], 6);
        for angle in [5.0, 17.0, 33.0, 40.0] {
            let aug = Augmentation {
                angle_deg: angle,
                hflip: true,
                vflip: false,
            };
            let p = aug
                .apply(&Patch {
                    image: ex.image.clone(),
                    target: ex.target.clone(),
                })
                .unwrap();
            let (before, after) = (ex.target.full.sum(), p.target.full.sum());
            assert!(((after - before) / before).abs() < 0.05, "{angle}: {before} -> {after}");
            assert!((p.target.lr[0].sum() - after).abs() < 1e-4);
        }
    }

    fn tiny_store(arch: Arch, aux: bool) -> ParamStore {
        build_params(&ModelSpec::new(arch, aux).narrowed(8), 11).unwrap()
    }

    #[test]
    fn combined_loss_degenerate_weights() {
        let ex = example(16, 16, &[(8, 8)], 7);
        let p = Patch {
            image: ex.image.clone(),
            target: ex.target.clone(),
        };
        let mut store = tiny_store(Arch::Cfcrn, true);
        let cfg = TrainConfig {
            alpha: [0.0; 3],
            lambda: 0.0,
            ..Default::default()
        };
        let l = batch_loss(&mut store, std::slice::from_ref(&p), &cfg, false).unwrap();
        assert_eq!(l.total, l.main);
        assert_eq!(l.penalty, 0.0);

        let cfg = TrainConfig {
            alpha: [0.5, 0.25, 1.0],
            lambda: 0.01,
            ..Default::default()
        };
        let l = batch_loss(&mut store, std::slice::from_ref(&p), &cfg, false).unwrap();
        let a = l.aux.unwrap();
        let expect = l.main + 0.5 * a[0] + 0.25 * a[1] + a[2] + 0.01 * store.sq_norm();
        assert!((l.total - expect).abs() < 1e-6 * expect.abs().max(1.0), "{l:?}");
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut store = tiny_store(Arch::Fcrn, false);
        let image = Tensor4::zeros(Dims::new(1, 3, 16, 16));
        let target = DensityTarget::from_full(Tensor4::zeros(Dims::new(1, 1, 16, 16))).unwrap();
        let cfg = TrainConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let l = batch_loss(&mut store, &[Patch { image, target }], &cfg, false).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn zero_alpha_leaves_only_the_penalty_on_heads() {
        let ex = example(16, 16, &[(4, 9), (12, 3)], 8);
        let p = Patch {
            image: ex.image.clone(),
            target: ex.target.clone(),
        };
        let mut store = tiny_store(Arch::Cfcrn, true);
        let cfg = TrainConfig {
            alpha: [0.0; 3],
            lambda: 0.01,
            ..Default::default()
        };
        batch_loss(&mut store, &[p], &cfg, true).unwrap();
        for group in crate::model::ParamGroup::ALL.into_iter().filter(|g| g.is_aux()) {
            for id in store.ids_in(group).collect::<Vec<_>>() {
                let t = store.get(id);
                for (g, w) in t.grad.data().iter().zip(t.value.data()) {
                    assert!((g - 2.0 * 0.01 * w).abs() < 1e-7, "{}", t.name);
                }
            }
        }
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-4,
            batch_size: 2,
            epochs: 3,
            patches_per_image: 2,
            patch_size: 16,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn seeded_runs_have_identical_histories() {
        let data = vec![example(32, 32, &[(5, 9), (20, 20)], 9), example(32, 32, &[(14, 3)], 10)];
        let spec = ModelSpec::new(Arch::Cfcrn, true).narrowed(8);
        let run = || {
            let mut t = Trainer::from_spec(quick_cfg(), &spec).unwrap();
            t.fit(&data, &data[1..], None).unwrap();
            (t.state.history.clone(), t.store().clone())
        };
        let (h1, s1) = run();
        let (h2, s2) = run();
        assert_eq!(h1.len(), 3);
        assert_eq!(h1, h2);
        assert_eq!(s1, s2);
        assert!(h1.iter().all(|r| r.val_l.is_some()));
    }

    #[test]
    fn divergence_restores_last_good_parameters() {
        let data = vec![example(32, 32, &[(5, 9), (20, 20)], 9)];
        let spec = ModelSpec::new(Arch::Cfcrn, true).narrowed(8);
        let cfg = TrainConfig {
            lr: 1e30,
            beta: 0.0,
            epochs: 50,
            ..quick_cfg()
        };
        let mut t = Trainer::from_spec(cfg, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path(), "").unwrap();
        let err = t.fit(&data, &[], Some(&mut run)).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
        assert!(t.store().params().iter().all(|p| !p.value.has_non_finite()));
        let saved = ParamStore::load(dir.path().join(RunDir::LAST_GOOD)).unwrap();
        for (a, b) in saved.params().iter().zip(t.store().params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn run_directory_layout() {
        let data = vec![example(32, 32, &[(5, 9)], 12)];
        let spec = ModelSpec::new(Arch::Fcrn, false).narrowed(8);
        let cfg = TrainConfig {
            checkpoint_every: 2,
            epochs: 4,
            ..quick_cfg()
        };
        let mut t = Trainer::from_spec(cfg, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path(), "arch = \"fcrn\"\n").unwrap();
        t.fit(&data, &data, Some(&mut run)).unwrap();
        let log = fs::read_to_string(dir.path().join(RunDir::LOSSES)).unwrap();
        let lines: Vec<_> = log.lines().collect();
        assert_eq!(lines[0], "epoch,train_lcmb,val_l");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("4,"));
        assert!(run.checkpoint_path(2).exists() && run.checkpoint_path(4).exists());
        assert!(!run.checkpoint_path(3).exists());
        let model = ParamStore::load(dir.path().join(RunDir::FINAL)).unwrap();
        assert_eq!(model.params().len(), t.store().params().len());
    }

    #[test]
    fn select_lr_rules() {
        let data = vec![example(32, 32, &[(5, 9), (20, 20)], 13)];
        let spec = ModelSpec::new(Arch::Cfcrn, true).narrowed(8);
        let cfg = TrainConfig {
            epochs: 20,
            probe_fraction: 0.25,
            ..quick_cfg()
        };
        let (lr, _) = select_lr(&[0.123], &data, &data, &cfg, &spec).unwrap();
        assert_eq!(lr, 0.123);
        let (lr, probes) = select_lr(&[3e38, 1e-5], &data, &data, &cfg, &spec).unwrap();
        assert_eq!(lr, 1e-5);
        assert_eq!(probes[0].score, None);
        let err = select_lr(&[3e38, 2e38], &data, &data, &cfg, &spec).unwrap_err();
        assert!(err.to_string().contains("3e38"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn crops_conserve_lr_mass(seed in 0u64..1000, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<(usize, usize)> = (0..n).map(|_| (rng.random_range(0..48), rng.random_range(0..40))).collect();
            let ex = example(40, 48, &pts, seed);
            for p in sample_patches(&ex, 4, 24, &mut rng).unwrap() {
                for k in 0..3 {
                    prop_assert!((p.target.lr[k].sum() - p.target.full.sum()).abs() < 1e-4);
                }
            }
        }
    }
}

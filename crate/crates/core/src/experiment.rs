//! k-fold cross-validation and the three-way architecture ablation.

use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::eval::{compute_metrics, count_cells, make_folds, FoldPlan, ImageCount, MetricsReport};
use crate::model::{predict, Arch, ModelSpec};
use crate::synth::LabeledImage;
use crate::targets::KernelSpec;
use crate::trainer::{EpochRecord, Example, TrainConfig, Trainer};

/// The three compared variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Fcrn,
    CfcrnOnly,
    CfcrnAux,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::CfcrnAux, Variant::CfcrnOnly, Variant::Fcrn];

    pub fn spec(self) -> ModelSpec {
        match self {
            Variant::Fcrn => ModelSpec::new(Arch::Fcrn, false),
            Variant::CfcrnOnly => ModelSpec::new(Arch::Cfcrn, false),
            Variant::CfcrnAux => ModelSpec::new(Arch::Cfcrn, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fcrn => "fcrn",
            Variant::CfcrnOnly => "cfcrn",
            Variant::CfcrnAux => "cfcrn+aux",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub history: Vec<EpochRecord>,
    /// Final-output loss on the held-out fold after the last epoch.
    pub final_val_l: f64,
    pub report: MetricsReport,
    pub store: crate::model::ParamStore,
}

#[derive(Clone, Debug)]
pub struct CrossvalReport {
    pub plan: FoldPlan,
    pub folds: Vec<FoldOutcome>,
    /// Metrics over every held-out image of every fold.
    pub aggregate: MetricsReport,
}

impl CrossvalReport {
    pub fn mean_final_val_l(&self) -> f64 {
        self.folds.iter().map(|f| f.final_val_l).sum::<f64>() / self.folds.len() as f64
    }
}

/// Predicted counts of `items` under a trained store.
pub fn predict_counts(
    store: &crate::model::ParamStore,
    items: &[Example],
    truth: &[f64],
    amplification: f64,
) -> Result<Vec<ImageCount>> {
    items
        .iter()
        .zip(truth)
        .map(|(ex, &t)| {
            let density = predict(store, &ex.image)?;
            Ok(ImageCount::new(ex.id.clone(), t, count_cells(&density, amplification)))
        })
        .collect()
}

/// Trains one model per fold on the other folds and scores it on the held-out
/// one. Up to `jobs` folds train concurrently; results do not depend on `jobs`.
pub fn crossval(
    items: &[LabeledImage],
    spec: &ModelSpec,
    cfg: &TrainConfig,
    kernel: &KernelSpec,
    k: usize,
    fold_seed: u64,
    jobs: usize,
) -> Result<CrossvalReport> {
    let ids: Vec<String> = items.iter().map(|i| i.id.clone()).collect();
    let plan = make_folds(&ids, k, fold_seed)?;
    if k < 2 {
        return Err(Error::usage("cross-validation needs at least 2 folds"));
    }
    let examples = items
        .iter()
        .map(|i| i.to_example(kernel, spec.in_channels))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<f64> = items.iter().map(|i| i.centroids.count() as f64).collect();

    let run_fold = |fold: usize| -> Result<FoldOutcome> {
        let (mut train, mut val, mut val_truth) = (Vec::new(), Vec::new(), Vec::new());
        for (ex, &t) in examples.iter().zip(&truth) {
            if plan.fold_of(&ex.id) == Some(fold) {
                val.push(ex.clone());
                val_truth.push(t);
            } else {
                train.push(ex.clone());
            }
        }
        let mut trainer = Trainer::from_spec(cfg.clone(), spec)?;
        trainer.fit(&train, &val, None)?;
        let final_val_l = trainer
            .state
            .history
            .last()
            .and_then(|r| r.val_l)
            .ok_or_else(|| Error::usage("no epochs were run"))?;
        let counts = predict_counts(trainer.store(), &val, &val_truth, cfg.amplification as f64)?;
        let report = if counts.len() >= 2 {
            compute_metrics(counts)?
        } else {
            single_image_report(counts)
        };
        Ok(FoldOutcome {
            fold,
            history: trainer.state.history.clone(),
            final_val_l,
            report,
            store: trainer.state.store,
        })
    };

    let slots: Vec<Mutex<Option<Result<FoldOutcome>>>> = (0..k).map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, k) {
            s.spawn(|| loop {
                let fold = {
                    let mut n = next.lock().expect("fold counter");
                    let f = *n;
                    *n += 1;
                    f
                };
                if fold >= k {
                    break;
                }
                let out = run_fold(fold);
                *slots[fold].lock().expect("fold slot") = Some(out);
            });
        }
    });
    let folds = slots
        .into_iter()
        .map(|m| m.into_inner().expect("fold slot").expect("every fold ran"))
        .collect::<Result<Vec<_>>>()?;
    let pooled = folds.iter().flat_map(|f| f.report.per_image.iter().cloned()).collect();
    Ok(CrossvalReport {
        aggregate: compute_metrics(pooled)?,
        plan,
        folds,
    })
}

/// Metrics of a one-image fold: the spread terms are taken as 0.
fn single_image_report(per_image: Vec<ImageCount>) -> MetricsReport {
    let c = &per_image[0];
    let abs = c.abs_error();
    let (mre, excluded) = if c.truth == 0.0 {
        (0.0, vec![c.image_id.clone()])
    } else {
        (abs / c.truth, Vec::new())
    };
    MetricsReport {
        mae: abs,
        stda: 0.0,
        mre,
        stdr: 0.0,
        excluded,
        per_image,
    }
}

/// Mean final validation loss of every variant under one seed.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub seed: u64,
    pub losses: Vec<(Variant, f64)>,
}

impl AblationRow {
    pub fn loss(&self, v: Variant) -> f64 {
        self.losses.iter().find(|(w, _)| *w == v).map(|&(_, l)| l).unwrap_or(f64::NAN)
    }

    /// `cfcrn+aux <= cfcrn <= fcrn` on mean final validation loss.
    pub fn ordered(&self) -> bool {
        let (a, c, f) = (
            self.loss(Variant::CfcrnAux),
            self.loss(Variant::CfcrnOnly),
            self.loss(Variant::Fcrn),
        );
        a <= c && c <= f
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub k: usize,
    pub seeds: Vec<u64>,
    /// Hidden widths are divided by this; 1 keeps the full network.
    pub width_divisor: usize,
    pub jobs: usize,
}

/// Cross-validates every variant under each seed. The seed drives both the
/// fold split and parameter initialization, so within a seed the variants
/// see the same folds and share their main-path initial values.
pub fn ablation(
    items: &[LabeledImage],
    cfg: &TrainConfig,
    kernel: &KernelSpec,
    plan: &AblationPlan,
    mut progress: impl FnMut(u64, Variant, &CrossvalReport),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(plan.seeds.len());
    for &seed in &plan.seeds {
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let mut losses = Vec::with_capacity(3);
        for v in Variant::ALL {
            let spec = v.spec().narrowed(plan.width_divisor);
            let report = crossval(items, &spec, &run_cfg, kernel, plan.k, seed, plan.jobs)?;
            progress(seed, v, &report);
            losses.push((v, report.mean_final_val_l()));
        }
        rows.push(AblationRow { seed, losses });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_params;
    use crate::synth::{generate_synthetic, SyntheticSpec};

    fn data(n: usize) -> Vec<LabeledImage> {
        generate_synthetic(&SyntheticSpec {
            n_images: n,
            height: 32,
            width: 32,
            count_range: (2, 6),
            seed: 9,
            ..Default::default()
        })
        .unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-4,
            batch_size: 4,
            epochs: 2,
            patches_per_image: 1,
            patch_size: 16,
            val_every: usize::MAX,
            ..Default::default()
        }
    }

    #[test]
    fn crossval_reports_every_fold() {
        let items = data(6);
        let spec = Variant::CfcrnAux.spec().narrowed(8);
        let r = crossval(&items, &spec, &cfg(), &KernelSpec::default(), 3, 1, 1).unwrap();
        assert_eq!(r.folds.len(), 3);
        assert_eq!(r.aggregate.len(), 6);
        for f in &r.folds {
            assert_eq!(f.report.len(), 2);
            assert_eq!(f.history.len(), 2);
            assert!(f.final_val_l.is_finite());
        }
    }

    #[test]
    fn parallel_folds_match_serial() {
        let items = data(4);
        let spec = Variant::Fcrn.spec().narrowed(8);
        let a = crossval(&items, &spec, &cfg(), &KernelSpec::default(), 2, 5, 1).unwrap();
        let b = crossval(&items, &spec, &cfg(), &KernelSpec::default(), 2, 5, 2).unwrap();
        assert_eq!(a.aggregate, b.aggregate);
    }

    #[test]
    fn variants_share_main_path_initialization() {
        let with = build_params(&Variant::CfcrnAux.spec(), 4).unwrap();
        let without = build_params(&Variant::CfcrnOnly.spec(), 4).unwrap();
        for p in without.params() {
            assert_eq!(with.by_name(&p.name).unwrap().value, p.value, "{}", p.name);
        }
        assert!(with.len() > without.len());
    }

    #[test]
    fn ordering_rule() {
        let row = AblationRow {
            seed: 0,
            losses: vec![(Variant::CfcrnAux, 1.0), (Variant::CfcrnOnly, 2.0), (Variant::Fcrn, 2.0)],
        };
        assert!(row.ordered());
        let row = AblationRow {
            seed: 0,
            losses: vec![(Variant::CfcrnAux, 3.0), (Variant::CfcrnOnly, 2.0), (Variant::Fcrn, 4.0)],
        };
        assert!(!row.ordered());
    }
}

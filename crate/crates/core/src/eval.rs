//! Counting, count-error metrics, centroid extraction, fold assignment and
//! the paired significance test.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Tensor4;
use crate::error::{Error, Result};
use crate::targets::{CentroidList, Point};

/// Estimated number of cells: the map's total mass divided by the target amplification.
pub fn count_cells(density: &Tensor4, amplification: f64) -> f64 {
    density.sum() / amplification
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageCount {
    pub image_id: String,
    #[serde(rename = "true")]
    pub truth: f64,
    pub pred: f64,
}

impl ImageCount {
    pub fn new(image_id: impl Into<String>, truth: f64, pred: f64) -> Self {
        ImageCount {
            image_id: image_id.into(),
            truth,
            pred,
        }
    }

    pub fn abs_error(&self) -> f64 {
        (self.truth - self.pred).abs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_image: Vec<ImageCount>,
    pub mae: f64,
    pub stda: f64,
    /// Mean relative error over images with a nonzero true count.
    pub mre: f64,
    pub stdr: f64,
    /// Ids of images left out of the relative metrics because their true count is 0.
    pub excluded: Vec<String>,
}

impl MetricsReport {
    pub fn len(&self) -> usize {
        self.per_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_image.is_empty()
    }

    pub fn summary_line(&self) -> String {
        let mut s = format!(
            "# T={} MAE={} STDa={} MRE={} STDr={}",
            self.len(),
            self.mae,
            self.stda,
            self.mre,
            self.stdr
        );
        if !self.excluded.is_empty() {
            s.push_str(&format!(" excluded_from_relative={}", self.excluded.join(";")));
        }
        s
    }

    /// Per-image rows under an `image_id,true,pred` header, then the summary line.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["image_id", "true", "pred"])?;
        for c in &self.per_image {
            wr.write_record([c.image_id.clone(), c.truth.to_string(), c.pred.to_string()])?;
        }
        let mut inner = wr.into_inner().map_err(|e| Error::Stream(e.into_error()))?;
        writeln!(inner, "{}", self.summary_line())?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Reads the rows written by [`MetricsReport::write_csv`], skipping the summary.
pub fn read_counts_csv<R: Read>(r: R) -> Result<Vec<ImageCount>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let header = rd.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["image_id", "true", "pred"] {
        return Err(Error::Format(format!("expected header image_id,true,pred, found {header:?}")));
    }
    rd.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Mean absolute and relative count errors with their sample standard
/// deviations. Images whose true count is 0 are left out of the relative
/// metrics and listed in `excluded`; a single remaining image has STDr 0.
pub fn compute_metrics(per_image: Vec<ImageCount>) -> Result<MetricsReport> {
    if per_image.len() < 2 {
        return Err(Error::usage(format!(
            "metrics need at least 2 images, got {}",
            per_image.len()
        )));
    }
    if let Some(c) = per_image.iter().find(|c| !(c.truth.is_finite() && c.pred.is_finite())) {
        return Err(Error::Numerical(format!("non-finite count for image '{}'", c.image_id)));
    }
    let abs: Vec<f64> = per_image.iter().map(ImageCount::abs_error).collect();
    let (mae, stda) = mean_and_sample_std(&abs);
    let mut excluded = Vec::new();
    let mut rel = Vec::with_capacity(per_image.len());
    for c in &per_image {
        if c.truth == 0.0 {
            excluded.push(c.image_id.clone());
        } else {
            rel.push(c.abs_error() / c.truth);
        }
    }
    if rel.is_empty() {
        return Err(Error::usage("relative errors are undefined: every true count is 0"));
    }
    let (mre, stdr) = mean_and_sample_std(&rel);
    Ok(MetricsReport {
        per_image,
        mae,
        stda,
        mre,
        stdr,
        excluded,
    })
}

/// Local maxima of a single-channel map that exceed `threshold`, thinned by
/// greedy non-maximum suppression: going from the strongest peak down, a peak
/// closer than `min_distance` to an accepted one is dropped. The result is
/// ordered by descending density.
pub fn extract_centroids(
    image_id: impl Into<String>,
    density: &Tensor4,
    min_distance: f64,
    threshold: f32,
) -> Result<CentroidList> {
    let d = density.dims();
    if d.batch != 1 || d.channels != 1 {
        return Err(Error::shape(format!("expected a single density map, got {d}")));
    }
    let (h, w) = (d.height, d.width);
    let v = density.data();
    let mut peaks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let c = v[y * w + x];
            if c <= threshold {
                continue;
            }
            let is_max = (y.saturating_sub(1)..(y + 2).min(h))
                .all(|yy| (x.saturating_sub(1)..(x + 2).min(w)).all(|xx| v[yy * w + xx] <= c));
            if is_max {
                peaks.push((c, Point { x, y }));
            }
        }
    }
    // Stable sort keeps scan order among equal peaks.
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut kept: Vec<Point> = Vec::new();
    for (_, p) in peaks {
        let clear = kept.iter().all(|q| {
            let (dx, dy) = (p.x as f64 - q.x as f64, p.y as f64 - q.y as f64);
            dx.hypot(dy) >= min_distance
        });
        if clear {
            kept.push(p);
        }
    }
    CentroidList::new(image_id, w, h, kept)
}

/// Assignment of images to cross-validation folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// Ids in `fold`, sorted.
    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fold plans always serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: FoldPlan = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if plan.assignments.values().any(|&f| f >= plan.k) {
            return Err(Error::Format(format!("fold index out of range for k = {}", plan.k)));
        }
        Ok(plan)
    }
}

/// Shuffles the ids with `seed` and deals them round-robin into `k` folds,
/// so fold sizes differ by at most one.
pub fn make_folds(image_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || k > image_ids.len() {
        return Err(Error::usage(format!(
            "cannot split {} images into {k} folds",
            image_ids.len()
        )));
    }
    let mut sorted = image_ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != image_ids.len() {
        return Err(Error::usage("image ids are not unique"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let assignments = sorted.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect();
    Ok(FoldPlan { k, seed, assignments })
}

/// Result of the one-sided paired test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Probability of a statistic at most `t` under the null; small values
    /// favour `mean(a - b) < 0`.
    pub p: f64,
}

/// One-sided paired t-test on `d = a - b` against the alternative `mean(d) < 0`.
pub fn paired_ttest_onesided(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::usage(format!(
            "paired test needs two samples of equal length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_and_sample_std(&d);
    if sd == 0.0 || !sd.is_finite() {
        return Err(Error::Numerical(
            "paired differences have zero variance; the t statistic is undefined".into(),
        ));
    }
    let n = d.len() as f64;
    let t = mean / (sd / n.sqrt());
    let df = n - 1.0;
    Ok(TTest {
        t,
        df,
        p: student_t_cdf(t, df),
    })
}

/// CDF of Student's t distribution with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
    if t < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// `I_x(a, b)` from its continued fraction, using the symmetry
/// `I_x(a, b) = 1 - I_{1-x}(b, a)` where the fraction converges slowly.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    use statrs::function::gamma::ln_gamma;
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_fraction(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_fraction(b, a, 1.0 - x) / b
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let clamp = |v: f64| if v.abs() < TINY { TINY } else { v };
    let mut c = 1.0;
    let mut d = 1.0 / clamp(1.0 - (a + b) * x / (a + 1.0));
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let even = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        d = 1.0 / clamp(1.0 + even * d);
        c = clamp(1.0 + even / c);
        h *= d * c;
        let odd = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        d = 1.0 / clamp(1.0 + odd * d);
        c = clamp(1.0 + odd / c);
        let step = d * c;
        h *= step;
        if (step - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Dims;
    use crate::targets::{density_map, KernelSpec};
    use proptest::prelude::*;

    fn counts(truth: &[f64], pred: &[f64]) -> Vec<ImageCount> {
        truth
            .iter()
            .zip(pred)
            .enumerate()
            .map(|(i, (&t, &p))| ImageCount::new(format!("i{i}"), t, p))
            .collect()
    }

    #[test]
    fn count_cells_closed_forms() {
        assert_eq!(count_cells(&Tensor4::zeros(Dims::new(1, 1, 8, 8)), 100.0), 0.0);
        let c = Tensor4::full(Dims::new(1, 1, 6, 10), 0.5);
        assert!((count_cells(&c, 4.0) - 0.5 * 60.0 / 4.0).abs() < 1e-12);
        let pts = vec![Point { x: 20, y: 20 }, Point { x: 40, y: 12 }, Point { x: 33, y: 45 }];
        let list = CentroidList::new("a", 64, 64, pts).unwrap();
        let mut map = density_map(&list, &KernelSpec::default()).unwrap();
        map.scale(100.0);
        assert!((count_cells(&map, 100.0) - 3.0).abs() < 1e-4);
    }

    #[test]
    fn hand_example() {
        let r = compute_metrics(counts(&[10.0, 20.0], &[12.0, 16.0])).unwrap();
        assert_eq!(r.mae, 3.0);
        assert_eq!(r.mre, 0.2);
        assert_eq!(r.stda, 2f64.sqrt());
        assert_eq!(r.stdr, 0.0);
    }

    #[test]
    fn perfect_predictions() {
        let r = compute_metrics(counts(&[3.0, 8.0, 5.0], &[3.0, 8.0, 5.0])).unwrap();
        assert_eq!((r.mae, r.stda, r.mre, r.stdr), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn zero_truth_is_excluded_and_flagged() {
        let r = compute_metrics(counts(&[0.0, 10.0, 20.0], &[1.0, 12.0, 16.0])).unwrap();
        assert_eq!(r.excluded, vec!["i0"]);
        assert_eq!(r.mre, 0.2);
        assert!((r.mae - 7.0 / 3.0).abs() < 1e-12);
        assert!(r.summary_line().contains("excluded_from_relative=i0"));
        assert!(compute_metrics(counts(&[0.0, 0.0], &[1.0, 2.0])).is_err());
    }

    #[test]
    fn too_few_images() {
        assert!(matches!(compute_metrics(counts(&[1.0], &[1.0])), Err(Error::Usage(_))));
    }

    #[test]
    fn outlier_dominates_stda() {
        let calm = compute_metrics(counts(&[10.0; 5], &[11.0, 9.0, 11.0, 9.0, 11.0])).unwrap();
        let wild = compute_metrics(counts(&[10.0; 5], &[11.0, 9.0, 11.0, 9.0, 40.0])).unwrap();
        assert_eq!(calm.stda, 0.0);
        assert!(wild.stda > 10.0);
    }

    #[test]
    fn csv_round_trip() {
        let r = compute_metrics(counts(&[10.0, 20.0, 7.0], &[12.5, 16.0, 7.25])).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("image_id,true,pred\n"));
        assert!(text.lines().last().unwrap().starts_with("# T=3 MAE="));
        assert_eq!(read_counts_csv(&buf[..]).unwrap(), r.per_image);
    }

    fn kernel_map(h: usize, w: usize, pts: &[(usize, usize)]) -> Tensor4 {
        let pts = pts.iter().map(|&(x, y)| Point { x, y }).collect();
        density_map(&CentroidList::new("m", w, h, pts).unwrap(), &KernelSpec::default()).unwrap()
    }

    #[test]
    fn single_kernel_single_centroid() {
        let c = extract_centroids("m", &kernel_map(48, 48, &[(20, 27)]), 5.0, 0.0).unwrap();
        assert_eq!(c.points, vec![Point { x: 20, y: 27 }]);
    }

    #[test]
    fn two_distant_kernels() {
        let c = extract_centroids("m", &kernel_map(64, 96, &[(20, 30), (60, 30)]), 10.0, 0.0).unwrap();
        assert_eq!(c.count(), 2);
        let near = extract_centroids("m", &kernel_map(64, 96, &[(20, 30), (60, 30)]), 50.0, 0.0).unwrap();
        assert_eq!(near.count(), 1);
    }

    #[test]
    fn zero_map_has_no_centroids() {
        let c = extract_centroids("z", &Tensor4::zeros(Dims::new(1, 1, 16, 16)), 3.0, 0.0).unwrap();
        assert_eq!(c.count(), 0);
    }

    #[test]
    fn centroids_sorted_by_density() {
        let mut map = kernel_map(40, 40, &[(8, 8)]);
        map.add_assign(&kernel_map(40, 40, &[(30, 30)]).map(|v| 2.0 * v)).unwrap();
        let c = extract_centroids("m", &map, 4.0, 0.0).unwrap();
        assert_eq!(c.points, vec![Point { x: 30, y: 30 }, Point { x: 8, y: 8 }]);
    }

    #[test]
    fn folds_balanced_and_seeded() {
        let ids: Vec<String> = (0..40).map(|i| format!("img{i:03}")).collect();
        let plan = make_folds(&ids, 5, 3).unwrap();
        for f in 0..5 {
            assert_eq!(plan.members(f).len(), 8);
        }
        assert_eq!(plan, make_folds(&ids, 5, 3).unwrap());
        assert_ne!(plan, make_folds(&ids, 5, 4).unwrap());
        let loo = make_folds(&ids, 40, 0).unwrap();
        assert!((0..40).all(|f| loo.members(f).len() == 1));
        assert!(matches!(make_folds(&ids, 41, 0), Err(Error::Usage(_))));
        assert_eq!(FoldPlan::from_toml(&plan.to_toml()).unwrap(), plan);
    }

    #[test]
    fn ttest_direction_and_symmetry() {
        let b: Vec<f64> = (0..12).map(|i| 5.0 + i as f64).collect();
        let a: Vec<f64> = b.iter().enumerate().map(|(i, v)| v - 2.0 + 0.01 * (i % 3) as f64).collect();
        let r = paired_ttest_onesided(&a, &b).unwrap();
        assert!(r.t < 0.0 && r.p < 1e-10, "{r:?}");
        let s = paired_ttest_onesided(&b, &a).unwrap();
        assert!((s.p - (1.0 - r.p)).abs() < 1e-12);
        assert!(paired_ttest_onesided(&[1.0, 2.0], &[0.0, 1.0]).is_err());
        assert!(paired_ttest_onesided(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn t_cdf_known_values() {
        // df = 1 is the Cauchy distribution; df = 2 has a closed form.
        for t in [-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let cauchy = 0.5 + t.atan() / std::f64::consts::PI;
            assert!((student_t_cdf(t, 1.0) - cauchy).abs() < 1e-12);
            let two = 0.5 + t / (2.0 * (2.0 + t * t).sqrt());
            assert!((student_t_cdf(t, 2.0) - two).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(
            rows in prop::collection::vec((1u32..300, 0.0f64..400.0), 2..30),
            seed in 0u64..100,
        ) {
            let items: Vec<ImageCount> = rows.iter().enumerate()
                .map(|(i, &(t, p))| ImageCount::new(format!("i{i}"), t as f64, p)).collect();
            let mut shuffled = items.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = compute_metrics(items).unwrap();
            let b = compute_metrics(shuffled).unwrap();
            for (x, y) in [(a.mae, b.mae), (a.stda, b.stda), (a.mre, b.mre), (a.stdr, b.stdr)] {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }

        #[test]
        fn folds_partition(n in 1usize..60, k in 1usize..10, seed in 0u64..50) {
            prop_assume!(k <= n);
            let ids: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
            let plan = make_folds(&ids, k, seed).unwrap();
            let sizes: Vec<usize> = (0..k).map(|f| plan.members(f).len()).collect();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for id in &ids {
                prop_assert!(plan.fold_of(id).is_some());
            }
        }

        #[test]
        fn count_is_linear(a in prop::collection::vec(0.0f32..5.0, 16), b in prop::collection::vec(0.0f32..5.0, 16)) {
            let ta = Tensor4::from_map(4, 4, a).unwrap();
            let tb = Tensor4::from_map(4, 4, b).unwrap();
            let mut sum = ta.clone();
            sum.add_assign(&tb).unwrap();
            let lhs = count_cells(&sum, 100.0);
            let rhs = count_cells(&ta, 100.0) + count_cells(&tb, 100.0);
            prop_assert!((lhs - rhs).abs() < 1e-5);
        }
    }
}

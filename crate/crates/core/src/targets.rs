//! Ground-truth maps built from centroid annotations: Gaussian density maps,
//! their sum-pooled low-resolution versions, and proximity maps.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{Dims, Tensor4};
use crate::error::{Error, Result};

/// Sum-pooling factors of the three low-resolution targets, coarsest first.
/// Index `k` pairs with auxiliary head `k + 1`.
pub const LR_FACTORS: [usize; 3] = [8, 4, 2];

/// Pixel coordinate of an annotated centroid; `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: usize,
    pub y: usize,
}

/// Annotated cell centroids of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CentroidList {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<Point>,
}

impl CentroidList {
    pub fn new(image_id: impl Into<String>, width: usize, height: usize, points: Vec<Point>) -> Result<Self> {
        let list = CentroidList {
            image_id: image_id.into(),
            width,
            height,
            points,
        };
        list.validate()?;
        Ok(list)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.points.iter().find(|p| p.x >= self.width || p.y >= self.height) {
            return Err(Error::usage(format!(
                "centroid ({}, {}) of '{}' lies outside the {}x{} image",
                p.x, p.y, self.image_id, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Writes the annotation CSV (`x,y` header, one row per centroid).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "y"])?;
        for p in &self.points {
            wr.write_record([p.x.to_string(), p.y.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, image_id: impl Into<String>, width: usize, height: usize) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rd.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["x", "y"] {
            return Err(Error::Format(format!(
                "annotation header must be \"x,y\", got {:?}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let points = rd
            .deserialize::<Point>()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        CentroidList::new(image_id, width, height, points)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }

    pub fn load_csv(path: impl AsRef<Path>, image_id: impl Into<String>, width: usize, height: usize) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        CentroidList::read_csv(f, image_id, width, height)
    }
}

/// Discrete Gaussian kernel parameters: `sigma` in pixels and support
/// half-width `half_width` (the kernel is `(2*half_width+1)^2`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub sigma: f64,
    pub half_width: usize,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            sigma: 3.0,
            half_width: 10,
        }
    }
}

impl KernelSpec {
    /// Wider kernel used for large, bone-marrow-like cells.
    pub fn bone_marrow() -> Self {
        KernelSpec {
            sigma: 5.0,
            half_width: 10,
        }
    }

    pub fn side(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || self.half_width == 0 {
            return Err(Error::usage(format!(
                "kernel needs sigma > 0 and half-width >= 1, got sigma={} half-width={}",
                self.sigma, self.half_width
            )));
        }
        Ok(())
    }
}

/// Normalized Gaussian weights, row-major over `side() x side()`, summing to 1.
pub fn gaussian_kernel(spec: &KernelSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let k = spec.half_width as i64;
    let two_s2 = 2.0 * spec.sigma * spec.sigma;
    let mut w: Vec<f64> = Vec::with_capacity(spec.side() * spec.side());
    for ny in -k..=k {
        for nx in -k..=k {
            w.push((-((nx * nx + ny * ny) as f64) / two_s2).exp());
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Superposition of one unit-mass kernel per centroid, as a `(1, 1, H, W)` map.
///
/// A kernel clipped by the image border is rescaled so the part that remains
/// still carries mass 1; the map therefore always sums to the cell count.
pub fn density_map(centroids: &CentroidList, spec: &KernelSpec) -> Result<Tensor4> {
    centroids.validate()?;
    let kernel = gaussian_kernel(spec)?;
    let (w, h) = (centroids.width, centroids.height);
    let k = spec.half_width as i64;
    let side = spec.side();
    let mut acc = vec![0.0f64; w * h];
    for p in &centroids.points {
        let (px, py) = (p.x as i64, p.y as i64);
        let y_lo = (py - k).max(0);
        let y_hi = (py + k).min(h as i64 - 1);
        let x_lo = (px - k).max(0);
        let x_hi = (px + k).min(w as i64 - 1);
        let kidx = |y: i64, x: i64| ((y - py + k) as usize) * side + (x - px + k) as usize;
        let mut kept = 0.0;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                kept += kernel[kidx(y, x)];
            }
        }
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                acc[y as usize * w + x as usize] += kernel[kidx(y, x)] / kept;
            }
        }
    }
    Tensor4::from_map(h, w, acc.into_iter().map(|v| v as f32).collect())
}

/// Non-overlapping `factor x factor` sum-pooling of every plane.
pub fn sum_pool(map: &Tensor4, factor: usize) -> Result<Tensor4> {
    let d = map.dims();
    if factor == 0 || !d.height.is_multiple_of(factor) || !d.width.is_multiple_of(factor) {
        return Err(Error::shape(format!(
            "cannot sum-pool {d} by a factor of {factor}"
        )));
    }
    let (oh, ow) = (d.height / factor, d.width / factor);
    let od = Dims::new(d.batch, d.channels, oh, ow);
    let mut acc = vec![0.0f64; od.numel()];
    let src = map.data();
    for p in 0..d.batch * d.channels {
        for y in 0..d.height {
            let row = &src[(p * d.height + y) * d.width..(p * d.height + y + 1) * d.width];
            let out_row = &mut acc[(p * oh + y / factor) * ow..(p * oh + y / factor + 1) * ow];
            for (x, &v) in row.iter().enumerate() {
                out_row[x / factor] += v as f64;
            }
        }
    }
    Tensor4::from_vec(od, acc.into_iter().map(|v| v as f32).collect())
}

/// The three low-resolution targets, pooled by 8, 4 and 2.
pub fn make_lrgt(full: &Tensor4) -> Result<[Tensor4; 3]> {
    let d = full.dims();
    if !d.height.is_multiple_of(8) || !d.width.is_multiple_of(8) {
        return Err(Error::shape(format!(
            "low-resolution targets need spatial dims divisible by 8, got {d}"
        )));
    }
    Ok([
        sum_pool(full, LR_FACTORS[0])?,
        sum_pool(full, LR_FACTORS[1])?,
        sum_pool(full, LR_FACTORS[2])?,
    ])
}

/// Full-resolution density map plus its low-resolution versions.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityTarget {
    pub full: Tensor4,
    pub lr: [Tensor4; 3],
}

impl DensityTarget {
    pub fn from_full(full: Tensor4) -> Result<Self> {
        let lr = make_lrgt(&full)?;
        Ok(DensityTarget { full, lr })
    }

    pub fn from_centroids(centroids: &CentroidList, spec: &KernelSpec) -> Result<Self> {
        DensityTarget::from_full(density_map(centroids, spec)?)
    }

    pub fn scaled(&self, factor: f32) -> DensityTarget {
        let scale = |t: &Tensor4| t.map(|v| v * factor);
        DensityTarget {
            full: scale(&self.full),
            lr: [scale(&self.lr[0]), scale(&self.lr[1]), scale(&self.lr[2])],
        }
    }
}

/// Shape of the exponential proximity target: `decay` is its rate, `cutoff`
/// the distance beyond which the map is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProximitySpec {
    pub decay: f64,
    pub cutoff: f64,
}

impl Default for ProximitySpec {
    fn default() -> Self {
        ProximitySpec {
            decay: 3.0,
            cutoff: 15.0,
        }
    }
}

impl ProximitySpec {
    /// Map value at distance `dist` from the nearest centroid.
    pub fn value_at(&self, dist: f64) -> f64 {
        if dist > self.cutoff {
            return 0.0;
        }
        ((self.decay * (1.0 - dist / self.cutoff)).exp() - 1.0) / (self.decay.exp() - 1.0)
    }
}

/// Proximity map: `(e^{a(1-D/d)} - 1) / (e^a - 1)` where the distance `D`
/// to the nearest centroid is at most `d`, zero elsewhere.
pub fn proximity_map(centroids: &CentroidList, spec: &ProximitySpec) -> Result<Tensor4> {
    if !(spec.decay > 0.0) || !(spec.cutoff > 0.0) {
        return Err(Error::usage(format!(
            "proximity map needs positive decay and cutoff, got {} and {}",
            spec.decay, spec.cutoff
        )));
    }
    if centroids.points.is_empty() {
        return Err(Error::usage(format!(
            "proximity map of '{}' needs at least one centroid",
            centroids.image_id
        )));
    }
    centroids.validate()?;
    let (w, h) = (centroids.width, centroids.height);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let d2 = centroids
                .points
                .iter()
                .map(|p| {
                    let dx = x as f64 - p.x as f64;
                    let dy = y as f64 - p.y as f64;
                    dx * dx + dy * dy
                })
                .fold(f64::INFINITY, f64::min);
            out.push(spec.value_at(d2.sqrt()) as f32);
        }
    }
    Tensor4::from_map(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn list(w: usize, h: usize, pts: &[(usize, usize)]) -> CentroidList {
        CentroidList::new("t", w, h, pts.iter().map(|&(x, y)| Point { x, y }).collect()).unwrap()
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let spec = KernelSpec::default();
        let k = gaussian_kernel(&spec).unwrap();
        assert_eq!(k.len(), 21 * 21);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let s = spec.side();
        for y in 0..s {
            for x in 0..s {
                assert!((k[y * s + x] - k[y * s + (s - 1 - x)]).abs() < 1e-15);
                assert!((k[y * s + x] - k[(s - 1 - y) * s + x]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bad_kernel_specs_rejected() {
        assert!(gaussian_kernel(&KernelSpec { sigma: 0.0, half_width: 3 }).is_err());
        assert!(gaussian_kernel(&KernelSpec { sigma: 1.0, half_width: 0 }).is_err());
    }

    #[test]
    fn empty_list_gives_zero_map() {
        let y = density_map(&list(32, 16, &[]), &KernelSpec::default()).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 1, 16, 32));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interior_cells_sum_to_count() {
        let y = density_map(&list(64, 64, &[(20, 20), (40, 30), (32, 45)]), &KernelSpec::default()).unwrap();
        assert!((y.sum() - 3.0).abs() < 1e-4);
    }

    #[test]
    fn corner_cell_keeps_unit_mass() {
        let spec = KernelSpec::default();
        let y = density_map(&list(64, 64, &[(0, 0)]), &spec).unwrap();
        // Oracle: only the 11x11 quadrant survives; renormalizing it by its own sum gives 1.
        let k = gaussian_kernel(&spec).unwrap();
        let s = spec.side();
        let kept: f64 = (10..s).flat_map(|yy| (10..s).map(move |xx| (yy, xx))).map(|(yy, xx)| k[yy * s + xx]).sum();
        assert!(kept > 0.3 && kept < 0.34);
        assert!((y.sum() - 1.0).abs() < 1e-6);
        assert!((y.get(0, 0, 0, 0) as f64 - k[10 * s + 10] / kept).abs() < 1e-6);
    }

    #[test]
    fn out_of_bounds_centroid_rejected() {
        assert!(CentroidList::new("t", 8, 8, vec![Point { x: 8, y: 0 }]).is_err());
    }

    #[test]
    fn lrgt_shapes_for_128() {
        let y = density_map(&list(128, 128, &[(5, 100), (64, 64)]), &KernelSpec::default()).unwrap();
        let lr = make_lrgt(&y).unwrap();
        assert_eq!(lr[0].dims(), Dims::new(1, 1, 16, 16));
        assert_eq!(lr[1].dims(), Dims::new(1, 1, 32, 32));
        assert_eq!(lr[2].dims(), Dims::new(1, 1, 64, 64));
        for m in &lr {
            assert!((m.sum() - y.sum()).abs() < 1e-4);
        }
    }

    #[test]
    fn sum_pool_of_constant() {
        let m = Tensor4::full(Dims::new(1, 1, 4, 6), 0.5);
        let p = sum_pool(&m, 2).unwrap();
        assert!(p.data().iter().all(|&v| (v - 2.0).abs() < 1e-7));
    }

    #[test]
    fn lrgt_rejects_indivisible_dims() {
        let m = Tensor4::zeros(Dims::new(1, 1, 12, 16));
        assert!(matches!(make_lrgt(&m), Err(Error::Shape(_))));
    }

    #[test]
    fn proximity_endpoints_and_midpoint() {
        let spec = ProximitySpec::default();
        assert_eq!(spec.value_at(0.0), 1.0);
        assert_eq!(spec.value_at(15.0), 0.0);
        assert_eq!(spec.value_at(20.0), 0.0);
        let want = (1.5f64.exp() - 1.0) / (3.0f64.exp() - 1.0);
        assert!((spec.value_at(7.5) - want).abs() < 1e-15);

        let m = proximity_map(&list(40, 40, &[(10, 10)]), &spec).unwrap();
        assert_eq!(m.get(0, 0, 10, 10), 1.0);
        assert_eq!(m.get(0, 0, 10, 25), 0.0);
        assert_eq!(m.get(0, 0, 39, 39), 0.0);
    }

    #[test]
    fn proximity_needs_a_centroid() {
        assert!(matches!(
            proximity_map(&list(8, 8, &[]), &ProximitySpec::default()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let l = list(50, 40, &[(1, 2), (49, 39)]);
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("x,y\n"));
        let back = CentroidList::read_csv(buf.as_slice(), "t", 50, 40).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn csv_rejects_wrong_header() {
        assert!(CentroidList::read_csv(&b"row,col\n1,2\n"[..], "t", 8, 8).is_err());
    }

    fn points(max: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
        prop::collection::vec((0..48usize, 0..40usize), 0..max)
    }

    proptest! {
        #[test]
        fn density_is_additive(a in points(6), b in points(6)) {
            let spec = KernelSpec::default();
            let ya = density_map(&list(48, 40, &a), &spec).unwrap();
            let yb = density_map(&list(48, 40, &b), &spec).unwrap();
            let all: Vec<_> = a.iter().chain(&b).copied().collect();
            let yab = density_map(&list(48, 40, &all), &spec).unwrap();
            for ((u, v), w) in ya.data().iter().zip(yb.data()).zip(yab.data()) {
                prop_assert!((u + v - w).abs() < 1e-5);
            }
        }

        #[test]
        fn proximity_in_unit_interval_and_monotone(pts in points(5).prop_filter("nonempty", |p| !p.is_empty())) {
            let spec = ProximitySpec::default();
            let m = proximity_map(&list(48, 40, &pts), &spec).unwrap();
            prop_assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let mut last = f64::INFINITY;
            for i in 0..=40 {
                let v = spec.value_at(i as f64 * 0.5);
                prop_assert!(v <= last);
                last = v;
            }
        }
    }
}

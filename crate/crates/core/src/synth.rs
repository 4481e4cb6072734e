//! Synthetic fluorescence-like cell images with exact centroid annotations,
//! and the on-disk dataset layout shared by the command-line tools.
//!
//! A dataset directory holds `images/<id>.png` and `annotations/<id>.csv`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_image, write_image, Image8};
use crate::targets::{CentroidList, DensityTarget, KernelSpec, Point};
use crate::trainer::Example;

/// Placement attempts per cell before a non-overlapping layout is declared infeasible.
const PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of cells per image, drawn uniformly.
    pub count_range: (usize, usize),
    /// Range of blob semi-axes in pixels.
    pub cell_radius_range: (f64, f64),
    /// Range of blob peak intensities above background, in grey levels.
    pub intensity_range: (f64, f64),
    pub overlap_allowed: bool,
    pub noise_sigma: f64,
    pub background_level: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Bacterial-like profile: 256x256 frames holding 110 to 238 small cells.
    fn default() -> Self {
        SyntheticSpec {
            n_images: 200,
            height: 256,
            width: 256,
            count_range: (110, 238),
            cell_radius_range: (2.5, 5.0),
            intensity_range: (100.0, 200.0),
            overlap_allowed: true,
            noise_sigma: 4.0,
            background_level: 15.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (lo, hi) = self.count_range;
        if lo > hi {
            return bad(format!("count range ({lo}, {hi}) is empty"));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return bad(format!(
                "image size {}x{} (width x height) must be positive multiples of 8",
                self.width, self.height
            ));
        }
        let (r0, r1) = self.cell_radius_range;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return bad(format!("cell radius range ({r0}, {r1}) is invalid"));
        }
        let (i0, i1) = self.intensity_range;
        if !(0.0 <= i0 && i0 <= i1 && i1.is_finite()) {
            return bad(format!("intensity range ({i0}, {i1}) is invalid"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} is invalid", self.noise_sigma));
        }
        if !self.background_level.is_finite() {
            return bad("background level is not finite".into());
        }
        Ok(())
    }

    pub const FILE: &'static str = "spec.toml";

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synthetic specs always serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SyntheticSpec = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SyntheticSpec::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// One generated (or loaded) image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: Image8,
    pub centroids: CentroidList,
}

impl LabeledImage {
    /// Preprocessed network input and unamplified targets.
    pub fn to_example(&self, kernel: &KernelSpec, channels: usize) -> Result<Example> {
        let image = self.image.to_tensor(channels)?;
        let target = DensityTarget::from_centroids(&self.centroids, kernel)?;
        Example::new(self.id.clone(), image, target)
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    peak: f64,
}

/// Renders `spec.n_images` images; the same spec always yields the same bytes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let digits = spec.n_images.saturating_sub(1).to_string().len().max(3);
    (0..spec.n_images)
        .map(|i| {
            let id = format!("img{i:0digits$}");
            render_one(spec, id, &mut rng)
        })
        .collect()
}

fn render_one(spec: &SyntheticSpec, id: String, rng: &mut ChaCha8Rng) -> Result<LabeledImage> {
    let (h, w) = (spec.height, spec.width);
    let n = rng.random_range(spec.count_range.0..=spec.count_range.1);
    let mut blobs: Vec<Blob> = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    for k in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
            let a = rng.random_range(spec.cell_radius_range.0..=spec.cell_radius_range.1);
            let b = rng.random_range(spec.cell_radius_range.0..=a);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let peak = rng.random_range(spec.intensity_range.0..=spec.intensity_range.1);
            let blob = Blob {
                cx: x as f64,
                cy: y as f64,
                a,
                b,
                cos: angle.cos(),
                sin: angle.sin(),
                peak,
            };
            let clear = spec.overlap_allowed
                || blobs
                    .iter()
                    .all(|o| (o.cx - blob.cx).hypot(o.cy - blob.cy) >= o.a + blob.a);
            if clear {
                blobs.push(blob);
                points.push(Point { x, y });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::usage(format!(
                "infeasible packing: placed only {k} of {n} non-overlapping cells in a {w}x{h} image"
            )));
        }
    }

    let mut field = vec![spec.background_level; h * w];
    for blob in &blobs {
        let reach = 3.0 * blob.a;
        let (y0, y1) = ((blob.cy - reach).floor().max(0.0) as usize, ((blob.cy + reach).ceil() as usize).min(h - 1));
        let (x0, x1) = ((blob.cx - reach).floor().max(0.0) as usize, ((blob.cx + reach).ceil() as usize).min(w - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - blob.cx, y as f64 - blob.cy);
                let u = (blob.cos * dx + blob.sin * dy) / blob.a;
                let v = (-blob.sin * dx + blob.cos * dy) / blob.b;
                field[y * w + x] += blob.peak * (-(u * u + v * v)).exp();
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let data = field
        .into_iter()
        .map(|v| (v + noise.sample(rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(LabeledImage {
        image: Image8::gray(h, w, data)?,
        centroids: CentroidList::new(id.clone(), w, h, points)?,
        id,
    })
}

/// Writes `images/<id>.png` and `annotations/<id>.csv` under `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, items: &[LabeledImage]) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "annotations"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for item in items {
        write_image(dir.join("images").join(format!("{}.png", item.id)), &item.image)?;
        item.centroids
            .save_csv(dir.join("annotations").join(format!("{}.csv", item.id)))?;
    }
    Ok(())
}

/// Image ids of a dataset directory, sorted.
pub fn dataset_ids(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let images = dir.as_ref().join("images");
    let entries = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&images, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads every image of a dataset directory with its annotations.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let dir = dir.as_ref();
    let ids = dataset_ids(dir)?;
    if ids.is_empty() {
        return Err(Error::usage(format!("no PNG images under {}", dir.join("images").display())));
    }
    ids.into_iter()
        .map(|id| {
            let image = read_image(dir.join("images").join(format!("{id}.png")))?;
            let centroids = CentroidList::load_csv(
                dir.join("annotations").join(format!("{id}.csv")),
                id.clone(),
                image.width,
                image.height,
            )?;
            Ok(LabeledImage { id, image, centroids })
        })
        .collect()
}

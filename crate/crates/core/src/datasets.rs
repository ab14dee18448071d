//! Deterministic toy data: 2D synthetic distributions and small PNG images.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{ImageReader, Rgb, RgbImage};
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const MIXTURE_RADIUS: f64 = 2.0;
pub const MIXTURE_STD: f64 = 0.1;
pub const MIXTURE_MODES: usize = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    #[serde(rename = "gaussian_mixture_8")]
    GaussianMixture8,
    SwissRoll,
    TwoMoons,
    TinyImagesDir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub seed: u64,
    /// Source directory for image datasets.
    pub image_dir: Option<PathBuf>,
}

impl DatasetSpec {
    pub fn synthetic(kind: DatasetKind, n: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            seed,
            image_dir: None,
        }
    }
}

/// Per-dimension affine map `normalized = (raw - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dims: usize) -> Self {
        Self {
            shift: vec![0.0; dims],
            scale: vec![1.0; dims],
        }
    }

    /// Empirical mean and standard deviation; constant columns keep scale 1.
    pub fn fit(raw: ArrayView2<f64>) -> Result<Self> {
        if raw.nrows() == 0 {
            return Err(Error::Dataset(vec!["cannot fit normalization to no rows".into()]));
        }
        let shift = raw.mean_axis(Axis(0)).expect("nonempty").to_vec();
        let scale = raw
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|&s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Ok(Self { shift, scale })
    }

    pub fn dims(&self) -> usize {
        self.shift.len()
    }

    fn check(&self, a: &ArrayView2<f64>) -> Result<()> {
        if a.ncols() != self.dims() || self.scale.len() != self.dims() {
            return Err(Error::Shape {
                expected: vec![a.nrows(), self.dims()],
                got: vec![a.nrows(), a.ncols()],
            });
        }
        Ok(())
    }

    pub fn apply(&self, raw: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&raw)?;
        let mut out = raw.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.shift[j]) / self.scale[j];
            }
        }
        Ok(out)
    }

    pub fn invert(&self, normalized: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&normalized)?;
        let mut out = normalized.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.scale[j] + self.shift[j];
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Raw draws before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawData {
    pub data: Array2<f64>,
    /// Mixture component of each row, for the Gaussian mixture.
    pub labels: Option<Vec<usize>>,
    pub image_shape: Option<ImageShape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Normalized rows.
    pub data: Array2<f64>,
    pub normalization: Normalization,
    pub labels: Option<Vec<usize>>,
    pub image_shape: Option<ImageShape>,
}

impl Dataset {
    pub fn dims(&self) -> usize {
        self.data.ncols()
    }
}

pub fn mixture_center(mode: usize) -> (f64, f64) {
    let angle = 2.0 * PI * mode as f64 / MIXTURE_MODES as f64;
    (MIXTURE_RADIUS * angle.cos(), MIXTURE_RADIUS * angle.sin())
}

fn gaussian_mixture<R: Rng>(rng: &mut R, n: usize) -> (Array2<f64>, Vec<usize>) {
    let mut data = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for mut row in data.axis_iter_mut(Axis(0)) {
        let mode = rng.random_range(0..MIXTURE_MODES);
        let (cx, cy) = mixture_center(mode);
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        row[0] = cx + MIXTURE_STD * dx;
        row[1] = cy + MIXTURE_STD * dy;
        labels.push(mode);
    }
    (data, labels)
}

fn swiss_roll<R: Rng>(rng: &mut R, n: usize) -> Array2<f64> {
    let mut data = Array2::zeros((n, 2));
    for mut row in data.axis_iter_mut(Axis(0)) {
        let theta = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        row[0] = theta * theta.cos() + 0.25 * dx;
        row[1] = theta * theta.sin() + 0.25 * dy;
    }
    data
}

fn two_moons<R: Rng>(rng: &mut R, n: usize) -> Array2<f64> {
    let mut data = Array2::zeros((n, 2));
    for mut row in data.axis_iter_mut(Axis(0)) {
        let theta = PI * rng.random::<f64>();
        let (x, y) = if rng.random::<bool>() {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        row[0] = x + 0.05 * dx;
        row[1] = y + 0.05 * dy;
    }
    data
}

/// Sorted `.png` files of a directory.
fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads up to `limit` PNG images as RGB rows in channel-major order with
/// pixel values in `[0, 1]`. Every unreadable or mismatched file is reported.
pub fn load_image_dir(dir: &Path, limit: usize) -> Result<(Array2<f64>, ImageShape)> {
    let files = png_files(dir)?;
    if files.is_empty() {
        return Err(Error::Dataset(vec![format!("{}: no .png files", dir.display())]));
    }
    let files = &files[..files.len().min(limit)];
    let mut problems = Vec::new();
    let mut images = Vec::with_capacity(files.len());
    let mut shape: Option<(u32, u32)> = None;
    for path in files {
        let decoded = ImageReader::open(path)
            .map_err(|e| e.to_string())
            .and_then(|r| r.decode().map_err(|e| e.to_string()));
        match decoded {
            Ok(img) => {
                let rgb = img.to_rgb8();
                let dims = rgb.dimensions();
                match shape {
                    None => shape = Some(dims),
                    Some(s) if s != dims => {
                        problems.push(format!(
                            "{}: size {}x{} differs from {}x{}",
                            path.display(),
                            dims.0,
                            dims.1,
                            s.0,
                            s.1
                        ));
                        continue;
                    }
                    _ => {}
                }
                images.push(rgb);
            }
            Err(e) => problems.push(format!("{}: {e}", path.display())),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(problems));
    }
    let (w, h) = shape.expect("at least one image decoded");
    let shape = ImageShape {
        channels: 3,
        height: h as usize,
        width: w as usize,
    };
    let plane = shape.height * shape.width;
    let mut data = Array2::zeros((images.len(), shape.len()));
    for (mut row, img) in data.axis_iter_mut(Axis(0)).zip(&images) {
        for (x, y, px) in img.enumerate_pixels() {
            let p = y as usize * shape.width + x as usize;
            for c in 0..3 {
                row[c * plane + p] = px[c] as f64 / 255.0;
            }
        }
    }
    Ok((data, shape))
}

pub fn generate_raw(spec: &DatasetSpec) -> Result<RawData> {
    if spec.n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    let mut rng = stream_rng(spec.seed, Stream::Dataset);
    Ok(match spec.kind {
        DatasetKind::GaussianMixture8 => {
            let (data, labels) = gaussian_mixture(&mut rng, spec.n);
            RawData {
                data,
                labels: Some(labels),
                image_shape: None,
            }
        }
        DatasetKind::SwissRoll => RawData {
            data: swiss_roll(&mut rng, spec.n),
            labels: None,
            image_shape: None,
        },
        DatasetKind::TwoMoons => RawData {
            data: two_moons(&mut rng, spec.n),
            labels: None,
            image_shape: None,
        },
        DatasetKind::TinyImagesDir => {
            let dir = spec
                .image_dir
                .as_deref()
                .ok_or_else(|| Error::Config("image dataset needs image_dir".into()))?;
            let (data, shape) = load_image_dir(dir, spec.n)?;
            RawData {
                data,
                labels: None,
                image_shape: Some(shape),
            }
        }
    })
}

/// Images map `[0, 1]` to `[-1, 1]`; synthetic data is standardized.
fn default_normalization(raw: &RawData) -> Result<Normalization> {
    match raw.image_shape {
        Some(_) => Ok(Normalization {
            shift: vec![0.5; raw.data.ncols()],
            scale: vec![0.5; raw.data.ncols()],
        }),
        None => Normalization::fit(raw.data.view()),
    }
}

/// Draws the dataset and normalizes it with parameters fitted to itself.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    let raw = generate_raw(spec)?;
    let normalization = default_normalization(&raw)?;
    finish(raw, normalization)
}

/// Draws the dataset and normalizes it with given parameters, e.g. those of
/// a training set when building an evaluation reference.
pub fn generate_with(spec: &DatasetSpec, normalization: &Normalization) -> Result<Dataset> {
    finish(generate_raw(spec)?, normalization.clone())
}

fn finish(raw: RawData, normalization: Normalization) -> Result<Dataset> {
    Ok(Dataset {
        data: normalization.apply(raw.data.view())?,
        normalization,
        labels: raw.labels,
        image_shape: raw.image_shape,
    })
}

/// Writes raw-scale image rows (values in `[0, 1]`, clamped) as a grid.
pub fn write_contact_sheet(
    rows: ArrayView2<f64>,
    shape: ImageShape,
    columns: usize,
    path: &Path,
) -> Result<()> {
    if rows.ncols() != shape.len() || shape.channels != 3 {
        return Err(Error::Shape {
            expected: vec![rows.nrows(), shape.len()],
            got: vec![rows.nrows(), rows.ncols()],
        });
    }
    let n = rows.nrows();
    let cols = columns.max(1).min(n.max(1));
    let grid_rows = n.div_ceil(cols).max(1);
    let (w, h) = (shape.width, shape.height);
    let mut sheet = RgbImage::new((cols * w) as u32, (grid_rows * h) as u32);
    let plane = w * h;
    for (i, row) in rows.axis_iter(Axis(0)).enumerate() {
        let (gx, gy) = ((i % cols) * w, (i / cols) * h);
        for y in 0..h {
            for x in 0..w {
                let px = |c: usize| (row[c * plane + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                sheet.put_pixel((gx + x) as u32, (gy + y) as u32, Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    sheet
        .save(path)
        .map_err(|e| Error::format(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        for kind in [DatasetKind::GaussianMixture8, DatasetKind::SwissRoll, DatasetKind::TwoMoons] {
            let spec = DatasetSpec::synthetic(kind, 300, 4);
            assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        }
    }

    #[test]
    fn normalized_moments() {
        for kind in [DatasetKind::GaussianMixture8, DatasetKind::SwissRoll, DatasetKind::TwoMoons] {
            let d = generate(&DatasetSpec::synthetic(kind, 10_000, 1)).unwrap();
            assert_eq!(d.data.ncols(), 2);
            for col in d.data.axis_iter(Axis(1)) {
                assert!(col.mean().unwrap().abs() < 0.05);
                assert!((col.std(0.0) - 1.0).abs() < 0.05);
            }
        }
    }

    #[test]
    fn normalization_round_trip() {
        let raw = generate_raw(&DatasetSpec::synthetic(DatasetKind::TwoMoons, 50, 0)).unwrap();
        let norm = Normalization::fit(raw.data.view()).unwrap();
        let back = norm.invert(norm.apply(raw.data.view()).unwrap().view()).unwrap();
        assert!((&back - &raw.data).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn image_dir_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let shape = ImageShape { channels: 3, height: 2, width: 3 };
        let rows = Array2::from_shape_fn((2, shape.len()), |(i, j)| ((i * 7 + j * 13) % 256) as f64 / 255.0);
        for i in 0..2 {
            write_contact_sheet(rows.slice(ndarray::s![i..i + 1, ..]), shape, 1, &dir.path().join(format!("{i}.png"))).unwrap();
        }
        let (loaded, got) = load_image_dir(dir.path(), 10).unwrap();
        assert_eq!(got, shape);
        assert!((&loaded - &rows).iter().all(|v| v.abs() < 1e-12));

        std::fs::write(dir.path().join("2.png"), b"not an image").unwrap();
        std::fs::write(dir.path().join("3.png"), b"nope").unwrap();
        match load_image_dir(dir.path(), 10) {
            Err(Error::Dataset(problems)) => assert_eq!(problems.len(), 2),
            other => panic!("expected per-file errors, got {other:?}"),
        }
    }
}

//! Sample-quality metrics against a reference set and NFE sweep tables.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::denoiser::EpsilonModel;
use crate::diffusion::check_same_shape;
use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream_rng, Stream};
use crate::sampler::{initial_noise, make_step_schedule, sample_from, StepStrategy};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdEstimator {
    #[default]
    Unbiased,
    Biased,
}

fn check_sets(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Usage("metric over an empty set".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape {
            expected: vec![a.nrows(), a.ncols()],
            got: vec![b.nrows(), b.ncols()],
        });
    }
    Ok(())
}

fn sq_dists(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let na: Array1<f64> = a.map_axis(Axis(1), |r| r.dot(&r));
    let nb: Array1<f64> = b.map_axis(Axis(1), |r| r.dot(&r));
    let mut d = a.dot(&b.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (na[i] + nb[j] - 2.0 * *v).max(0.0);
    }
    d
}

/// Mean kernel value over a block, optionally skipping the diagonal.
fn block_mean(d: &Array2<f64>, gamma: f64, skip_diagonal: bool) -> f64 {
    let (m, n) = d.dim();
    let mut sum = 0.0;
    for ((i, j), &v) in d.indexed_iter() {
        if skip_diagonal && i == j {
            continue;
        }
        sum += (-gamma * v).exp();
    }
    let count = if skip_diagonal { m * (n - 1) } else { m * n };
    sum / count as f64
}

/// Squared maximum mean discrepancy with the kernel
/// `exp(-|x - y|^2 / (2 h^2))`, averaged over bandwidths `h` and clamped at 0.
/// A set of one sample keeps its diagonal term under the unbiased estimator.
pub fn mmd_rbf_with(
    samples: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    bandwidths: &[f64],
    estimator: MmdEstimator,
) -> Result<f64> {
    check_sets(&samples, &reference)?;
    if bandwidths.is_empty() || bandwidths.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
        return Err(Error::Domain(format!("bandwidths must be positive, got {bandwidths:?}")));
    }
    let dxx = sq_dists(&samples, &samples);
    let dyy = sq_dists(&reference, &reference);
    let dxy = sq_dists(&samples, &reference);
    let unbiased = estimator == MmdEstimator::Unbiased;
    let total: f64 = bandwidths
        .iter()
        .map(|&h| {
            let gamma = 1.0 / (2.0 * h * h);
            block_mean(&dxx, gamma, unbiased && samples.nrows() > 1)
                + block_mean(&dyy, gamma, unbiased && reference.nrows() > 1)
                - 2.0 * block_mean(&dxy, gamma, false)
        })
        .sum();
    Ok((total / bandwidths.len() as f64).max(0.0))
}

pub fn mmd_rbf(samples: ArrayView2<f64>, reference: ArrayView2<f64>, bandwidths: &[f64]) -> Result<f64> {
    mmd_rbf_with(samples, reference, bandwidths, MmdEstimator::Unbiased)
}

/// `n` unit directions in `dims` dimensions, from the projection stream.
pub fn projection_directions(n: usize, dims: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream_rng(seed, Stream::Projections);
    let mut dirs = Array2::zeros((n, dims));
    for mut row in dirs.axis_iter_mut(Axis(0)) {
        loop {
            let v = standard_normal(&mut rng, 1, dims);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                row.assign(&v.row(0).mapv(|x| x / norm));
                break;
            }
        }
    }
    dirs
}

fn subsample(a: ArrayView2<f64>, m: usize, seed: u64) -> Array2<f64> {
    if a.nrows() == m {
        return a.to_owned();
    }
    let mut rng = stream_rng(seed, Stream::Projections);
    rng.set_stream(rng.get_stream() | (1 << 16));
    let mut idx = sample_indices(&mut rng, a.nrows(), m).into_vec();
    idx.sort_unstable();
    a.select(Axis(0), &idx)
}

/// Mean over projections of the 1D 2-Wasserstein distance between sorted
/// projected samples. The larger set is subsampled to the smaller size.
pub fn sliced_wasserstein_with(
    samples: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    directions: ArrayView2<f64>,
    seed: u64,
) -> Result<f64> {
    check_sets(&samples, &reference)?;
    if directions.ncols() != samples.ncols() || directions.nrows() == 0 {
        return Err(Error::Usage("projection directions do not match the data".into()));
    }
    let m = samples.nrows().min(reference.nrows());
    let a = subsample(samples, m, seed);
    let b = subsample(reference, m, seed);
    let pa = a.dot(&directions.t());
    let pb = b.dot(&directions.t());
    let mut total = 0.0;
    for (ca, cb) in pa.axis_iter(Axis(1)).zip(pb.axis_iter(Axis(1))) {
        let mut va = ca.to_vec();
        let mut vb = cb.to_vec();
        va.sort_by(f64::total_cmp);
        vb.sort_by(f64::total_cmp);
        let ms = va.iter().zip(&vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / m as f64;
        total += ms.sqrt();
    }
    Ok(total / directions.nrows() as f64)
}

pub fn sliced_wasserstein(
    samples: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    if n_projections == 0 {
        return Err(Error::Usage("need at least one projection".into()));
    }
    let dirs = projection_directions(n_projections, samples.ncols(), seed);
    sliced_wasserstein_with(samples, reference, dirs.view(), seed)
}

fn moments(a: &ArrayView2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = a.dim();
    let m = DMatrix::from_fn(n, d, |i, j| a[[i, j]]);
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean.transpose(), cov)
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of the raw feature moments. A
/// proxy for image-quality scores, not an Inception-based FID.
pub fn fid_proxy(samples: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<f64> {
    check_sets(&samples, &reference)?;
    if samples.nrows() < 2 || reference.nrows() < 2 {
        return Err(Error::Usage("fid proxy needs at least two samples per set".into()));
    }
    let (mu1, c1) = moments(&samples);
    let (mu2, c2) = moments(&reference);
    let s1 = psd_sqrt(c1.clone());
    let inner = &s1 * &c2 * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let value = (mu1 - mu2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    MmdRbf,
    SlicedWasserstein,
    FidProxy,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::MmdRbf => "mmd_rbf",
            MetricKind::SlicedWasserstein => "sliced_wasserstein",
            MetricKind::FidProxy => "fid_proxy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub kind: MetricKind,
    pub bandwidths: Vec<f64>,
    pub projections: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            kind: MetricKind::MmdRbf,
            bandwidths: vec![0.1, 0.2, 0.5, 1.0, 2.0],
            projections: 64,
            seed: 0,
        }
    }
}

impl MetricConfig {
    pub fn evaluate(&self, samples: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<f64> {
        match self.kind {
            MetricKind::MmdRbf => mmd_rbf(samples, reference, &self.bandwidths),
            MetricKind::SlicedWasserstein => {
                sliced_wasserstein(samples, reference, self.projections, self.seed)
            }
            MetricKind::FidProxy => fid_proxy(samples, reference),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub nfe: usize,
    pub metric: f64,
    /// Wall time per network evaluation.
    pub seconds_per_eval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfeSweepReport {
    pub metric_kind: MetricKind,
    pub rows: Vec<SweepRow>,
}

impl NfeSweepReport {
    fn metric_header(&self) -> String {
        match self.metric_kind {
            MetricKind::FidProxy => "fid_proxy (raw-moment proxy, not FID)".into(),
            k => k.name().into(),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt_err = |e: csv::Error| Error::format("csv table", e);
        w.write_record(["method", "nfe", self.metric_kind.name(), "seconds_per_eval"])
            .map_err(fmt_err)?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.nfe.to_string(),
                format!("{:e}", r.metric),
                format!("{:.3e}", r.seconds_per_eval),
            ])
            .map_err(fmt_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format("csv table", e))?;
        String::from_utf8(bytes).map_err(|e| Error::format("csv table", e))
    }

    pub fn to_text(&self) -> String {
        let metric = self.metric_header();
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(std::iter::once("method".len()))
            .max()
            .unwrap_or(6);
        let metric_w = metric.len().max(12);
        let mut out = String::new();
        let _ = writeln!(out, "{:<label_w$}  {:>5}  {:>metric_w$}  {:>12}", "method", "nfe", metric, "s/eval");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<label_w$}  {:>5}  {:>metric_w$.6}  {:>12.3e}",
                r.label, r.nfe, r.metric, r.seconds_per_eval
            );
        }
        out
    }

    /// Rows for one method, in NFE order.
    pub fn series(&self, label: &str) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self
            .rows
            .iter()
            .filter(|r| r.label == label)
            .map(|r| (r.nfe, r.metric))
            .collect();
        v.sort_by_key(|p| p.0);
        v
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.label) {
                out.push(r.label.clone());
            }
        }
        out
    }
}

/// One method under comparison.
pub struct SweepEntry<'a> {
    pub label: String,
    pub model: &'a dyn EpsilonModel,
    pub schedule: &'a NoiseSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub metric: MetricConfig,
    pub batch: usize,
    /// Seed of the initial noise shared by every method and NFE.
    pub seed: u64,
    pub strategy: StepStrategy,
}

/// Samples every entry at every NFE from the same initial noise and scores
/// each sample set against `reference`.
pub fn nfe_sweep(
    entries: &[SweepEntry<'_>],
    nfe_list: &[usize],
    reference: ArrayView2<f64>,
    cfg: &SweepConfig,
) -> Result<NfeSweepReport> {
    if cfg.batch == 0 {
        return Err(Error::Config("sweep batch must be positive".into()));
    }
    let noise = initial_noise(cfg.batch, reference.ncols(), cfg.seed);
    let mut rows = Vec::new();
    for entry in entries {
        for &nfe in nfe_list {
            let path = make_step_schedule(entry.schedule.timesteps(), nfe, cfg.strategy)?;
            let start = Instant::now();
            let samples = sample_from(
                entry.model,
                entry.schedule,
                &path,
                noise.view(),
                0.0,
                None::<&mut rand_chacha::ChaCha8Rng>,
            )?;
            let elapsed = start.elapsed().as_secs_f64();
            check_same_shape(&samples.view(), &noise.view())?;
            let metric = cfg.metric.evaluate(samples.view(), reference)?;
            rows.push(SweepRow {
                label: entry.label.clone(),
                nfe,
                metric,
                seconds_per_eval: elapsed / path.nfe() as f64,
            });
        }
    }
    Ok(NfeSweepReport {
        metric_kind: cfg.metric.kind,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn identical_sets_score_zero() {
        let a = array![[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]];
        let m = mmd_rbf_with(a.view(), a.view(), &[1.0], MmdEstimator::Biased).unwrap();
        assert!(m.abs() < 1e-9);
        assert_eq!(sliced_wasserstein(a.view(), a.view(), 8, 1).unwrap(), 0.0);
        assert!(fid_proxy(a.view(), a.view()).unwrap() < 1e-9);
    }

    #[test]
    fn separated_point_masses_saturate() {
        let a = array![[0.0, 0.0]];
        let b = array![[100.0, 0.0]];
        let m = mmd_rbf(a.view(), b.view(), &[1.0]).unwrap();
        assert!((m - 2.0).abs() < 1e-12);
    }

    #[test]
    fn translated_1d_point() {
        let a = array![[0.0]];
        for c in [0.5, -3.0] {
            let b = array![[c]];
            for n in [1, 7] {
                let sw = sliced_wasserstein(a.view(), b.view(), n, 2).unwrap();
                assert!((sw - c.abs()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fid_proxy_of_shifted_gaussian_fits() {
        let a = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let b = a.mapv(|v| v) + &array![[3.0, 4.0]];
        assert!((fid_proxy(a.view(), b.view()).unwrap() - 25.0).abs() < 1e-9);
    }

    #[test]
    fn report_tables() {
        let report = NfeSweepReport {
            metric_kind: MetricKind::MmdRbf,
            rows: vec![
                SweepRow { label: "a".into(), nfe: 2, metric: 0.5, seconds_per_eval: 1e-3 },
                SweepRow { label: "a".into(), nfe: 1, metric: 0.7, seconds_per_eval: 1e-3 },
            ],
        };
        let csv = report.to_csv().unwrap();
        assert!(csv.starts_with("method,nfe,mmd_rbf,seconds_per_eval\n"));
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(report.to_text().lines().count(), 3);
        assert_eq!(report.series("a"), vec![(1, 0.7), (2, 0.5)]);
    }
}

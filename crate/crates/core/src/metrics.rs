//! Video and flow quality metrics.
//!
//! Embedding-based scores (frame consistency, Fréchet distances, Inception
//! score) take pluggable embedders or precomputed statistics; only the
//! weight-free `pix16` embedder ships here.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image_ops::resize_bilinear;
use crate::linalg::{matmul, sqrt_psd, symmetrize, trace};
use crate::math::{exp, ln, log10, sqrt};
use crate::tensor::{FlowField, Frame, VideoTensor};

/// PSNR reported for a zero-error frame.
pub const PSNR_CAP_DB: f64 = 100.0;
/// Eigenvalues below this are treated as zero inside the matrix square root.
pub const EIGEN_CLAMP: f64 = 1e-10;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Per-frame values and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerFrame {
    pub per_frame: Vec<f64>,
    pub mean: f64,
}

impl PerFrame {
    pub fn from_values(per_frame: Vec<f64>) -> Self {
        let mean = mean(&per_frame);
        Self { per_frame, mean }
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn same_shape(a: &VideoTensor, b: &VideoTensor) -> Result<()> {
    let sa = (a.frames(), a.channels(), a.height(), a.width());
    let sb = (b.frames(), b.channels(), b.height(), b.width());
    if sa != sb {
        return Err(CoreError::ShapeMismatch(format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// PSNR of equally sized frames stored back to back in `a` and `b`.
pub fn psnr_slices(a: &[f32], b: &[f32], frame_len: usize, peak: f64) -> Result<PerFrame> {
    if a.len() != b.len() || frame_len == 0 || a.len() % frame_len != 0 {
        return Err(CoreError::ShapeMismatch(format!(
            "{} vs {} values with frame length {frame_len}",
            a.len(),
            b.len()
        )));
    }
    let values = a
        .chunks(frame_len)
        .zip(b.chunks(frame_len))
        .map(|(fa, fb)| {
            let mse = fa
                .iter()
                .zip(fb)
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum::<f64>()
                / frame_len as f64;
            psnr_from_mse(mse, peak)
        })
        .collect();
    Ok(PerFrame::from_values(values))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * log10(peak * peak / mse)).min(PSNR_CAP_DB)
    }
}

pub fn psnr(a: &VideoTensor, b: &VideoTensor, peak: f64) -> Result<PerFrame> {
    same_shape(a, b)?;
    psnr_slices(a.data(), b.data(), a.frame_len(), peak)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over pixels and channels of one `C x H x W` frame pair.
pub fn ssim_frame(a: &[f32], b: &[f32], channels: usize, height: usize, width: usize, p: &SsimParams) -> Result<f64> {
    if height < p.window || width < p.window {
        return Err(CoreError::TooSmall {
            height,
            width,
            window: p.window,
        });
    }
    let n = height * width;
    if a.len() != channels * n || b.len() != channels * n {
        return Err(CoreError::ShapeMismatch(format!(
            "ssim inputs {} and {} for {channels}x{height}x{width}",
            a.len(),
            b.len()
        )));
    }
    let taps = gaussian_window(p.window, p.sigma);
    let c1 = (p.k1 * p.data_range) * (p.k1 * p.data_range);
    let c2 = (p.k2 * p.data_range) * (p.k2 * p.data_range);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..channels {
        let pa: Vec<f64> = a[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, height, width, &taps);
        let mu_b = filter_valid(&pb, height, width, &taps);
        let e_aa = filter_valid(&aa, height, width, &taps);
        let e_bb = filter_valid(&bb, height, width, &taps);
        let e_ab = filter_valid(&ab, height, width, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn ssim(a: &VideoTensor, b: &VideoTensor, p: &SsimParams) -> Result<PerFrame> {
    same_shape(a, b)?;
    let values = (0..a.frames())
        .map(|t| ssim_frame(a.frame_data(t), b.frame_data(t), a.channels(), a.height(), a.width(), p))
        .collect::<Result<Vec<_>>>()?;
    Ok(PerFrame::from_values(values))
}

/// Identity and shape of an embedding function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub id: String,
    pub dimension: usize,
    pub deterministic: bool,
    pub description: String,
}

pub trait Embedder {
    fn spec(&self) -> EmbedderSpec;
    fn embed(&self, frame: &Frame) -> Result<Vec<f32>>;
}

/// 16x16 bilinear thumbnail, flattened and L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pix16;

impl Embedder for Pix16 {
    fn spec(&self) -> EmbedderSpec {
        EmbedderSpec {
            id: "pix16".to_string(),
            dimension: 16 * 16 * 3,
            deterministic: true,
            description: "16x16 bilinear downsample, flatten, L2-normalize".to_string(),
        }
    }

    fn embed(&self, frame: &Frame) -> Result<Vec<f32>> {
        let mut v = resize_bilinear(frame.data(), frame.channels(), frame.height(), frame.width(), 16, 16);
        let norm = sqrt(v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>());
        if norm > 0.0 {
            for x in &mut v {
                *x = (*x as f64 / norm) as f32;
            }
        }
        Ok(v)
    }
}

/// Cosine similarity; two zero vectors count as identical.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = sqrt(a.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>());
    let nb = sqrt(b.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>());
    match (na > 0.0, nb > 0.0) {
        (true, true) => (dot / (na * nb)).clamp(-1.0, 1.0),
        (false, false) => 1.0,
        _ => 0.0,
    }
}

/// Mean cosine similarity of consecutive frame embeddings, in percent.
pub fn frame_consistency(video: &VideoTensor, embedder: &dyn Embedder) -> Result<PerFrame> {
    if video.frames() < 2 {
        return Err(CoreError::InvalidArgument("frame consistency needs T >= 2".into()));
    }
    let embeddings = (0..video.frames())
        .map(|t| embedder.embed(&video.frame(t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(consistency_from_embeddings(&embeddings))
}

pub fn consistency_from_embeddings(embeddings: &[Vec<f32>]) -> PerFrame {
    PerFrame::from_values(embeddings.windows(2).map(|w| 100.0 * cosine(&w[0], &w[1])).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowError {
    pub epe: f64,
    pub outlier_fraction: f64,
    pub valid_pixels: usize,
}

/// Endpoint error and outlier fraction (EPE > 3 px and > 5 % of |gt|).
pub fn flow_error(pred: &FlowField, gt: &FlowField, valid: Option<&[bool]>) -> Result<FlowError> {
    let sp = (pred.frames(), pred.height(), pred.width());
    let sg = (gt.frames(), gt.height(), gt.width());
    if sp != sg {
        return Err(CoreError::ShapeMismatch(format!("{sp:?} vs {sg:?}")));
    }
    let n = gt.height() * gt.width();
    if let Some(m) = valid {
        if m.len() != gt.frames() * n {
            return Err(CoreError::ShapeMismatch(format!(
                "valid mask has {} entries, flow has {}",
                m.len(),
                gt.frames() * n
            )));
        }
    }
    let mut sum = 0.0;
    let mut outliers = 0usize;
    let mut count = 0usize;
    for t in 0..gt.frames() {
        let (pdx, pdy, gdx, gdy) = (pred.dx(t), pred.dy(t), gt.dx(t), gt.dy(t));
        for i in 0..n {
            if let Some(m) = valid {
                if !m[t * n + i] {
                    continue;
                }
            }
            let ex = pdx[i] as f64 - gdx[i] as f64;
            let ey = pdy[i] as f64 - gdy[i] as f64;
            let epe = sqrt(ex * ex + ey * ey);
            let (gx, gy) = (gdx[i] as f64, gdy[i] as f64);
            let mag = sqrt(gx * gx + gy * gy);
            sum += epe;
            if epe > 3.0 && epe > 0.05 * mag {
                outliers += 1;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Ok(FlowError {
            epe: 0.0,
            outlier_fraction: 0.0,
            valid_pixels: 0,
        });
    }
    Ok(FlowError {
        epe: sum / count as f64,
        outlier_fraction: outliers as f64 / count as f64,
        valid_pixels: count,
    })
}

/// Mean and covariance of a set of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        if cov.len() != dim * dim {
            return Err(CoreError::ShapeMismatch(format!(
                "covariance has {} entries for dimension {dim}",
                cov.len()
            )));
        }
        Ok(Self { dim, mean, cov })
    }

    /// Sample mean and unbiased covariance of `rows` (each of length `dim`).
    pub fn from_samples(rows: &[Vec<f32>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(CoreError::InvalidArgument("no samples".into()));
        };
        let d = first.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(CoreError::ShapeMismatch("samples differ in dimension".into()));
        }
        let n = rows.len() as f64;
        let mut mu = vec![0.0; d];
        for r in rows {
            for (m, &x) in mu.iter_mut().zip(r) {
                *m += x as f64 / n;
            }
        }
        let mut cov = vec![0.0; d * d];
        if rows.len() > 1 {
            for r in rows {
                for i in 0..d {
                    let di = r[i] as f64 - mu[i];
                    for j in 0..d {
                        cov[i * d + j] += di * (r[j] as f64 - mu[j]);
                    }
                }
            }
            for c in &mut cov {
                *c /= n - 1.0;
            }
        }
        Self::new(mu, cov)
    }

    fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.cov).all(|v| v.is_finite())
    }
}

/// Fréchet distance between two Gaussians.
///
/// `tr((Sa Sb)^1/2)` is evaluated as `tr((Sa^1/2 Sb Sa^1/2)^1/2)`, both roots
/// from a Jacobi eigendecomposition of the symmetrized operand with
/// eigenvalues below [`EIGEN_CLAMP`] zeroed. The result is clamped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(CoreError::ShapeMismatch(format!("dimension {} vs {}", a.dim, b.dim)));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(CoreError::NonFinite);
    }
    let d = a.dim;
    let sa = symmetrize(&a.cov, d);
    let sb = symmetrize(&b.cov, d);
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = sqrt_psd(&sa, d, EIGEN_CLAMP);
    let inner = matmul(&matmul(&root_a, &sb, d), &root_a, d);
    let cross = trace(&sqrt_psd(&inner, d, EIGEN_CLAMP), d);
    let value = mean_term + trace(&sa, d) + trace(&sb, d) - 2.0 * cross;
    Ok(value.max(0.0))
}

/// `exp(mean_n KL(p_n || p_marginal))` over `n x k` row-stochastic probabilities.
pub fn inception_score(probs: &[f64], n: usize, k: usize) -> Result<f64> {
    if n == 0 || k == 0 || probs.len() != n * k {
        return Err(CoreError::ShapeMismatch(format!("{} probabilities for {n}x{k}", probs.len())));
    }
    for (i, row) in probs.chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(CoreError::InvalidArgument(format!("row {i} is not a probability distribution")));
        }
    }
    let mut marginal = vec![0.0; k];
    for row in probs.chunks(k) {
        for (m, p) in marginal.iter_mut().zip(row) {
            *m += p / n as f64;
        }
    }
    let mean_kl = probs
        .chunks(k)
        .map(|row| {
            row.iter()
                .zip(&marginal)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, m)| p * (ln(*p) - ln(*m)))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    Ok(exp(mean_kl))
}

/// One scalar metric with its breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    pub value: f64,
    pub per_item: Vec<f64>,
    pub samples: usize,
}

/// Evaluation output. Aggregates are means of the stored breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub embedders: Vec<String>,
    pub metrics: Vec<MetricEntry>,
}

impl Default for MetricReport {
    fn default() -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            embedders: Vec::new(),
            metrics: Vec::new(),
        }
    }
}

impl MetricReport {
    pub fn push_mean(&mut self, name: &str, per_item: Vec<f64>) {
        let value = mean(&per_item);
        self.metrics.push(MetricEntry {
            name: name.to_string(),
            value,
            samples: per_item.len(),
            per_item,
        });
    }

    pub fn push_scalar(&mut self, name: &str, value: f64, samples: usize) {
        self.metrics.push(MetricEntry {
            name: name.to_string(),
            value,
            per_item: vec![value],
            samples,
        });
    }

    pub fn get(&self, name: &str) -> Option<&MetricEntry> {
        self.metrics.iter().find(|m| m.name == name)
    }

    /// Names of entries whose aggregate disagrees with its breakdown.
    pub fn inconsistent(&self) -> Vec<String> {
        self.metrics
            .iter()
            .filter(|m| {
                let recomputed = mean(&m.per_item);
                (recomputed - m.value).abs() > 1e-9 * m.value.abs().max(1.0)
            })
            .map(|m| m.name.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ColorSpace;

    #[test]
    fn psnr_cap_and_unit_mse() {
        let a = vec![0.2f32; 3 * 8 * 8];
        let r = psnr_slices(&a, &a, 192, 1.0).unwrap();
        assert_eq!(r.mean, PSNR_CAP_DB);
        let x = vec![10.0f32; 64];
        let y = vec![11.0f32; 64];
        let r = psnr_slices(&x, &y, 64, 255.0).unwrap();
        assert!((r.mean - 48.1308).abs() < 1e-3, "{}", r.mean);
        assert!(psnr_slices(&x, &y[..32], 32, 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_too_small() {
        let a: Vec<f32> = (0..3 * 16 * 16).map(|i| ((i * 37 % 101) as f32) / 100.0).collect();
        assert_eq!(ssim_frame(&a, &a, 3, 16, 16, &SsimParams::default()).unwrap(), 1.0);
        assert!(matches!(
            ssim_frame(&a[..3 * 64], &a[..3 * 64], 3, 8, 8, &SsimParams::default()),
            Err(CoreError::TooSmall { .. })
        ));
    }

    #[test]
    fn ssim_of_inverted_binary_is_negative() {
        let a: Vec<f32> = (0..16 * 16).map(|i| if (i / 16 + i % 16) % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let b: Vec<f32> = a.iter().map(|v| 1.0 - v).collect();
        assert!(ssim_frame(&a, &b, 1, 16, 16, &SsimParams::default()).unwrap() < 0.0);
    }

    #[test]
    fn consistency_extremes() {
        let f = Frame::filled(ColorSpace::Rgb, 3, 8, 8, 0.4).unwrap();
        let v = VideoTensor::from_frames(&[f.clone(), f.clone(), f], 30.0).unwrap();
        assert!((frame_consistency(&v, &Pix16).unwrap().mean - 100.0).abs() < 1e-9);
        let e = [vec![1.0f32, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(consistency_from_embeddings(&e).mean, 0.0);
    }

    fn uniform_flow(dx: f32, dy: f32) -> FlowField {
        let n = 64;
        let mut d = vec![dx; 2 * n];
        d[n..].fill(dy);
        FlowField::new(1, 8, 8, true, d).unwrap()
    }

    #[test]
    fn flow_error_values() {
        let gt = uniform_flow(1.0, 1.0);
        let e = flow_error(&gt, &gt, None).unwrap();
        assert_eq!((e.epe, e.outlier_fraction), (0.0, 0.0));
        let pred = uniform_flow(4.0, 5.0);
        assert_eq!(flow_error(&pred, &gt, None).unwrap().epe, 5.0);
    }

    #[test]
    fn kitti_rule_needs_both_conditions() {
        let n = 128 * 128;
        let mut g = vec![0.0f32; 2 * n];
        g[..n].fill(100.0);
        let mut p = vec![0.0f32; 2 * n];
        p[..n].fill(96.0);
        let gt = FlowField::new(1, 128, 128, true, g).unwrap();
        let pred = FlowField::new(1, 128, 128, true, p).unwrap();
        let e = flow_error(&pred, &gt, None).unwrap();
        assert_eq!(e.epe, 4.0);
        assert_eq!(e.outlier_fraction, 0.0);
    }

    #[test]
    fn frechet_closed_forms() {
        let a = GaussianStats::new(vec![0.0], vec![1.0]).unwrap();
        let b = GaussianStats::new(vec![2.0], vec![1.0]).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 4.0).abs() < 1e-8);
        let c = GaussianStats::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 4.0]).unwrap();
        let d = GaussianStats::new(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((frechet_distance(&c, &d).unwrap() - 2.0).abs() < 1e-10);
        assert!(frechet_distance(&c, &c).unwrap() <= 1e-8);
        assert!(frechet_distance(&a, &c).is_err());
        let bad = GaussianStats::new(vec![f64::NAN], vec![1.0]).unwrap();
        assert!(matches!(frechet_distance(&a, &bad), Err(CoreError::NonFinite)));
    }

    #[test]
    fn inception_score_extremes() {
        let same = [0.2, 0.3, 0.5, 0.2, 0.3, 0.5];
        assert!((inception_score(&same, 2, 3).unwrap() - 1.0).abs() < 1e-12);
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        assert!((inception_score(&eye, 4, 4).unwrap() - 4.0).abs() < 1e-6);
        assert!(inception_score(&[0.5, 0.6], 1, 2).is_err());
    }

    #[test]
    fn report_consistency() {
        let mut r = MetricReport::default();
        r.push_mean("psnr", vec![20.0, 30.0]);
        assert_eq!(r.get("psnr").unwrap().value, 25.0);
        assert!(r.inconsistent().is_empty());
        r.metrics[0].value = 1.0;
        assert_eq!(r.inconsistent(), vec!["psnr".to_string()]);
    }
}

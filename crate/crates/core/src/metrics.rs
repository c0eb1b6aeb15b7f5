//! Feature extraction, Gaussian moment fitting and the Fréchet distance.
//!
//! FID values are only comparable under one fixed extractor: the default
//! random-projection extractor is a deterministic stand-in for Inception
//! features, and externally computed features enter through the `RFEA`
//! feature file.

use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::image::{common_shape, Image};
use crate::rng;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

const FEATURE_MAGIC: &[u8; 4] = b"RFEA";
const POOLED_SIDE: usize = 16;

/// `n` feature rows of dimension `d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Dimension(format!(
                "feature matrix {n}x{d} needs {} values, got {}",
                n * d,
                data.len()
            )));
        }
        Ok(FeatureMatrix { n, d, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(FEATURE_MAGIC);
        w.u32(self.n as u32);
        w.u32(self.d as u32);
        w.f64s_as_f32(&self.data);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("feature file", bytes, FEATURE_MAGIC)?;
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let data = r.f32s_as_f64(n * d)?;
        r.finish()?;
        FeatureMatrix::new(n, d, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        FeatureMatrix::from_bytes(&read_file(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    RandomProjection,
    ExternalFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureExtractorSpec {
    pub kind: ExtractorKind,
    pub out_dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_path: Option<PathBuf>,
}

impl Default for FeatureExtractorSpec {
    fn default() -> Self {
        FeatureExtractorSpec::random_projection(64, 0)
    }
}

impl FeatureExtractorSpec {
    pub fn random_projection(out_dim: usize, seed: u64) -> Self {
        FeatureExtractorSpec {
            kind: ExtractorKind::RandomProjection,
            out_dim,
            seed,
            source_path: None,
        }
    }

    pub fn external(path: impl Into<PathBuf>, out_dim: usize) -> Self {
        FeatureExtractorSpec {
            kind: ExtractorKind::ExternalFeatures,
            out_dim,
            seed: 0,
            source_path: Some(path.into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "feature dimension must be >= 2, got {}",
                self.out_dim
            )));
        }
        if self.kind == ExtractorKind::ExternalFeatures && self.source_path.is_none() {
            return Err(Error::InvalidArgument(
                "external_features extractor needs a source_path".into(),
            ));
        }
        Ok(())
    }
}

/// Box-filter resize to `POOLED_SIDE x POOLED_SIDE`, flattened HWC.
fn pool(image: &Image) -> Vec<f64> {
    let (h, w, c) = image.shape();
    let mut out = Vec::with_capacity(POOLED_SIDE * POOLED_SIDE * c);
    for py in 0..POOLED_SIDE {
        let (y0, y1) = span(py, h);
        for px in 0..POOLED_SIDE {
            let (x0, x1) = span(px, w);
            let area = ((y1 - y0) * (x1 - x0)) as f64;
            for ch in 0..c {
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += image.at(y, x, ch);
                    }
                }
                out.push(s / area);
            }
        }
    }
    out
}

/// Source rows covered by output cell `i`; never empty.
fn span(i: usize, len: usize) -> (usize, usize) {
    let lo = i * len / POOLED_SIDE;
    let hi = ((i + 1) * len / POOLED_SIDE).max(lo + 1).min(len.max(1));
    (lo.min(len - 1), hi)
}

struct Projection {
    weights: Vec<f64>,
    bias: Vec<f64>,
    in_dim: usize,
}

impl Projection {
    fn new(spec: &FeatureExtractorSpec, shape: (usize, usize, usize)) -> Self {
        let in_dim = POOLED_SIDE * POOLED_SIDE * shape.2;
        let mut s = rng::stream(
            spec.seed,
            &[
                rng::tag("features/projection"),
                spec.out_dim as u64,
                shape.0 as u64,
                shape.1 as u64,
                shape.2 as u64,
            ],
        );
        let scale = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..spec.out_dim * in_dim)
            .map(|_| rng::standard_normal(&mut s) * scale)
            .collect();
        let bias = (0..spec.out_dim).map(|_| rng::standard_normal(&mut s) * 0.5).collect();
        Projection { weights, bias, in_dim }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let w = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let dot: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            *slot = (dot + self.bias[o]).tanh();
        }
    }
}

pub fn extract_features(images: &[Image], spec: &FeatureExtractorSpec) -> Result<FeatureMatrix> {
    spec.validate()?;
    match spec.kind {
        ExtractorKind::RandomProjection => {
            let shape = common_shape(images)?;
            let proj = Projection::new(spec, shape);
            let d = spec.out_dim;
            let rows: Vec<Vec<f64>> = images
                .par_iter()
                .map(|im| {
                    let mut row = vec![0.0; d];
                    proj.apply(&pool(im), &mut row);
                    row
                })
                .collect();
            FeatureMatrix::new(images.len(), d, rows.concat())
        }
        ExtractorKind::ExternalFeatures => {
            let path = spec.source_path.as_deref().unwrap();
            let f = FeatureMatrix::load(path)?;
            if f.n != images.len() {
                return Err(Error::Dimension(format!(
                    "{} holds {} feature rows for {} images",
                    path.display(),
                    f.n,
                    images.len()
                )));
            }
            if f.d != spec.out_dim {
                return Err(Error::Dimension(format!(
                    "{} holds {}-dimensional features, extractor expects {}",
                    path.display(),
                    f.d,
                    spec.out_dim
                )));
            }
            Ok(f)
        }
    }
}

/// Gaussian moments of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub n: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Column means and the unbiased (divisor `n - 1`) covariance.
pub fn fit_stats(features: &FeatureMatrix) -> Result<FeatureStats> {
    let (n, d) = (features.n, features.d);
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    if features.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature values".into()));
    }
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        for (j, v) in features.row(i).iter().enumerate() {
            mean[j] += v;
        }
    }
    mean /= n as f64;
    let centered = DMatrix::from_fn(n, d, |i, j| features.data[i * d + j] - mean[j]);
    let m = centered.transpose() * &centered / (n - 1) as f64;
    let cov = (&m + m.transpose()) * 0.5;
    Ok(FeatureStats { n, mean, cov })
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "matrix is {}x{}, expected square",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("matrix has NaN entries".into()));
    }
    let scale = a.amax().max(1.0);
    let d = a.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::InvalidArgument(format!(
                    "matrix not symmetric at ({i}, {j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Symmetric square root of a positive semi-definite matrix via its
/// eigendecomposition. Eigenvalues below `1e-8` times the largest one
/// (including small negative round-off) are treated as zero.
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(a)?;
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.max().max(0.0);
    let floor = 1e-8 * top;
    let roots = eig.eigenvalues.map(|l| if l > floor { l.sqrt() } else { 0.0 });
    let q = &eig.eigenvectors;
    let s = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`, clamped at 0.
///
/// The trace of that root equals the sum of the singular values of
/// `S_a^1/2 S_b^1/2`, which is how it is computed: singular values carry
/// absolute error near `eps * norm` where square roots of tiny eigenvalues
/// would amplify it to `sqrt(eps)`, and swapping the arguments only
/// transposes the matrix.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let root_a = matrix_sqrt_psd(&a.cov)?;
    let root_b = matrix_sqrt_psd(&b.cov)?;
    let cross = (&root_a * &root_b).singular_values().sum();
    let fd = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !fd.is_finite() {
        return Err(Error::Numerical("Fréchet distance is not finite".into()));
    }
    Ok(fd.max(0.0))
}

pub fn fid_between_with(
    images_a: &[Image],
    extractor_a: &FeatureExtractorSpec,
    images_b: &[Image],
    extractor_b: &FeatureExtractorSpec,
) -> Result<f64> {
    let fa = fit_stats(&extract_features(images_a, extractor_a)?)?;
    let fb = fit_stats(&extract_features(images_b, extractor_b)?)?;
    frechet_distance(&fa, &fb)
}

/// FID between two image sets under one extractor.
///
/// With `external_features` each set needs its own file, so use
/// [`fid_between_with`] instead.
pub fn fid_between(a: &[Image], b: &[Image], extractor: &FeatureExtractorSpec) -> Result<f64> {
    if extractor.kind == ExtractorKind::ExternalFeatures {
        return Err(Error::InvalidArgument(
            "external features are per image set; use fid_between_with".into(),
        ));
    }
    fid_between_with(a, extractor, b, extractor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_1d(mean: f64, var: f64) -> FeatureStats {
        FeatureStats {
            n: 10,
            mean: DVector::from_vec(vec![mean]),
            cov: DMatrix::from_vec(1, 1, vec![var]),
        }
    }

    fn fm(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::new(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn one_dimensional_closed_form() {
        let fd = frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(1.0, 4.0)).unwrap();
        assert!((fd - 2.0).abs() < 1e-9);
        assert!(frechet_distance(&stats_1d(0.3, 2.0), &stats_1d(0.3, 2.0)).unwrap() < 1e-9);
    }

    #[test]
    fn diagonal_stats_separate() {
        let a = FeatureStats {
            n: 5,
            mean: DVector::from_vec(vec![0.0, 2.0]),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 9.0])),
        };
        let b = FeatureStats {
            n: 5,
            mean: DVector::from_vec(vec![1.0, -1.0]),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.25])),
        };
        // per coordinate: (dmu)^2 + (sigma_a - sigma_b)^2
        let expect = (1.0 + 1.0) + (9.0 + (3.0f64 - 0.5).powi(2));
        assert!((frechet_distance(&a, &b).unwrap() - expect).abs() < 1e-9);
        assert!(frechet_distance(&a, &stats_1d(0.0, 1.0)).is_err());
    }

    #[test]
    fn fit_stats_hand_examples() {
        let s = fit_stats(&fm(&[&[0.0, 0.0], &[2.0, 0.0]])).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        let s = fit_stats(&fm(&[&[1.0, 1.0], &[-1.0, -1.0]])).unwrap();
        assert_eq!(s.mean.as_slice(), &[0.0, 0.0]);
        assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]));
        let s = fit_stats(&fm(&[&[3.0, -1.0, 2.0][..]; 5])).unwrap();
        assert!(s.cov.iter().all(|&v| v == 0.0));
        assert!(fit_stats(&fm(&[&[1.0, 2.0]])).is_err());
    }

    #[test]
    fn sqrt_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&id).unwrap() - &id).norm() < 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = matrix_sqrt_psd(&d).unwrap();
        assert!((s - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).norm() < 1e-12);
        // eigenvalues 1 and 3 with eigenvectors (1,-1)/sqrt2 and (1,1)/sqrt2
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let s = matrix_sqrt_psd(&a).unwrap();
        let r3 = 3f64.sqrt();
        let expect = DMatrix::from_row_slice(
            2,
            2,
            &[(1.0 + r3) / 2.0, (r3 - 1.0) / 2.0, (r3 - 1.0) / 2.0, (1.0 + r3) / 2.0],
        );
        assert!((&s - expect).norm() < 1e-12);
        assert!((&s * &s - a).norm() < 1e-12);
    }

    #[test]
    fn sqrt_rejects_bad_input() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matrix_sqrt_psd(&asym).is_err());
        let nan = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, f64::NAN, 1.0]);
        assert!(matrix_sqrt_psd(&nan).is_err());
        // slightly negative eigenvalue is clamped
        let near = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-12]);
        let s = matrix_sqrt_psd(&near).unwrap();
        assert!((&s * &s - near).norm() < 1e-6);
    }

    #[test]
    fn extractor_determinism_and_contrast() {
        let spec = FeatureExtractorSpec::random_projection(16, 3);
        let black = Image::filled(32, 32, 3, 0.0);
        let white = Image::filled(32, 32, 3, 1.0);
        let f = extract_features(&[black.clone(), black.clone(), white.clone()], &spec).unwrap();
        assert_eq!(f.row(0), f.row(1));
        assert_ne!(f.row(0), f.row(2));
        assert!(f.data.iter().all(|v| v.abs() < 1.0));
        let g = extract_features(&[black, white], &spec).unwrap();
        assert_eq!(g.row(1), f.row(2));
        let mixed = [Image::filled(32, 32, 3, 0.0), Image::filled(16, 16, 3, 0.0)];
        assert!(extract_features(&mixed, &spec).is_err());
    }

    #[test]
    fn pooling_handles_small_and_odd_sizes() {
        let im = Image::filled(5, 7, 1, 0.25);
        let p = pool(&im);
        assert_eq!(p.len(), 256);
        assert!(p.iter().all(|&v| v == 0.25));
        let mut im = Image::filled(32, 32, 1, 0.0);
        *im.at_mut(0, 0, 0) = 4.0;
        assert_eq!(pool(&im)[0], 1.0);
    }

    #[test]
    fn external_features_passthrough() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.rfea");
        let mut r = rng::stream(9, &[]);
        let feats = FeatureMatrix::new(
            100,
            64,
            (0..6400).map(|_| (rng::uniform(&mut r) as f32) as f64).collect(),
        )
        .unwrap();
        feats.save(&path).unwrap();
        let images = vec![Image::filled(4, 4, 3, 0.0); 100];
        let spec = FeatureExtractorSpec::external(&path, 64);
        assert_eq!(extract_features(&images, &spec).unwrap(), feats);
        assert!(extract_features(&images[..99], &spec).is_err());
        assert!(extract_features(&images, &FeatureExtractorSpec::external(dir.path().join("missing"), 64)).is_err());
        let mut raw = feats.to_bytes();
        raw.truncate(raw.len() - 3);
        std::fs::write(&path, raw).unwrap();
        assert!(extract_features(&images, &spec).is_err());
    }

    #[test]
    fn fid_of_set_with_itself_and_disjoint_colors() {
        let spec = FeatureExtractorSpec::random_projection(8, 1);
        let mut r = rng::stream(4, &[]);
        let set: Vec<Image> = (0..12)
            .map(|_| Image::filled(16, 16, 3, rng::uniform(&mut r)))
            .collect();
        assert!(fid_between(&set, &set, &spec).unwrap() < 1e-6);
        let reds: Vec<Image> = (0..4).map(|_| Image::filled(16, 16, 3, 0.1)).collect();
        let blues: Vec<Image> = (0..4).map(|_| Image::filled(16, 16, 3, 0.9)).collect();
        assert!(fid_between(&reds, &blues, &spec).unwrap() > 0.0);
    }
}

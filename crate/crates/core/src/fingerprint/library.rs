//! Polymer signatures (class mean + regularized covariance) and the library file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{covariance, FeatureEncoding, ParticleFingerprint};
use crate::error::{Error, Result};
use crate::ingest::{StackManifest, Warning};

pub const LIBRARY_SCHEMA_VERSION: u32 = 1;
pub const LAMBDA_FLOOR: f64 = 1e-9;
pub const DEFAULT_LAMBDA_REL: f64 = 1e-3;

/// Where a class covariance comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    /// Sample covariance across the class's particles.
    #[default]
    Samples,
    /// Average within-particle (pixel-level) covariance; usable with one exemplar per class.
    PixelLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolymerSignature {
    pub class_name: String,
    pub sample_count: usize,
    pub regularization_lambda: f64,
    pub mean_vector: Vec<f64>,
    /// Row-major `d × d`, without the ridge term.
    pub covariance: Vec<f64>,
    /// Row-major `(covariance + λI)⁻¹`.
    pub inverse_covariance: Vec<f64>,
}

impl PolymerSignature {
    /// Builds a signature with an absolute ridge `lambda` (floored at 1e-9).
    pub fn new(
        class_name: impl Into<String>,
        mean_vector: Vec<f64>,
        covariance: Vec<f64>,
        lambda: f64,
        sample_count: usize,
    ) -> Result<Self> {
        let class_name = class_name.into();
        let d = mean_vector.len();
        if covariance.len() != d * d {
            return Err(Error::FeatureDimension {
                expected: d * d,
                got: covariance.len(),
            });
        }
        let lambda = lambda.max(LAMBDA_FLOOR);
        let inverse_covariance = regularized_inverse(&covariance, d, lambda)
            .ok_or_else(|| Error::NotPositiveDefinite(class_name.clone()))?;
        Ok(Self {
            class_name,
            sample_count: sample_count.max(1),
            regularization_lambda: lambda,
            mean_vector,
            covariance,
            inverse_covariance,
        })
    }

    pub fn dimension(&self) -> usize {
        self.mean_vector.len()
    }

    pub fn regularized_covariance(&self) -> DMatrix<f64> {
        let d = self.dimension();
        DMatrix::from_row_slice(d, d, &self.covariance) + DMatrix::identity(d, d) * self.regularization_lambda
    }
}

/// `(C + λI)⁻¹` through a Cholesky factorization; `None` when not positive definite.
pub fn regularized_inverse(cov: &[f64], d: usize, lambda: f64) -> Option<Vec<f64>> {
    let m = DMatrix::from_row_slice(d, d, cov) + DMatrix::identity(d, d) * lambda;
    let inv = m.cholesky()?.inverse();
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            // symmetrize away round-off
            out.push(0.5 * (inv[(i, j)] + inv[(j, i)]));
        }
    }
    Some(out)
}

/// Ridge size relative to the mean variance: `λ_rel · trace(C) / d`, floored.
pub fn relative_lambda(cov: &[f64], d: usize, lambda_rel: f64) -> f64 {
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    (lambda_rel * trace / d as f64).max(LAMBDA_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintLibrary {
    pub schema_version: u32,
    pub manifest_digest: String,
    #[serde(default)]
    pub encoding: FeatureEncoding,
    pub signatures: Vec<PolymerSignature>,
}

impl FingerprintLibrary {
    pub fn new(signatures: Vec<PolymerSignature>, manifest_digest: impl Into<String>) -> Result<Self> {
        let lib = Self {
            schema_version: LIBRARY_SCHEMA_VERSION,
            manifest_digest: manifest_digest.into(),
            encoding: FeatureEncoding::default(),
            signatures,
        };
        lib.validate()?;
        Ok(lib)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.signatures.first().ok_or(Error::EmptyLibrary)?;
        let d = first.dimension();
        let mut names = BTreeSet::new();
        for s in &self.signatures {
            if !names.insert(s.class_name.as_str()) {
                return Err(Error::DuplicateClass(s.class_name.clone()));
            }
            if s.dimension() != d {
                return Err(Error::FeatureDimension {
                    expected: d,
                    got: s.dimension(),
                });
            }
            for len in [s.covariance.len(), s.inverse_covariance.len()] {
                if len != d * d {
                    return Err(Error::FeatureDimension { expected: d * d, got: len });
                }
            }
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.signatures[0].dimension()
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.signatures.iter().map(|s| s.class_name.as_str()).collect()
    }

    pub fn get(&self, class_name: &str) -> Option<&PolymerSignature> {
        self.signatures.iter().find(|s| s.class_name == class_name)
    }

    /// Warns when the library was trained on a different condition set.
    pub fn check_manifest(&self, manifest: &StackManifest) -> Option<Warning> {
        let digest = manifest.digest();
        (digest != self.manifest_digest).then(|| Warning::DigestMismatch {
            library: self.manifest_digest.clone(),
            manifest: digest,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("library", e))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::parse("library", e))?;
        let version = table
            .get("schema_version")
            .and_then(|v| v.as_integer())
            .ok_or_else(|| Error::parse("library", "missing schema_version"))?;
        if version != LIBRARY_SCHEMA_VERSION as i64 {
            return Err(Error::SchemaVersion {
                found: version as u32,
                expected: LIBRARY_SCHEMA_VERSION,
            });
        }
        let lib: Self = toml::from_str(text).map_err(|e| Error::parse("library", e))?;
        lib.validate()?;
        Ok(lib)
    }
}

/// Builds one signature per class from labeled fingerprints.
///
/// The class mean is the sample mean of feature vectors. The ridge is
/// `lambda_rel · trace(C) / d` with a floor of 1e-9, so a single-sample class
/// under `CovarianceSource::Samples` ends up with `λI`.
pub fn build_library(
    samples: &BTreeMap<String, Vec<ParticleFingerprint>>,
    lambda_rel: f64,
    source: CovarianceSource,
    manifest_digest: &str,
) -> Result<FingerprintLibrary> {
    let mut dim: Option<(usize, FeatureEncoding)> = None;
    let mut signatures = Vec::with_capacity(samples.len());
    for (name, fps) in samples {
        if fps.is_empty() {
            return Err(Error::EmptyClass(name.clone()));
        }
        for fp in fps {
            match dim {
                None => dim = Some((fp.dimension(), fp.encoding)),
                Some((d, _)) if d != fp.dimension() => {
                    return Err(Error::FeatureDimension {
                        expected: d,
                        got: fp.dimension(),
                    })
                }
                _ => {}
            }
        }
        let d = fps[0].dimension();
        let n = fps.len();
        let mut mean = vec![0.0; d];
        for fp in fps {
            for (m, v) in mean.iter_mut().zip(&fp.feature_vector) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let cov = match source {
            CovarianceSource::Samples => {
                let rows: Vec<Vec<f64>> = fps.iter().map(|fp| fp.feature_vector.clone()).collect();
                covariance(&rows, d)
            }
            CovarianceSource::PixelLevel => {
                let mut acc = vec![0.0; d * d];
                for fp in fps {
                    let pc = fp
                        .pixel_covariance
                        .as_ref()
                        .ok_or_else(|| Error::MissingPixelCovariance(name.clone()))?;
                    if pc.len() != d * d {
                        return Err(Error::FeatureDimension { expected: d * d, got: pc.len() });
                    }
                    for (a, v) in acc.iter_mut().zip(pc) {
                        *a += v;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= n as f64);
                acc
            }
        };
        let lambda = relative_lambda(&cov, d, lambda_rel);
        signatures.push(PolymerSignature::new(name.clone(), mean, cov, lambda, n)?);
    }
    let mut lib = FingerprintLibrary::new(signatures, manifest_digest)?;
    if let Some((_, enc)) = dim {
        lib.encoding = enc;
    }
    Ok(lib)
}

pub fn save_library(lib: &FingerprintLibrary, path: &Path) -> Result<()> {
    std::fs::write(path, lib.to_toml_string()?).map_err(|e| Error::io(path, e))
}

/// Loads a library; when a manifest is given, a digest mismatch is returned as a warning.
pub fn load_library(path: &Path, manifest: Option<&StackManifest>) -> Result<(FingerprintLibrary, Vec<Warning>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lib = FingerprintLibrary::from_toml_str(&text)?;
    let warnings: Vec<Warning> = manifest.and_then(|m| lib.check_manifest(m)).into_iter().collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((lib, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::HsvStats;
    use approx::assert_abs_diff_eq;

    pub(crate) fn fp(v: Vec<f64>) -> ParticleFingerprint {
        ParticleFingerprint {
            region_id: 1,
            condition_count: v.len() / 3,
            encoding: FeatureEncoding::Chromatic,
            per_condition: vec![
                HsvStats { mean_h: 0.0, std_h: 0.0, mean_s: 0.0, std_s: 0.0, mean_v: 0.0, std_v: 0.0 };
                v.len() / 3
            ],
            feature_vector: v,
            area_px: 1,
            centroid: (0.0, 0.0),
            pixel_covariance: None,
        }
    }

    fn mat_mul(a: &[f64], b: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(d, d, a) * b
    }

    #[test]
    fn singular_pair_is_regularized() {
        let mut samples = BTreeMap::new();
        samples.insert("A".to_string(), vec![fp(vec![1.0, 1.0]), fp(vec![3.0, 3.0])]);
        let lib = build_library(&samples, 0.0, CovarianceSource::Samples, "x").unwrap();
        let s = &lib.signatures[0];
        assert_eq!(s.mean_vector, vec![2.0, 2.0]);
        assert_eq!(s.covariance, vec![2.0, 2.0, 2.0, 2.0]);
        assert_eq!(s.regularization_lambda, LAMBDA_FLOOR);
        assert!(s.inverse_covariance.iter().all(|v| v.is_finite()));
        let prod = mat_mul(&s.inverse_covariance, &s.regularized_covariance(), 2);
        // condition number ~4e9 here, so the identity holds only to ~1e-6 relative
        assert!((prod - DMatrix::identity(2, 2)).abs().max() < 1e-5);
    }

    #[test]
    fn single_sample_gives_scaled_identity() {
        let mut samples = BTreeMap::new();
        samples.insert("A".to_string(), vec![fp(vec![0.2, 0.4, 0.6])]);
        let lib = build_library(&samples, DEFAULT_LAMBDA_REL, CovarianceSource::Samples, "x").unwrap();
        let s = &lib.signatures[0];
        assert!(s.covariance.iter().all(|&c| c == 0.0));
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 / LAMBDA_FLOOR } else { 0.0 };
                assert_abs_diff_eq!(s.inverse_covariance[i * 3 + j], expected, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn dimension_and_empty_errors() {
        let mut samples = BTreeMap::new();
        samples.insert("A".to_string(), vec![fp(vec![1.0, 2.0, 3.0])]);
        samples.insert("B".to_string(), vec![fp(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])]);
        assert!(matches!(
            build_library(&samples, 1e-3, CovarianceSource::Samples, "x"),
            Err(Error::FeatureDimension { .. })
        ));
        let mut samples = BTreeMap::new();
        samples.insert("A".to_string(), vec![]);
        assert!(matches!(
            build_library(&samples, 1e-3, CovarianceSource::Samples, "x"),
            Err(Error::EmptyClass(_))
        ));
        let mut samples = BTreeMap::new();
        samples.insert("A".to_string(), vec![fp(vec![1.0, 2.0, 3.0])]);
        assert!(matches!(
            build_library(&samples, 1e-3, CovarianceSource::PixelLevel, "x"),
            Err(Error::MissingPixelCovariance(_))
        ));
    }

    #[test]
    fn toml_roundtrip_and_version_check() {
        let mut samples = BTreeMap::new();
        samples.insert("PP".to_string(), vec![fp(vec![0.1, 0.2, 0.3]), fp(vec![0.15, 0.1, 0.33]), fp(vec![0.3, 0.7, 0.1])]);
        samples.insert("PS".to_string(), vec![fp(vec![1.0 / 3.0, 2.0, 1e-17])]);
        let lib = build_library(&samples, 1e-3, CovarianceSource::Samples, "abc").unwrap();
        let text = lib.to_toml_string().unwrap();
        let again = FingerprintLibrary::from_toml_str(&text).unwrap();
        assert_eq!(again, lib);

        let bumped = text.replace("schema_version = 1", "schema_version = 7");
        assert!(matches!(
            FingerprintLibrary::from_toml_str(&bumped),
            Err(Error::SchemaVersion { found: 7, expected: 1 })
        ));
    }
}

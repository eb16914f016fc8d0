//! Mahalanobis nearest-neighbor classification and class-to-class distance matrices.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::library::{regularized_inverse, LAMBDA_FLOOR};
use crate::fingerprint::{FingerprintLibrary, ParticleFingerprint};

pub const UNCLASSIFIED: &str = "UNCLASSIFIED";
pub const DEFAULT_TAU: f64 = 5.0;
pub const CONFUSABLE_THRESHOLD: f64 = 1.0;

/// `sqrt((x − m)ᵀ C⁻¹ (x − m))` with `C⁻¹` given row-major.
pub fn mahalanobis(x: &[f64], m: &[f64], inverse_covariance: &[f64]) -> Result<f64> {
    let d = x.len();
    if m.len() != d {
        return Err(Error::FeatureDimension { expected: d, got: m.len() });
    }
    if inverse_covariance.len() != d * d {
        return Err(Error::FeatureDimension {
            expected: d * d,
            got: inverse_covariance.len(),
        });
    }
    let diff: Vec<f64> = x.iter().zip(m).map(|(a, b)| a - b).collect();
    let mut q = 0.0;
    for (i, row) in inverse_covariance.chunks_exact(d).enumerate() {
        let ri: f64 = row.iter().zip(&diff).map(|(c, v)| c * v).sum();
        q += diff[i] * ri;
    }
    // round-off can push an exact zero slightly negative
    let q = if q < 0.0 && q > -1e-12 { 0.0 } else { q };
    let dist = q.sqrt();
    if !dist.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(dist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub region_id: u32,
    /// `None` when the nearest class is farther than the threshold.
    pub assigned_class: Option<String>,
    pub distances: BTreeMap<String, f64>,
    pub threshold_used: f64,
}

impl ClassificationResult {
    pub fn label(&self) -> &str {
        self.assigned_class.as_deref().unwrap_or(UNCLASSIFIED)
    }

    pub fn nearest(&self) -> Option<(&str, f64)> {
        let mut best: Option<(&str, f64)> = None;
        for (name, &d) in &self.distances {
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((name, d));
            }
        }
        best
    }
}

/// Distances to every class (each with its own inverse covariance); the
/// nearest class wins when within `tau`. Exact ties resolve to the
/// lexically first class name.
pub fn classify_particle(
    fp: &ParticleFingerprint,
    lib: &FingerprintLibrary,
    tau: f64,
) -> Result<ClassificationResult> {
    let d = lib.dimension();
    if fp.dimension() != d {
        return Err(Error::FeatureDimension { expected: d, got: fp.dimension() });
    }
    let mut distances = BTreeMap::new();
    for sig in &lib.signatures {
        let dist = mahalanobis(&fp.feature_vector, &sig.mean_vector, &sig.inverse_covariance)?;
        distances.insert(sig.class_name.clone(), dist);
    }
    let mut result = ClassificationResult {
        region_id: fp.region_id,
        assigned_class: None,
        distances,
        threshold_used: tau,
    };
    if let Some((name, dist)) = result.nearest() {
        if dist <= tau {
            result.assigned_class = Some(name.to_string());
        }
    }
    Ok(result)
}

pub fn classify_all(
    fps: &[ParticleFingerprint],
    lib: &FingerprintLibrary,
    tau: f64,
) -> Result<Vec<ClassificationResult>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        fps.par_iter().map(|fp| classify_particle(fp, lib, tau)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        fps.iter().map(|fp| classify_particle(fp, lib, tau)).collect()
    }
}

/// Results table: region id, label, one distance column per class, threshold.
pub fn write_results_csv<W: Write>(results: &[ClassificationResult], class_names: &[&str], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::parse("results table", e);
    let mut header = vec!["region_id".to_string(), "assigned_class".to_string()];
    header.extend(class_names.iter().map(|c| format!("d_{c}")));
    header.push("threshold_used".into());
    wtr.write_record(&header).map_err(err)?;
    for r in results {
        let mut row = vec![r.region_id.to_string(), r.label().to_string()];
        for c in class_names {
            row.push(r.distances.get(*c).map(|d| format!("{d:.6}")).unwrap_or_default());
        }
        row.push(r.threshold_used.to_string());
        wtr.write_record(&row).map_err(err)?;
    }
    wtr.flush().map_err(|e| Error::parse("results table", e))?;
    Ok(())
}

/// Reads `region_id, assigned_class` pairs back from a results table.
pub fn read_results_labels<R: std::io::Read>(input: R) -> Result<Vec<(u32, Option<String>)>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse("results table", e))?;
        let id: u32 = rec
            .get(0)
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|e| Error::parse("results table", e))?;
        let label = rec.get(1).unwrap_or_default().trim();
        out.push((id, (label != UNCLASSIFIED && !label.is_empty()).then(|| label.to_string())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub class_names: Vec<String>,
    /// Row-major `n × n`.
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    pub fn by_name(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.class_names.iter().position(|c| c == a)?;
        let j = self.class_names.iter().position(|c| c == b)?;
        Some(self.get(i, j))
    }

    /// Symmetric matrix from the strict upper triangle given row by row.
    pub fn from_upper_triangle(class_names: Vec<String>, upper: &[&[f64]]) -> Result<Self> {
        let n = class_names.len();
        let mut values = vec![0.0; n * n];
        for (i, row) in upper.iter().enumerate() {
            if row.len() != n - i - 1 {
                return Err(Error::FeatureDimension { expected: n - i - 1, got: row.len() });
            }
            for (k, &v) in row.iter().enumerate() {
                let j = i + 1 + k;
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Ok(Self { class_names, values })
    }

    pub fn write_full_csv<W: Write>(&self, out: W) -> Result<()> {
        self.write_csv(out, false)
    }

    /// Upper-triangular layout: lower cells are left blank.
    pub fn write_upper_csv<W: Write>(&self, out: W) -> Result<()> {
        self.write_csv(out, true)
    }

    fn write_csv<W: Write>(&self, out: W, upper_only: bool) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::parse("distance matrix", e);
        let mut header = vec![String::new()];
        header.extend(self.class_names.iter().cloned());
        wtr.write_record(&header).map_err(err)?;
        for i in 0..self.len() {
            let mut row = vec![self.class_names[i].clone()];
            for j in 0..self.len() {
                if upper_only && j < i {
                    row.push(String::new());
                } else {
                    row.push(format!("{:.2}", self.get(i, j)));
                }
            }
            wtr.write_record(&row).map_err(err)?;
        }
        wtr.flush().map_err(|e| Error::parse("distance matrix", e))?;
        Ok(())
    }
}

/// Pooled covariance: sample-count-weighted average of the class covariances
/// plus the weighted average ridge.
pub fn pooled_covariance(lib: &FingerprintLibrary) -> (Vec<f64>, f64) {
    let d = lib.dimension();
    let total: f64 = lib.signatures.iter().map(|s| s.sample_count as f64).sum();
    let mut pooled = vec![0.0; d * d];
    let mut lambda = 0.0;
    for s in &lib.signatures {
        let w = s.sample_count as f64 / total;
        for (p, c) in pooled.iter_mut().zip(&s.covariance) {
            *p += w * c;
        }
        lambda += w * s.regularization_lambda;
    }
    (pooled, lambda.max(LAMBDA_FLOOR))
}

/// Class-to-class Mahalanobis distances under the pooled covariance.
pub fn distance_matrix(lib: &FingerprintLibrary) -> Result<DistanceMatrix> {
    let n = lib.signatures.len();
    if n < 2 {
        return Err(Error::TooFewClasses);
    }
    let d = lib.dimension();
    let (pooled, lambda) = pooled_covariance(lib);
    let inverse = regularized_inverse(&pooled, d, lambda);
    assert!(inverse.is_some(), "pooled covariance is positive definite once regularized");
    let inverse = inverse.unwrap();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dist = mahalanobis(
                &lib.signatures[i].mean_vector,
                &lib.signatures[j].mean_vector,
                &inverse,
            )?;
            values[i * n + j] = dist;
            values[j * n + i] = dist;
        }
    }
    Ok(DistanceMatrix {
        class_names: lib.signatures.iter().map(|s| s.class_name.clone()).collect(),
        values,
    })
}

/// All unordered pairs closer than `threshold`, ascending by distance.
pub fn flag_confusable_pairs(dm: &DistanceMatrix, threshold: f64) -> Vec<(String, String, f64)> {
    let n = dm.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = dm.get(i, j);
            if d < threshold {
                pairs.push((dm.class_names[i].clone(), dm.class_names[j].clone(), d));
            }
        }
    }
    pairs.sort_by(|a, b| a.2.total_cmp(&b.2).then_with(|| (&a.0, &a.1).cmp(&(&b.0, &b.1))));
    pairs
}

/// Dense matrix view, for callers doing their own algebra.
pub fn as_matrix(values: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::PolymerSignature;
    use approx::assert_abs_diff_eq;

    fn identity(d: usize) -> Vec<f64> {
        (0..d * d).map(|k| if k % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn mahalanobis_examples() {
        assert_eq!(mahalanobis(&[1.0, 2.0], &[1.0, 2.0], &identity(2)).unwrap(), 0.0);
        assert_abs_diff_eq!(mahalanobis(&[3.0, 4.0], &[0.0, 0.0], &identity(2)).unwrap(), 5.0, epsilon = 1e-12);
        // C = diag(4, 1) -> C⁻¹ = diag(0.25, 1)
        let d = mahalanobis(&[2.0, 1.0], &[0.0, 0.0], &[0.25, 0.0, 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(d, 2f64.sqrt(), epsilon = 1e-12);
        assert!(mahalanobis(&[1.0], &[1.0, 2.0], &identity(2)).is_err());
        assert!(matches!(
            mahalanobis(&[1.0, 0.0], &[0.0, 0.0], &[f64::INFINITY, 0.0, 0.0, 1.0]),
            Err(Error::NonFinite)
        ));
    }

    fn sig(name: &str, mean: Vec<f64>) -> PolymerSignature {
        let d = mean.len();
        PolymerSignature::new(name, mean, identity(d), 0.0, 1).unwrap()
    }

    fn fp(v: Vec<f64>) -> ParticleFingerprint {
        ParticleFingerprint {
            region_id: 3,
            condition_count: 1,
            encoding: Default::default(),
            per_condition: vec![],
            feature_vector: v,
            area_px: 1,
            centroid: (0.0, 0.0),
            pixel_covariance: None,
        }
    }

    #[test]
    fn classify_threshold_and_ties() {
        let lib = FingerprintLibrary::new(vec![sig("PP", vec![0.0, 0.0]), sig("PS", vec![10.0, 0.0])], "x").unwrap();
        let r = classify_particle(&fp(vec![0.0, 0.0]), &lib, DEFAULT_TAU).unwrap();
        assert_eq!(r.assigned_class.as_deref(), Some("PP"));
        assert_eq!(r.distances["PP"], 0.0);

        let r = classify_particle(&fp(vec![5.0, 0.0]), &lib, DEFAULT_TAU).unwrap();
        assert_eq!(r.assigned_class.as_deref(), Some("PP"), "tie resolves lexically");

        let far = classify_particle(&fp(vec![0.0, 7.2]), &lib, 5.0).unwrap();
        assert_eq!(far.assigned_class, None);
        assert_eq!(far.label(), UNCLASSIFIED);

        assert!(classify_particle(&fp(vec![0.0]), &lib, 5.0).is_err());
    }

    #[test]
    fn pooled_matrix_examples() {
        let lib = FingerprintLibrary::new(vec![sig("A", vec![0.0, 0.0]), sig("B", vec![3.0, 4.0])], "x").unwrap();
        let dm = distance_matrix(&lib).unwrap();
        assert_abs_diff_eq!(dm.get(0, 1), 5.0, epsilon = 1e-8);
        assert_eq!(dm.get(0, 0), 0.0);
        assert_eq!(dm.get(1, 0), dm.get(0, 1));

        let same = FingerprintLibrary::new(vec![sig("A", vec![1.0, 1.0]), sig("B", vec![1.0, 1.0])], "x").unwrap();
        assert_eq!(distance_matrix(&same).unwrap().get(0, 1), 0.0);

        let one = FingerprintLibrary::new(vec![sig("A", vec![1.0])], "x").unwrap();
        assert!(matches!(distance_matrix(&one), Err(Error::TooFewClasses)));
    }

    #[test]
    fn flags_sorted_pairs() {
        let dm = DistanceMatrix::from_upper_triangle(
            vec!["A".into(), "B".into(), "C".into()],
            &[&[0.9, 0.3], &[2.0], &[]],
        )
        .unwrap();
        let pairs = flag_confusable_pairs(&dm, 1.0);
        assert_eq!(pairs, vec![("A".into(), "C".into(), 0.3), ("A".into(), "B".into(), 0.9)]);
        assert!(flag_confusable_pairs(&dm, 0.2).is_empty());
    }

    #[test]
    fn results_csv_roundtrip_labels() {
        let lib = FingerprintLibrary::new(vec![sig("PP", vec![0.0]), sig("PS", vec![9.0])], "x").unwrap();
        let rs = vec![
            classify_particle(&fp(vec![0.1]), &lib, 5.0).unwrap(),
            classify_particle(&fp(vec![50.0]), &lib, 5.0).unwrap(),
        ];
        let mut buf = Vec::new();
        write_results_csv(&rs, &lib.class_names(), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("region_id,assigned_class,d_PP,d_PS,threshold_used"));
        let labels = read_results_labels(buf.as_slice()).unwrap();
        assert_eq!(labels, vec![(3, Some("PP".into())), (3, None)]);
    }
}

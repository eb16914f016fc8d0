//! File formats owned by the command-line tool.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fluoromap::fingerprint::ParticleFingerprint;
use fluoromap::metrics::{AreaSeries, ReferenceMethod};
use serde::{Deserialize, Serialize};

/// Fingerprints of one stack, tagged with the condition set they were measured on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FingerprintSet {
    pub stack_name: String,
    pub manifest_digest: String,
    pub fingerprints: Vec<ParticleFingerprint>,
}

impl FingerprintSet {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing fingerprints {}", path.display()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `region_id,class_name` rows.
pub fn read_class_table(path: &Path) -> Result<BTreeMap<u32, String>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), line + 2))?;
        let id: u32 = rec
            .get(0)
            .unwrap_or_default()
            .trim()
            .parse()
            .with_context(|| format!("{}: row {}: bad region id", path.display(), line + 2))?;
        let class = rec.get(1).unwrap_or_default().trim().to_string();
        if class.is_empty() {
            bail!("{}: row {}: empty class name", path.display(), line + 2);
        }
        out.insert(id, class);
    }
    Ok(out)
}

pub fn class_table_csv(classes: &BTreeMap<u32, String>) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["region_id", "class_name"])?;
    for (id, class) in classes {
        wtr.write_record([id.to_string(), class.clone()])?;
    }
    Ok(wtr.into_inner()?)
}

/// Area table rows: `particle,reference,mask_area_px,<one area per condition>`.
/// An empty `reference` cell takes `default`.
pub fn read_area_table(path: &Path, default: ReferenceMethod) -> Result<Vec<AreaSeries>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let row = line + 2;
        let rec = rec.with_context(|| format!("{}: row {row}", path.display()))?;
        if rec.len() < 4 {
            bail!("{}: row {row}: expected particle, reference, mask area and condition areas", path.display());
        }
        let reference_method = match rec[1].trim().to_ascii_lowercase().as_str() {
            "" => default,
            "median" => ReferenceMethod::Median,
            "q1" | "first_quartile" => ReferenceMethod::FirstQuartile,
            other => bail!("{}: row {row}: unknown reference `{other}`", path.display()),
        };
        let num = |s: &str| -> Result<u64> {
            s.trim()
                .parse()
                .with_context(|| format!("{}: row {row}: bad area `{s}`", path.display()))
        };
        out.push(AreaSeries {
            particle_name: rec[0].trim().to_string(),
            mask_area_px: num(&rec[2])?,
            condition_areas_px: rec.iter().skip(3).map(num).collect::<Result<_>>()?,
            reference_method,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let classes = BTreeMap::from([(1, "PP".to_string()), (4, "PET".to_string())]);
        std::fs::write(&path, class_table_csv(&classes).unwrap()).unwrap();
        assert_eq!(read_class_table(&path).unwrap(), classes);
    }

    #[test]
    fn area_table_reads_reference_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "particle,reference,mask_area_px,a1,a2,a3\nX,,10,9,10,11\nY,q1,5,4,6,8\n").unwrap();
        let rows = read_area_table(&path, ReferenceMethod::Median).unwrap();
        assert_eq!(rows[0].reference_method, ReferenceMethod::Median);
        assert_eq!(rows[1].reference_method, ReferenceMethod::FirstQuartile);
        assert_eq!(rows[1].condition_areas_px, vec![4, 6, 8]);
    }
}

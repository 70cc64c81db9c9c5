//! Dataset model and JSON-lines persistence.
//!
//! A dataset file interleaves two record kinds, tagged by `kind`:
//! observations (one cluster on one day, with per-fruitlet points) and pairs
//! (two days of one cluster plus optional ground-truth matches). Points are
//! stored as f32 triples; loading maps them into f64 clouds.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::matcher::CorrespondenceSet;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FruitletRecord {
    pub fruitlet_id: String,
    pub points: Vec<[f32; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetRecord {
    pub cluster_id: String,
    pub day: i64,
    pub fruitlets: Vec<FruitletRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairRecord {
    pub cluster_id: String,
    pub day_t: i64,
    pub day_t1: i64,
    /// Index pairs into the two observations' fruitlet lists; absent for
    /// inference-only data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_matches: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetLine {
    Observation(DatasetRecord),
    Pair(PairRecord),
}

/// In-memory observation with f64 clouds, ready for geometry.
#[derive(Debug, Clone)]
pub struct ClusterObservation {
    pub cluster_id: String,
    pub day: i64,
    pub fruitlet_ids: Vec<String>,
    pub clouds: Vec<PointCloud>,
}

impl DatasetRecord {
    pub fn to_observation(&self) -> ClusterObservation {
        ClusterObservation {
            cluster_id: self.cluster_id.clone(),
            day: self.day,
            fruitlet_ids: self.fruitlets.iter().map(|f| f.fruitlet_id.clone()).collect(),
            clouds: self
                .fruitlets
                .iter()
                .map(|f| {
                    PointCloud::new(
                        f.points.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect(),
                    )
                })
                .collect(),
        }
    }

    pub fn from_observation(obs: &ClusterObservation) -> Self {
        DatasetRecord {
            cluster_id: obs.cluster_id.clone(),
            day: obs.day,
            fruitlets: obs
                .fruitlet_ids
                .iter()
                .zip(&obs.clouds)
                .map(|(id, cloud)| FruitletRecord {
                    fruitlet_id: id.clone(),
                    points: cloud
                        .points
                        .iter()
                        .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
                        .collect(),
                })
                .collect(),
        }
    }
}

/// A cluster observed on two days with known correspondences.
#[derive(Debug, Clone)]
pub struct LabeledClusterPair {
    pub cluster_id: String,
    pub obs_t: ClusterObservation,
    pub obs_t1: ClusterObservation,
    pub day_gap: i64,
    pub gt: Option<CorrespondenceSet>,
}

#[derive(Debug, Default)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub pairs: Vec<PairRecord>,
    index: HashMap<(String, i64), usize>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observation(&self, cluster_id: &str, day: i64) -> Option<&DatasetRecord> {
        self.index.get(&(cluster_id.to_string(), day)).map(|&i| &self.records[i])
    }

    pub fn push_record(&mut self, record: DatasetRecord) -> Result<()> {
        validate_record(&record, 0)?;
        let key = (record.cluster_id.clone(), record.day);
        if self.index.contains_key(&key) {
            return Err(Error::Data {
                line: 0,
                path: "cluster_id/day".into(),
                message: format!("duplicate observation {key:?}"),
            });
        }
        self.index.insert(key, self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn push_pair(&mut self, pair: PairRecord) -> Result<()> {
        self.pairs.push(pair);
        Ok(())
    }

    /// Parse and validate a JSONL dataset. Errors carry the 1-based line
    /// number and a field path.
    pub fn load(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut ds = Dataset::new();
        let mut pair_lines = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: DatasetLine = serde_json::from_str(&line).map_err(|e| Error::Data {
                line: lineno,
                path: "json".into(),
                message: e.to_string(),
            })?;
            match parsed {
                DatasetLine::Observation(rec) => {
                    validate_record(&rec, lineno)?;
                    let key = (rec.cluster_id.clone(), rec.day);
                    if ds.index.contains_key(&key) {
                        return Err(Error::Data {
                            line: lineno,
                            path: "cluster_id/day".into(),
                            message: format!("duplicate observation {key:?}"),
                        });
                    }
                    ds.index.insert(key, ds.records.len());
                    ds.records.push(rec);
                }
                DatasetLine::Pair(pair) => {
                    pair_lines.push(lineno);
                    ds.pairs.push(pair);
                }
            }
        }
        for (pair, &lineno) in ds.pairs.iter().zip(&pair_lines) {
            validate_pair(pair, &ds.index, &ds.records, lineno)?;
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        for rec in &self.records {
            serde_json::to_writer(&mut out, &DatasetLine::Observation(rec.clone()))?;
            out.write_all(b"\n")?;
        }
        for pair in &self.pairs {
            serde_json::to_writer(&mut out, &DatasetLine::Pair(pair.clone()))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Join pair records with their observations.
    pub fn assemble_pairs(&self) -> Result<Vec<LabeledClusterPair>> {
        self.pairs
            .iter()
            .map(|pair| {
                let rec_t = self
                    .observation(&pair.cluster_id, pair.day_t)
                    .ok_or_else(|| missing_obs(pair, pair.day_t))?;
                let rec_t1 = self
                    .observation(&pair.cluster_id, pair.day_t1)
                    .ok_or_else(|| missing_obs(pair, pair.day_t1))?;
                let gt = match &pair.gt_matches {
                    Some(list) => Some(CorrespondenceSet::new(
                        list.iter().map(|&[i, j]| (i, j)).collect(),
                        rec_t.fruitlets.len(),
                        rec_t1.fruitlets.len(),
                    )?),
                    None => None,
                };
                Ok(LabeledClusterPair {
                    cluster_id: pair.cluster_id.clone(),
                    obs_t: rec_t.to_observation(),
                    obs_t1: rec_t1.to_observation(),
                    day_gap: pair.day_t1 - pair.day_t,
                    gt,
                })
            })
            .collect()
    }
}

fn missing_obs(pair: &PairRecord, day: i64) -> Error {
    Error::Data {
        line: 0,
        path: format!("pair {}:{}..{}", pair.cluster_id, pair.day_t, pair.day_t1),
        message: format!("no observation for cluster {} day {day}", pair.cluster_id),
    }
}

fn validate_record(rec: &DatasetRecord, line: usize) -> Result<()> {
    if rec.fruitlets.is_empty() {
        return Err(Error::Data {
            line,
            path: format!("{}.fruitlets", rec.cluster_id),
            message: "observation needs at least one fruitlet".into(),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for (k, f) in rec.fruitlets.iter().enumerate() {
        if !seen.insert(&f.fruitlet_id) {
            return Err(Error::Data {
                line,
                path: format!("{}.fruitlets[{k}].fruitlet_id", rec.cluster_id),
                message: format!("duplicate fruitlet_id {:?}", f.fruitlet_id),
            });
        }
        for (pi, p) in f.points.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::Data {
                    line,
                    path: format!("{}.fruitlets[{k}].points[{pi}]", rec.cluster_id),
                    message: "non-finite coordinate".into(),
                });
            }
        }
    }
    Ok(())
}

fn validate_pair(
    pair: &PairRecord,
    index: &HashMap<(String, i64), usize>,
    records: &[DatasetRecord],
    line: usize,
) -> Result<()> {
    let lookup = |day: i64| -> Result<&DatasetRecord> {
        index
            .get(&(pair.cluster_id.clone(), day))
            .map(|&i| &records[i])
            .ok_or_else(|| Error::Data {
                line,
                path: format!("pair.{}", pair.cluster_id),
                message: format!("no observation for day {day}"),
            })
    };
    let rec_t = lookup(pair.day_t)?;
    let rec_t1 = lookup(pair.day_t1)?;
    if let Some(gt) = &pair.gt_matches {
        CorrespondenceSet::new(
            gt.iter().map(|&[i, j]| (i, j)).collect(),
            rec_t.fruitlets.len(),
            rec_t1.fruitlets.len(),
        )
        .map_err(|e| Error::Data {
            line,
            path: format!("pair.{}.gt_matches", pair.cluster_id),
            message: e.to_string(),
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_record(cluster: &str, day: i64) -> DatasetRecord {
        DatasetRecord {
            cluster_id: cluster.into(),
            day,
            fruitlets: vec![
                FruitletRecord {
                    fruitlet_id: "f0".into(),
                    points: vec![[0.0, 0.0, 0.0], [0.001, 0.002, 0.003]],
                },
                FruitletRecord {
                    fruitlet_id: "f1".into(),
                    points: vec![[0.01, 0.0, 0.0]],
                },
            ],
        }
    }

    #[test]
    fn empty_file_loads_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let ds = Dataset::load(&path).unwrap();
        assert!(ds.records.is_empty() && ds.pairs.is_empty());
    }

    #[test]
    fn duplicate_fruitlet_id_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        let mut rec = sample_record("c1", 0);
        rec.fruitlets[1].fruitlet_id = "f0".into();
        let mut ds = Dataset::new();
        let err = ds.push_record(rec.clone()).unwrap_err();
        assert!(err.to_string().contains("fruitlet_id"), "{err}");

        // Through the file path too, with a line number.
        let line = serde_json::to_string(&DatasetLine::Observation(rec)).unwrap();
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let err = Dataset::load(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&DatasetLine::Observation(sample_record("c1", 0))).unwrap();
        std::fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        let err = Dataset::load(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn round_trip_is_lossless_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roundtrip.jsonl");
        let mut ds = Dataset::new();
        ds.push_record(sample_record("c1", 0)).unwrap();
        ds.push_record(sample_record("c1", 2)).unwrap();
        ds.push_pair(PairRecord {
            cluster_id: "c1".into(),
            day_t: 0,
            day_t1: 2,
            gt_matches: Some(vec![[0, 0], [1, 1]]),
        })
        .unwrap();
        ds.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(loaded.records, ds.records);
        assert_eq!(loaded.pairs, ds.pairs);

        // Save again: byte-identical files.
        let path2 = dir.path().join("roundtrip2.jsonl");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn pair_with_bad_indices_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("badpair.jsonl");
        let mut lines = Vec::new();
        lines.push(serde_json::to_string(&DatasetLine::Observation(sample_record("c1", 0))).unwrap());
        lines.push(serde_json::to_string(&DatasetLine::Observation(sample_record("c1", 1))).unwrap());
        lines.push(
            serde_json::to_string(&DatasetLine::Pair(PairRecord {
                cluster_id: "c1".into(),
                day_t: 0,
                day_t1: 1,
                gt_matches: Some(vec![[0, 7]]),
            }))
            .unwrap(),
        );
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = Dataset::load(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn assemble_joins_observations_and_gt() {
        let mut ds = Dataset::new();
        ds.push_record(sample_record("c1", 0)).unwrap();
        ds.push_record(sample_record("c1", 3)).unwrap();
        ds.push_pair(PairRecord {
            cluster_id: "c1".into(),
            day_t: 0,
            day_t1: 3,
            gt_matches: Some(vec![[0, 1], [1, 0]]),
        })
        .unwrap();
        let pairs = ds.assemble_pairs().unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].day_gap, 3);
        let gt = pairs[0].gt.as_ref().unwrap();
        assert_eq!(gt.matches, vec![(0, 1), (1, 0)]);
        assert!(gt.unmatched_t.is_empty());
    }
}

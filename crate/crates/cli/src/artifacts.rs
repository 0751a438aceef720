//! On-disk formats written by the commands: feature dumps, pseudo-label
//! dumps and the training log.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use pseudoclass::{Tensor, TrainLogRecord};

pub const FEATURES_HEADER: &str = "#pseudoclass-features v1";
pub const FEATURES_MAGIC: &[u8; 8] = b"PCFEATS\0";
pub const FEATURES_VERSION: u32 = 1;
pub const PSEUDO_LABELS_HEADER: &str = "#pseudoclass-pseudo-labels v1";
pub const CONFUSION_HEADER: &str = "#pseudoclass-confusion v1";
pub const SWEEP_HEADER: &str = "#pseudoclass-sweep v1";
pub const TRAIN_LOG_FORMAT: &str = "pseudoclass-train-log";

/// Feature matrix with the sample id of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub ids: Vec<String>,
    /// `[N, d]`.
    pub features: Tensor,
}

fn header_line(prefix: &str, fields: &[(&str, String)], config: &serde_json::Value) -> String {
    let mut line = prefix.to_string();
    for (k, v) in fields {
        line.push_str(&format!(" {k}={v}"));
    }
    line.push_str(&format!(" config={config}\n"));
    line
}

fn csv_writer(buf: &mut Vec<u8>) -> csv::Writer<&mut Vec<u8>> {
    csv::WriterBuilder::new().from_writer(buf)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

impl FeatureDump {
    pub fn dim(&self) -> usize {
        self.features.row_len()
    }

    /// `id,f_0,…,f_{d−1}` under a format/config comment line. Values use the
    /// shortest representation that parses back to the same double.
    pub fn to_csv(&self, config: &serde_json::Value) -> Result<Vec<u8>> {
        let mut out = header_line(
            FEATURES_HEADER,
            &[("count", self.ids.len().to_string()), ("dim", self.dim().to_string())],
            config,
        )
        .into_bytes();
        let mut w = csv_writer(&mut out);
        let mut head = vec!["id".to_string()];
        head.extend((0..self.dim()).map(|j| format!("f_{j}")));
        w.write_record(&head)?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.features.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        drop(w);
        Ok(out)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv_reader(path)?;
        let dim = r.headers()?.len().checked_sub(1).context("feature CSV has no columns")?;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            ensure!(rec.len() == dim + 1, "{}: row {} has {} columns", path.display(), line + 1, rec.len());
            ids.push(rec[0].to_string());
            for v in rec.iter().skip(1) {
                data.push(v.parse::<f64>().with_context(|| format!("{}: bad value `{v}`", path.display()))?);
            }
        }
        ensure!(!ids.is_empty(), "{}: no feature rows", path.display());
        Ok(FeatureDump {
            features: Tensor::new(vec![ids.len(), dim], data)?,
            ids,
        })
    }

    /// Magic, version, config JSON, shape, ids, then little-endian rows.
    pub fn to_bin(&self, config: &serde_json::Value) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURES_MAGIC);
        out.extend_from_slice(&FEATURES_VERSION.to_le_bytes());
        let cfg = config.to_string().into_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out.extend_from_slice(&self.features.to_le_bytes());
        out
    }

    pub fn read_bin(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::decode_bin(&bytes).with_context(|| format!("decoding {}", path.display()))
    }

    fn decode_bin(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            ensure!(pos + n <= bytes.len(), "truncated at byte {pos}");
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        ensure!(take(8)? == FEATURES_MAGIC, "not a feature file");
        let version = u32::from_le_bytes(take(4)?.try_into()?);
        ensure!(version == FEATURES_VERSION, "unsupported version {version}");
        let cfg_len = u32::from_le_bytes(take(4)?.try_into()?) as usize;
        take(cfg_len)?;
        let n = u64::from_le_bytes(take(8)?.try_into()?) as usize;
        let d = u64::from_le_bytes(take(8)?.try_into()?) as usize;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32::from_le_bytes(take(4)?.try_into()?) as usize;
            ids.push(String::from_utf8(take(len)?.to_vec())?);
        }
        let raw = take(n * d * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        ensure!(take(1).is_err(), "trailing bytes");
        Ok(FeatureDump {
            ids,
            features: Tensor::new(vec![n, d], data)?,
        })
    }

    /// Reads either twin, chosen by extension.
    pub fn read(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => Self::read_bin(path),
            _ => Self::read_csv(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub id: String,
    pub pseudo_label: usize,
    /// Euclidean distance to the assigned center.
    pub distance: f64,
}

pub fn pseudo_labels_csv(records: &[PseudoLabelRecord], config: &serde_json::Value) -> Result<Vec<u8>> {
    let mut out = header_line(PSEUDO_LABELS_HEADER, &[("count", records.len().to_string())], config).into_bytes();
    let mut w = csv_writer(&mut out);
    w.write_record(["id", "pseudo_label", "distance"])?;
    for r in records {
        w.write_record([r.id.clone(), r.pseudo_label.to_string(), r.distance.to_string()])?;
    }
    w.flush()?;
    drop(w);
    Ok(out)
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabelRecord>> {
    let mut r = csv_reader(path)?;
    let records = r.deserialize().collect::<std::result::Result<Vec<PseudoLabelRecord>, _>>()?;
    ensure!(!records.is_empty(), "{}: no pseudo-labels", path.display());
    Ok(records)
}

/// First line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogHeader {
    pub format: String,
    pub version: u32,
    pub config: serde_json::Value,
}

pub fn train_log_header(config: &serde_json::Value) -> String {
    let h = TrainLogHeader {
        format: TRAIN_LOG_FORMAT.into(),
        version: 1,
        config: config.clone(),
    };
    format!("{}\n", serde_json::to_string(&h).expect("header serializes"))
}

pub fn log_line(record: &TrainLogRecord) -> String {
    format!("{}\n", serde_json::to_string(record).expect("record serializes"))
}

pub fn read_train_log(path: &Path) -> Result<(TrainLogHeader, Vec<TrainLogRecord>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: TrainLogHeader = serde_json::from_str(lines.next().context("empty training log")?)
        .with_context(|| format!("{}: bad header", path.display()))?;
    if header.format != TRAIN_LOG_FORMAT {
        bail!("{}: not a training log", path.display());
    }
    let records = lines
        .map(|l| serde_json::from_str(l).with_context(|| format!("{}: bad record", path.display())))
        .collect::<Result<Vec<TrainLogRecord>>>()?;
    Ok((header, records))
}

/// Creates parent directories and writes the file whole.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(bytes).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dump() -> FeatureDump {
        FeatureDump {
            ids: vec!["a".into(), "b,c".into()],
            features: Tensor::new(vec![2, 3], vec![0.1, -1e-300, 1.0 / 3.0, 5e20, 0.0, -2.5]).unwrap(),
        }
    }

    #[test]
    fn csv_and_bin_twins_agree() {
        let dir = tempfile::tempdir().unwrap();
        let d = dump();
        let cfg = serde_json::json!({"k": "a b"});
        write_file(&dir.path().join("f.csv"), &d.to_csv(&cfg).unwrap()).unwrap();
        write_file(&dir.path().join("f.bin"), &d.to_bin(&cfg)).unwrap();
        let a = FeatureDump::read(&dir.path().join("f.csv")).unwrap();
        let b = FeatureDump::read(&dir.path().join("f.bin")).unwrap();
        assert_eq!(a, d);
        assert_eq!(b, d);
    }

    #[test]
    fn truncated_bin_is_rejected() {
        let bytes = dump().to_bin(&serde_json::Value::Null);
        assert!(FeatureDump::decode_bin(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(FeatureDump::decode_bin(&extra).is_err());
    }

    #[test]
    fn pseudo_labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![PseudoLabelRecord {
            id: "x".into(),
            pseudo_label: 2,
            distance: 0.25,
        }];
        let p = dir.path().join("p.csv");
        write_file(&p, &pseudo_labels_csv(&recs, &serde_json::Value::Null).unwrap()).unwrap();
        assert_eq!(read_pseudo_labels(&p).unwrap(), recs);
    }
}

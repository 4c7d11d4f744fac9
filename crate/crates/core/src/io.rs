//! Line-delimited skeleton sequence files, provenance headers and small text
//! artifacts shared by the pipeline stages.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{DeviceId, Vec3};

pub const SEQUENCE_FORMAT: &str = "skelgait-skeleton-seq";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hex SHA-256 prefix used to tag artifacts with the config that produced them.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self { config_hash: config_hash.into(), seed }
    }

    /// `# <kind> v1 config=<hash> seed=<seed>` for plain-text artifacts.
    pub fn comment_line(&self, kind: &str) -> String {
        format!("# {kind} v{FORMAT_VERSION} config={} seed={}\n", self.config_hash, self.seed)
    }
}

/// Who produced a record: one device, or the fused optimized joints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Device(DeviceId),
    Fused,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Device(d) => write!(f, "{d}"),
            Source::Fused => f.write_str("OJ"),
        }
    }
}

impl FromStr for Source {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "OJ" {
            return Ok(Source::Fused);
        }
        s.parse::<DeviceId>().map(Source::Device).map_err(|e| e.to_string())
    }
}

/// One frame of one source; `joints.len()` is 32 for raw/fused data and 16
/// for selected skeletons.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub t: u64,
    pub source: Source,
    pub joints: Vec<Option<Vec3>>,
    pub conf: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordRepr {
    t: u64,
    device: String,
    joints: Vec<Option<[f64; 3]>>,
    conf: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRepr {
    format: String,
    version: u32,
    config_hash: String,
    seed: u64,
}

pub fn write_sequence(records: &[FrameRecord], provenance: Option<&Provenance>) -> String {
    let mut out = String::new();
    if let Some(p) = provenance {
        let h = HeaderRepr {
            format: SEQUENCE_FORMAT.into(),
            version: FORMAT_VERSION,
            config_hash: p.config_hash.clone(),
            seed: p.seed,
        };
        out.push_str(&serde_json::to_string(&h).expect("header serializes"));
        out.push('\n');
    }
    for r in records {
        let repr = RecordRepr {
            t: r.t,
            device: r.source.to_string(),
            joints: r.joints.iter().map(|j| j.map(Vec3::to_array)).collect(),
            conf: r.conf.clone(),
        };
        out.push_str(&serde_json::to_string(&repr).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses a sequence file. The header line is optional; blank lines are
/// rejected like any other malformed line.
pub fn read_sequence(text: &str) -> Result<(Option<Provenance>, Vec<FrameRecord>), IoError> {
    let mut provenance = None;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| IoError::Parse { line: i + 1, message };
        if i == 0 && line.contains("\"format\"") {
            let h: HeaderRepr = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            if h.format != SEQUENCE_FORMAT || h.version != FORMAT_VERSION {
                return Err(err(format!("unsupported format {} v{}", h.format, h.version)));
            }
            provenance = Some(Provenance { config_hash: h.config_hash, seed: h.seed });
            continue;
        }
        let r: RecordRepr = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if r.joints.len() != r.conf.len() {
            return Err(err(format!("{} joints but {} confidences", r.joints.len(), r.conf.len())));
        }
        if r.joints.len() != 32 && r.joints.len() != 16 {
            return Err(err(format!("expected 32 or 16 joint slots, got {}", r.joints.len())));
        }
        let joints: Vec<Option<Vec3>> = r.joints.iter().map(|j| j.map(Vec3::from_array)).collect();
        if joints.iter().flatten().any(|p| !p.is_finite()) {
            return Err(err("non-finite joint position".into()));
        }
        if r.conf.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(err("confidence outside [0, 1]".into()));
        }
        let source = r.device.parse().map_err(err)?;
        records.push(FrameRecord { t: r.t, source, joints, conf: r.conf });
    }
    Ok((provenance, records))
}

/// Two-column `iteration loss` trace.
pub fn write_loss_trace(trace: &[(usize, f64)], provenance: &Provenance) -> String {
    let mut out = provenance.comment_line("skelgait-loss-trace");
    out.push_str("iteration loss\n");
    for (it, loss) in trace {
        out.push_str(&format!("{it} {loss:e}\n"));
    }
    out
}

pub fn read_loss_trace(text: &str) -> Result<Vec<(usize, f64)>, IoError> {
    let mut trace = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("iteration") {
            continue;
        }
        let err = |m: &str| IoError::Parse { line: i + 1, message: m.to_string() };
        let (a, b) = line.split_once(' ').ok_or_else(|| err("expected two columns"))?;
        let it = a.parse().map_err(|_| err("bad iteration"))?;
        let loss = b.parse().map_err(|_| err("bad loss"))?;
        trace.push((it, loss));
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(n: usize) -> FrameRecord {
        FrameRecord {
            t: 7,
            source: Source::Device(DeviceId::Sub2),
            joints: (0..n)
                .map(|i| if i == 3 { None } else { Some(Vec3::new(i as f64 * 0.1, -1.5, 2000.0 / 3.0)) })
                .collect(),
            conf: (0..n).map(|i| if i == 3 { 0.0 } else { 0.9 }).collect(),
        }
    }

    #[test]
    fn sequence_round_trip() {
        let recs = vec![record(32), FrameRecord { source: Source::Fused, ..record(32) }];
        let prov = Provenance::new("abc", 3);
        let text = write_sequence(&recs, Some(&prov));
        let (p, back) = read_sequence(&text).unwrap();
        assert_eq!(p, Some(prov.clone()));
        assert_eq!(back, recs);
        assert_eq!(write_sequence(&back, Some(&prov)), text);
        assert!(text.lines().nth(2).unwrap().contains("\"device\":\"OJ\""));
    }

    #[test]
    fn sixteen_slot_records() {
        let text = write_sequence(&[record(16)], None);
        let (p, back) = read_sequence(&text).unwrap();
        assert!(p.is_none());
        assert_eq!(back[0].joints.len(), 16);
    }

    #[test]
    fn rejects_malformed() {
        assert!(read_sequence("{\"t\":0}").is_err());
        let mut r = record(32);
        r.conf[0] = 1.5;
        assert!(read_sequence(&write_sequence(&[r], None)).is_err());
        let mut r = record(32);
        r.conf.pop();
        assert!(read_sequence(&write_sequence(&[r], None)).is_err());
        let text = write_sequence(&[record(32)], None).replace("\"t\"", "\"x\":1,\"t\"");
        assert!(read_sequence(&text).is_err());
    }

    #[test]
    fn loss_trace_round_trip() {
        let trace = vec![(0, 1.25), (1, 0.5e-3)];
        let text = write_loss_trace(&trace, &Provenance::new("h", 1));
        assert_eq!(read_loss_trace(&text).unwrap(), trace);
    }
}

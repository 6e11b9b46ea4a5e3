//! Line-delimited JSON datasets: one header line, then one sample per line.

use serde::{Deserialize, Serialize};

use super::{DataError, StepSample};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    /// Free-form note on where the samples came from.
    #[serde(default)]
    pub source: String,
}

impl DatasetHeader {
    pub fn new(source: impl Into<String>) -> Self {
        Self { version: DATASET_VERSION, source: source.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetRecord {
    Header(DatasetHeader),
    Sample(Box<StepSample>),
}

pub fn write_jsonl(header: &DatasetHeader, samples: &[StepSample]) -> String {
    let mut out = String::new();
    let mut line = |r: &DatasetRecord| {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    };
    line(&DatasetRecord::Header(header.clone()));
    for s in samples {
        line(&DatasetRecord::Sample(Box::new(s.clone())));
    }
    out
}

/// Parses a dataset. Blank lines are skipped; the first record must be the
/// header and no other header may follow.
pub fn read_jsonl(text: &str) -> Result<(DatasetHeader, Vec<StepSample>), DataError> {
    let mut header = None;
    let mut samples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(raw).map_err(|e| DataError::Decode { line, reason: e.to_string() })?;
        match (record, header.is_some()) {
            (DatasetRecord::Header(h), false) => {
                if h.version != DATASET_VERSION {
                    return Err(DataError::Decode { line, reason: format!("unsupported version {}", h.version) });
                }
                header = Some(h);
            }
            (DatasetRecord::Header(_), true) => {
                return Err(DataError::Decode { line, reason: "second header".into() });
            }
            (DatasetRecord::Sample(_), false) => {
                return Err(DataError::Decode { line, reason: "sample before header".into() });
            }
            (DatasetRecord::Sample(s), true) => {
                s.validate().map_err(|e| DataError::Decode { line, reason: e.to_string() })?;
                samples.push(*s);
            }
        }
    }
    let header = header.ok_or(DataError::Decode { line: 0, reason: "missing header".into() })?;
    Ok((header, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Action;
    use crate::sim::ScreenSnapshot;

    fn sample() -> StepSample {
        let snap = ScreenSnapshot {
            app: "A".into(),
            screen_id: "s".into(),
            widgets: vec![],
            screen_width: 1080,
            screen_height: 2400,
            step_index: 3,
        };
        let mut s = StepSample::new("Open the Clock app", snap, Action::click(10, 20));
        s.trajectory_id = "q1-r0".into();
        s.corrected = true;
        s.difficulty_count = Some(3);
        s
    }

    #[test]
    fn round_trip() {
        let text = write_jsonl(&DatasetHeader::new("test"), &[sample(), sample()]);
        assert!(text.lines().next().unwrap().contains("\"kind\":\"header\""));
        let (h, samples) = read_jsonl(&text).unwrap();
        assert_eq!(h.source, "test");
        assert_eq!(samples, vec![sample(), sample()]);
    }

    #[test]
    fn structural_errors_name_the_line() {
        let text = write_jsonl(&DatasetHeader::new("x"), &[sample()]);
        let body = text.lines().nth(1).unwrap();
        assert!(matches!(read_jsonl(body), Err(DataError::Decode { line: 1, .. })));
        assert!(matches!(read_jsonl(""), Err(DataError::Decode { line: 0, .. })));
        let twice = format!("{text}{}", text.lines().next().unwrap());
        assert!(matches!(read_jsonl(&twice), Err(DataError::Decode { line: 3, .. })));
        assert!(matches!(read_jsonl(&format!("{text}{{")), Err(DataError::Decode { line: 3, .. })));
    }
}

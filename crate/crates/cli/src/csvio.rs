//! CSV outputs. Reals are written with 17 significant digits
//! (`d.dddddddddddddddde±x`), so every value round-trips exactly and equal
//! runs produce equal bytes.

use std::path::Path;

use mcn_core::train::{EpochRecord, PretrainRecord};

use crate::error::{CliError, CliResult};

pub const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "steps",
    "ce",
    "distance",
    "lambda",
    "loss",
    "train_accuracy",
    "val_accuracy",
    "shuffle_digest",
];

pub fn real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Rows of string fields written as one RFC-4180 CSV document.
pub fn to_bytes<S: AsRef<[u8]>>(header: &[S], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn metrics(records: &[EpochRecord]) -> Vec<u8> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                r.steps.to_string(),
                real(r.ce),
                real(r.distance),
                real(r.lambda),
                real(r.loss),
                real(r.train_accuracy),
                real(r.val_accuracy),
                format!("{:016x}", r.shuffle_digest),
            ]
        })
        .collect();
    to_bytes(&METRICS_HEADER, &rows)
}

pub fn pretrain_metrics(records: &[PretrainRecord]) -> Vec<u8> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| vec![r.epoch.to_string(), real(r.ce), real(r.train_accuracy)])
        .collect();
    to_bytes(&["epoch", "ce", "train_accuracy"], &rows)
}

/// Per-sample class probabilities: `sample,label,p0,…,p{C-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTable {
    pub samples: Vec<usize>,
    pub labels: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

impl ProbabilityTable {
    pub fn num_classes(&self) -> usize {
        self.probabilities.first().map_or(0, Vec::len)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.num_classes();
        let mut header = vec!["sample".to_string(), "label".to_string()];
        header.extend((0..c).map(|k| format!("p{k}")));
        let rows: Vec<Vec<String>> = self
            .samples
            .iter()
            .zip(&self.labels)
            .zip(&self.probabilities)
            .map(|((s, l), p)| {
                let mut row = vec![s.to_string(), l.to_string()];
                row.extend(p.iter().map(|&v| real(v)));
                row
            })
            .collect();
        to_bytes(&header, &rows)
    }

    pub fn parse(bytes: &[u8], path: &Path) -> CliResult<Self> {
        let bad = |m: String| CliError::format(path, m);
        let mut r = csv::ReaderBuilder::new().from_reader(bytes);
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        let c = header.len().saturating_sub(2);
        let expected: Vec<String> = ["sample".to_string(), "label".to_string()]
            .into_iter()
            .chain((0..c).map(|k| format!("p{k}")))
            .collect();
        if c == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(bad(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
        }
        let mut table = ProbabilityTable {
            samples: Vec::new(),
            labels: Vec::new(),
            probabilities: Vec::new(),
        };
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let int = |i: usize| {
                field(i)
                    .parse::<usize>()
                    .map_err(|e| bad(format!("row {}: {e}", line + 1)))
            };
            table.samples.push(int(0)?);
            table.labels.push(int(1)?);
            let p = (2..2 + c)
                .map(|i| {
                    field(i)
                        .parse::<f64>()
                        .map_err(|e| bad(format!("row {}: {e}", line + 1)))
                })
                .collect::<CliResult<Vec<_>>>()?;
            table.probabilities.push(p);
        }
        Ok(table)
    }
}

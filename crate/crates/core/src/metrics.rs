//! Per-round metrics and their CSV form.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 13] = [
    "round",
    "policy",
    "accuracy",
    "loss",
    "round_delay_s",
    "cum_delay_s",
    "participants",
    "mean_s",
    "q_de",
    "max_q_fa",
    "term_sparsification",
    "term_dp",
    "eligible",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub policy: String,
    pub accuracy: f64,
    pub loss: f64,
    pub round_delay_s: f64,
    pub cum_delay_s: f64,
    pub participants: usize,
    pub mean_s: f64,
    pub q_de: f64,
    pub max_q_fa: f64,
    pub term_sparsification: f64,
    pub term_dp: f64,
    pub eligible: usize,
}

impl MetricsRow {
    fn floats(&self) -> [f64; 9] {
        [
            self.accuracy,
            self.loss,
            self.round_delay_s,
            self.cum_delay_s,
            self.mean_s,
            self.q_de,
            self.max_q_fa,
            self.term_sparsification,
            self.term_dp,
        ]
    }

    /// The row as it reads back from CSV.
    pub fn rounded(&self) -> Self {
        Self {
            accuracy: round_sig9(self.accuracy),
            loss: round_sig9(self.loss),
            round_delay_s: round_sig9(self.round_delay_s),
            cum_delay_s: round_sig9(self.cum_delay_s),
            mean_s: round_sig9(self.mean_s),
            q_de: round_sig9(self.q_de),
            max_q_fa: round_sig9(self.max_q_fa),
            term_sparsification: round_sig9(self.term_sparsification),
            term_dp: round_sig9(self.term_dp),
            ..self.clone()
        }
    }
}

/// Nearest value with 9 significant decimal digits.
pub fn round_sig9(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Shortest text that parses back to `round_sig9(x)`.
pub fn format_float(x: f64) -> String {
    let r = round_sig9(x);
    if r == 0.0 {
        "0".to_string()
    } else if (1e-4..1e15).contains(&r.abs()) {
        format!("{r}")
    } else {
        format!("{r:e}")
    }
}

pub fn write_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        if let Some(bad) = r.floats().iter().find(|x| !x.is_finite()) {
            return Err(Error::Io(format!(
                "round {} of {} has a non-finite value {bad}",
                r.round, r.policy
            )));
        }
        let f = r.floats().map(format_float);
        w.write_record([
            r.round.to_string(),
            r.policy.clone(),
            f[0].clone(),
            f[1].clone(),
            f[2].clone(),
            f[3].clone(),
            r.participants.to_string(),
            f[4].clone(),
            f[5].clone(),
            f[6].clone(),
            f[7].clone(),
            f[8].clone(),
            r.eligible.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one CSV holding every row; fails on an empty trace.
pub fn emit_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Io("no metrics rows to write".into()));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    write_csv(rows, std::io::BufWriter::new(file))
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let bad = |msg: String| Error::Io(format!("metrics csv: {msg}"));
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let int = |k: usize| -> Result<usize> {
            rec[k]
                .parse()
                .map_err(|_| bad(format!("row {}: `{}` in {}", i + 1, &rec[k], CSV_HEADER[k])))
        };
        let real = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|_| bad(format!("row {}: `{}` in {}", i + 1, &rec[k], CSV_HEADER[k])))
        };
        rows.push(MetricsRow {
            round: int(0)?,
            policy: rec[1].to_string(),
            accuracy: real(2)?,
            loss: real(3)?,
            round_delay_s: real(4)?,
            cum_delay_s: real(5)?,
            participants: int(6)?,
            mean_s: real(7)?,
            q_de: real(8)?,
            max_q_fa: real(9)?,
            term_sparsification: real(10)?,
            term_dp: real(11)?,
            eligible: int(12)?,
        });
    }
    Ok(rows)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_csv(file)
}

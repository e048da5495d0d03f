use crate::error::{Error, Result};
use crate::objectives::LossBreakdown;

pub const LOG_HEADER: &str = "step\tcontrastive\tmlm\tcdmlm\ttotal\telapsed";

/// One training-log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Seconds since the run started; 0 unless timing is enabled.
    pub elapsed: f64,
}

impl LogRecord {
    /// Tab-separated; floats use Rust's shortest round-trip formatting.
    pub fn to_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step, l.contrastive, l.mlm, l.cdmlm, l.total, self.elapsed
        )
    }
}

pub fn format_log(records: &[LogRecord]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn parse_log(text: &str) -> Result<Vec<LogRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::contract("training log is missing its header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::contract(format!("log line {}: malformed record '{line}'", i + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(LogRecord {
                step: f[0].parse().map_err(|_| bad())?,
                loss: LossBreakdown {
                    contrastive: num(f[1])?,
                    mlm: num(f[2])?,
                    cdmlm: num(f[3])?,
                    total: num(f[4])?,
                },
                elapsed: num(f[5])?,
            })
        })
        .collect()
}

//! The metrics CSV: append-only, flushed per row so aborted runs keep their
//! partial logs.

use std::fs::File;
use std::io::{BufRead, BufReader, LineWriter, Write};
use std::path::Path;

use crate::harness::RunRow;

use super::IoError;

pub const METRICS_HEADER: &str = "step,loss,lambda1,threshold,avg_return,episodes";

pub struct MetricsWriter {
    w: LineWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, IoError> {
        let mut w = LineWriter::new(File::create(path)?);
        writeln!(w, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { w })
    }

    pub fn write_row(&mut self, row: &RunRow) -> Result<(), IoError> {
        writeln!(self.w, "{}", format_row(row))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), IoError> {
        self.w.flush()?;
        Ok(())
    }
}

fn fmt_opt_f32(v: Option<f32>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub(crate) fn format_row(row: &RunRow) -> String {
    format!(
        "{},{},{},{},{},{}",
        row.step,
        fmt_opt_f32(row.loss),
        fmt_opt_f64(row.lambda1),
        fmt_opt_f64(row.threshold),
        fmt_opt_f32(row.avg_return),
        row.episodes
    )
}

pub fn read_metrics(path: &Path) -> Result<Vec<RunRow>, IoError> {
    let r = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != METRICS_HEADER {
                return Err(IoError::BadRow { line: 0, detail: "unexpected header".into() });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(IoError::BadRow { line: i, detail: format!("{} fields", fields.len()) });
        }
        let bad = |detail: &str| IoError::BadRow { line: i, detail: detail.to_string() };
        let parse_opt_f32 = |s: &str| -> Result<Option<f32>, IoError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad("bad float"))
            }
        };
        let parse_opt_f64 = |s: &str| -> Result<Option<f64>, IoError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad("bad float"))
            }
        };
        rows.push(RunRow {
            step: fields[0].parse().map_err(|_| bad("bad step"))?,
            loss: parse_opt_f32(fields[1])?,
            lambda1: parse_opt_f64(fields[2])?,
            threshold: parse_opt_f64(fields[3])?,
            avg_return: parse_opt_f32(fields[4])?,
            episodes: fields[5].parse().map_err(|_| bad("bad episodes"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<RunRow> {
        vec![
            RunRow {
                step: 0,
                loss: Some(0.25),
                lambda1: None,
                threshold: Some(360.0),
                avg_return: None,
                episodes: 0,
            },
            RunRow {
                step: 100,
                loss: Some(0.125),
                lambda1: Some(42.5),
                threshold: Some(360.0),
                avg_return: Some(3.0),
                episodes: 10,
            },
        ]
    }

    #[test]
    fn roundtrip_with_missing_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        for r in rows() {
            w.write_row(&r).unwrap();
        }
        w.finish().unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        assert!(content.starts_with(METRICS_HEADER));
        assert!(content.contains("0,0.25,,360.000000,,0"));
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].lambda1, None);
        assert_eq!(back[1].lambda1, Some(42.5));
        assert_eq!(back[1].episodes, 10);
    }

    #[test]
    fn steps_ascending_in_writer_input() {
        let r = rows();
        assert!(r.windows(2).all(|w| w[0].step < w[1].step));
    }
}

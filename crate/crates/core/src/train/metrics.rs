use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// Measurements taken at the end of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean task loss over the epoch's batches.
    pub train_task_loss: f64,
    /// Mean unweighted distillation loss (0 without distillation).
    pub train_distill_loss: f64,
    pub test_error_pct: f64,
    /// `KL(teacher ‖ student)` on the test set; absent for teacher runs.
    pub kl_with_teacher: Option<f64>,
    pub ce_with_gt: f64,
    /// 0 unless wall-clock recording is enabled, so that metrics files
    /// stay reproducible.
    pub wall_seconds: f64,
}

pub const CSV_HEADER: &str = "epoch,train_task_loss,train_distill_loss,test_error_pct,kl_with_teacher,ce_with_gt,wall_seconds";

/// `x` with 6 significant digits: fixed notation for moderate magnitudes,
/// scientific otherwise.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let exp: i32 = sci[sci.find('e').expect("scientific notation") + 1..]
        .parse()
        .expect("integer exponent");
    if (-4..6).contains(&exp) {
        format!("{x:.*}", (5 - exp) as usize)
    } else {
        sci
    }
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            sig6(self.train_task_loss),
            sig6(self.train_distill_loss),
            sig6(self.test_error_pct),
            self.kl_with_teacher.map(sig6).unwrap_or_default(),
            sig6(self.ce_with_gt),
            sig6(self.wall_seconds)
        )
    }
}

/// Appends records to `<stem>.csv` and `<stem>.jsonl`, flushing after each.
pub struct MetricsWriter {
    csv: BufWriter<File>,
    jsonl: BufWriter<File>,
    csv_path: PathBuf,
}

impl MetricsWriter {
    pub fn create(dir: &Path, stem: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut csv = BufWriter::new(File::create(&csv_path)?);
        writeln!(csv, "{CSV_HEADER}")?;
        csv.flush()?;
        let jsonl = BufWriter::new(File::create(dir.join(format!("{stem}.jsonl")))?);
        Ok(MetricsWriter {
            csv,
            jsonl,
            csv_path,
        })
    }

    pub fn csv_path(&self) -> &Path {
        &self.csv_path
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        writeln!(self.csv, "{}", rec.csv_row())?;
        self.csv.flush()?;
        let line = serde_json::to_string(rec).map_err(std::io::Error::other)?;
        writeln!(self.jsonl, "{line}")?;
        self.jsonl.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(2.302585093), "2.30259");
        assert_eq!(sig6(12.5), "12.5000");
        assert_eq!(sig6(9.9999996), "10.0000");
        assert_eq!(sig6(0.000123456789), "0.000123457");
        assert_eq!(sig6(1.5e-7), "1.50000e-7");
        assert_eq!(sig6(123456789.0), "1.23457e8");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn writer_emits_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path(), "m").unwrap();
        let rec = MetricsRecord {
            epoch: 0,
            train_task_loss: 1.25,
            train_distill_loss: 0.0,
            test_error_pct: 50.0,
            kl_with_teacher: None,
            ce_with_gt: 0.5,
            wall_seconds: 0.0,
        };
        w.write(&rec).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert_eq!(
            csv,
            format!("{CSV_HEADER}\n0,1.25000,0,50.0000,,0.500000,0\n")
        );
        let json = std::fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
        let back: MetricsRecord = serde_json::from_str(json.trim()).unwrap();
        assert_eq!(back, rec);
    }
}

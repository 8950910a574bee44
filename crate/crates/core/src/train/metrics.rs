use std::collections::VecDeque;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: u32,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub s_current: f64,
    pub active_count: usize,
    pub beta: f64,
    pub grad_norm_sum: f64,
    pub positive_preact_fraction: f64,
    pub wallclock: f64,
}

/// One line of `preact.csv`: positive fraction entering one activation site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreactRow {
    pub step: u64,
    pub layer_id: String,
    pub positive_fraction: f64,
    pub beta: f64,
}

const RECENT: usize = 8;

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Single-writer CSV sink that also keeps the last few rows for diagnostics.
pub struct MetricSink {
    metrics: Option<(csv::Writer<BufWriter<File>>, std::path::PathBuf)>,
    preact: Option<(csv::Writer<BufWriter<File>>, std::path::PathBuf)>,
    recent: VecDeque<MetricRow>,
}

impl MetricSink {
    /// Keeps rows in memory only.
    pub fn memory() -> Self {
        Self {
            metrics: None,
            preact: None,
            recent: VecDeque::new(),
        }
    }

    /// Creates `metrics.csv` and `preact.csv` in `dir`.
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<_> {
            let path = dir.join(name);
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            Ok((csv::Writer::from_writer(BufWriter::new(f)), path))
        };
        Ok(Self {
            metrics: Some(open("metrics.csv")?),
            preact: Some(open("preact.csv")?),
            recent: VecDeque::new(),
        })
    }

    /// Opens both files in `dir` for appending, writing headers only into
    /// files that are new or empty. Used when resuming a run.
    pub fn append(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<_> {
            let path = dir.join(name);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let fresh = f.metadata().map_err(|e| Error::io(&path, e))?.len() == 0;
            let w = csv::WriterBuilder::new().has_headers(fresh).from_writer(BufWriter::new(f));
            Ok((w, path))
        };
        Ok(Self {
            metrics: Some(open("metrics.csv")?),
            preact: Some(open("preact.csv")?),
            recent: VecDeque::new(),
        })
    }

    pub fn write(&mut self, row: &MetricRow) -> Result<()> {
        if let Some((w, path)) = self.metrics.as_mut() {
            w.serialize(row).map_err(|e| csv_err(path, e))?;
        }
        if self.recent.len() == RECENT {
            self.recent.pop_front();
        }
        self.recent.push_back(row.clone());
        Ok(())
    }

    pub fn write_preact(&mut self, row: &PreactRow) -> Result<()> {
        if let Some((w, path)) = self.preact.as_mut() {
            w.serialize(row).map_err(|e| csv_err(path, e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        for (w, path) in self.metrics.iter_mut().chain(self.preact.iter_mut()) {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    /// The last few rows, rendered for an error message.
    pub fn dump_recent(&self) -> String {
        self.recent
            .iter()
            .map(|r| {
                format!(
                    "step={} epoch={} split={:?} loss={} acc={:.4} s={:.6} active={} beta={:.3} gns={:.4e}",
                    r.step, r.epoch, r.split, r.loss, r.accuracy, r.s_current, r.active_count, r.beta, r.grad_norm_sum
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64) -> MetricRow {
        MetricRow {
            step,
            epoch: 0,
            split: Split::Train,
            loss: 1.5,
            accuracy: 0.25,
            s_current: 0.9,
            active_count: 10,
            beta: 1.0,
            grad_norm_sum: 0.5,
            positive_preact_fraction: 0.4,
            wallclock: 0.0,
        }
    }

    #[test]
    fn roundtrip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = MetricSink::create(dir.path()).unwrap();
        sink.write(&row(1)).unwrap();
        sink.write(&row(2)).unwrap();
        sink.flush().unwrap();
        let rows = read_metrics(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(rows, vec![row(1), row(2)]);
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(text.starts_with(
            "step,epoch,split,loss,accuracy,s_current,active_count,beta,grad_norm_sum,positive_preact_fraction,wallclock\n"
        ));
    }

    #[test]
    fn append_continues_without_a_second_header() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = MetricSink::create(dir.path()).unwrap();
        sink.write(&row(1)).unwrap();
        sink.flush().unwrap();
        drop(sink);
        let mut sink = MetricSink::append(dir.path()).unwrap();
        sink.write(&row(2)).unwrap();
        sink.flush().unwrap();
        let rows = read_metrics(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(rows, vec![row(1), row(2)]);
    }

    #[test]
    fn keeps_only_recent_rows() {
        let mut sink = MetricSink::memory();
        for s in 0..20 {
            sink.write(&row(s)).unwrap();
        }
        let dump = sink.dump_recent();
        assert_eq!(dump.lines().count(), RECENT);
        assert!(dump.contains("step=19"));
    }
}

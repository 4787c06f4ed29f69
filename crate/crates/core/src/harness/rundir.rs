use std::fs;
use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use super::train::EpochRecord;
use crate::error::{Error, Result};
use crate::metrics::{write_report_csv, ReportRow};
use crate::segnet::Checkpoint;

/// Output directory of one run: `config.yaml`, `history.csv`, `best.ckpt`, `report.csv`.
#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates the directory. An existing non-empty directory is replaced only with
    /// `overwrite`, otherwise [`Error::WouldClobber`].
    pub fn create(path: &Path, overwrite: bool) -> Result<Self> {
        let occupied = path.is_file() || fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false);
        if occupied {
            if !overwrite {
                return Err(Error::WouldClobber(path.to_path_buf()));
            }
            let removed = if path.is_dir() { fs::remove_dir_all(path) } else { fs::remove_file(path) };
            removed.map_err(|e| Error::io(path, e))?;
        }
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        Ok(RunDir { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// A nested run directory (for example one per fold).
    pub fn child(&self, name: &str) -> Result<RunDir> {
        RunDir::create(&self.path.join(name), true)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn write_config(&self, cfg: &TrainConfig) -> Result<PathBuf> {
        self.write("config.yaml", cfg.to_yaml().as_bytes())
    }

    pub fn write_history(&self, history: &[EpochRecord]) -> Result<PathBuf> {
        self.write("history.csv", &history_csv(history)?)
    }

    pub fn write_checkpoint(&self, ckpt: &Checkpoint) -> Result<PathBuf> {
        let p = self.path.join("best.ckpt");
        ckpt.save(&p)?;
        Ok(p)
    }

    pub fn write_report(&self, rows: &[ReportRow<'_>]) -> Result<PathBuf> {
        let mut buf = Vec::new();
        write_report_csv(&mut buf, rows)?;
        self.write("report.csv", &buf)
    }
}

/// `epoch,train_loss,val_f1,val_miou`, no timing columns, so reruns are byte-identical.
pub fn history_csv(history: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_f1", "val_miou"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.8}", r.train_loss),
            format!("{:.4}", r.val_f1),
            format!("{:.4}", r.val_miou),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

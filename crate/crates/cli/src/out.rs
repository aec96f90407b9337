use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use slifnet::trainer::EpochMetrics;
use slifnet::Result;

/// A command's output directory. Every file written here is a pure
/// function of the resolved flags, so reruns are byte-identical; timings
/// go to stderr instead.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path)?;
        Ok(RunDir { root: path.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Resolved flags, one `key = value` per line, in flag order.
    pub fn write_config(&self, entries: &[(&str, String)]) -> Result<()> {
        let mut s = String::new();
        for (k, v) in entries {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        fs::write(self.root.join("config.txt"), s)?;
        Ok(())
    }

    /// Per-epoch training table. Wall time is deliberately left out so the
    /// file reproduces byte-for-byte from the seed.
    pub fn write_metrics(&self, metrics: &[EpochMetrics]) -> Result<()> {
        let mut s = String::from("epoch\ttrain_loss\tval_error\n");
        for m in metrics {
            writeln!(s, "{}\t{}\t{}", m.epoch, m.train_loss, m.val_error).expect("string write");
        }
        fs::write(self.root.join("metrics.tsv"), s)?;
        Ok(())
    }

    /// Key-value summary, one `key\tvalue` per line.
    pub fn write_report(&self, entries: &[(&str, String)]) -> Result<()> {
        let mut s = String::new();
        for (k, v) in entries {
            writeln!(s, "{k}\t{v}").expect("string write");
        }
        fs::write(self.root.join("report.txt"), s)?;
        Ok(())
    }

    pub fn write_figure_data(&self, name: &str, content: &str) -> Result<()> {
        let dir = self.root.join("figure-data");
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(name), content)?;
        Ok(())
    }
}

/// Formats a sigma value for directory names: `10` not `10.0`, `2.5` as is.
pub fn sigma_tag(sigma: f64) -> String {
    if sigma == sigma.trunc() {
        format!("{}", sigma as i64)
    } else {
        format!("{sigma}")
    }
}

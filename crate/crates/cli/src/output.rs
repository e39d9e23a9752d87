//! Output directory: config echo, summary JSON, CSVs and the gnuplot script.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::Failure;

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Execution(format!("{}: {e}", path.display()))
}

pub struct OutDir {
    pub dir: PathBuf,
}

impl OutDir {
    pub fn create(dir: PathBuf) -> Result<OutDir, Failure> {
        fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        Ok(OutDir { dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Copy of the config file, byte for byte.
    pub fn echo_config(&self, bytes: &[u8]) -> Result<(), Failure> {
        let p = self.path("config.json");
        fs::write(&p, bytes).map_err(|e| io_failure(&p, e))
    }

    /// Write a CSV through a library writer.
    pub fn csv(&self, name: &str, write: impl FnOnce(BufWriter<File>) -> homog_core::Result<()>) -> Result<(), Failure> {
        let p = self.path(name);
        let f = File::create(&p).map_err(|e| io_failure(&p, e))?;
        write(BufWriter::new(f)).map_err(|e| io_failure(&p, e))
    }

    /// Write a CSV from a header and string records.
    pub fn table(&self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), Failure> {
        self.csv(name, |out| {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(header)?;
            for r in rows {
                w.write_record(r)?;
            }
            w.flush()?;
            Ok(())
        })
    }

    pub fn summary(&self, s: &Summary<impl Serialize>) -> Result<(), Failure> {
        let p = self.path("summary.json");
        let text = serde_json::to_string_pretty(s).map_err(|e| io_failure(&p, e))?;
        fs::write(&p, text + "\n").map_err(|e| io_failure(&p, e))
    }

    pub fn plot(&self, script: &str) -> Result<(), Failure> {
        let p = self.path("plot.gp");
        fs::write(&p, script).map_err(|e| io_failure(&p, e))
    }

    /// Partial results of a run stopped by its budget.
    pub fn partial(&self, json: &str) -> Result<(), Failure> {
        let p = self.path("partial.json");
        fs::write(&p, json).map_err(|e| io_failure(&p, e))
    }
}

#[derive(Serialize)]
pub struct Summary<T: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub workers: usize,
    /// The config file, verbatim.
    pub config: String,
    pub result: T,
    pub timing: serde_json::Value,
}

pub fn timing(elapsed_ms: f64) -> serde_json::Value {
    json!({ "elapsed_ms": elapsed_ms })
}

/// Gnuplot preamble for comma-separated files with a header row.
pub fn gnuplot(title: &str) -> String {
    format!(
        "# gnuplot script; run with `gnuplot -p plot.gp` from this directory\n\
         set datafile separator ','\n\
         set key autotitle columnhead\n\
         set title '{title}'\n\
         set grid\n"
    )
}

pub fn f(v: f64) -> String {
    v.to_string()
}

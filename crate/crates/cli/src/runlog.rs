//! Per-command run directory: resolved config, line-delimited records and a
//! plain-text summary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nct_core::Error;
use serde::Serialize;

use crate::config::RunConfig;

pub struct RunLog {
    dir: PathBuf,
    records: BufWriter<File>,
    summary: String,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source: e,
    }
}

impl RunLog {
    pub fn create(cfg: &RunConfig, command: &str) -> Result<Self, Error> {
        let dir = cfg.out_dir.join("runs").join(command);
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let p = dir.join("config.txt");
        fs::write(&p, cfg.to_text()).map_err(|e| io(&p, e))?;
        let p = dir.join("log.jsonl");
        let records = BufWriter::new(File::create(&p).map_err(|e| io(&p, e))?);
        Ok(RunLog {
            dir,
            records,
            summary: String::new(),
        })
    }

    pub fn record<T: Serialize>(&mut self, r: &T) -> Result<(), Error> {
        let line = serde_json::to_string(r)?;
        let p = self.dir.join("log.jsonl");
        writeln!(self.records, "{line}").map_err(|e| io(&p, e))
    }

    pub fn summary_line(&mut self, line: impl AsRef<str>) {
        self.summary.push_str(line.as_ref());
        self.summary.push('\n');
    }

    pub fn finish(mut self) -> Result<(), Error> {
        let p = self.dir.join("log.jsonl");
        self.records.flush().map_err(|e| io(&p, e))?;
        let p = self.dir.join("summary.txt");
        fs::write(&p, &self.summary).map_err(|e| io(&p, e))
    }
}

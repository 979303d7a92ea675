//! Append-only on-disk session log plus model checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use vbquant_core::vbnet::{load_checkpoint, save_checkpoint, Model};

use crate::engine::Event;
use crate::HitlError;

pub const EVENT_LOG: &str = "events.jsonl";

#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn exists(&self) -> bool {
        self.dir.join(EVENT_LOG).is_file()
    }

    /// Create the directory; refuses to overwrite an existing log.
    pub fn init(&self) -> Result<(), HitlError> {
        fs::create_dir_all(&self.dir)?;
        if self.exists() {
            return Err(HitlError::Config(format!("{} already holds a session", self.dir.display())));
        }
        File::create(self.dir.join(EVENT_LOG))?;
        Ok(())
    }

    pub fn append(&self, events: &[Event]) -> Result<(), HitlError> {
        let mut f = OpenOptions::new().append(true).open(self.dir.join(EVENT_LOG))?;
        let mut buf = Vec::new();
        for ev in events {
            serde_json::to_writer(&mut buf, ev)?;
            buf.push(b'\n');
        }
        f.write_all(&buf)?;
        f.sync_data()?;
        Ok(())
    }

    /// Every complete line of the log; a torn final line is ignored.
    pub fn read_events(&self) -> Result<Vec<Event>, HitlError> {
        let f = File::open(self.dir.join(EVENT_LOG))?;
        let lines: Vec<String> = BufReader::new(f).lines().collect::<Result<_, _>>()?;
        let mut out = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            match serde_json::from_str(line) {
                Ok(ev) => out.push(ev),
                Err(_) if i + 1 == lines.len() => break,
                Err(e) => return Err(HitlError::Replay(format!("line {}: {e}", i + 1))),
            }
        }
        Ok(out)
    }

    pub fn save_checkpoint(&self, name: &str, model: &Model) -> Result<(), HitlError> {
        let tmp = self.dir.join(format!("{name}.tmp"));
        save_checkpoint(model, &tmp)?;
        fs::rename(&tmp, self.dir.join(name))?;
        Ok(())
    }

    pub fn load_checkpoint(&self, name: &str) -> Result<Model, HitlError> {
        Ok(load_checkpoint(&self.dir.join(name))?)
    }
}

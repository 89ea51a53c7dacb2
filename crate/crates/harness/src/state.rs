//! On-disk layout shared by scenario runs and CLI commands.
//!
//! ```text
//! <state>/registry.jsonl      control-plane event log
//! <state>/twins.json          twin records
//! <state>/retained.jsonl      retained broker frames (commands)
//! <state>/audit.jsonl         gateway ingress decisions
//! <state>/notifications.jsonl stream notifications
//! <state>/models/*.json       object classes
//! <state>/data/...            time-series segments
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use iotra_core::infomodel::ModelRegistry;
use iotra_core::msgbus::{Frame, FrameKind, MsgId, Qos};
use iotra_core::twins::TwinService;
use iotra_core::Timestamp;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Serialize, Deserialize)]
struct RetainedLine {
    topic: String,
    sender: String,
    seq: u64,
    qos: Qos,
    ts: Timestamp,
    payload: String,
}

#[derive(Debug, Clone)]
pub struct StateDir {
    root: PathBuf,
}

impl StateDir {
    pub fn new(root: &Path) -> Self {
        StateDir { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create(&self) -> Result<(), HarnessError> {
        fs::create_dir_all(self.root.join("models"))?;
        Ok(())
    }

    pub fn registry_path(&self) -> PathBuf {
        self.root.join("registry.jsonl")
    }

    pub fn twins_path(&self) -> PathBuf {
        self.root.join("twins.json")
    }

    pub fn retained_path(&self) -> PathBuf {
        self.root.join("retained.jsonl")
    }

    pub fn audit_path(&self) -> PathBuf {
        self.root.join("audit.jsonl")
    }

    pub fn notify_path(&self) -> PathBuf {
        self.root.join("notifications.jsonl")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn save_models(&self, models: &ModelRegistry) -> Result<(), HarnessError> {
        fs::create_dir_all(self.models_dir())?;
        for name in models.class_names() {
            let class = models.class(name).expect("listed class exists");
            fs::write(self.models_dir().join(format!("{name}.json")), serde_json::to_string_pretty(class)?)?;
        }
        Ok(())
    }

    /// Registry built from the stored classes. Parents must load before
    /// children, so files are retried until no further class registers.
    pub fn load_models(&self) -> Result<ModelRegistry, HarnessError> {
        let mut reg = ModelRegistry::new();
        let dir = self.models_dir();
        if !dir.exists() {
            return Ok(reg);
        }
        let mut pending = Vec::new();
        for e in fs::read_dir(&dir)? {
            let path = e?.path();
            if path.extension().is_some_and(|x| x == "json") {
                pending.push(serde_json::from_str::<iotra_core::infomodel::ObjectClass>(&fs::read_to_string(&path)?)?);
            }
        }
        pending.sort_by(|a, b| a.name.cmp(&b.name));
        while !pending.is_empty() {
            let before = pending.len();
            let mut last_err = None;
            pending.retain(|c| match reg.register_class(c.clone()) {
                Ok(_) => false,
                Err(e) => {
                    last_err = Some(e);
                    true
                }
            });
            if pending.len() == before {
                let e = last_err.expect("a class failed to register");
                return Err(HarnessError::State(format!("models: {e}")));
            }
        }
        Ok(reg)
    }

    pub fn load_twins(&self) -> Result<Option<TwinService>, HarnessError> {
        let path = self.twins_path();
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(TwinService::load(&path)?))
    }

    pub fn save_twins(&self, twins: &TwinService) -> Result<(), HarnessError> {
        twins.save(&self.twins_path())?;
        Ok(())
    }

    pub fn load_retained(&self) -> Result<Vec<Frame>, HarnessError> {
        let path = self.retained_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for line in fs::read_to_string(&path)?.lines().filter(|l| !l.trim().is_empty()) {
            let r: RetainedLine = serde_json::from_str(line)?;
            out.push(Frame {
                kind: FrameKind::Pub,
                topic: r.topic,
                msg_id: MsgId { sender: r.sender, seq: r.seq },
                qos: r.qos,
                retain: true,
                ts: r.ts,
                payload: r.payload,
            });
        }
        Ok(out)
    }

    pub fn save_retained<'a>(&self, frames: impl Iterator<Item = &'a Frame>) -> Result<(), HarnessError> {
        let tmp = self.retained_path().with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        for fr in frames {
            let line = RetainedLine {
                topic: fr.topic.clone(),
                sender: fr.msg_id.sender.clone(),
                seq: fr.msg_id.seq,
                qos: fr.qos,
                ts: fr.ts,
                payload: fr.payload.clone(),
            };
            writeln!(f, "{}", serde_json::to_string(&line)?)?;
        }
        f.sync_all()?;
        fs::rename(tmp, self.retained_path())?;
        Ok(())
    }
}

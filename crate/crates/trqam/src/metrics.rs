//! JSONL metrics emission. One record per line; lines are kept in memory so
//! tests can compare two runs byte-for-byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Per-iteration training record.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub variant: &'static str,
    pub lambda: f64,
    /// Instantaneous path-KL estimate; null when the step diverged.
    pub kl_hat: Option<f64>,
    pub kl_ema: f64,
    pub eps_kl: f64,
    /// Adjoint-matching loss; null when the adjoint solve diverged.
    pub adj_loss: Option<f64>,
    pub critic_loss: f64,
    pub mean_q: f64,
    pub grad_norm_pre_clip: f64,
}

/// Periodic evaluation snapshot.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    pub mean_return: f64,
    pub success_rate: f64,
    pub episodes: usize,
}

/// Behavior-cloning loss curve record.
#[derive(Debug, Clone, Serialize)]
pub struct BcRecord {
    pub step: u64,
    pub bc_loss: f64,
}

/// Collects JSONL lines in memory and optionally streams them to a file.
#[derive(Debug, Default)]
pub struct MetricsSink {
    writer: Option<BufWriter<File>>,
    lines: Vec<String>,
}

impl MetricsSink {
    /// In-memory sink.
    pub fn memory() -> Self {
        Self::default()
    }

    /// Sink that also appends to `path`.
    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(Self {
            writer: Some(BufWriter::new(File::create(path)?)),
            lines: Vec::new(),
        })
    }

    pub fn emit<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        if let Some(w) = &mut self.writer {
            writeln!(w, "{line}")?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }

    /// All lines joined with trailing newlines, as written to disk.
    pub fn as_jsonl(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

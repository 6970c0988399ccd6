use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    JsonLines,
}

/// Collects the rendered output of one command.
pub struct Emitter {
    format: Format,
    buf: Vec<u8>,
}

impl Emitter {
    pub fn new(format: Format) -> Self {
        Emitter { format, buf: Vec::new() }
    }

    pub fn format(&self) -> Format {
        self.format
    }

    /// Emits a table: CSV rows, one JSON object per line, or `text` lines.
    pub fn records<T: Serialize>(&mut self, rows: &[T], text: impl Fn(&T) -> String) -> Result<()> {
        match self.format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(&mut self.buf);
                for r in rows {
                    w.serialize(r)?;
                }
                w.flush()?;
            }
            Format::JsonLines => {
                for r in rows {
                    serde_json::to_writer(&mut self.buf, r)?;
                    self.buf.push(b'\n');
                }
            }
            Format::Text => {
                for r in rows {
                    writeln!(self.buf, "{}", text(r))?;
                }
            }
        }
        Ok(())
    }

    /// Emits a single summary object; CSV renders it as a one-row table.
    pub fn summary<T: Serialize>(&mut self, value: &T, text: impl Fn(&T) -> String) -> Result<()> {
        self.records(std::slice::from_ref(value), text)
    }

    /// Free text, only in text mode.
    pub fn note(&mut self, line: impl AsRef<str>) {
        if self.format == Format::Text {
            self.buf.extend_from_slice(line.as_ref().as_bytes());
            self.buf.push(b'\n');
        }
    }

    pub fn finish(self, out: Option<&Path>) -> Result<()> {
        match out {
            Some(p) => fs::write(p, &self.buf).with_context(|| format!("writing {}", p.display())),
            None => {
                std::io::stdout().write_all(&self.buf)?;
                Ok(())
            }
        }
    }
}

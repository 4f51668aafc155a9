//! Append-only, line-delimited JSON journals.
//!
//! Every persistent component (registry, event store, queue, checksum log,
//! alarm log) is a journal replayed at startup. A final line without a
//! trailing newline is a torn write from an interrupted process and is
//! truncated away; any other unparsable line makes the journal corrupt.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("journal {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("journal {path} is corrupt at line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("journal entry could not be encoded: {0}")]
    Encode(#[from] serde_json::Error),
}

impl JournalError {
    /// Path of the offending file, when the failure is tied to one.
    pub fn path(&self) -> Option<&Path> {
        match self {
            JournalError::Io { path, .. } | JournalError::Corrupt { path, .. } => Some(path),
            JournalError::Encode(_) => None,
        }
    }
}

/// Durability applied after each append.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Durability {
    /// Flush to the OS; survives process death but not power loss.
    #[default]
    Flush,
    /// `fdatasync` after every append batch.
    Fsync,
}

pub struct Journal<E> {
    sink: Option<(PathBuf, File)>,
    durability: Durability,
    _entry: PhantomData<fn(E)>,
}

impl<E> std::fmt::Debug for Journal<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal")
            .field("path", &self.sink.as_ref().map(|(p, _)| p))
            .field("durability", &self.durability)
            .finish()
    }
}

impl<E: Serialize + DeserializeOwned> Journal<E> {
    /// A journal that keeps nothing on disk.
    pub fn in_memory() -> Self {
        Self {
            sink: None,
            durability: Durability::Flush,
            _entry: PhantomData,
        }
    }

    /// Opens (creating if needed) the journal at `path` and returns every
    /// entry it already holds, in append order.
    pub fn open(path: impl AsRef<Path>, durability: Durability) -> Result<(Self, Vec<E>), JournalError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| JournalError::Io {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io)?;

        let mut entries = Vec::new();
        let mut reader = BufReader::new(&file);
        let mut line = String::new();
        let mut good_len: u64 = 0;
        let mut line_no = 0;
        let mut torn = false;
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(io)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            if !line.ends_with('\n') {
                torn = true;
                break;
            }
            let text = line.trim_end();
            if !text.is_empty() {
                let entry = serde_json::from_str(text).map_err(|e| JournalError::Corrupt {
                    path: path.clone(),
                    line: line_no,
                    reason: e.to_string(),
                })?;
                entries.push(entry);
            }
            good_len += n as u64;
        }
        drop(reader);
        if torn {
            tracing::warn!(path = %path.display(), "truncating torn journal tail");
            file.set_len(good_len).map_err(io)?;
            file.seek(SeekFrom::End(0)).map_err(io)?;
        }
        Ok((
            Self {
                sink: Some((path, file)),
                durability,
                _entry: PhantomData,
            },
            entries,
        ))
    }

    pub fn append(&mut self, entry: &E) -> Result<(), JournalError> {
        self.append_all(std::slice::from_ref(entry))
    }

    /// Writes all entries with a single flush (and sync, if configured).
    pub fn append_all(&mut self, entries: &[E]) -> Result<(), JournalError> {
        let Some((path, file)) = self.sink.as_mut() else {
            return Ok(());
        };
        if entries.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::with_capacity(entries.len() * 128);
        for entry in entries {
            serde_json::to_writer(&mut buf, entry)?;
            buf.push(b'\n');
        }
        let io = |source| JournalError::Io {
            path: path.clone(),
            source,
        };
        file.write_all(&buf).map_err(io)?;
        file.flush().map_err(io)?;
        if self.durability == Durability::Fsync {
            file.sync_data().map_err(io)?;
        }
        Ok(())
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|(p, _)| p.as_path())
    }
}

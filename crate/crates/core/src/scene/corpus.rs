//! JSON-lines scenario corpus: one self-describing record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::generate::ScenarioRecord;
use crate::error::{Error, Result};

pub fn write_corpus(records: &[ScenarioRecord], out: &mut impl Write) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse {
            index: i,
            message: e.to_string(),
        })?;
        writeln!(out, "{line}").map_err(|e| Error::io("<corpus>", e))?;
    }
    Ok(())
}

pub fn save_corpus(records: &[ScenarioRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_corpus(records, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Streams records one line at a time; errors carry the zero-based record
/// index.
pub struct CorpusReader<R> {
    lines: std::io::Lines<R>,
    index: usize,
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            index: 0,
        }
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<ScenarioRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    return Some(Err(Error::Parse {
                        index: self.index,
                        message: e.to_string(),
                    }))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let i = self.index;
            self.index += 1;
            return Some(serde_json::from_str(&line).map_err(|e| Error::Parse {
                index: i,
                message: e.to_string(),
            }));
        }
    }
}

pub fn load_corpus(path: &Path) -> Result<Vec<ScenarioRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    CorpusReader::new(BufReader::new(file)).collect()
}

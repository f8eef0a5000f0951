//! Labeled IR-slice datasets: JSON Lines ingestion, user-function elision and
//! the line-count filter.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::tokenize;

/// Programs must have strictly fewer lines than this to be kept.
pub const DEFAULT_MAX_LINES: usize = 265;

/// One code slice: ordered IR lines with whole-code and per-line labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Program {
    pub id: String,
    pub lines: Vec<String>,
    pub label: u8,
    /// Zero-based, strictly increasing.
    pub vulnerable_lines: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProgramRecord {
    id: String,
    lines: Vec<String>,
    label: u8,
    vulnerable_lines: Vec<usize>,
}

impl Program {
    pub fn new(
        id: impl Into<String>,
        lines: Vec<String>,
        label: u8,
        mut vulnerable_lines: Vec<usize>,
    ) -> Result<Self> {
        let id = id.into();
        let invalid = |message: String| Error::InvalidProgram {
            id: id.clone(),
            message,
        };
        if lines.is_empty() {
            return Err(invalid("program has no lines".into()));
        }
        if label > 1 {
            return Err(invalid(format!("label must be 0 or 1, got {label}")));
        }
        vulnerable_lines.sort_unstable();
        vulnerable_lines.dedup();
        if let Some(&bad) = vulnerable_lines.iter().find(|&&i| i >= lines.len()) {
            return Err(invalid(format!(
                "vulnerable line index out of range: {bad} >= {}",
                lines.len()
            )));
        }
        match (label, vulnerable_lines.is_empty()) {
            (0, false) => Err(invalid(
                "inconsistent labels: clean program lists vulnerable lines".into(),
            )),
            (1, true) => Err(invalid(
                "inconsistent labels: vulnerable program lists no vulnerable lines".into(),
            )),
            _ => Ok(Program {
                id,
                lines,
                label,
                vulnerable_lines,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn is_vulnerable(&self) -> bool {
        self.label == 1
    }

    /// Per-line labels y(t) as booleans.
    pub fn line_labels(&self) -> Vec<bool> {
        let mut labels = vec![false; self.lines.len()];
        for &i in &self.vulnerable_lines {
            labels[i] = true;
        }
        labels
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub programs: Vec<Program>,
    pub provenance: String,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate program ids.
    pub fn new(programs: Vec<Program>, provenance: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(programs.len());
        for p in &programs {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::DuplicateId(p.id.clone()));
            }
        }
        Ok(Corpus {
            programs,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.programs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.programs.is_empty()
    }

    pub fn vulnerable_count(&self) -> usize {
        self.programs.iter().filter(|p| p.is_vulnerable()).count()
    }

    /// Serializes the corpus as JSON Lines, one program per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.programs {
            out.push_str(&serde_json::to_string(p).expect("program serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Parses a JSON Lines dataset. Blank lines are skipped; preprocessing is not applied.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut programs = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let rec: ProgramRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let program = Program::new(rec.id, rec.lines, rec.label, rec.vulnerable_lines)
            .map_err(|e| malformed(e.to_string()))?;
        if !seen.insert(program.id.clone()) {
            return Err(malformed(Error::DuplicateId(program.id).to_string()));
        }
        programs.push(program);
    }
    if programs.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "{} contains no records",
            path.display()
        )));
    }
    Ok(Corpus {
        programs,
        provenance: path.display().to_string(),
    })
}

fn is_call_line(line: &str) -> bool {
    tokenize(line).any(|t| t == "call")
}

fn is_define_line(line: &str) -> bool {
    tokenize(line).next() == Some("define")
}

/// Indices of the lines that survive user-function elision.
///
/// A define line directly after a call line removes both. Elision runs to a
/// fixpoint, so a call that becomes adjacent to a define once an inner pair is
/// removed is elided as well.
pub fn surviving_line_indices<S: AsRef<str>>(lines: &[S]) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let line = line.as_ref();
        if is_define_line(line) {
            if let Some(&prev) = kept.last() {
                if is_call_line(lines[prev].as_ref()) {
                    kept.pop();
                    continue;
                }
            }
        }
        kept.push(i);
    }
    kept
}

/// Removes user-defined-function call/define pairs, keeping function bodies.
pub fn strip_user_functions<S: AsRef<str>>(lines: &[S]) -> Vec<String> {
    surviving_line_indices(lines)
        .into_iter()
        .map(|i| lines[i].as_ref().to_owned())
        .collect()
}

/// Keeps the program only if it has fewer than `max_lines` lines.
pub fn filter_by_length(program: Program, max_lines: usize) -> Option<Program> {
    (program.len() < max_lines).then_some(program)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrepareStats {
    pub lines_stripped: usize,
    /// Vulnerable programs dropped because elision removed every vulnerable line.
    pub dropped_lost_labels: usize,
    pub dropped_empty: usize,
    pub dropped_too_long: usize,
    /// Vulnerable-line annotations removed by elision in programs that survived.
    pub vulnerable_lines_removed: usize,
}

/// Elides user functions (remapping line labels) and applies the length filter.
pub fn prepare_corpus(corpus: &Corpus, max_lines: usize) -> Result<(Corpus, PrepareStats)> {
    let mut stats = PrepareStats::default();
    let mut programs = Vec::with_capacity(corpus.len());
    for p in &corpus.programs {
        let kept = surviving_line_indices(&p.lines);
        stats.lines_stripped += p.len() - kept.len();
        let mut remapped = Vec::with_capacity(p.vulnerable_lines.len());
        let mut vuln = p.vulnerable_lines.iter().peekable();
        for (new_idx, &old_idx) in kept.iter().enumerate() {
            while vuln.next_if(|&&v| v < old_idx).is_some() {
                stats.vulnerable_lines_removed += 1;
            }
            if vuln.next_if(|&&v| v == old_idx).is_some() {
                remapped.push(new_idx);
            }
        }
        stats.vulnerable_lines_removed += vuln.count();

        if kept.is_empty() {
            stats.dropped_empty += 1;
            continue;
        }
        if p.is_vulnerable() && remapped.is_empty() {
            stats.dropped_lost_labels += 1;
            continue;
        }
        let lines = kept.iter().map(|&i| p.lines[i].clone()).collect();
        let program = Program::new(p.id.clone(), lines, p.label, remapped)?;
        match filter_by_length(program, max_lines) {
            Some(program) => programs.push(program),
            None => stats.dropped_too_long += 1,
        }
    }
    if stats.dropped_lost_labels > 0 {
        log::warn!(
            "dropped {} vulnerable programs whose vulnerable lines were all elided",
            stats.dropped_lost_labels
        );
    }
    if programs.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no program of {} survived preprocessing (max {} lines)",
            corpus.len(),
            max_lines
        )));
    }
    let prepared = Corpus {
        programs,
        provenance: corpus.provenance.clone(),
    };
    Ok((prepared, stats))
}

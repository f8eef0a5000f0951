//! Seeded generator of labeled IR-shaped corpora with a planted source→sink motif.
//!
//! A vulnerable program reads tainted data with [`SOURCE_TOKEN`], threads the
//! register through zero or more propagation lines and finally passes it to
//! [`SINK_TOKEN`]; that sink line is the vulnerable one. Clean programs may
//! contain a source, a sink, or a sink that runs before the source, so the
//! verdict depends on line order and not on token presence alone.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Program, DEFAULT_MAX_LINES};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::vocab::tokenize;

pub const SOURCE_TOKEN: &str = "@gets";
pub const SINK_TOKEN: &str = "@strcpy";

const OPCODES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "sdiv",
    "and",
    "or",
    "xor",
    "shl",
    "icmp",
    "select",
    "load",
    "alloca",
    "bitcast",
    "zext",
    "sext",
    "trunc",
    "getelementptr",
    "phi",
];
const TYPES: &[&str] = &["i1", "i8", "i32", "i64", "i8*", "i32*"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub program_count: usize,
    pub vulnerable_fraction: f64,
    pub min_lines: usize,
    pub max_lines: usize,
    /// Distinct operand tokens besides opcodes, types and registers.
    pub token_pool_size: usize,
    /// Consecutive lines in the planted motif: source, propagation lines, sink.
    pub motif_span: usize,
    pub seed: u64,
    /// Inject call/define pairs that preprocessing must strip.
    pub with_user_functions: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            program_count: 2000,
            vulnerable_fraction: 0.3,
            min_lines: 8,
            max_lines: 60,
            token_pool_size: 400,
            motif_span: 3,
            seed: 42,
            with_user_functions: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.program_count == 0 {
            return bad("program_count must be positive".into());
        }
        if !(self.vulnerable_fraction > 0.0 && self.vulnerable_fraction < 1.0) {
            return bad(format!(
                "vulnerable_fraction {} not in (0, 1)",
                self.vulnerable_fraction
            ));
        }
        if self.min_lines == 0 || self.min_lines > self.max_lines {
            return bad(format!(
                "invalid line range {}..={}",
                self.min_lines, self.max_lines
            ));
        }
        if self.max_lines >= DEFAULT_MAX_LINES {
            return bad(format!(
                "max_lines {} must stay below {DEFAULT_MAX_LINES}",
                self.max_lines
            ));
        }
        if self.motif_span == 0 {
            return bad("motif_span must be at least 1".into());
        }
        if self.motif_span > self.min_lines {
            return bad(format!(
                "motif_span {} does not fit in programs of {} lines",
                self.motif_span, self.min_lines
            ));
        }
        if self.token_pool_size == 0 {
            return bad("token_pool_size must be positive".into());
        }
        Ok(())
    }

    /// Number of vulnerable programs, rounded half away from zero.
    pub fn vulnerable_count(&self) -> usize {
        (self.program_count as f64 * self.vulnerable_fraction).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Filler,
    Source,
    Propagate,
    Sink,
    /// Source and sink on one line (motif_span 1).
    SourceSink,
    /// A sink that no source reaches.
    Decoy,
}

struct LineWriter<'a> {
    rng: &'a mut ChaCha8Rng,
    pool: usize,
    next_reg: usize,
    tainted: Option<usize>,
}

impl LineWriter<'_> {
    fn fresh(&mut self) -> usize {
        self.next_reg += 1;
        self.next_reg - 1
    }

    fn operand(&mut self) -> String {
        if self.next_reg > 0 && self.rng.random_bool(0.6) {
            format!("%{}", self.rng.random_range(0..self.next_reg))
        } else {
            format!("@v{}", self.rng.random_range(0..self.pool))
        }
    }

    fn ty(&mut self) -> &'static str {
        TYPES[self.rng.random_range(0..TYPES.len())]
    }

    fn line(&mut self, role: Role) -> String {
        match role {
            Role::Filler => match self.rng.random_range(0..10) {
                0 => format!(
                    "store {} {} , {}",
                    self.ty(),
                    self.operand(),
                    self.operand()
                ),
                1 => format!("br label {}", self.operand()),
                _ => {
                    let op = OPCODES[self.rng.random_range(0..OPCODES.len())];
                    let ty = self.ty();
                    let (a, b) = (self.operand(), self.operand());
                    let d = self.fresh();
                    format!("%{d} = {op} {ty} {a} , {b}")
                }
            },
            Role::Source => {
                let d = self.fresh();
                self.tainted = Some(d);
                format!("%{d} = invoke i8* {SOURCE_TOKEN} ( )")
            }
            Role::Propagate => {
                let t = self.tainted.expect("source precedes propagation");
                let off = self.operand();
                let d = self.fresh();
                self.tainted = Some(d);
                format!("%{d} = getelementptr i8* %{t} , {off}")
            }
            Role::Sink => {
                let t = self.tainted.expect("source precedes sink");
                let dst = self.operand();
                let d = self.fresh();
                format!("%{d} = invoke i8* {SINK_TOKEN} ( {dst} , %{t} )")
            }
            Role::SourceSink => {
                let dst = self.operand();
                let d = self.fresh();
                format!("%{d} = invoke i8* {SINK_TOKEN} ( {dst} , {SOURCE_TOKEN} )")
            }
            Role::Decoy => {
                let (dst, src) = (self.operand(), self.operand());
                let d = self.fresh();
                format!("%{d} = invoke i8* {SINK_TOKEN} ( {dst} , {src} )")
            }
        }
    }
}

/// Sorted distinct positions in `0..len`.
fn positions(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    let mut p = rand::seq::index::sample(rng, len, count).into_vec();
    p.sort_unstable();
    p
}

fn vulnerable_roles(rng: &mut ChaCha8Rng, len: usize, span: usize) -> Vec<Role> {
    let mut roles = vec![Role::Filler; len];
    let start = rng.random_range(0..=len - span);
    if span == 1 {
        roles[start] = Role::SourceSink;
    } else {
        roles[start] = Role::Source;
        for r in &mut roles[start + 1..start + span - 1] {
            *r = Role::Propagate;
        }
        roles[start + span - 1] = Role::Sink;
    }
    if start > 0 && rng.random_bool(0.3) {
        roles[rng.random_range(0..start)] = Role::Decoy;
    }
    roles
}

fn clean_roles(rng: &mut ChaCha8Rng, len: usize) -> Vec<Role> {
    let mut roles = vec![Role::Filler; len];
    match rng.random_range(0..4) {
        0 => {}
        1 => roles[rng.random_range(0..len)] = Role::Source,
        2 => roles[rng.random_range(0..len)] = Role::Decoy,
        _ if len >= 2 => {
            let p = positions(rng, len, 2);
            roles[p[0]] = Role::Decoy;
            roles[p[1]] = Role::Source;
        }
        _ => roles[0] = Role::Decoy,
    }
    roles
}

/// Inserts a call/define pair after some line; returns the shifted vulnerable indices.
fn inject_user_function(
    rng: &mut ChaCha8Rng,
    lines: &mut Vec<String>,
    vulnerable: &[usize],
    n: usize,
) -> Vec<usize> {
    let at = rng.random_range(0..=lines.len());
    lines.insert(at, format!("define void @helper{n} ( )"));
    lines.insert(at, format!("call void @helper{n} ( )"));
    vulnerable
        .iter()
        .map(|&v| if v >= at { v + 2 } else { v })
        .collect()
}

/// Generates a corpus; the result is a pure function of `config`.
pub fn generate_corpus(config: &SynthConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = stream(config.seed, Stream::Synth);
    let vulnerable = config.vulnerable_count();
    let mut labels: Vec<bool> = (0..config.program_count).map(|i| i < vulnerable).collect();
    labels.shuffle(&mut rng);

    let mut programs = Vec::with_capacity(config.program_count);
    for (i, &is_vuln) in labels.iter().enumerate() {
        let len = rng.random_range(config.min_lines..=config.max_lines);
        let roles = if is_vuln {
            vulnerable_roles(&mut rng, len, config.motif_span)
        } else {
            clean_roles(&mut rng, len)
        };
        let mut writer = LineWriter {
            rng: &mut rng,
            pool: config.token_pool_size,
            next_reg: 0,
            tainted: None,
        };
        let mut lines: Vec<String> = roles.iter().map(|&r| writer.line(r)).collect();
        let mut flagged: Vec<usize> = (0..len)
            .filter(|&t| matches!(roles[t], Role::Sink | Role::SourceSink))
            .collect();
        if config.with_user_functions && rng.random_bool(0.5) {
            flagged = inject_user_function(&mut rng, &mut lines, &flagged, i);
        }
        programs.push(Program::new(
            format!("syn-{i:05}"),
            lines,
            u8::from(is_vuln),
            flagged,
        )?);
    }
    Corpus::new(
        programs,
        format!(
            "synthetic seed={} programs={} vulnerable={}",
            config.seed, config.program_count, vulnerable
        ),
    )
}

/// Token-scan rule that recovers the planted labels exactly: a line is
/// flagged when it holds the sink token and a source token has appeared on it
/// or on an earlier line.
pub fn scan_oracle(program: &Program) -> (bool, Vec<bool>) {
    let mut seen_source = false;
    let flags: Vec<bool> = program
        .lines
        .iter()
        .map(|line| {
            let (mut src, mut sink) = (false, false);
            for tok in tokenize(line) {
                src |= tok == SOURCE_TOKEN;
                sink |= tok == SINK_TOKEN;
            }
            seen_source |= src;
            sink && seen_source
        })
        .collect();
    (flags.iter().any(|&f| f), flags)
}

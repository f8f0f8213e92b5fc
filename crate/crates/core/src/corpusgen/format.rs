//! Corpus file format.
//!
//! ```text
//! #!format=pretrain-lab-corpus/1
//! #!generator=artificial
//! #!seed=7
//! #!vocab_size=512
//! #!labeled=1
//! ...
//! 17 42 42 17
//! PPOO
//! ```
//!
//! Header lines are `#!key=value`; every record is one line of decimal ids,
//! followed (in labeled files) by a line of `P`/`O` marks of equal length.

use std::fmt::Write as _;
use std::path::Path;

use super::{AnnotatedCorpus, Mark, Provenance, SequenceRecord};
use crate::artifact;
use crate::error::{Error, Result};
use crate::vocab::VocabSpec;

const FORMAT_TAG: &str = "pretrain-lab-corpus/1";

pub fn corpus_to_string(corpus: &AnnotatedCorpus) -> String {
    let p = &corpus.provenance;
    let labeled = corpus.is_labeled();
    let mut out = String::new();
    let _ = writeln!(out, "#!format={FORMAT_TAG}");
    let _ = writeln!(out, "#!generator={}", p.generator);
    let _ = writeln!(out, "#!seed={}", p.seed);
    let _ = writeln!(out, "#!vocab_size={}", corpus.vocab.total_size());
    let _ = writeln!(out, "#!labeled={}", labeled as u8);
    let _ = writeln!(out, "#!config_digest={}", p.config_digest);
    let _ = writeln!(out, "#!target_tokens={}", p.target_tokens);
    let _ = writeln!(out, "#!forced_pushes={}", p.forced_pushes);
    let _ = writeln!(out, "#!flush_pops={}", p.flush_pops);
    let _ = writeln!(out, "#!flushed={}", p.flushed as u8);
    if !p.flush_depths.is_empty() {
        let depths: Vec<String> = p.flush_depths.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "#!flush_depths={}", depths.join(","));
    }
    for r in &corpus.records {
        let mut first = true;
        for t in &r.tokens {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{t}");
        }
        out.push('\n');
        if labeled {
            out.extend(r.labels.as_ref().expect("labeled corpus").iter().map(|m| m.as_char()));
            out.push('\n');
        }
    }
    out
}

pub fn serialize_corpus(corpus: &AnnotatedCorpus, path: impl AsRef<Path>) -> Result<()> {
    artifact::write_atomic(path.as_ref(), corpus_to_string(corpus).as_bytes())
}

/// Reads a corpus, validating ids against `vocab`.
pub fn read_corpus(path: impl AsRef<Path>, vocab: &VocabSpec) -> Result<AnnotatedCorpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, Some(vocab))
}

/// Reads a corpus using the vocabulary size declared in its header.
pub fn read_corpus_any(path: impl AsRef<Path>) -> Result<AnnotatedCorpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, None)
}

fn corrupt(line: usize, msg: impl Into<String>) -> Error {
    Error::CorruptCorpus {
        line,
        message: msg.into(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| corrupt(line, format!("bad value for {key}: {v:?}")))
}

pub fn parse_corpus(text: &str, vocab: Option<&VocabSpec>) -> Result<AnnotatedCorpus> {
    let mut prov = Provenance::default();
    let mut labeled = false;
    let mut vocab_size: Option<usize> = None;
    let mut lines = text.lines().enumerate().peekable();

    while let Some((i, line)) = lines.peek().copied() {
        let Some(kv) = line.strip_prefix("#!") else { break };
        lines.next();
        let n = i + 1;
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| corrupt(n, "header line lacks `=`"))?;
        match k {
            "format" if v == FORMAT_TAG => {}
            "format" => return Err(corrupt(n, format!("unsupported format {v:?}"))),
            "generator" => prov.generator = v.to_string(),
            "seed" => prov.seed = parse_num(n, k, v)?,
            "vocab_size" => vocab_size = Some(parse_num(n, k, v)?),
            "labeled" => labeled = parse_num::<u8>(n, k, v)? == 1,
            "config_digest" => prov.config_digest = v.to_string(),
            "target_tokens" => prov.target_tokens = parse_num(n, k, v)?,
            "forced_pushes" => prov.forced_pushes = parse_num(n, k, v)?,
            "flush_pops" => prov.flush_pops = parse_num(n, k, v)?,
            "flushed" => prov.flushed = parse_num::<u8>(n, k, v)? == 1,
            "flush_depths" => {
                prov.flush_depths = v
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num(n, k, s))
                    .collect::<Result<_>>()?
            }
            _ => return Err(corrupt(n, format!("unknown header key {k:?}"))),
        }
    }

    let corpus_vocab = match (vocab_size, vocab) {
        (Some(size), Some(v)) if size > v.total_size() => {
            return Err(corrupt(
                0,
                format!("corpus vocabulary of {size} exceeds the {} ids available", v.total_size()),
            ))
        }
        (Some(size), _) => VocabSpec::with_total_size(size).map_err(|e| corrupt(0, e.to_string()))?,
        (None, Some(v)) => v.clone(),
        (None, None) => return Err(corrupt(0, "header does not declare vocab_size")),
    };
    let limit = corpus_vocab.total_size();

    let mut records = Vec::new();
    while let Some((i, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens = line
            .split_whitespace()
            .map(|s| {
                let id: u64 = s.parse().map_err(|_| corrupt(i + 1, format!("bad token id {s:?}")))?;
                if id >= limit as u64 {
                    return Err(corrupt(i + 1, format!("token id {id} outside vocabulary of {limit}")));
                }
                Ok(id as u32)
            })
            .collect::<Result<Vec<u32>>>()?;

        let labels = if labeled {
            let (j, marks) = lines
                .next()
                .ok_or_else(|| corrupt(i + 1, "record lacks its label line"))?;
            let marks: Vec<Mark> = marks
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(|c| match c {
                    'P' => Ok(Mark::Push),
                    'O' => Ok(Mark::Pop),
                    _ => Err(corrupt(j + 1, "expected a label line of P/O marks")),
                })
                .collect::<Result<_>>()?;
            if marks.len() != tokens.len() {
                return Err(corrupt(j + 1, "label line length differs from its record"));
            }
            Some(marks)
        } else {
            None
        };
        records.push(SequenceRecord { tokens, labels });
    }

    Ok(AnnotatedCorpus {
        records,
        vocab: corpus_vocab,
        provenance: prov,
    })
}

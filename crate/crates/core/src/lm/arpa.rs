use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::{LanguageModel, LmError, LmVocab, NgramEntry, NgramModel, EOS_ID};

#[derive(Debug, Error)]
pub enum ArpaError {
    #[error("line {line}: expected \\data\\ header")]
    MissingData { line: usize },
    #[error("line {line}: malformed count line {text:?}")]
    BadCountLine { line: usize, text: String },
    #[error("line {line}: section \\{found}-grams: out of order (expected \\{expected}-grams:)")]
    SectionOrder { line: usize, expected: usize, found: usize },
    #[error("line {line}: \\{order}-grams: section declares {declared} entries but lists {found}")]
    CountMismatch {
        line: usize,
        order: usize,
        declared: usize,
        found: usize,
    },
    #[error("line {line}: malformed {order}-gram entry {text:?}")]
    BadEntry { line: usize, order: usize, text: String },
    #[error("line {line}: missing \\end\\ marker")]
    MissingEnd { line: usize },
    #[error("no n-gram orders declared")]
    NoOrders,
}

/// Renders a model as ARPA text. Floats use the shortest representation that
/// parses back to the same value, so a write/read round trip is exact.
pub fn arpa_string(model: &NgramModel) -> String {
    let order = model.order();
    let mut out = String::from("\n\\data\\\n");
    for n in 1..=order {
        let _ = writeln!(out, "ngram {n}={}", model.count(n));
    }
    for n in 1..=order {
        let _ = write!(out, "\n\\{n}-grams:\n");
        for (words, ids, e) in model.sorted_entries(n) {
            let _ = write!(out, "{}\t{}", e.log10_prob, words.join(" "));
            if n < order && *ids.last().unwrap() != EOS_ID {
                let _ = write!(out, "\t{}", e.log10_backoff);
            }
            out.push('\n');
        }
    }
    out.push_str("\n\\end\\\n");
    out
}

pub fn write_arpa(model: &NgramModel, path: &Path) -> Result<(), LmError> {
    std::fs::write(path, arpa_string(model)).map_err(|source| LmError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_arpa(path: &Path) -> Result<NgramModel, LmError> {
    let text = std::fs::read_to_string(path).map_err(|source| LmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_arpa(&text)?)
}

/// Parses ARPA text. A missing backoff column reads as 0.
pub fn parse_arpa(text: &str) -> Result<NgramModel, ArpaError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut last_line = 0;

    loop {
        match lines.next() {
            Some((_, "")) => continue,
            Some((_, "\\data\\")) => break,
            Some((line, _)) => return Err(ArpaError::MissingData { line }),
            None => return Err(ArpaError::MissingData { line: 1 }),
        }
    }

    let mut declared: Vec<usize> = Vec::new();
    let mut pending = None;
    for (line, l) in lines.by_ref() {
        last_line = line;
        if l.is_empty() {
            if declared.is_empty() {
                continue;
            }
            break;
        }
        if l.starts_with('\\') {
            pending = Some((line, l));
            break;
        }
        let parsed = l
            .strip_prefix("ngram ")
            .and_then(|rest| rest.split_once('='))
            .and_then(|(n, c)| Some((n.trim().parse::<usize>().ok()?, c.trim().parse::<usize>().ok()?)));
        match parsed {
            Some((n, c)) if n == declared.len() + 1 => declared.push(c),
            _ => {
                return Err(ArpaError::BadCountLine {
                    line,
                    text: l.to_string(),
                })
            }
        }
    }
    if declared.is_empty() {
        return Err(ArpaError::NoOrders);
    }
    let order = declared.len();

    let mut vocab = LmVocab::default();
    let mut entries: Vec<Vec<(Vec<String>, NgramEntry)>> = vec![Vec::new(); order];
    let mut current: Option<(usize, usize)> = None; // (order, header line)
    let mut expected_next = 1;
    let mut ended = false;

    let close = |current: Option<(usize, usize)>,
                 entries: &Vec<Vec<(Vec<String>, NgramEntry)>>,
                 line: usize|
     -> Result<(), ArpaError> {
        if let Some((n, _)) = current {
            if entries[n - 1].len() != declared[n - 1] {
                return Err(ArpaError::CountMismatch {
                    line,
                    order: n,
                    declared: declared[n - 1],
                    found: entries[n - 1].len(),
                });
            }
        }
        Ok(())
    };

    let mut handle = |line: usize, l: &str, current: &mut Option<(usize, usize)>| -> Result<bool, ArpaError> {
        if l.is_empty() {
            return Ok(false);
        }
        if l == "\\end\\" {
            close(*current, &entries, line)?;
            if expected_next <= order {
                return Err(ArpaError::CountMismatch {
                    line,
                    order: expected_next,
                    declared: declared[expected_next - 1],
                    found: 0,
                });
            }
            return Ok(true);
        }
        if let Some(n) = l
            .strip_prefix('\\')
            .and_then(|r| r.strip_suffix("-grams:"))
            .and_then(|n| n.parse::<usize>().ok())
        {
            close(*current, &entries, line)?;
            if n != expected_next || n > order {
                return Err(ArpaError::SectionOrder {
                    line,
                    expected: expected_next,
                    found: n,
                });
            }
            expected_next += 1;
            *current = Some((n, line));
            return Ok(false);
        }
        let Some((n, _)) = *current else {
            return Err(ArpaError::BadEntry {
                line,
                order: 0,
                text: l.to_string(),
            });
        };
        let fields: Vec<&str> = l.split_whitespace().collect();
        let bad = || ArpaError::BadEntry {
            line,
            order: n,
            text: l.to_string(),
        };
        if fields.len() != n + 1 && fields.len() != n + 2 {
            return Err(bad());
        }
        let prob: f64 = fields[0].parse().map_err(|_| bad())?;
        let backoff: f64 = if fields.len() == n + 2 {
            fields[n + 1].parse().map_err(|_| bad())?
        } else {
            0.0
        };
        entries[n - 1].push((
            fields[1..=n].iter().map(|s| s.to_string()).collect(),
            NgramEntry {
                log10_prob: prob,
                log10_backoff: backoff,
            },
        ));
        Ok(false)
    };

    if let Some((line, l)) = pending {
        ended = handle(line, l, &mut current)?;
    }
    if !ended {
        for (line, l) in lines {
            last_line = line;
            if handle(line, l, &mut current)? {
                ended = true;
                break;
            }
        }
    }
    if !ended {
        close(current, &entries, last_line)?;
        return Err(ArpaError::MissingEnd { line: last_line });
    }

    for w in entries[0].iter().map(|(g, _)| &g[0]) {
        vocab.intern(w);
    }
    let mut model = NgramModel::new(order, vocab);
    for table in &entries {
        for (words, e) in table {
            let ids = words.iter().map(|w| model.vocab_mut().intern(w)).collect();
            model.insert(ids, *e);
        }
    }
    Ok(model)
}

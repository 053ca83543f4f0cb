//! Trace files.
//!
//! JSON Lines: a header object `{format, version, config, rank_domain}`
//! followed by one object per interval. CSV: `#`-prefixed header comments
//! carrying the same metadata, then a column header row. Both list intervals
//! sorted by `(rank, start)` with times rounded to 9 significant digits, so
//! re-exporting an imported trace reproduces the file byte for byte.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{SimConfig, TraceFormat};
use crate::trace::{round_sig, Interval, IntervalKind, Trace};

pub const FORMAT_NAME: &str = "desync-trace";
pub const FORMAT_VERSION: u32 = 1;
/// Significant digits of exported times.
pub const TIME_DIGITS: usize = 9;

const CSV_COLUMNS: &str = "rank,domain,kind,step,start_s,end_s";

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("I/O error")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn parse_err(line: usize, message: impl Into<String>) -> ExportError {
    ExportError::Parse {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: Option<SimConfig>,
    rank_domain: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    rank: usize,
    domain: usize,
    kind: IntervalKind,
    step: usize,
    start_s: f64,
    end_s: f64,
}

/// Shortest decimal form of `x` rounded to [`TIME_DIGITS`] digits.
fn fmt_time(x: f64) -> String {
    format!("{}", round_sig(x, TIME_DIGITS))
}

fn sorted_records(trace: &Trace) -> impl Iterator<Item = (usize, Interval)> + '_ {
    trace.ranks.iter().enumerate().flat_map(|(r, ivs)| {
        let mut v: Vec<Interval> = ivs.clone();
        // stable: zero-length intervals keep their causal order
        v.sort_by(|a, b| a.start.total_cmp(&b.start));
        v.into_iter().map(move |i| (r, i))
    })
}

pub fn write_trace<W: Write>(trace: &Trace, format: TraceFormat, mut w: W) -> Result<(), ExportError> {
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        config: trace.config.clone(),
        rank_domain: trace.rank_domain.clone(),
    };
    let header_json = serde_json::to_string(&header).map_err(io::Error::other)?;
    let mut line = String::new();
    match format {
        TraceFormat::Jsonl => {
            writeln!(w, "{header_json}")?;
            for (r, i) in sorted_records(trace) {
                line.clear();
                write!(
                    line,
                    "{{\"rank\":{r},\"domain\":{},\"kind\":\"{}\",\"step\":{},\"start_s\":{},\"end_s\":{}}}",
                    trace.rank_domain[r],
                    i.kind.as_str(),
                    i.step,
                    fmt_time(i.start),
                    fmt_time(i.end)
                )
                .expect("write to string");
                writeln!(w, "{line}")?;
            }
        }
        TraceFormat::Csv => {
            writeln!(w, "# {header_json}")?;
            writeln!(w, "{CSV_COLUMNS}")?;
            for (r, i) in sorted_records(trace) {
                writeln!(
                    w,
                    "{r},{},{},{},{},{}",
                    trace.rank_domain[r],
                    i.kind.as_str(),
                    i.step,
                    fmt_time(i.start),
                    fmt_time(i.end)
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_trace(trace: &Trace, format: TraceFormat, path: impl AsRef<Path>) -> Result<(), ExportError> {
    let f = File::create(path)?;
    write_trace(trace, format, BufWriter::new(f))
}

fn parse_header(text: &str, line: usize) -> Result<Header, ExportError> {
    let h: Header = serde_json::from_str(text).map_err(|e| parse_err(line, e.to_string()))?;
    if h.format != FORMAT_NAME || h.version != FORMAT_VERSION {
        return Err(parse_err(
            line,
            format!("unsupported format {} v{}", h.format, h.version),
        ));
    }
    Ok(h)
}

/// Reads a trace in either format; the format is recognized from the first
/// line.
pub fn read_trace<R: BufRead>(r: R) -> Result<Trace, ExportError> {
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty trace file"))?;
    let first = first?;
    let (header, csv) = match first.strip_prefix("# ") {
        Some(rest) => (parse_header(rest, 1)?, true),
        None => (parse_header(&first, 1)?, false),
    };
    if csv {
        match lines.next() {
            Some((_, l)) if l.as_ref().map(|s| s.trim() == CSV_COLUMNS).unwrap_or(false) => {}
            _ => return Err(parse_err(2, format!("expected column header `{CSV_COLUMNS}`"))),
        }
    }
    let p = header.rank_domain.len();
    let mut ranks: Vec<Vec<Interval>> = vec![Vec::new(); p];
    for (idx, l) in lines {
        let l = l?;
        let n = idx + 1;
        if l.trim().is_empty() {
            continue;
        }
        let rec: Record = if csv {
            parse_csv_record(&l, n)?
        } else {
            serde_json::from_str(&l).map_err(|e| parse_err(n, e.to_string()))?
        };
        if rec.rank >= p {
            return Err(parse_err(n, format!("rank {} outside 0..{p}", rec.rank)));
        }
        if header.rank_domain[rec.rank] != rec.domain {
            return Err(parse_err(
                n,
                format!("rank {} listed on domain {}, header says {}", rec.rank, rec.domain, header.rank_domain[rec.rank]),
            ));
        }
        ranks[rec.rank].push(Interval {
            kind: rec.kind,
            step: rec.step,
            start: rec.start_s,
            end: rec.end_s,
        });
    }
    Ok(Trace::new(header.rank_domain, ranks, header.config))
}

fn parse_csv_record(l: &str, n: usize) -> Result<Record, ExportError> {
    let f: Vec<&str> = l.split(',').map(str::trim).collect();
    if f.len() != 6 {
        return Err(parse_err(n, format!("expected 6 columns, found {}", f.len())));
    }
    let int = |s: &str, name: &str| s.parse::<usize>().map_err(|e| parse_err(n, format!("{name}: {e}")));
    let float = |s: &str, name: &str| s.parse::<f64>().map_err(|e| parse_err(n, format!("{name}: {e}")));
    Ok(Record {
        rank: int(f[0], "rank")?,
        domain: int(f[1], "domain")?,
        kind: IntervalKind::parse(f[2]).ok_or_else(|| parse_err(n, format!("unknown kind `{}`", f[2])))?,
        step: int(f[3], "step")?,
        start_s: float(f[4], "start_s")?,
        end_s: float(f[5], "end_s")?,
    })
}

pub fn import_trace(path: impl AsRef<Path>) -> Result<Trace, ExportError> {
    read_trace(BufReader::new(File::open(path)?))
}

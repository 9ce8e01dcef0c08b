use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trace::{Trace, TraceMeta, XUnit, YUnit};

const DELIMITERS: [u8; 3] = *b",;\t";

/// Serialises a trace as `x_unit,y_unit` followed by `x,y` rows. Labels and
/// resolution bandwidth go in leading `#` lines. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_trace(trace: &Trace) -> String {
    let mut out = String::new();
    if !trace.meta.x_label.is_empty() {
        out.push_str(&format!("# x_label: {}\n", trace.meta.x_label));
    }
    if !trace.meta.y_label.is_empty() {
        out.push_str(&format!("# y_label: {}\n", trace.meta.y_label));
    }
    if let Some(rbw) = trace.meta.rbw {
        out.push_str(&format!("# rbw_hz: {rbw:e}\n"));
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record([trace.x_unit.as_str(), trace.y_unit.as_str()])
        .and_then(|_| {
            for (x, y) in trace.x().iter().zip(trace.y()) {
                w.write_record([format!("{x:e}"), format!("{y:e}")])?;
            }
            Ok(())
        })
        .expect("writing to memory cannot fail");
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory buffer")).expect("ascii output"));
    out
}

/// Parses the format produced by [`write_trace`].
pub fn read_trace(text: &str) -> Result<Trace> {
    let mut meta = TraceMeta::default();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((_, l)) = lines.peek() {
        let l = l.trim();
        if l.is_empty() {
            lines.next();
            continue;
        }
        let Some(c) = l.strip_prefix('#') else { break };
        if let Some((k, v)) = c.split_once(':') {
            let v = v.trim();
            match k.trim() {
                "x_label" => meta.x_label = v.to_string(),
                "y_label" => meta.y_label = v.to_string(),
                "rbw_hz" => {
                    meta.rbw = Some(v.parse().map_err(|_| Error::Parse(format!("bad rbw_hz `{v}`")))?);
                }
                _ => {}
            }
        }
        lines.next();
    }
    let (hline, header) = lines.next().ok_or_else(|| Error::Parse("missing `x_unit,y_unit` header".into()))?;
    let delim = *DELIMITERS
        .iter()
        .find(|d| header.as_bytes().contains(d))
        .ok_or_else(|| Error::Parse(format!("line {}: header must be `x_unit,y_unit`", hline + 1)))?;

    let mut body = String::new();
    let mut line_numbers = Vec::new();
    for (i, l) in std::iter::once((hline, header)).chain(lines) {
        if l.trim().is_empty() {
            continue;
        }
        let bytes = l.as_bytes();
        if !bytes.contains(&delim) || DELIMITERS.iter().any(|d| *d != delim && bytes.contains(d)) {
            return Err(Error::Parse(format!(
                "line {}: mixed delimiters (expected `{}`)",
                i + 1,
                (delim as char).escape_default()
            )));
        }
        body.push_str(l);
        body.push('\n');
        line_numbers.push(i + 1);
    }

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut units = None;
    for (k, rec) in reader.records().enumerate() {
        let line = line_numbers[k];
        let rec = rec.map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        if rec.len() != 2 {
            return Err(Error::Parse(format!("line {line}: expected 2 columns, found {}", rec.len())));
        }
        if units.is_none() {
            let xu: XUnit = rec[0].parse().map_err(|e: Error| Error::Parse(format!("line {line}: {e}")))?;
            let yu: YUnit = rec[1].parse().map_err(|e: Error| Error::Parse(format!("line {line}: {e}")))?;
            units = Some((xu, yu));
            continue;
        }
        let num = |s: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| Error::Parse(format!("line {line}: `{s}` is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse(format!("line {line}: non-finite value `{s}`")))
            }
        };
        let (xv, yv) = (num(&rec[0])?, num(&rec[1])?);
        if let Some(&prev) = x.last() {
            if xv <= prev {
                return Err(Error::Parse(format!("line {line}: x is not strictly increasing")));
            }
        }
        x.push(xv);
        y.push(yv);
    }
    let (xu, yu) = units.expect("header line was read");
    Ok(Trace::new(x, y, xu, yu)?.with_meta(meta))
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<Trace> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_trace(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_trace_file(path: impl AsRef<Path>, trace: &Trace) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_trace(trace)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

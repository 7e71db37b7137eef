//! Plain and extended XYZ frames.
//!
//! The comment line may carry `key=value` pairs. `energy=<float>` is read as the
//! frame energy; `Properties=species:S:1:pos:R:3:...` describes the atom columns
//! (`charge:R:1` and `forces:R:3` are recognized, other columns are skipped).
//! Without `Properties` rows are `symbol x y z [ignored...]`.

use std::fmt::Write as _;

use thiserror::Error;

use super::elements::{atomic_number, symbol};
use super::{AtomicSystem, SystemError};

#[derive(Debug, Error, PartialEq)]
pub enum XyzError {
    #[error("line {line}: malformed atom count {text:?}")]
    MalformedCount { line: usize, text: String },
    #[error("line {line}: unknown element {symbol:?}")]
    UnknownElement { line: usize, symbol: String },
    #[error("line {line}: expected {expected} columns, found {found}")]
    ShortRow { line: usize, expected: usize, found: usize },
    #[error("line {line}: invalid number {token:?}")]
    BadNumber { line: usize, token: String },
    #[error("line {line}: frame ends after {found} of {expected} atoms")]
    Truncated { line: usize, expected: usize, found: usize },
    #[error("line {line}: unsupported Properties entry {entry:?}")]
    BadProperties { line: usize, entry: String },
    #[error("frame starting at line {line}: {source}")]
    InvalidSystem { line: usize, source: SystemError },
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Column {
    Species,
    Position,
    Charge,
    Forces,
    Skip(usize),
}

fn column_width(c: Column) -> usize {
    match c {
        Column::Species | Column::Charge => 1,
        Column::Position | Column::Forces => 3,
        Column::Skip(w) => w,
    }
}

/// Splits `key=value` pairs, honoring double quotes around values.
fn comment_pairs(comment: &str) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    let mut chars = comment.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            break;
        }
        let mut key = String::new();
        while let Some(&c) = chars.peek() {
            if c == '=' || c.is_whitespace() {
                break;
            }
            key.push(c);
            chars.next();
        }
        let mut value = String::new();
        if chars.peek() == Some(&'=') {
            chars.next();
            if chars.peek() == Some(&'"') {
                chars.next();
                for c in chars.by_ref() {
                    if c == '"' {
                        break;
                    }
                    value.push(c);
                }
            } else {
                while let Some(&c) = chars.peek() {
                    if c.is_whitespace() {
                        break;
                    }
                    value.push(c);
                    chars.next();
                }
            }
        }
        pairs.push((key, value));
    }
    pairs
}

fn parse_properties(spec: &str, line: usize) -> Result<Vec<Column>, XyzError> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() % 3 != 0 {
        return Err(XyzError::BadProperties { line, entry: spec.to_string() });
    }
    let mut cols = Vec::new();
    for chunk in parts.chunks(3) {
        let width: usize =
            chunk[2].parse().map_err(|_| XyzError::BadProperties { line, entry: chunk.join(":") })?;
        let col = match (chunk[0].to_ascii_lowercase().as_str(), width) {
            ("species", 1) => Column::Species,
            ("pos", 3) => Column::Position,
            ("charge" | "charges", 1) => Column::Charge,
            ("forces" | "force", 3) => Column::Forces,
            _ => Column::Skip(width),
        };
        cols.push(col);
    }
    if !cols.contains(&Column::Species) || !cols.contains(&Column::Position) {
        return Err(XyzError::BadProperties { line, entry: spec.to_string() });
    }
    Ok(cols)
}

fn number(token: &str, line: usize) -> Result<f64, XyzError> {
    token.parse().map_err(|_| XyzError::BadNumber { line, token: token.to_string() })
}

fn element(token: &str, line: usize) -> Result<u32, XyzError> {
    if let Ok(z) = token.parse::<u32>() {
        if symbol(z).is_some() {
            return Ok(z);
        }
    }
    atomic_number(token).ok_or_else(|| XyzError::UnknownElement { line, symbol: token.to_string() })
}

/// Parses every frame of an XYZ or extended-XYZ document.
pub fn parse_xyz(text: &str) -> Result<Vec<AtomicSystem>, XyzError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut frames = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let start = i + 1;
        let count_text = lines[i].trim();
        let count: usize = count_text
            .parse()
            .map_err(|_| XyzError::MalformedCount { line: start, text: count_text.to_string() })?;
        let comment = lines.get(i + 1).copied().unwrap_or("");
        let mut energy = None;
        let mut columns = vec![Column::Species, Column::Position];
        let mut extended = false;
        for (key, value) in comment_pairs(comment) {
            match key.to_ascii_lowercase().as_str() {
                "energy" => energy = Some(number(&value, i + 2)?),
                "properties" => {
                    columns = parse_properties(&value, i + 2)?;
                    extended = true;
                }
                _ => {}
            }
        }
        let expected: usize = columns.iter().map(|&c| column_width(c)).sum();
        let mut positions = Vec::with_capacity(count);
        let mut numbers = Vec::with_capacity(count);
        let mut charges = Vec::new();
        let mut forces = Vec::new();
        for a in 0..count {
            let line_no = i + 3 + a;
            let Some(row) = lines.get(i + 2 + a) else {
                return Err(XyzError::Truncated { line: line_no, expected: count, found: a });
            };
            let tokens: Vec<&str> = row.split_whitespace().collect();
            let needed = if extended { expected } else { 4 };
            if tokens.len() < needed {
                return Err(XyzError::ShortRow { line: line_no, expected: needed, found: tokens.len() });
            }
            let mut t = 0;
            for &col in &columns {
                match col {
                    Column::Species => numbers.push(element(tokens[t], line_no)?),
                    Column::Position => positions.push([
                        number(tokens[t], line_no)?,
                        number(tokens[t + 1], line_no)?,
                        number(tokens[t + 2], line_no)?,
                    ]),
                    Column::Charge => charges.push(number(tokens[t], line_no)?),
                    Column::Forces => forces.push([
                        number(tokens[t], line_no)?,
                        number(tokens[t + 1], line_no)?,
                        number(tokens[t + 2], line_no)?,
                    ]),
                    Column::Skip(_) => {}
                }
                t += column_width(col);
            }
        }
        let system = AtomicSystem {
            positions,
            atomic_numbers: numbers,
            energy,
            forces: (!forces.is_empty()).then_some(forces),
            charges: (!charges.is_empty()).then_some(charges),
        };
        system.validate().map_err(|source| XyzError::InvalidSystem { line: start, source })?;
        frames.push(system);
        i += 2 + count;
    }
    Ok(frames)
}

/// Writes systems as extended-XYZ frames. Floats use the shortest exact representation.
pub fn write_xyz(systems: &[AtomicSystem]) -> String {
    let mut out = String::new();
    for sys in systems {
        let mut props = String::from("species:S:1:pos:R:3");
        if sys.charges.is_some() {
            props.push_str(":charge:R:1");
        }
        if sys.forces.is_some() {
            props.push_str(":forces:R:3");
        }
        let _ = writeln!(out, "{}", sys.len());
        let _ = write!(out, "Properties={props}");
        if let Some(e) = sys.energy {
            let _ = write!(out, " energy={e:?}");
        }
        out.push('\n');
        for a in 0..sys.len() {
            let p = sys.positions[a];
            let sym = symbol(sys.atomic_numbers[a]).map_or_else(|| sys.atomic_numbers[a].to_string(), str::to_string);
            let _ = write!(out, "{sym} {:?} {:?} {:?}", p[0], p[1], p[2]);
            if let Some(q) = &sys.charges {
                let _ = write!(out, " {:?}", q[a]);
            }
            if let Some(f) = &sys.forces {
                let _ = write!(out, " {:?} {:?} {:?}", f[a][0], f[a][1], f[a][2]);
            }
            out.push('\n');
        }
    }
    out
}

//! Plain-text dataset bundles.
//!
//! ```text
//! incfsl-dataset 1
//! # free-form comment lines start with '#'
//! input_dim 3
//! base_classes 1 2
//! novel_classes 3 4 5 6
//! split base_train 2
//! 1 0.5 -1 2
//! 2 0.25 0 1e-3
//! split base_val 0
//! ...
//! ```
//!
//! Every split appears once, in any order, followed by exactly `count`
//! example lines of `label x_1 .. x_d`. Floats are written in shortest
//! round-trip form, so save/load is lossless.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{validate_bundle, ClassId, DatasetBundle, LabeledExample, SplitName};

pub const MAGIC: &str = "incfsl-dataset";
pub const VERSION: u32 = 1;

/// Renders a bundle. `comments` are written as `#` lines after the magic line.
pub fn render_bundle(bundle: &DatasetBundle, comments: &[String]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    let _ = writeln!(out, "input_dim {}", bundle.input_dim);
    let join = |s: &BTreeSet<ClassId>| s.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
    let _ = writeln!(out, "base_classes {}", join(&bundle.base_classes));
    let _ = writeln!(out, "novel_classes {}", join(&bundle.novel_classes));
    for name in SplitName::ALL {
        let split = bundle.split(name);
        let _ = writeln!(out, "split {} {}", name.as_str(), split.len());
        for e in split {
            let _ = write!(out, "{}", e.label);
            for x in &e.input {
                let _ = write!(out, " {x}");
            }
            out.push('\n');
        }
    }
    out
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("line {line}: {msg}"))
}

fn parse_classes<'a>(line: usize, parts: impl Iterator<Item = &'a str>) -> Result<BTreeSet<ClassId>> {
    parts.map(|p| p.parse::<ClassId>().map_err(|e| bad(line, e))).collect()
}

/// Parses and validates a bundle.
pub fn parse_bundle(text: &str) -> Result<DatasetBundle> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (n, magic) = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))?;
    if magic != format!("{MAGIC} {VERSION}") {
        return Err(bad(n, format!("expected '{MAGIC} {VERSION}'")));
    }
    let mut bundle = DatasetBundle {
        input_dim: 0,
        base_train: Vec::new(),
        base_val: Vec::new(),
        base_test: Vec::new(),
        novel_train: Vec::new(),
        novel_val: Vec::new(),
        novel_test: Vec::new(),
        base_classes: BTreeSet::new(),
        novel_classes: BTreeSet::new(),
    };
    let mut dim = None;
    let mut seen = BTreeSet::new();
    while let Some((n, line)) = lines.next() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("input_dim") => {
                let d = parts.next().ok_or_else(|| bad(n, "missing dimension"))?;
                dim = Some(d.parse::<usize>().map_err(|e| bad(n, e))?);
                bundle.input_dim = dim.unwrap_or(0);
            }
            Some("base_classes") => bundle.base_classes = parse_classes(n, parts)?,
            Some("novel_classes") => bundle.novel_classes = parse_classes(n, parts)?,
            Some("split") => {
                let d = dim.ok_or_else(|| bad(n, "split before input_dim"))?;
                let name = parts.next().ok_or_else(|| bad(n, "missing split name"))?;
                let split = SplitName::parse(name).ok_or_else(|| bad(n, format!("unknown split {name}")))?;
                if !seen.insert(split) {
                    return Err(bad(n, format!("split {name} repeated")));
                }
                let count: usize = parts
                    .next()
                    .ok_or_else(|| bad(n, "missing count"))?
                    .parse()
                    .map_err(|e| bad(n, e))?;
                let target = bundle.split_mut(split);
                for _ in 0..count {
                    let (n, row) = lines.next().ok_or_else(|| bad(n, format!("split {name} is truncated")))?;
                    let mut fields = row.split_whitespace();
                    let label: ClassId = fields
                        .next()
                        .ok_or_else(|| bad(n, "empty example"))?
                        .parse()
                        .map_err(|e| bad(n, e))?;
                    let input = fields.map(|f| f.parse::<f64>().map_err(|e| bad(n, e))).collect::<Result<Vec<_>>>()?;
                    if input.len() != d {
                        return Err(bad(n, format!("expected {d} features, found {}", input.len())));
                    }
                    target.push(LabeledExample::new(input, label));
                }
            }
            Some(other) => return Err(bad(n, format!("unknown directive {other}"))),
            None => {}
        }
    }
    if dim.is_none() {
        return Err(Error::Format("missing input_dim".into()));
    }
    if seen.len() != SplitName::ALL.len() {
        return Err(Error::Format("every split must be present".into()));
    }
    let violations = validate_bundle(&bundle);
    if let Some(v) = violations.first() {
        return Err(Error::Validation(format!("{v} ({} violations)", violations.len())));
    }
    Ok(bundle)
}

pub fn save_bundle(path: &Path, bundle: &DatasetBundle, comments: &[String]) -> Result<()> {
    std::fs::write(path, render_bundle(bundle, comments))?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    parse_bundle(&std::fs::read_to_string(path)?)
}

/// Values of `# key=value` comment lines.
pub fn header_value(text: &str, key: &str) -> Option<String> {
    text.lines()
        .filter_map(|l| l.strip_prefix("# "))
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')).map(str::to_string))
}

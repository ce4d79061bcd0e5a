//! TSPLIB text format, `EUC_2D` subset.

use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::tsp::{MetricMode, TspInstance};

/// Marker written into the COMMENT of files whose lengths are meant to be
/// measured without rounding.
pub const CONTINUOUS_MARKER: &str = "metric=continuous-euclid";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TsplibError {
    #[error("missing DIMENSION header")]
    MissingDimension,
    #[error("missing NODE_COORD_SECTION")]
    MissingCoordSection,
    #[error("unsupported problem TYPE `{0}`")]
    UnsupportedType(String),
    #[error("unsupported EDGE_WEIGHT_TYPE `{0}`")]
    UnsupportedEdgeWeight(String),
    #[error("DIMENSION is {declared} but {found} coordinates were given")]
    DimensionMismatch { declared: usize, found: usize },
    #[error("line {line}: cannot read `{token}` as a number")]
    BadNumber { line: usize, token: String },
    #[error("line {line}: node index {index} is out of range or repeated")]
    BadNodeIndex { line: usize, index: usize },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

/// How to pick the metric when reading a file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MetricChoice {
    /// Rounded unless the COMMENT carries [`CONTINUOUS_MARKER`].
    #[default]
    Auto,
    Continuous,
    Rounded,
}

fn number<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T, TsplibError> {
    tok.parse().map_err(|_| TsplibError::BadNumber { line, token: tok.to_string() })
}

struct Parsed {
    instance: TspInstance,
    comment: Option<String>,
}

fn parse(text: &str) -> Result<Parsed> {
    let mut name = None;
    let mut comment: Option<String> = None;
    let mut dimension = None;
    let mut rows = Vec::new();
    let mut in_coords = false;
    let mut saw_section = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line == "EOF" {
            break;
        }
        if in_coords {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 3 {
                if toks[0].chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
                    in_coords = false;
                } else {
                    return Err(TsplibError::Malformed { line: line_no, msg: "expected `index x y`".into() }.into());
                }
            } else {
                let index: usize = number(toks[0], line_no)?;
                let x: f64 = number(toks[1], line_no)?;
                let y: f64 = number(toks[2], line_no)?;
                rows.push((line_no, index, [x, y]));
                continue;
            }
        }
        if line.starts_with("NODE_COORD_SECTION") {
            in_coords = true;
            saw_section = true;
            continue;
        }
        if line.ends_with("_SECTION") {
            return Err(TsplibError::Malformed { line: line_no, msg: format!("unsupported section {line}") }.into());
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(TsplibError::Malformed { line: line_no, msg: "expected `KEY : value`".into() }.into());
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "NAME" => name = Some(value.to_string()),
            "COMMENT" => {
                comment = Some(match comment {
                    Some(c) => format!("{c}\n{value}"),
                    None => value.to_string(),
                })
            }
            "TYPE" if value != "TSP" => return Err(TsplibError::UnsupportedType(value.into()).into()),
            "DIMENSION" => dimension = Some(number::<usize>(value, line_no)?),
            "EDGE_WEIGHT_TYPE" if value != "EUC_2D" => {
                return Err(TsplibError::UnsupportedEdgeWeight(value.into()).into())
            }
            _ => {}
        }
    }
    let declared = dimension.ok_or(TsplibError::MissingDimension)?;
    if !saw_section {
        return Err(TsplibError::MissingCoordSection.into());
    }
    if rows.len() != declared {
        return Err(TsplibError::DimensionMismatch { declared, found: rows.len() }.into());
    }
    let mut coords = vec![None; declared];
    for (line, index, p) in rows {
        if index == 0 || index > declared || coords[index - 1].is_some() {
            return Err(TsplibError::BadNodeIndex { line, index }.into());
        }
        coords[index - 1] = Some(p);
    }
    let points = coords.into_iter().map(|c| c.expect("all present")).collect();
    let instance = TspInstance::new(name.unwrap_or_else(|| "unnamed".into()), points, MetricMode::TsplibRoundedEuclid)?;
    Ok(Parsed { instance, comment })
}

/// Reads an `EUC_2D` file; node `i` of the file becomes index `i − 1` and
/// lengths use TSPLIB rounding.
pub fn parse_tsplib(text: &str) -> Result<TspInstance> {
    Ok(parse(text)?.instance)
}

/// Writes coordinates with shortest round-trip formatting, so parsing the
/// output gives back the same bits.
pub fn serialize_tsplib(inst: &TspInstance) -> String {
    let mut out = format!("NAME : {}\nTYPE : TSP\n", inst.name());
    if inst.metric() == MetricMode::ContinuousEuclid {
        out.push_str(&format!("COMMENT : {CONTINUOUS_MARKER}\n"));
    }
    out.push_str(&format!("DIMENSION : {}\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n", inst.len()));
    for (i, p) in inst.coords().iter().enumerate() {
        out.push_str(&format!("{} {:?} {:?}\n", i + 1, p[0], p[1]));
    }
    out.push_str("EOF\n");
    out
}

pub fn read_instance(path: &Path, metric: MetricChoice) -> Result<TspInstance> {
    let text = fs::read_to_string(path)?;
    let parsed = parse(&text)?;
    let continuous = match metric {
        MetricChoice::Continuous => true,
        MetricChoice::Rounded => false,
        MetricChoice::Auto => parsed.comment.is_some_and(|c| c.contains(CONTINUOUS_MARKER)),
    };
    Ok(if continuous { parsed.instance.with_metric(MetricMode::ContinuousEuclid) } else { parsed.instance })
}

pub fn write_instance(inst: &TspInstance, path: &Path) -> Result<()> {
    fs::write(path, serialize_tsplib(inst))?;
    Ok(())
}

//! TSPLIB `.tsp` reader and `.tour` writer for EUC_2D instances.
//!
//! Lengths reported against published optima use the TSPLIB convention of
//! rounding every edge to the nearest integer before summing.

use log::warn;

use crate::error::{Error, Result};
use crate::instance::{validate_tour, Instance, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeWeightType {
    Euc2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsplibMeta {
    pub name: String,
    pub dimension: usize,
    pub edge_weight_type: EdgeWeightType,
    pub comment: Option<String>,
}

fn split_keyword(line: &str) -> Option<(String, String)> {
    if let Some((k, v)) = line.split_once(':') {
        return Some((k.trim().to_ascii_uppercase(), v.trim().to_string()));
    }
    let mut parts = line.split_whitespace();
    let key = parts.next()?.to_ascii_uppercase();
    if key.chars().all(|c| c.is_ascii_uppercase() || c == '_') {
        Some((key, parts.collect::<Vec<_>>().join(" ")))
    } else {
        None
    }
}

/// Parses a TSPLIB `.tsp` file, returning coordinates in their original scale.
pub fn parse_tsplib(text: &str) -> Result<(Instance, TsplibMeta)> {
    let mut name = None;
    let mut comment = None;
    let mut dimension: Option<usize> = None;
    let mut edge_type = None;
    let mut coords: Vec<(usize, Point, usize)> = Vec::new();
    let mut in_coords = false;
    let mut saw_section = false;
    let mut saw_eof = false;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if in_coords {
            let mut fields = line.split_whitespace();
            let first = fields.next().unwrap();
            if let Ok(id) = first.parse::<usize>() {
                let mut num = |what: &str| -> Result<f64> {
                    fields
                        .next()
                        .ok_or_else(|| Error::Parse {
                            line: lineno,
                            msg: format!("missing {what} coordinate"),
                        })?
                        .parse::<f64>()
                        .map_err(|e| Error::Parse {
                            line: lineno,
                            msg: format!("bad {what} coordinate: {e}"),
                        })
                };
                let x = num("x")?;
                let y = num("y")?;
                coords.push((id, [x, y], lineno));
                continue;
            }
            in_coords = false;
        }
        let upper = line.to_ascii_uppercase();
        if upper == "EOF" {
            saw_eof = true;
            break;
        }
        if upper.starts_with("NODE_COORD_SECTION") {
            in_coords = true;
            saw_section = true;
            continue;
        }
        if upper.starts_with("EDGE_WEIGHT_SECTION") || upper.starts_with("DISPLAY_DATA_SECTION") {
            return Err(Error::Unsupported(format!(
                "section {} (line {lineno}) is not supported",
                line.split_whitespace().next().unwrap_or(line)
            )));
        }
        let Some((key, value)) = split_keyword(line) else {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("unrecognized line `{line}`"),
            });
        };
        match key.as_str() {
            "NAME" => name = Some(value),
            "COMMENT" => {
                comment = Some(match comment.take() {
                    Some(prev) => format!("{prev} {value}"),
                    None => value,
                })
            }
            "TYPE" => {
                if !value.eq_ignore_ascii_case("TSP") {
                    return Err(Error::Unsupported(format!("problem type {value}")));
                }
            }
            "DIMENSION" => {
                dimension = Some(value.parse().map_err(|e| Error::Parse {
                    line: lineno,
                    msg: format!("bad DIMENSION `{value}`: {e}"),
                })?)
            }
            "EDGE_WEIGHT_TYPE" => {
                if value.eq_ignore_ascii_case("EUC_2D") {
                    edge_type = Some(EdgeWeightType::Euc2d);
                } else {
                    return Err(Error::Unsupported(format!("EDGE_WEIGHT_TYPE {value}")));
                }
            }
            _ => warn!("ignoring TSPLIB keyword {key} on line {lineno}"),
        }
    }

    if !saw_section {
        warn!("no NODE_COORD_SECTION keyword found");
    }
    if !saw_eof {
        warn!("TSPLIB input ends without EOF");
    }
    let edge_weight_type = edge_type.unwrap_or_else(|| {
        warn!("EDGE_WEIGHT_TYPE missing, assuming EUC_2D");
        EdgeWeightType::Euc2d
    });
    let dimension = match dimension {
        Some(d) => d,
        None => {
            warn!("DIMENSION missing, using the {} parsed nodes", coords.len());
            coords.len()
        }
    };
    if coords.len() != dimension {
        return Err(Error::Parse {
            line: last_line,
            msg: format!(
                "DIMENSION is {dimension} but {} coordinate lines were read",
                coords.len()
            ),
        });
    }

    let mut points = vec![None; dimension];
    for &(id, p, lineno) in &coords {
        if id == 0 || id > dimension {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("node id {id} outside 1..={dimension}"),
            });
        }
        if points[id - 1].replace(p).is_some() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("node id {id} repeated"),
            });
        }
    }
    let points: Vec<Point> = points.into_iter().map(|p| p.unwrap()).collect();
    let name = name.unwrap_or_else(|| {
        warn!("NAME missing");
        String::from("unnamed")
    });
    let instance = Instance::new(points)?.with_name(name.clone());
    Ok((
        instance,
        TsplibMeta {
            name,
            dimension,
            edge_weight_type,
            comment,
        },
    ))
}

/// Euclidean distance rounded to the nearest integer, halves away from zero.
pub fn rounded_distance(a: Point, b: Point) -> i64 {
    crate::instance::distance(a, b).round() as i64
}

/// Closed tour length under the rounded-distance convention.
pub fn tsplib_tour_length(instance: &Instance, order: &[usize]) -> Result<i64> {
    validate_tour(instance, order)?;
    let c = instance.coords();
    let n = order.len();
    Ok((0..n)
        .map(|k| rounded_distance(c[order[k]], c[order[(k + 1) % n]]))
        .sum())
}

/// Renders a TSPLIB `.tour` file with 1-based node ids.
pub fn write_tour(meta: &TsplibMeta, order: &[usize]) -> String {
    let mut out = format!(
        "NAME : {}.tour\nTYPE : TOUR\nDIMENSION : {}\nTOUR_SECTION\n",
        meta.name,
        order.len()
    );
    for &i in order {
        out.push_str(&format!("{}\n", i + 1));
    }
    out.push_str("-1\nEOF\n");
    out
}

/// Reads the TOUR_SECTION of a `.tour` file back into a 0-based order.
pub fn parse_tour(text: &str) -> Result<Vec<usize>> {
    let mut order = Vec::new();
    let mut in_section = false;
    let mut dimension = None;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if !in_section {
            let upper = line.to_ascii_uppercase();
            if upper.starts_with("TOUR_SECTION") {
                in_section = true;
            } else if let Some(("DIMENSION", v)) = split_keyword(line)
                .as_ref()
                .map(|(k, v)| (k.as_str(), v.as_str()))
            {
                dimension = v.parse::<usize>().ok();
            }
            continue;
        }
        for tok in line.split_whitespace() {
            let id: i64 = tok.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad tour entry `{tok}`"),
            })?;
            if id == -1 {
                return finish_tour(order, dimension, lineno);
            }
            if id < 1 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("tour entry {id} is not a 1-based node id"),
                });
            }
            order.push(id as usize - 1);
        }
    }
    Err(Error::Parse {
        line: text.lines().count(),
        msg: "TOUR_SECTION not terminated by -1".into(),
    })
}

fn finish_tour(order: Vec<usize>, dimension: Option<usize>, line: usize) -> Result<Vec<usize>> {
    if let Some(d) = dimension {
        if d != order.len() {
            return Err(Error::Parse {
                line,
                msg: format!("tour has {} entries, DIMENSION is {d}", order.len()),
            });
        }
    }
    crate::instance::validate_permutation(order.len(), &order)?;
    Ok(order)
}

//! Line-oriented network file format.
//!
//! Values on disk are SI (ohms, kV, kVA, kVar) and are converted to per-unit
//! on load using the bases declared in the file header. Layout:
//!
//! ```text
//! # comment
//! s_base_kva = 400
//! v_base_kv = 0.4
//! v0_kv = 0.4
//! v_min_kv = 0.38
//! v_max_kv = 0.42
//! BUSES
//! 0
//! 1
//! CABLES
//! 0,1,0.16,0.16          # from,to,r_ohm,x_ohm
//! DERS
//! 1,-20,20,1.0           # bus,q_min_kvar,q_max_kvar,cost
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{BusId, Cable, DerSpec, RadialNetwork};

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn parse_f64(path: &Path, line: usize, field: &str, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("invalid {field} value '{}'", s.trim())))
}

fn parse_usize(path: &Path, line: usize, field: &str, s: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| parse_err(path, line, format!("invalid {field} value '{}'", s.trim())))
}

#[derive(PartialEq, Clone, Copy)]
enum Section {
    Header,
    Buses,
    Cables,
    Ders,
}

/// Loads a network file, converting SI values to per-unit.
pub fn load_network(path: impl AsRef<Path>) -> Result<RadialNetwork> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("reading {}", path.display()), e))?;

    let mut header: BTreeMap<String, f64> = BTreeMap::new();
    let mut buses: Vec<BusId> = Vec::new();
    let mut cables: Vec<Cable> = Vec::new();
    let mut ders_raw: Vec<(usize, f64, f64, f64, usize)> = Vec::new();
    let mut section = Section::Header;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "BUSES" => {
                section = Section::Buses;
                continue;
            }
            "CABLES" => {
                section = Section::Cables;
                continue;
            }
            "DERS" => {
                section = Section::Ders;
                continue;
            }
            _ => {}
        }
        match section {
            Section::Header => {
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| parse_err(path, lineno, "expected 'key = value'"))?;
                let v = parse_f64(path, lineno, key.trim(), value)?;
                header.insert(key.trim().to_string(), v);
            }
            Section::Buses => {
                let id = parse_usize(path, lineno, "bus id", line)?;
                if buses.iter().any(|b| b.0 == id) {
                    return Err(parse_err(path, lineno, format!("duplicate bus id {id}")));
                }
                buses.push(BusId(id));
            }
            Section::Cables => {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 4 {
                    return Err(parse_err(
                        path,
                        lineno,
                        "expected 4 fields: from,to,r_ohm,x_ohm",
                    ));
                }
                cables.push(Cable {
                    from: BusId(parse_usize(path, lineno, "from", fields[0])?),
                    to: BusId(parse_usize(path, lineno, "to", fields[1])?),
                    resistance: parse_f64(path, lineno, "r_ohm", fields[2])?,
                    reactance: parse_f64(path, lineno, "x_ohm", fields[3])?,
                });
            }
            Section::Ders => {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 4 {
                    return Err(parse_err(
                        path,
                        lineno,
                        "expected 4 fields: bus,q_min_kvar,q_max_kvar,cost",
                    ));
                }
                ders_raw.push((
                    parse_usize(path, lineno, "bus", fields[0])?,
                    parse_f64(path, lineno, "q_min_kvar", fields[1])?,
                    parse_f64(path, lineno, "q_max_kvar", fields[2])?,
                    parse_f64(path, lineno, "cost", fields[3])?,
                    lineno,
                ));
            }
        }
    }

    let require = |key: &str, what: &str| -> Result<f64> {
        header
            .get(key)
            .copied()
            .ok_or_else(|| parse_err(path, 0, format!("missing {what} ({key})")))
    };
    let s_base = require("s_base_kva", "power base")?;
    let v_base = require("v_base_kv", "voltage base")?;
    let v0_kv = require("v0_kv", "slack voltage")?;
    let v_min_kv = require("v_min_kv", "lower voltage limit")?;
    let v_max_kv = require("v_max_kv", "upper voltage limit")?;
    if s_base <= 0.0 || v_base <= 0.0 {
        return Err(parse_err(path, 0, "bases must be positive"));
    }
    let z_base = 1000.0 * v_base * v_base / s_base;

    let mut ders = BTreeMap::new();
    for (bus, q_min, q_max, cost, lineno) in ders_raw {
        if ders
            .insert(
                BusId(bus),
                DerSpec {
                    bus: BusId(bus),
                    q_min: q_min / s_base,
                    q_max: q_max / s_base,
                    cost,
                },
            )
            .is_some()
        {
            return Err(parse_err(path, lineno, format!("duplicate DER for bus {bus}")));
        }
    }

    Ok(RadialNetwork {
        buses,
        cables: cables
            .into_iter()
            .map(|c| Cable {
                resistance: c.resistance / z_base,
                reactance: c.reactance / z_base,
                ..c
            })
            .collect(),
        ders,
        v0: v0_kv / v_base,
        v_min: v_min_kv / v_base,
        v_max: v_max_kv / v_base,
        s_base,
        v_base,
    })
}

/// Saves a network file, converting per-unit values back to SI.
pub fn save_network(net: &RadialNetwork, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let z_base = net.z_base();
    let mut out = String::new();
    out.push_str("# voltlab network file (SI units)\n");
    writeln!(out, "s_base_kva = {}", net.s_base).unwrap();
    writeln!(out, "v_base_kv = {}", net.v_base).unwrap();
    writeln!(out, "v0_kv = {}", net.v0 * net.v_base).unwrap();
    writeln!(out, "v_min_kv = {}", net.v_min * net.v_base).unwrap();
    writeln!(out, "v_max_kv = {}", net.v_max * net.v_base).unwrap();
    out.push_str("BUSES\n");
    for b in &net.buses {
        writeln!(out, "{}", b.0).unwrap();
    }
    out.push_str("CABLES\n# from,to,r_ohm,x_ohm\n");
    for c in &net.cables {
        writeln!(
            out,
            "{},{},{},{}",
            c.from.0,
            c.to.0,
            c.resistance * z_base,
            c.reactance * z_base
        )
        .unwrap();
    }
    out.push_str("DERS\n# bus,q_min_kvar,q_max_kvar,cost\n");
    for d in net.ders.values() {
        writeln!(
            out,
            "{},{},{},{}",
            d.bus.0,
            d.q_min * net.s_base,
            d.q_max * net.s_base,
            d.cost
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::Io(format!("writing {}", path.display()), e))
}

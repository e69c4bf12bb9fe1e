//! File formats: trajectory CSVs and JSON artifacts.
//!
//! Trajectory CSVs have the header `t,r,q1,q2,q3,wx,wy,wz,ax,ay,az`,
//! optionally followed by sensor columns `s1..sS` and tool positions
//! `px,py,pz`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dmp::Rollout;
use crate::error::{Error, Result};
use crate::quat::{UnitQuaternion, Vec3};

const BASE: [&str; 11] = ["t", "r", "q1", "q2", "q3", "wx", "wy", "wz", "ax", "ay", "az"];
const POSITION: [&str; 3] = ["px", "py", "pz"];

/// A trajectory file's contents.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub rollout: Rollout,
    /// `T × 3` tool positions, when recorded.
    pub positions: Option<DMatrix<f64>>,
}

pub fn write_trajectory(path: &Path, roll: &Rollout, positions: Option<&DMatrix<f64>>) -> Result<()> {
    roll.validate()?;
    if let Some(p) = positions {
        if p.nrows() != roll.len() || p.ncols() != 3 {
            return Err(Error::shape("positions must be T × 3"));
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    let s = if roll.has_sensors() { roll.sensor_dim() } else { 0 };
    let mut header: Vec<String> = BASE.iter().map(|h| h.to_string()).collect();
    header.extend((1..=s).map(|j| format!("s{j}")));
    if positions.is_some() {
        header.extend(POSITION.iter().map(|h| h.to_string()));
    }
    w.write_record(&header).map_err(|e| Error::file(path, e))?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..roll.len() {
        row.clear();
        let q = roll.orientations[i].to_array();
        let vals = [roll.times[i]]
            .into_iter()
            .chain(q)
            .chain(roll.omega[i].iter().copied())
            .chain(roll.omegadot[i].iter().copied());
        row.extend(vals.map(|v| v.to_string()));
        for j in 0..s {
            row.push(roll.sensors[(i, j)].to_string());
        }
        if let Some(p) = positions {
            row.extend(p.row(i).iter().map(|v| v.to_string()));
        }
        w.write_record(&row).map_err(|e| Error::file(path, e))?;
    }
    w.flush().map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let bad = |reason: String| Error::file(path, reason);
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::file(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::file(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.len() < BASE.len() || header[..BASE.len()] != BASE {
        return Err(bad(format!("header must start with {}", BASE.join(","))));
    }
    let rest = &header[BASE.len()..];
    let s = rest.iter().take_while(|h| h.starts_with('s')).count();
    for (j, h) in rest[..s].iter().enumerate() {
        if *h != format!("s{}", j + 1) {
            return Err(bad(format!("unexpected sensor column {h}")));
        }
    }
    let tail = &rest[s..];
    let has_pos = match tail.len() {
        0 => false,
        3 if tail == POSITION => true,
        _ => return Err(bad(format!("unexpected columns {}", tail.join(",")))),
    };

    let mut roll = Rollout::with_capacity(0, s);
    let mut sensors = Vec::new();
    let mut pos = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::file(path, e))?;
        if rec.len() != header.len() {
            return Err(bad(format!("row {} has {} fields, expected {}", line + 1, rec.len(), header.len())));
        }
        let vals = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| bad(format!("row {}: {e}", line + 1)))?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("row {}: non-finite value", line + 1)));
        }
        roll.times.push(vals[0]);
        let q = UnitQuaternion::from_array([vals[1], vals[2], vals[3], vals[4]])
            .map_err(|e| bad(format!("row {}: {e}", line + 1)))?;
        roll.orientations.push(q);
        roll.omega.push(Vec3::new(vals[5], vals[6], vals[7]));
        roll.omegadot.push(Vec3::new(vals[8], vals[9], vals[10]));
        sensors.extend_from_slice(&vals[11..11 + s]);
        if has_pos {
            pos.extend_from_slice(&vals[11 + s..]);
        }
    }
    let t = roll.times.len();
    if s > 0 {
        roll.sensors = DMatrix::from_row_slice(t, s, &sensors);
    }
    roll.validate().map_err(|e| bad(e.to_string()))?;
    Ok(Trajectory {
        rollout: roll,
        positions: has_pos.then(|| DMatrix::from_row_slice(t, 3, &pos)),
    })
}

/// `.csv` files of a directory, sorted by name.
pub fn list_trajectories(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::file(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::file(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "csv") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::file(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::file(path, e))
}

/// Reads an artifact produced by an earlier pipeline phase, naming that
/// phase when the file does not exist.
pub fn read_artifact<T: DeserializeOwned>(path: &Path, phase: &'static str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            phase,
        });
    }
    read_json(path)
}

//! Point-cloud file formats: xyz, ASCII PLY, and OFF. Writers emit text
//! with shortest-round-trip floats, so write → load is exact for f32.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    PlyAscii,
    Off,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("xyz") | Some("txt") => Ok(CloudFormat::Xyz),
            Some("ply") => Ok(CloudFormat::PlyAscii),
            Some("off") => Ok(CloudFormat::Off),
            other => Err(Error::config(format!(
                "unrecognized point cloud extension {other:?} for {}",
                path.display()
            ))),
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_point(path: &Path, lineno: usize, line: &str) -> Result<[f32; 3]> {
    let mut it = line.split_whitespace();
    let mut p = [0.0f32; 3];
    for (k, v) in p.iter_mut().enumerate() {
        let tok = it
            .next()
            .ok_or_else(|| parse_err(path, lineno, format!("expected 3 coordinates, got {k}")))?;
        *v = tok
            .parse::<f32>()
            .map_err(|e| parse_err(path, lineno, format!("bad coordinate {tok:?}: {e}")))?;
    }
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidData {
            path: path.display().to_string(),
            msg: format!("non-finite coordinates on line {lineno}"),
        });
    }
    Ok(p)
}

fn load_xyz(path: &Path, text: &str) -> Result<Vec<[f32; 3]>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        points.push(parse_point(path, i + 1, line)?);
    }
    Ok(points)
}

fn load_ply(path: &Path, text: &str) -> Result<Vec<[f32; 3]>> {
    let mut lines = text.lines().enumerate();
    let (_, magic) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    if magic.trim() != "ply" {
        return Err(parse_err(path, 1, "missing 'ply' magic"));
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex_element = false;
    let mut coord_cols: [Option<usize>; 3] = [None; 3];
    let mut prop_idx = 0usize;
    let mut header_end = 0usize;
    for (i, raw) in lines.by_ref() {
        let line = raw.trim();
        if line == "end_header" {
            header_end = i + 1;
            break;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(parse_err(path, i + 1, "only ascii PLY is supported"));
                }
            }
            Some("element") => {
                let name = tok.next().unwrap_or("");
                in_vertex_element = name == "vertex";
                if in_vertex_element {
                    let n = tok
                        .next()
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| parse_err(path, i + 1, "bad vertex count"))?;
                    vertex_count = Some(n);
                    prop_idx = 0;
                }
            }
            Some("property") if in_vertex_element => {
                let _ty = tok.next();
                match tok.next() {
                    Some("x") => coord_cols[0] = Some(prop_idx),
                    Some("y") => coord_cols[1] = Some(prop_idx),
                    Some("z") => coord_cols[2] = Some(prop_idx),
                    _ => {}
                }
                prop_idx += 1;
            }
            _ => {}
        }
    }
    let count =
        vertex_count.ok_or_else(|| parse_err(path, header_end, "no vertex element in header"))?;
    let cols = match coord_cols {
        [Some(x), Some(y), Some(z)] => [x, y, z],
        _ => return Err(parse_err(path, header_end, "missing x/y/z properties")),
    };

    let mut points = Vec::with_capacity(count);
    for (i, raw) in lines {
        if points.len() == count {
            break; // ignore trailing elements (faces etc.)
        }
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let mut p = [0.0f32; 3];
        for (k, &col) in cols.iter().enumerate() {
            let tok = fields.get(col).ok_or_else(|| {
                parse_err(path, i + 1, format!("vertex row has {} fields", fields.len()))
            })?;
            p[k] = tok
                .parse::<f32>()
                .map_err(|e| parse_err(path, i + 1, format!("bad coordinate {tok:?}: {e}")))?;
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidData {
                path: path.display().to_string(),
                msg: format!("non-finite vertex on line {}", i + 1),
            });
        }
        points.push(p);
    }
    if points.len() != count {
        return Err(Error::InvalidData {
            path: path.display().to_string(),
            msg: format!("header promised {count} vertices, file has {}", points.len()),
        });
    }
    Ok(points)
}

fn load_off(path: &Path, text: &str) -> Result<Vec<[f32; 3]>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let (first_no, first) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let first = first.trim();
    // counts may share the OFF line ("OFF 8 6 0") or follow on the next
    let counts_str = if let Some(rest) = first.strip_prefix("OFF") {
        let rest = rest.trim();
        if rest.is_empty() {
            let (_, l) = lines
                .next()
                .ok_or_else(|| parse_err(path, first_no + 1, "missing count line"))?;
            l.trim().to_string()
        } else {
            rest.to_string()
        }
    } else {
        return Err(parse_err(path, first_no + 1, "missing OFF magic"));
    };
    let counts: Vec<usize> = counts_str
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(path, first_no + 1, format!("bad count row: {e}")))?;
    let &nv = counts
        .first()
        .ok_or_else(|| parse_err(path, first_no + 1, "empty count row"))?;

    let mut points = Vec::with_capacity(nv);
    for (i, raw) in lines {
        if points.len() == nv {
            break; // faces follow; ignored
        }
        points.push(parse_point(path, i + 1, raw.trim())?);
    }
    if points.len() != nv {
        return Err(Error::InvalidData {
            path: path.display().to_string(),
            msg: format!("header promised {nv} vertices, file has {}", points.len()),
        });
    }
    Ok(points)
}

/// Read a cloud; the format comes from the extension unless given.
pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    load_cloud_as(path, CloudFormat::from_path(path)?)
}

pub fn load_cloud_as(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let points = match format {
        CloudFormat::Xyz => load_xyz(path, &text)?,
        CloudFormat::PlyAscii => load_ply(path, &text)?,
        CloudFormat::Off => load_off(path, &text)?,
    };
    if points.is_empty() {
        return Err(Error::InvalidData {
            path: path.display().to_string(),
            msg: "no points".into(),
        });
    }
    PointCloud::new(points)
}

/// Write a cloud; ASCII everywhere for diffability.
pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    match format {
        CloudFormat::Xyz => {
            for p in cloud.points() {
                out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
            }
        }
        CloudFormat::PlyAscii => {
            out.push_str("ply\nformat ascii 1.0\n");
            out.push_str(&format!("element vertex {}\n", cloud.len()));
            out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
            for p in cloud.points() {
                out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
            }
        }
        CloudFormat::Off => {
            out.push_str(&format!("OFF\n{} 0 0\n", cloud.len()));
            for p in cloud.points() {
                out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
            }
        }
    }
    let mut f =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

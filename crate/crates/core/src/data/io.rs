//! Point-cloud files.
//!
//! Binary layout: a 16-byte header (magic `PCF1`, little-endian `u32`
//! point count, eight zero bytes), then `x y z` as little-endian `f32` per
//! point.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud, Provenance};

pub const MAGIC: &[u8; 4] = b"PCF1";
const HEADER: usize = 16;

/// Serialize points to the binary format. Coordinates are rounded to
/// `f32`.
pub fn encode_pcf(points: &[Point]) -> Result<Vec<u8>> {
    let n = u32::try_from(points.len()).map_err(|_| Error::arg("too many points for a PCF1 file"))?;
    let mut out = Vec::with_capacity(HEADER + 12 * points.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&[0; 8]);
    for p in points {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pcf(bytes: &[u8], path: &Path) -> Result<Vec<Point>> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing PCF1 header"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[HEADER..];
    if body.len() != 12 * n {
        return Err(Error::format(
            path,
            format!("header declares {n} points but the body holds {} bytes", body.len()),
        ));
    }
    let points: Vec<Point> = body
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            [f(0), f(1), f(2)]
        })
        .collect();
    if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::format(path, format!("point {i} is not finite")));
    }
    Ok(points)
}

/// Write `bytes` to a temporary file next to `path`, then rename it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_pcf(path: &Path, points: &[Point]) -> Result<()> {
    write_atomic(path, &encode_pcf(points)?)
}

pub fn read_pcf(path: &Path, provenance: Provenance) -> Result<PointCloud> {
    let points = decode_pcf(&read_bytes(path)?, path)?;
    PointCloud::new(points, provenance).map_err(|e| Error::format(path, e.to_string()))
}

/// Whitespace-separated `x y z` per line. Blank lines and lines starting
/// with `#` are skipped.
pub fn parse_ascii(text: &str, path: &Path) -> Result<Vec<Point>> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        match vals[..] {
            [x, y, z] if vals.iter().all(|v| v.is_finite()) => points.push([x, y, z]),
            _ => {
                return Err(Error::format(
                    path,
                    format!("line {}: expected three finite numbers", lineno + 1),
                ))
            }
        }
    }
    Ok(points)
}

pub fn read_ascii(path: &Path, provenance: Provenance) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let points = parse_ascii(&text, path)?;
    PointCloud::new(points, provenance).map_err(|e| Error::format(path, e.to_string()))
}

/// Read either format, by magic bytes.
pub fn read_cloud(path: &Path, provenance: Provenance) -> Result<PointCloud> {
    let bytes = read_bytes(path)?;
    let points = if bytes.starts_with(MAGIC) {
        decode_pcf(&bytes, path)?
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(path, "neither PCF1 nor text"))?;
        parse_ascii(text, path)?
    };
    PointCloud::new(points, provenance).map_err(|e| Error::format(path, e.to_string()))
}

/// `x,y,z` rows with a header, for plotting tools.
pub fn points_csv(points: &[Point]) -> String {
    let mut out = String::from("x,y,z\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p[0], p[1], p[2]));
    }
    out
}

//! ASCII PLY with `float` coordinates and optional `uchar` colors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use flowkin::PointCloud;

/// Color channel in `[0, 1]` to an 8-bit value.
pub fn quantize(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_ply(cloud: &PointCloud) -> String {
    let colored = cloud.has_color();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", cloud.len()).unwrap();
    for axis in ["x", "y", "z"] {
        writeln!(out, "property float {axis}").unwrap();
    }
    if colored {
        for c in ["red", "green", "blue"] {
            writeln!(out, "property uchar {c}").unwrap();
        }
    }
    out.push_str("end_header\n");
    for p in cloud.points() {
        write!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32).unwrap();
        if colored {
            write!(out, " {} {} {}", quantize(p[3]), quantize(p[4]), quantize(p[5])).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, to_ply(cloud)).with_context(|| format!("writing {}", path.display()))
}

/// Parses the subset of PLY written by [`to_ply`]. Colors come back in `[0, 1]`.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines();
    ensure!(lines.next() == Some("ply"), "missing ply magic");
    ensure!(lines.next() == Some("format ascii 1.0"), "only ascii 1.0 is supported");
    let mut count = None;
    let mut props = Vec::new();
    for line in lines.by_ref() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["element", "vertex", n] => count = Some(n.parse::<usize>()?),
            ["property", _, name] => props.push(name.to_string()),
            ["comment", ..] => {}
            _ => bail!("unsupported header line {line:?}"),
        }
    }
    let count = count.context("header lacks a vertex element")?;
    let dim = match props.join(",").as_str() {
        "x,y,z" => 3,
        "x,y,z,red,green,blue" => 6,
        other => bail!("unsupported properties {other}"),
    };
    let mut data = Vec::with_capacity(count * dim);
    for (i, line) in lines.enumerate() {
        ensure!(i < count, "more vertices than declared");
        let values: Vec<f64> = line
            .split_whitespace()
            // Coordinates are declared `float`, so read them at that width.
            .map(|w| w.parse::<f32>().map(f64::from))
            .collect::<Result<_, _>>()
            .with_context(|| format!("vertex {i}"))?;
        ensure!(values.len() == dim, "vertex {i} has {} values", values.len());
        data.extend(values[..3].iter());
        data.extend(values[3..].iter().map(|c| c / 255.0));
    }
    ensure!(data.len() == count * dim, "fewer vertices than declared");
    Ok(PointCloud::new(dim, data)?)
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    parse_ply(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
}

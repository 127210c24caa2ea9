//! Binary little-endian PLY for oriented point clouds.
//!
//! Written files carry one `vertex` element with float properties
//! `x y z nx ny nz`. The reader also accepts position-only files and
//! `comment`/`obj_info` lines.

use std::fs;
use std::path::Path;

use crate::error::{arg, Error, Result};
use crate::geometry::{Point, PointCloud};

const NORMAL_PROPS: [&str; 6] = ["x", "y", "z", "nx", "ny", "nz"];

pub fn encode_ply(cloud: &PointCloud) -> Result<Vec<u8>> {
    let normals = cloud.require_normals()?;
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n{}end_header\n",
        cloud.len(),
        NORMAL_PROPS.iter().map(|p| format!("property float {p}\n")).collect::<String>()
    )
    .into_bytes();
    out.reserve(cloud.len() * 24);
    for (p, n) in cloud.positions().iter().zip(normals) {
        for v in p.iter().chain(n) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ply(cloud)?)?;
    Ok(())
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    decode_ply(&fs::read(path)?)
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

pub fn decode_ply(bytes: &[u8]) -> Result<PointCloud> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let Some(len) = bytes[start..].iter().position(|&b| b == b'\n') else {
            return Err(parse_err(start, "unterminated header line"));
        };
        *pos = start + len + 1;
        let line = std::str::from_utf8(&bytes[start..start + len])
            .map_err(|_| parse_err(start, "header is not ASCII"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (at, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(parse_err(at, "missing 'ply' magic"));
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut format_seen = false;
    loop {
        let (at, line) = next_line(&mut pos)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "binary_little_endian", "1.0"] => format_seen = true,
            ["format", other, ..] => return Err(parse_err(at, format!("unsupported format '{other}'"))),
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(parse_err(at, "duplicate vertex element"));
                }
                count = Some(n.parse().map_err(|_| parse_err(at, format!("bad vertex count '{n}'")))?);
            }
            ["element", name, _] => return Err(parse_err(at, format!("unsupported element '{name}'"))),
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(parse_err(at, "property before any element"));
                }
                if *ty != "float" && *ty != "float32" {
                    return Err(parse_err(at, format!("property '{name}' has unsupported type '{ty}'")));
                }
                props.push((*name).to_string());
            }
            _ => return Err(parse_err(at, format!("unrecognized header line '{line}'"))),
        }
    }
    if !format_seen {
        return Err(parse_err(0, "header lacks 'format binary_little_endian 1.0'"));
    }
    let Some(n) = count else {
        return Err(parse_err(pos, "header has no vertex element"));
    };
    let with_normals = props == NORMAL_PROPS;
    if !with_normals && props != NORMAL_PROPS[..3] {
        return Err(parse_err(pos, format!("vertex properties must be x y z [nx ny nz], got {props:?}")));
    }
    if n == 0 {
        return Err(arg("PLY vertex element is empty"));
    }
    let stride = props.len() * 4;
    let needed = n * stride;
    let available = bytes.len() - pos;
    if available < needed {
        return Err(parse_err(bytes.len(), format!("truncated payload: {needed} bytes expected, {available} present")));
    }
    if available > needed {
        return Err(parse_err(pos + needed, format!("{} trailing bytes after vertex data", available - needed)));
    }
    let floats: Vec<f32> = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut positions: Vec<Point> = Vec::with_capacity(n);
    let mut normals: Vec<Point> = Vec::with_capacity(n);
    for row in floats.chunks_exact(props.len()) {
        positions.push([row[0], row[1], row[2]]);
        if with_normals {
            normals.push([row[3], row[4], row[5]]);
        }
    }
    if with_normals {
        PointCloud::with_normals(positions, normals)
    } else {
        PointCloud::new(positions)
    }
}

//! Binary little-endian PLY interchange in the layout written by 3DGS trainers.
//!
//! Files store raw parameters (opacity logits, log-scales, unnormalized
//! quaternions); loading applies the activations and saving inverts them.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::splat::{canonicalize_quaternion, SplatSet, SH_COEFFS};

#[derive(Clone, Copy, Debug)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn read(self, r: &mut impl Read) -> std::io::Result<f64> {
        Ok(match self {
            Scalar::I8 => r.read_i8()? as f64,
            Scalar::U8 => r.read_u8()? as f64,
            Scalar::I16 => r.read_i16::<LittleEndian>()? as f64,
            Scalar::U16 => r.read_u16::<LittleEndian>()? as f64,
            Scalar::I32 => r.read_i32::<LittleEndian>()? as f64,
            Scalar::U32 => r.read_u32::<LittleEndian>()? as f64,
            Scalar::F32 => r.read_f32::<LittleEndian>()? as f64,
            Scalar::F64 => r.read_f64::<LittleEndian>()?,
        })
    }
}

struct Header {
    count: usize,
    properties: Vec<(String, Scalar)>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read_header(path: &Path, r: &mut impl BufRead) -> Result<Header> {
    let mut line = String::new();
    let mut next_line = |r: &mut dyn BufRead| -> Result<String> {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(format_err(path, "unexpected end of header"));
        }
        Ok(line.trim_end().to_string())
    };

    if next_line(r)? != "ply" {
        return Err(format_err(path, "missing `ply` magic"));
    }
    let mut count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    let mut format_seen = false;
    loop {
        let l = next_line(r)?;
        let tokens: Vec<&str> = l.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _version] => {
                if *fmt != "binary_little_endian" {
                    return Err(format_err(
                        path,
                        format!("unsupported PLY format `{fmt}`; only binary_little_endian is read"),
                    ));
                }
                format_seen = true;
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, n] => {
                if count.is_some() {
                    // elements after the vertex block are ignored
                    in_vertex = false;
                } else if *name == "vertex" {
                    count = Some(n.parse::<usize>().map_err(|_| {
                        format_err(path, format!("bad vertex count `{n}`"))
                    })?);
                    in_vertex = true;
                } else {
                    return Err(format_err(path, "vertex must be the first element"));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(format_err(path, "list properties are not supported on vertices"));
            }
            ["property", ty, name] => {
                if in_vertex {
                    let scalar = Scalar::parse(ty)
                        .ok_or_else(|| format_err(path, format!("unknown property type `{ty}`")))?;
                    properties.push((name.to_string(), scalar));
                }
            }
            _ => return Err(format_err(path, format!("unrecognized header line `{l}`"))),
        }
    }
    if !format_seen {
        return Err(format_err(path, "missing format line"));
    }
    let count = count.ok_or_else(|| format_err(path, "no vertex element"))?;
    Ok(Header { count, properties })
}

fn property_names() -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z"].map(String::from).to_vec();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..SH_COEFFS - 3).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Reads a 3DGS PLY file and returns activated parameters.
pub fn load_ply(path: impl AsRef<Path>) -> Result<SplatSet> {
    let set = load_ply_unchecked(path)?;
    set.validate()?;
    Ok(set)
}

/// Like [`load_ply`] but skips value-level invariant checks, so the caller
/// can report every [`SplatSet::violations`] entry. Shapes are still exact
/// and NaN after activation is still an error.
pub fn load_ply_unchecked(path: impl AsRef<Path>) -> Result<SplatSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_header(path, &mut r)?;

    let lookup: HashMap<&str, usize> = header
        .properties
        .iter()
        .enumerate()
        .map(|(i, (name, _))| (name.as_str(), i))
        .collect();
    let wanted = property_names();
    let columns = wanted
        .iter()
        .map(|name| {
            lookup
                .get(name.as_str())
                .copied()
                .ok_or_else(|| format_err(path, format!("missing vertex property `{name}`")))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = header.count;
    let mut raw = vec![0.0; header.properties.len()];
    let mut centroids = Array2::zeros((n, 3));
    let mut opacities = Array1::zeros(n);
    let mut scales = Array2::zeros((n, 3));
    let mut rotations = Array2::zeros((n, 4));
    let mut sh = Array2::zeros((n, SH_COEFFS));
    for i in 0..n {
        for (slot, (_, ty)) in raw.iter_mut().zip(&header.properties) {
            *slot = ty.read(&mut r).map_err(|e| {
                format_err(path, format!("truncated vertex data at splat {i}: {e}"))
            })?;
        }
        let mut col = columns.iter().map(|&c| raw[c]);
        for k in 0..3 {
            centroids[[i, k]] = col.next().unwrap();
        }
        for k in 0..SH_COEFFS {
            sh[[i, k]] = col.next().unwrap();
        }
        opacities[i] = sigmoid(col.next().unwrap());
        for k in 0..3 {
            scales[[i, k]] = col.next().unwrap().exp();
        }
        let q = [0, 1, 2, 3].map(|_| col.next().unwrap());
        let q = canonicalize_quaternion(q);
        for k in 0..4 {
            rotations[[i, k]] = q[k];
        }
        let any_nan = centroids.row(i).iter().any(|v| v.is_nan())
            || opacities[i].is_nan()
            || scales.row(i).iter().any(|v| v.is_nan())
            || q.iter().any(|v| v.is_nan())
            || sh.row(i).iter().any(|v| v.is_nan());
        if any_nan {
            return Err(Error::Data {
                index: i,
                msg: format!("NaN after activation in {}", path.display()),
            });
        }
    }
    Ok(SplatSet {
        centroids,
        opacities,
        scales,
        rotations,
        sh,
    })
}

/// Writes a set as binary little-endian PLY with raw (pre-activation) values.
pub fn save_ply(set: &SplatSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", set.len()));
    for name in ["x", "y", "z", "nx", "ny", "nz"] {
        header.push_str(&format!("property float {name}\n"));
    }
    for name in property_names().iter().skip(3) {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(io)?;

    for i in 0..set.len() {
        let mut row: Vec<f64> = Vec::with_capacity(6 + SH_COEFFS + 8);
        row.extend(set.centroids.row(i).iter());
        row.extend([0.0; 3]);
        row.extend(set.sh.row(i).iter());
        let o = set.opacities[i];
        row.push((o / (1.0 - o)).ln());
        row.extend(set.scales.row(i).iter().map(|s| s.ln()));
        row.extend(set.rotations.row(i).iter());
        for v in row {
            w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

//! Procedural splat objects with class and part labels, the manifest that
//! indexes them, and the downsampling front-end.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::fps;
use crate::ply::{load_ply, save_ply};
use crate::seed;
use crate::splat::{canonicalize_quaternion, SplatSet, SH_C0, SH_COEFFS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Sphere,
    Box,
    Cylinder,
    Torus,
    Cone,
}

impl Primitive {
    pub const ALL: [Primitive; 5] = [
        Primitive::Sphere,
        Primitive::Box,
        Primitive::Cylinder,
        Primitive::Torus,
        Primitive::Cone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Box => "box",
            Primitive::Cylinder => "cylinder",
            Primitive::Torus => "torus",
            Primitive::Cone => "cone",
        }
    }

    /// Part names; a splat's part label indexes into this list.
    pub fn parts(self) -> &'static [&'static str] {
        match self {
            Primitive::Sphere => &["surface"],
            Primitive::Box => &["sides", "top_bottom"],
            Primitive::Cylinder => &["side", "cap"],
            Primitive::Torus => &["outer", "inner"],
            Primitive::Cone => &["lateral", "base"],
        }
    }

    /// Base color in RGB.
    fn color(self) -> [f64; 3] {
        match self {
            Primitive::Sphere => [0.85, 0.2, 0.2],
            Primitive::Box => [0.2, 0.75, 0.25],
            Primitive::Cylinder => [0.2, 0.35, 0.9],
            Primitive::Torus => [0.9, 0.8, 0.15],
            Primitive::Cone => [0.75, 0.25, 0.8],
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown primitive '{s}'")))
    }
}

/// Parameters of the procedural dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: Vec<Primitive>,
    pub per_class: usize,
    pub splats: usize,
    /// Planar regions get larger scale and opacity, edges smaller scale.
    pub part_patterns: bool,
    /// Opacity gap between planar and curved regions.
    pub opacity_margin: f64,
    pub opacity_jitter: f64,
    /// Standard deviation of the SH DC noise.
    pub color_noise: f64,
    /// Standard deviation of the positional noise, before normalization.
    pub position_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: Primitive::ALL.to_vec(),
            per_class: 64,
            splats: 1024,
            part_patterns: true,
            opacity_margin: 0.25,
            opacity_jitter: 0.05,
            color_noise: 0.05,
            position_jitter: 0.003,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.per_class == 0 || self.splats == 0 {
            return Err(Error::Config("synthetic spec needs classes, objects and splats".into()));
        }
        let mut seen = self.classes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(Error::Config("synthetic classes must be distinct".into()));
        }
        if !(0.0..0.35).contains(&self.opacity_margin) || !(0.0..0.1).contains(&self.opacity_jitter) {
            return Err(Error::Config(
                "opacity margin must lie in [0, 0.35) and jitter in [0, 0.1)".into(),
            ));
        }
        if self.color_noise < 0.0 || self.position_jitter < 0.0 {
            return Err(Error::Config("noise magnitudes must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Objects with `index % 5 == 4` within their class are held out.
pub fn split_for(index: usize) -> Split {
    if index % 5 == 4 {
        Split::Test
    } else {
        Split::Train
    }
}

struct SurfacePoint {
    pos: [f64; 3],
    normal: [f64; 3],
    part: usize,
    planar: bool,
    edge: bool,
}

const EDGE_BAND: f64 = 0.05;
const CURVED_OPACITY: f64 = 0.6;

fn sample_surface(kind: Primitive, count: usize, rng: &mut ChaCha8Rng) -> Vec<SurfacePoint> {
    match kind {
        Primitive::Sphere => (0..count)
            .map(|_| {
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi: f64 = rng.random_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).sqrt();
                let p = [r * phi.cos(), r * phi.sin(), z];
                SurfacePoint { pos: p, normal: p, part: 0, planar: false, edge: false }
            })
            .collect(),
        Primitive::Box => {
            let dims: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.5));
            let half = dims.map(|d| d / 2.0);
            // Face pairs orthogonal to x, y, z weighted by area.
            let areas = [dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]];
            let total: f64 = areas.iter().sum();
            (0..count)
                .map(|_| {
                    let mut u = rng.random_range(0.0..total);
                    let mut axis = 0;
                    while axis < 2 && u >= areas[axis] {
                        u -= areas[axis];
                        axis += 1;
                    }
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let mut p = [0.0; 3];
                    let mut edge = false;
                    for a in 0..3 {
                        if a == axis {
                            p[a] = sign * half[a];
                        } else {
                            p[a] = rng.random_range(-half[a]..half[a]);
                            edge |= half[a] - p[a].abs() < EDGE_BAND;
                        }
                    }
                    let mut normal = [0.0; 3];
                    normal[axis] = sign;
                    SurfacePoint { pos: p, normal, part: usize::from(axis == 2), planar: true, edge }
                })
                .collect()
        }
        Primitive::Cylinder => {
            let r: f64 = rng.random_range(0.3..0.6);
            let h: f64 = rng.random_range(0.8..1.6);
            let side = 2.0 * PI * r * h;
            let caps = 2.0 * PI * r * r;
            (0..count)
                .map(|_| {
                    let phi: f64 = rng.random_range(0.0..2.0 * PI);
                    if rng.random_range(0.0..side + caps) < side {
                        let z = rng.random_range(-h / 2.0..h / 2.0);
                        SurfacePoint {
                            pos: [r * phi.cos(), r * phi.sin(), z],
                            normal: [phi.cos(), phi.sin(), 0.0],
                            part: 0,
                            planar: false,
                            edge: h / 2.0 - z.abs() < EDGE_BAND,
                        }
                    } else {
                        let rho = r * rng.random_range(0.0f64..1.0).sqrt();
                        let top = rng.random_bool(0.5);
                        let z = if top { h / 2.0 } else { -h / 2.0 };
                        SurfacePoint {
                            pos: [rho * phi.cos(), rho * phi.sin(), z],
                            normal: [0.0, 0.0, z.signum()],
                            part: 1,
                            planar: true,
                            edge: r - rho < EDGE_BAND,
                        }
                    }
                })
                .collect()
        }
        Primitive::Torus => {
            let big: f64 = rng.random_range(0.6..0.8);
            let small: f64 = rng.random_range(0.15..0.3);
            let mut out = Vec::with_capacity(count);
            while out.len() < count {
                let theta: f64 = rng.random_range(0.0..2.0 * PI);
                // Area element is proportional to the distance from the axis.
                let accept = (big + small * theta.cos()) / (big + small);
                if rng.random_range(0.0..1.0) >= accept {
                    continue;
                }
                let phi: f64 = rng.random_range(0.0..2.0 * PI);
                let normal = [theta.cos() * phi.cos(), theta.cos() * phi.sin(), theta.sin()];
                let ring = big + small * theta.cos();
                out.push(SurfacePoint {
                    pos: [ring * phi.cos(), ring * phi.sin(), small * theta.sin()],
                    normal,
                    part: usize::from(theta.cos() < 0.0),
                    planar: false,
                    edge: false,
                });
            }
            out
        }
        Primitive::Cone => {
            let r: f64 = rng.random_range(0.4..0.7);
            let h: f64 = rng.random_range(0.8..1.4);
            let slant = (r * r + h * h).sqrt();
            let lateral = PI * r * slant;
            let base = PI * r * r;
            (0..count)
                .map(|_| {
                    let phi: f64 = rng.random_range(0.0..2.0 * PI);
                    if rng.random_range(0.0..lateral + base) < lateral {
                        // Fraction of the way from apex to rim, area-uniform.
                        let f = rng.random_range(0.0f64..1.0).sqrt();
                        let rho = f * r;
                        let z = h / 2.0 - f * h;
                        let n = [h * phi.cos() / slant, h * phi.sin() / slant, r / slant];
                        SurfacePoint {
                            pos: [rho * phi.cos(), rho * phi.sin(), z],
                            normal: n,
                            part: 0,
                            planar: false,
                            edge: (1.0 - f) * slant < EDGE_BAND || f * slant < EDGE_BAND,
                        }
                    } else {
                        let rho = r * rng.random_range(0.0f64..1.0).sqrt();
                        SurfacePoint {
                            pos: [rho * phi.cos(), rho * phi.sin(), -h / 2.0],
                            normal: [0.0, 0.0, -1.0],
                            part: 1,
                            planar: true,
                            edge: r - rho < EDGE_BAND,
                        }
                    }
                })
                .collect()
        }
    }
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Unit quaternion (w, x, y, z) of a proper rotation matrix given by columns.
fn quaternion_from_columns(c: [[f64; 3]; 3]) -> [f64; 4] {
    let m = |r: usize, k: usize| c[k][r];
    let trace = m(0, 0) + m(1, 1) + m(2, 2);
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [0.25 * s, (m(2, 1) - m(1, 2)) / s, (m(0, 2) - m(2, 0)) / s, (m(1, 0) - m(0, 1)) / s]
    } else if m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2) {
        let s = (1.0 + m(0, 0) - m(1, 1) - m(2, 2)).sqrt() * 2.0;
        [(m(2, 1) - m(1, 2)) / s, 0.25 * s, (m(0, 1) + m(1, 0)) / s, (m(0, 2) + m(2, 0)) / s]
    } else if m(1, 1) > m(2, 2) {
        let s = (1.0 + m(1, 1) - m(0, 0) - m(2, 2)).sqrt() * 2.0;
        [(m(0, 2) - m(2, 0)) / s, (m(0, 1) + m(1, 0)) / s, 0.25 * s, (m(1, 2) + m(2, 1)) / s]
    } else {
        let s = (1.0 + m(2, 2) - m(0, 0) - m(1, 1)).sqrt() * 2.0;
        [(m(1, 0) - m(0, 1)) / s, (m(0, 2) + m(2, 0)) / s, (m(1, 2) + m(2, 1)) / s, 0.25 * s]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    canonicalize_quaternion(q.map(|v| v / n))
}

/// Rotation whose local z axis is the surface normal, spun by `spin`.
fn surface_frame(normal: [f64; 3], spin: f64) -> [f64; 4] {
    let n = normalize3(normal);
    let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let t1 = normalize3(cross(helper, n));
    let t2 = cross(n, t1);
    let (s, c) = spin.sin_cos();
    let a: [f64; 3] = std::array::from_fn(|i| c * t1[i] + s * t2[i]);
    let b = cross(n, a);
    quaternion_from_columns([a, b, n])
}

/// One generated object: splats plus per-splat part labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticObject {
    pub kind: Primitive,
    pub set: SplatSet,
    pub parts: Vec<usize>,
}

/// Generates object `index` of class `kind`; a pure function of its inputs.
pub fn synth_object(spec: &SyntheticSpec, kind: Primitive, index: usize) -> Result<SyntheticObject> {
    let mut rng = seed::rng(spec.seed, &[kind as u64, index as u64]);
    let surface = sample_surface(kind, spec.splats, &mut rng);
    let n = surface.len();
    let yaw: f64 = rng.random_range(0.0..2.0 * PI);
    let (sy, cy) = yaw.sin_cos();
    let turn = |v: [f64; 3]| [cy * v[0] - sy * v[1], sy * v[0] + cy * v[1], v[2]];
    let jitter = Normal::new(0.0, spec.position_jitter.max(1e-12)).expect("valid sigma");

    let mut centroids = Array2::zeros((n, 3));
    for (i, sp) in surface.iter().enumerate() {
        let p = turn(sp.pos);
        for d in 0..3 {
            centroids[[i, d]] = p[d] + if spec.position_jitter > 0.0 { jitter.sample(&mut rng) } else { 0.0 };
        }
    }
    let mean = centroids.mean_axis(ndarray::Axis(0)).expect("n > 0");
    centroids -= &mean;
    let radius = centroids
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    centroids /= radius;

    let color = kind.color().map(|c| (c - 0.5) / SH_C0);
    let color_noise = Normal::new(0.0, spec.color_noise.max(1e-12)).expect("valid sigma");
    let rest_noise = Normal::new(0.0, 0.01).expect("valid sigma");
    let mut opacities = Array1::zeros(n);
    let mut scales = Array2::zeros((n, 3));
    let mut rotations = Array2::zeros((n, 4));
    let mut sh = Array2::zeros((n, SH_COEFFS));
    for (i, sp) in surface.iter().enumerate() {
        let planar = spec.part_patterns && sp.planar;
        let base = if planar { CURVED_OPACITY + spec.opacity_margin } else { CURVED_OPACITY };
        let o: f64 = base + rng.random_range(-1.0..=1.0) * spec.opacity_jitter;
        opacities[i] = o.clamp(0.01, 0.99);

        let mut tangent = if planar { 0.035 } else { 0.022 };
        if spec.part_patterns && sp.edge {
            tangent *= 0.5;
        }
        let wobble = |rng: &mut ChaCha8Rng| rng.random_range(0.8..1.2);
        scales[[i, 0]] = tangent * wobble(&mut rng);
        scales[[i, 1]] = tangent * wobble(&mut rng);
        scales[[i, 2]] = 0.004 * wobble(&mut rng);

        let q = surface_frame(turn(sp.normal), rng.random_range(0.0..PI));
        for d in 0..4 {
            rotations[[i, d]] = q[d];
        }
        for c in 0..3 {
            sh[[i, c]] = color[c] + if spec.color_noise > 0.0 { color_noise.sample(&mut rng) } else { 0.0 };
        }
        for j in 3..SH_COEFFS {
            sh[[i, j]] = rest_noise.sample(&mut rng);
        }
    }
    let set = SplatSet::new(centroids, opacities, scales, rotations, sh)?;
    Ok(SyntheticObject {
        kind,
        set,
        parts: surface.iter().map(|s| s.part).collect(),
    })
}

/// Writes every object as PLY plus a part-label file and returns the manifest
/// (also written to `out_dir/manifest.tsv`).
pub fn synth_generate(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let objects = out_dir.join("objects");
    fs::create_dir_all(&objects).map_err(|e| Error::io(&objects, e))?;
    let mut records = Vec::new();
    for (class_id, &kind) in spec.classes.iter().enumerate() {
        for index in 0..spec.per_class {
            let obj = synth_object(spec, kind, index)?;
            let stem = format!("{}_{index:03}", kind.name());
            let ply = PathBuf::from("objects").join(format!("{stem}.ply"));
            let labels = PathBuf::from("objects").join(format!("{stem}.labels"));
            save_ply(&obj.set, out_dir.join(&ply))?;
            write_labels(&out_dir.join(&labels), &obj.parts)?;
            records.push(ManifestRecord {
                path: ply,
                class_id,
                class_name: kind.name().to_string(),
                labels: Some(labels),
                split: split_for(index),
            });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "# splatmae-manifest v1";

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 2);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: '{l}' is not a part label", i + 1),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory (or absolute).
    pub path: PathBuf,
    pub class_id: usize,
    pub class_name: String,
    pub labels: Option<PathBuf>,
    pub split: Split,
}

/// Tab-separated index of a dataset: a header line, then one record per line
/// with fields `path  class_id  class_name  labels_path|-  split`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fmt = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
            return Err(fmt(format!("missing header '{MANIFEST_HEADER}'")));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(fmt(format!("record {}: expected 5 tab-separated fields", i + 1)));
            }
            let class_id = fields[1]
                .parse()
                .map_err(|_| fmt(format!("record {}: bad class id '{}'", i + 1, fields[1])))?;
            records.push(ManifestRecord {
                path: PathBuf::from(fields[0]),
                class_id,
                class_name: fields[2].to_string(),
                labels: (fields[3] != "-").then(|| PathBuf::from(fields[3])),
                split: fields[4].parse().map_err(|e: Error| fmt(format!("record {}: {e}", i + 1)))?,
            });
        }
        let manifest = DatasetManifest {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        };
        manifest.check_classes().map_err(|e| fmt(e.to_string()))?;
        Ok(manifest)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = format!("{MANIFEST_HEADER}\n");
        for r in &self.records {
            let labels = r.labels.as_ref().map_or("-".to_string(), |l| l.display().to_string());
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.path.display(),
                r.class_id,
                r.class_name,
                labels,
                r.split.as_str()
            ));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn check_classes(&self) -> Result<()> {
        let mut names: BTreeMap<usize, &str> = BTreeMap::new();
        for r in &self.records {
            if let Some(prev) = names.insert(r.class_id, &r.class_name) {
                if prev != r.class_name {
                    return Err(Error::Config(format!(
                        "class id {} is named both '{prev}' and '{}'",
                        r.class_id, r.class_name
                    )));
                }
            }
        }
        if names.keys().copied().ne(0..names.len()) {
            return Err(Error::Config("class ids are not dense from 0".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names: BTreeMap<usize, String> = BTreeMap::new();
        for r in &self.records {
            names.entry(r.class_id).or_insert_with(|| r.class_name.clone());
        }
        names.into_values().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names().len()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownsampleMethod {
    Fps,
    Random,
}

impl FromStr for DownsampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fps" => Ok(DownsampleMethod::Fps),
            "random" => Ok(DownsampleMethod::Random),
            other => Err(Error::Config(format!("unknown downsample method '{other}'"))),
        }
    }
}

/// Row indices kept by [`downsample`].
pub fn downsample_indices(
    set: &SplatSet,
    target: usize,
    method: DownsampleMethod,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = set.len();
    if target > n {
        return Err(Error::InvalidInput(format!("cannot downsample {n} splats to {target}")));
    }
    if target == n {
        return Ok((0..n).collect());
    }
    match method {
        DownsampleMethod::Fps => fps(set.centroids.view(), target, seed),
        DownsampleMethod::Random => {
            let mut rng = seed::rng(seed, &[]);
            let mut idx = rand::seq::index::sample(&mut rng, n, target).into_vec();
            idx.sort_unstable();
            Ok(idx)
        }
    }
}

/// Subset of `target` splats; rows are copied, never recomputed.
pub fn downsample(set: &SplatSet, target: usize, method: DownsampleMethod, seed: u64) -> Result<SplatSet> {
    Ok(set.select(&downsample_indices(set, target, method, seed)?))
}

/// One loaded object.
#[derive(Clone, Debug)]
pub struct Sample {
    pub set: SplatSet,
    pub class_id: usize,
    pub labels: Option<Vec<usize>>,
    pub source: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    /// Downsample every object to this many splats (None keeps all).
    pub target: Option<usize>,
    pub method: DownsampleMethod,
    pub seed: u64,
    /// Only records of this split (None loads all).
    pub split: Option<Split>,
    /// Whether part-label files are read.
    pub with_labels: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            target: Some(1024),
            method: DownsampleMethod::Fps,
            seed: 0,
            split: None,
            with_labels: false,
        }
    }
}

/// Loads (and downsamples) every selected record in manifest order.
pub fn load_dataset(manifest: &DatasetManifest, opts: &LoadOptions) -> Result<Vec<Sample>> {
    manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| opts.split.is_none_or(|s| s == r.split))
        .map(|(i, r)| {
            let path = manifest.resolve(&r.path);
            let set = load_ply(&path)?;
            let labels = match (&r.labels, opts.with_labels) {
                (Some(l), true) => {
                    let lp = manifest.resolve(l);
                    let labels = read_labels(&lp)?;
                    if labels.len() != set.len() {
                        return Err(Error::Format {
                            path: lp,
                            msg: format!("{} labels for {} splats", labels.len(), set.len()),
                        });
                    }
                    Some(labels)
                }
                _ => None,
            };
            let (set, labels) = match opts.target {
                Some(t) => {
                    let idx = downsample_indices(&set, t, opts.method, seed::derive(opts.seed, &[i as u64]))
                        .map_err(|e| Error::Format {
                            path: path.clone(),
                            msg: e.to_string(),
                        })?;
                    (set.select(&idx), labels.map(|l| idx.iter().map(|&j| l[j]).collect()))
                }
                None => (set, labels),
            };
            Ok(Sample {
                set,
                class_id: r.class_id,
                labels,
                source: path,
                split: r.split,
            })
        })
        .collect()
}

/// Visiting order of `len` items in a given epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seed::rng(seed, &[0xE9, epoch]));
    order
}

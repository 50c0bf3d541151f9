//! Gaussian splat data model and the per-splat influence / compositing math.
//!
//! A [`SplatSet`] always stores *activated* parameters: opacity after the
//! sigmoid, scale after the exponential, rotation as a normalized quaternion
//! with a non-negative scalar part. Raw (pre-activation) values only exist at
//! the PLY boundary, see [`crate::ply`].

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of spherical-harmonic coefficients per splat (degree 3, RGB).
pub const SH_COEFFS: usize = 48;
/// Normalization constant of the degree-0 real spherical harmonic.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const QUAT_NORM_TOL: f64 = 1e-5;
const COV_REGULARIZER: f64 = 1e-8;

/// One of the five per-splat parameter blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    #[serde(rename = "C")]
    Centroid,
    #[serde(rename = "O")]
    Opacity,
    #[serde(rename = "S")]
    Scale,
    #[serde(rename = "R")]
    Rotation,
    #[serde(rename = "SH")]
    Sh,
}

impl ParamKind {
    pub const ALL: [ParamKind; 5] = [
        ParamKind::Centroid,
        ParamKind::Opacity,
        ParamKind::Scale,
        ParamKind::Rotation,
        ParamKind::Sh,
    ];

    /// Width of the block as stored in a [`SplatSet`].
    pub fn dim(self) -> usize {
        match self {
            ParamKind::Centroid | ParamKind::Scale => 3,
            ParamKind::Opacity => 1,
            ParamKind::Rotation => 4,
            ParamKind::Sh => SH_COEFFS,
        }
    }

    /// Width of the block inside the grouping feature. SH only contributes
    /// its three DC values there.
    pub fn grouping_dim(self) -> usize {
        match self {
            ParamKind::Sh => 3,
            other => other.dim(),
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            ParamKind::Centroid => "C",
            ParamKind::Opacity => "O",
            ParamKind::Scale => "S",
            ParamKind::Rotation => "R",
            ParamKind::Sh => "SH",
        }
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for ParamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "C" => Ok(ParamKind::Centroid),
            "O" => Ok(ParamKind::Opacity),
            "S" => Ok(ParamKind::Scale),
            "R" => Ok(ParamKind::Rotation),
            "SH" => Ok(ParamKind::Sh),
            other => Err(Error::Config(format!("unknown splat parameter `{other}`"))),
        }
    }
}

/// Parses a comma separated list such as `C,O,S` into a sorted, deduplicated set.
pub fn parse_param_set(s: &str) -> Result<Vec<ParamKind>> {
    let mut out = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(ParamKind::from_str)
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

/// N Gaussian splats stored as parallel, activated parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatSet {
    pub centroids: Array2<f64>,
    pub opacities: Array1<f64>,
    pub scales: Array2<f64>,
    pub rotations: Array2<f64>,
    pub sh: Array2<f64>,
}

impl SplatSet {
    /// Builds a set and checks every invariant.
    pub fn new(
        centroids: Array2<f64>,
        opacities: Array1<f64>,
        scales: Array2<f64>,
        rotations: Array2<f64>,
        sh: Array2<f64>,
    ) -> Result<Self> {
        let set = SplatSet {
            centroids,
            opacities,
            scales,
            rotations,
            sh,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the shape and value invariants, reporting the first offending splat.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let shapes = [
            ("centroids", self.centroids.dim(), 3),
            ("scales", self.scales.dim(), 3),
            ("rotations", self.rotations.dim(), 4),
            ("sh", self.sh.dim(), SH_COEFFS),
        ];
        for (name, (rows, cols), want) in shapes {
            if rows != n || cols != want {
                return Err(Error::InvalidInput(format!(
                    "{name} has shape {rows}x{cols}, expected {n}x{want}"
                )));
            }
        }
        if self.opacities.len() != n {
            return Err(Error::InvalidInput(format!(
                "opacities has length {}, expected {n}",
                self.opacities.len()
            )));
        }
        self.violations().into_iter().next().map_or(Ok(()), Err)
    }

    /// Every value-level invariant violation, one per offending splat and kind.
    pub fn violations(&self) -> Vec<Error> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            let c = self.centroids.row(i);
            if c.iter().any(|v| !v.is_finite()) {
                out.push(data_err(i, "non-finite centroid"));
            }
            let o = self.opacities[i];
            if !(0.0..=1.0).contains(&o) {
                out.push(data_err(i, format!("opacity {o} outside [0, 1]")));
            }
            if self.scales.row(i).iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                out.push(data_err(i, "scale not strictly positive and finite"));
            }
            let q = self.rotations.row(i);
            let norm = q.dot(&q).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > QUAT_NORM_TOL {
                out.push(data_err(i, format!("quaternion norm {norm} is not 1")));
            } else if q[0] < 0.0 {
                out.push(data_err(i, "quaternion has negative scalar part"));
            }
            if self.sh.row(i).iter().any(|v| !v.is_finite()) {
                out.push(data_err(i, "non-finite SH coefficient"));
            }
        }
        out
    }

    /// Gathers the given rows from all five blocks.
    pub fn select(&self, indices: &[usize]) -> SplatSet {
        SplatSet {
            centroids: self.centroids.select(Axis(0), indices),
            opacities: self.opacities.select(Axis(0), indices),
            scales: self.scales.select(Axis(0), indices),
            rotations: self.rotations.select(Axis(0), indices),
            sh: self.sh.select(Axis(0), indices),
        }
    }

    /// The block of one parameter kind as an N x dim matrix.
    pub fn block(&self, kind: ParamKind) -> Array2<f64> {
        match kind {
            ParamKind::Centroid => self.centroids.clone(),
            ParamKind::Opacity => self.opacities.clone().insert_axis(Axis(1)),
            ParamKind::Scale => self.scales.clone(),
            ParamKind::Rotation => self.rotations.clone(),
            ParamKind::Sh => self.sh.clone(),
        }
    }

    /// The three DC coefficients (one per color channel) of every splat.
    pub fn sh_dc(&self) -> Array2<f64> {
        self.sh.slice(s![.., 0..3]).to_owned()
    }

    /// Covariance of splat `i`.
    pub fn covariance(&self, i: usize) -> Result<Covariance3> {
        let s = self.scales.row(i);
        let q = self.rotations.row(i);
        covariance([s[0], s[1], s[2]], [q[0], q[1], q[2], q[3]])
    }
}

fn data_err(index: usize, msg: impl Into<String>) -> Error {
    Error::Data {
        index,
        msg: msg.into(),
    }
}

/// Normalizes a quaternion (w, x, y, z) and flips it so that w >= 0.
pub fn canonicalize_quaternion(q: [f64; 4]) -> [f64; 4] {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    q.map(|v| sign * v / norm)
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quaternion_to_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Hamilton product `a * b` of two quaternions.
pub fn quaternion_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// A 3x3 symmetric positive semi-definite covariance matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance3 {
    pub sigma: [[f64; 3]; 3],
}

impl Covariance3 {
    pub fn determinant(&self) -> f64 {
        det3(&self.sigma)
    }

    /// Inverse of `sigma + eps * I`.
    pub fn regularized_inverse(&self, eps: f64) -> Result<[[f64; 3]; 3]> {
        let mut m = self.sigma;
        for (i, row) in m.iter_mut().enumerate() {
            row[i] += eps;
        }
        let det = det3(&m);
        if !det.is_finite() || det.abs() < f64::MIN_POSITIVE {
            return Err(Error::Numeric(format!(
                "covariance is singular after regularization (det = {det})"
            )));
        }
        let mut inv = [[0.0; 3]; 3];
        for (r, inv_row) in inv.iter_mut().enumerate() {
            for (c, v) in inv_row.iter_mut().enumerate() {
                // adjugate: transpose of the cofactor matrix
                let (r1, r2) = others(c);
                let (c1, c2) = others(r);
                let minor = m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1];
                let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
                *v = sign * minor / det;
            }
        }
        Ok(inv)
    }
}

fn others(i: usize) -> (usize, usize) {
    match i {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Covariance `R S S^T R^T` from a scale triple and a rotation quaternion.
pub fn covariance(scale: [f64; 3], rotation: [f64; 4]) -> Result<Covariance3> {
    if scale.iter().chain(rotation.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "covariance inputs must be finite".into(),
        ));
    }
    let r = quaternion_to_matrix(rotation);
    // M = R S, Sigma = M M^T
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * scale[j];
        }
    }
    let mut sigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            sigma[i][j] = (0..3).map(|k| m[i][k] * m[j][k]).sum();
        }
    }
    Ok(Covariance3 { sigma })
}

/// Opacity-weighted Gaussian falloff of splat `i` evaluated at `q`.
pub fn influence(splat_index: usize, set: &SplatSet, q: [f64; 3]) -> Result<f64> {
    if splat_index >= set.len() {
        return Err(Error::InvalidInput(format!(
            "splat index {splat_index} out of range for {} splats",
            set.len()
        )));
    }
    let inv = set
        .covariance(splat_index)?
        .regularized_inverse(COV_REGULARIZER)?;
    let c = set.centroids.row(splat_index);
    let d = [q[0] - c[0], q[1] - c[1], q[2] - c[2]];
    let mut mahalanobis = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            mahalanobis += d[i] * inv[i][j] * d[j];
        }
    }
    Ok(set.opacities[splat_index] * (-0.5 * mahalanobis.max(0.0)).exp())
}

/// Front-to-back alpha compositing of per-splat colors along one ray.
pub fn composite_ray(influences: &[f64], colors: &[[f64; 3]]) -> Result<[f64; 3]> {
    if influences.len() != colors.len() {
        return Err(Error::InvalidInput(format!(
            "{} influences but {} colors",
            influences.len(),
            colors.len()
        )));
    }
    if let Some(f) = influences.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::InvalidInput(format!("influence {f} outside [0, 1]")));
    }
    let mut out = [0.0; 3];
    let mut transmittance = 1.0;
    for (f, c) in influences.iter().zip(colors) {
        for ch in 0..3 {
            out[ch] += c[ch] * f * transmittance;
        }
        transmittance *= 1.0 - f;
        if transmittance == 0.0 {
            break;
        }
    }
    Ok(out)
}

/// Display color from the degree-0 SH term only.
pub fn sh_to_rgb(sh_row: ArrayView1<f64>) -> [f64; 3] {
    [0, 1, 2].map(|ch| (0.5 + SH_C0 * sh_row[ch]).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array};
    use proptest::prelude::*;

    fn single(c: [f64; 3], o: f64, s: [f64; 3], q: [f64; 4]) -> SplatSet {
        SplatSet::new(
            Array2::from_shape_vec((1, 3), c.to_vec()).unwrap(),
            array![o],
            Array2::from_shape_vec((1, 3), s.to_vec()).unwrap(),
            Array2::from_shape_vec((1, 4), q.to_vec()).unwrap(),
            Array2::zeros((1, SH_COEFFS)),
        )
        .unwrap()
    }

    fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    }

    #[test]
    fn identity_covariance() {
        let cov = covariance([1.0; 3], [1.0, 0.0, 0.0, 0.0]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(cov.sigma[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn quarter_turn_about_z_swaps_axes() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let cov = covariance([2.0, 1.0, 1.0], [h, 0.0, 0.0, h]).unwrap();
        // dense oracle: R diag(4,1,1) R^T
        let r = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let rt = [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let d = [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let oracle = matmul3(&matmul3(&r, &d), &rt);
        let expected = [[1.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(oracle[i][j], expected[i][j], epsilon = 1e-12);
                assert_abs_diff_eq!(cov.sigma[i][j], expected[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_covariance_input_is_rejected() {
        assert!(matches!(
            covariance([f64::NAN, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn influence_edge_cases() {
        let set = single([0.1, 0.2, 0.3], 0.7, [0.5, 0.5, 0.5], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(influence(0, &set, [0.1, 0.2, 0.3]).unwrap(), 0.7);

        let transparent = single([0.0; 3], 0.0, [0.2, 0.3, 0.4], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(influence(0, &transparent, [1.0, -2.0, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn isotropic_influence_at_one_sigma() {
        let s = 0.4;
        let set = single([1.0, 1.0, 1.0], 0.9, [s; 3], [1.0, 0.0, 0.0, 0.0]);
        let dir = [1.0, 2.0, -2.0].map(|v: f64| v / 3.0);
        let q = [1.0 + s * dir[0], 1.0 + s * dir[1], 1.0 + s * dir[2]];
        // dense oracle: Sigma = s^2 I, so the quadratic form is |d|^2 / s^2
        let d2: f64 = dir.iter().map(|v| (s * v) * (s * v)).sum();
        let oracle = 0.9 * (-0.5 * d2 / (s * s + 1e-8)).exp();
        let got = influence(0, &set, q).unwrap();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 0.9 * (-0.5f64).exp(), epsilon = 1e-7);
    }

    #[test]
    fn composite_examples() {
        assert_eq!(composite_ray(&[1.0], &[[0.2, 0.4, 0.6]]).unwrap(), [0.2, 0.4, 0.6]);
        assert_eq!(
            composite_ray(&[0.0, 0.0], &[[1.0; 3], [1.0; 3]]).unwrap(),
            [0.0; 3]
        );
        let out = composite_ray(&[0.5, 0.5], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(out, [0.5, 0.25, 0.0]);
        assert!(composite_ray(&[0.5], &[]).is_err());
    }

    #[test]
    fn opaque_front_splat_hides_the_rest() {
        let a = composite_ray(&[1.0, 0.3], &[[0.1, 0.2, 0.3], [1.0, 1.0, 1.0]]).unwrap();
        let b = composite_ray(&[1.0, 0.9], &[[0.1, 0.2, 0.3], [0.0, 0.5, 0.0]]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sh_display_color() {
        let zero = Array1::zeros(SH_COEFFS);
        assert_eq!(sh_to_rgb(zero.view()), [0.5; 3]);
        let mut red = Array1::zeros(SH_COEFFS);
        red[0] = 0.5 / SH_C0;
        assert_abs_diff_eq!(sh_to_rgb(red.view())[0], 1.0, epsilon = 1e-12);
        let black = Array::from_elem(SH_COEFFS, -0.5 / SH_C0);
        assert_eq!(sh_to_rgb(black.view()), [0.0; 3]);
    }

    #[test]
    fn invariants_are_reported() {
        let mut set = single([0.0; 3], 0.5, [1.0; 3], [1.0, 0.0, 0.0, 0.0]);
        set.opacities[0] = 1.5;
        assert!(matches!(set.validate(), Err(Error::Data { index: 0, .. })));
        set.opacities[0] = 0.5;
        set.rotations[[0, 0]] = -1.0;
        assert!(set.validate().is_err());
    }

    #[test]
    fn param_sets_parse() {
        let set = parse_param_set("S, c,SH,C").unwrap();
        assert_eq!(set, vec![ParamKind::Centroid, ParamKind::Scale, ParamKind::Sh]);
        assert!(parse_param_set("C,X").is_err());
    }

    fn unit_quat() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("non-degenerate", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
            .prop_map(canonicalize_quaternion)
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_psd(q in unit_quat(), s in prop::array::uniform3(1e-3f64..3.0)) {
            let cov = covariance(s, q).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((cov.sigma[i][j] - cov.sigma[j][i]).abs() < 1e-6);
                }
            }
            let m = cov.sigma;
            for v in [[1.0, 0.0, 0.0], [0.3, -0.7, 0.2], [-0.5, 0.5, 0.9], q[1..].try_into().unwrap()] {
                let form: f64 = (0..3)
                    .flat_map(|i| (0..3).map(move |j| (i, j)))
                    .map(|(i, j)| v[i] * m[i][j] * v[j])
                    .sum();
                prop_assert!(form >= -1e-9);
            }
            let det = cov.determinant();
            let expected = (s[0] * s[1] * s[2]).powi(2);
            prop_assert!((det - expected).abs() <= 1e-9 * expected.max(1.0));
        }

        #[test]
        fn influence_is_rigid_invariant(
            q in unit_quat(),
            g in unit_quat(),
            s in prop::array::uniform3(0.1f64..1.0),
            c in prop::array::uniform3(-1.0f64..1.0),
            p in prop::array::uniform3(-1.0f64..1.0),
            t in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let base = single(c, 0.8, s, q);
            let before = influence(0, &base, p).unwrap();
            let rot = quaternion_to_matrix(g);
            let apply = |v: [f64; 3]| -> [f64; 3] {
                [0, 1, 2].map(|i| (0..3).map(|j| rot[i][j] * v[j]).sum::<f64>() + t[i])
            };
            let moved = single(apply(c), 0.8, s, canonicalize_quaternion(quaternion_mul(g, q)));
            let after = influence(0, &moved, apply(p)).unwrap();
            prop_assert!((before - after).abs() < 1e-9);
            prop_assert!((0.0..=0.8).contains(&before));
        }
    }
}

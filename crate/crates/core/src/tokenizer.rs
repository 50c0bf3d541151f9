//! Splat group tokenizer built around the temperature-scaled pooling layer.
//!
//! Per group: a shared pointwise map lifts each of the P potential neighbors
//! to D dims, the pooling layer turns those P rows into k softmax-weighted
//! aggregates, and a second pointwise map followed by a max over the k slots
//! yields the group token.

use std::cmp::Ordering;

use ndarray::{s, Array3, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::nn::{Graph, Linear, Mlp, ParamId, ParamStore};
use crate::numerics::{Array, Tensor};

/// Lower bound applied to `exp(gamma) + beta` before it divides distances.
pub const TEMPERATURE_FLOOR: f64 = 1e-3;

/// Learnable per-slot temperature parameters.
#[derive(Clone, Debug)]
pub struct PoolingParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub slots: usize,
}

impl PoolingParams {
    /// Starts with beta = 0 and gamma evenly spaced over [-2, 2], so slot
    /// temperatures span roughly 0.14 to 7.4. Identical starting slots would
    /// tie under the max over slots and never separate.
    pub fn new(store: &mut ParamStore, name: &str, slots: usize) -> Self {
        let gamma = if slots == 1 {
            Array::zeros(IxDyn(&[1]))
        } else {
            Array::from_shape_fn(IxDyn(&[slots]), |ix| -2.0 + 4.0 * ix[0] as f64 / (slots - 1) as f64)
        };
        PoolingParams {
            gamma: store.add(format!("{name}.gamma"), gamma, false),
            beta: store.add(format!("{name}.beta"), Array::zeros(IxDyn(&[slots])), false),
            slots,
        }
    }

    pub fn forward(&self, g: &Graph, features: &Tensor) -> Result<PoolingOutput> {
        pooling_forward(features, &g.param(self.gamma), &g.param(self.beta))
    }
}

/// Result of the pooling layer.
#[derive(Clone, Debug)]
pub struct PoolingOutput {
    /// (..., k, D) aggregated features.
    pub aggregated: Tensor,
    /// (..., k, P) softmax weights over the potential neighbors.
    pub weights: Tensor,
    /// (k,) temperatures after clamping.
    pub temperatures: Tensor,
}

/// `t = max(exp(gamma) + beta, floor)`.
pub fn temperatures(gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    Ok(gamma.exp().add(beta)?.clamp_min(TEMPERATURE_FLOOR))
}

/// Pools (..., P, D) neighbor features into (..., k, D).
///
/// The query is the elementwise max over the P rows; each slot j weights the
/// rows by `softmax_p(-|query - F_p|^2 / t_j)`, so low temperatures focus on
/// the rows nearest the query and high temperatures average uniformly.
pub fn pooling_forward(features: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<PoolingOutput> {
    let shape = features.shape();
    if shape.len() < 2 || shape[shape.len() - 2] == 0 {
        return Err(Error::shape("pooling", shape, &[1, 1]));
    }
    if gamma.shape() != beta.shape() || gamma.ndim() != 1 || gamma.shape()[0] == 0 {
        return Err(Error::shape("pooling temperatures", gamma.shape(), beta.shape()));
    }
    if features.value().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite features entering the pooling layer".into()));
    }
    let k = gamma.shape()[0];
    let query = features.max_axis(-2, true)?;
    let dist = features
        .sub(&query)?
        .square()
        .sum_axis(-1, false)?
        .unsqueeze(shape.len() - 2)?;
    let t = temperatures(gamma, beta)?;
    let logits = dist.div(&t.reshape(&[k, 1])?)?.neg();
    let weights = logits.softmax(-1)?;
    let aggregated = weights.matmul(features)?;
    Ok(PoolingOutput {
        aggregated,
        weights,
        temperatures: t,
    })
}

/// Learned map from normalized group centers to token-space positions.
#[derive(Clone, Debug)]
pub struct PositionalEmbed {
    pub mlp: Mlp,
}

impl PositionalEmbed {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        center_dim: usize,
        token_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        PositionalEmbed {
            mlp: Mlp::new(store, name, center_dim, 128, token_dim, rng),
        }
    }

    /// (..., n, f_G) centers to (..., n, token_dim).
    pub fn forward(&self, g: &Graph, centers: &Tensor) -> Result<Tensor> {
        self.mlp.forward(g, centers)
    }
}

/// Group tokens with the centers they were computed from.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    /// (B, n, token_dim).
    pub tokens: Tensor,
    /// (B, n, f_G).
    pub centers: Array,
}

/// Three-stage group tokenizer.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub lift: Linear,
    pub pooling: PoolingParams,
    pub project: Linear,
    pub embed_dim: usize,
    pub token_dim: usize,
}

impl Tokenizer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        hidden_dim: usize,
        slots: usize,
        token_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Tokenizer {
            lift: Linear::new(store, &format!("{name}.lift"), embed_dim, hidden_dim, rng),
            pooling: PoolingParams::new(store, &format!("{name}.pool"), slots),
            project: Linear::new(store, &format!("{name}.project"), hidden_dim, token_dim, rng),
            embed_dim,
            token_dim,
        }
    }

    /// Tokens for neighbor embeddings shaped (..., n, P, f_E).
    ///
    /// Neighbor rows are put into a canonical content order first, which
    /// makes tokens exactly (bitwise) invariant to neighbor permutations.
    pub fn forward(&self, g: &Graph, neighbors: &Array) -> Result<Tensor> {
        let shape = neighbors.shape();
        if shape.len() < 3 || shape[shape.len() - 1] != self.embed_dim {
            return Err(Error::Config(format!(
                "tokenizer expects (..., n, P, {}) inputs, got {:?}",
                self.embed_dim, shape
            )));
        }
        let canonical = Tensor::constant(canonical_neighbor_order(neighbors));
        let lifted = self.lift.forward(g, &canonical)?.gelu();
        let pooled = self.pooling.forward(g, &lifted)?;
        self.project
            .forward(g, &pooled.aggregated)?
            .max_axis(-2, false)
    }
}

/// Sorts the P rows of every group lexicographically by value.
pub fn canonical_neighbor_order(neighbors: &Array) -> Array {
    let shape = neighbors.shape().to_vec();
    let (p, f) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let groups: usize = shape[..shape.len() - 2].iter().product();
    let flat = neighbors
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((groups, p, f))
        .expect("standard layout");
    let mut out = Array3::zeros((groups, p, f));
    for gi in 0..groups {
        let block = flat.slice(s![gi, .., ..]);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| {
            block
                .row(a)
                .iter()
                .zip(block.row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        });
        for (dst, &src) in order.iter().enumerate() {
            out.slice_mut(s![gi, dst, ..]).assign(&block.row(src));
        }
    }
    out.into_dyn()
        .into_shape_with_order(IxDyn(&shape))
        .expect("same element count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nn::{normal_init, Mode};
    use crate::numerics::{grad_check, grad_check_params};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn temps(k: usize, t: f64) -> (Tensor, Tensor) {
        // exp(0) + (t - 1) = t
        (
            Tensor::constant(Array::zeros(IxDyn(&[k]))),
            Tensor::constant(Array::from_elem(IxDyn(&[k]), t - 1.0)),
        )
    }

    fn entropy(row: ndarray::ArrayView1<f64>) -> f64 {
        -row.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum::<f64>()
    }

    #[test]
    fn single_neighbor_passes_through() {
        let f = normal_init(&mut rng(1), &[2, 3, 1, 5], 1.0);
        let (g, b) = temps(4, 0.7);
        let out = pooling_forward(&Tensor::constant(f.clone()), &g, &b).unwrap();
        assert!(out.weights.value().iter().all(|&w| w == 1.0));
        for j in 0..4 {
            let slot = out.aggregated.value().index_axis(Axis(2), j).to_owned();
            assert_eq!(slot, f.index_axis(Axis(2), 0));
        }
    }

    #[test]
    fn identical_neighbors_weigh_uniformly() {
        let row = array![0.5, -1.0, 2.0];
        let f = Array::from_shape_fn(IxDyn(&[1, 1, 4, 3]), |ix| row[ix[3]]);
        let (g, b) = temps(2, 1.0);
        let out = pooling_forward(&Tensor::constant(f), &g, &b).unwrap();
        for &w in out.weights.value() {
            assert_abs_diff_eq!(w, 0.25, epsilon = 1e-15);
        }
        for (i, &z) in out.aggregated.value().iter().enumerate() {
            assert_abs_diff_eq!(z, row[i % 3], epsilon = 1e-15);
        }
    }

    #[test]
    fn three_term_scalar_example() {
        let f = array![1.0, 2.0, 4.0].into_shape_with_order(IxDyn(&[1, 1, 3, 1])).unwrap();
        let (g, b) = temps(1, 1.0);
        let out = pooling_forward(&Tensor::constant(f), &g, &b).unwrap();
        // query 4, distances (9, 4, 0)
        let e = [(-9.0f64).exp(), (-4.0f64).exp(), 1.0];
        let s: f64 = e.iter().sum();
        let w = e.map(|v| v / s);
        let z = w[0] * 1.0 + w[1] * 2.0 + w[2] * 4.0;
        for (got, want) in out.weights.value().iter().zip(w) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(out.aggregated.item(), z, epsilon = 1e-15);
    }

    #[test]
    fn temperature_controls_focus() {
        let f = normal_init(&mut rng(3), &[1, 1, 8, 4], 1.0);
        let dist_to_query: Vec<f64> = {
            let q = f.map_axis(Axis(2), |c| c.fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
            (0..8)
                .map(|p| (0..4).map(|d| (q[[0, 0, d]] - f[[0, 0, p, d]]).powi(2)).sum())
                .collect()
        };
        let nearest = (0..8)
            .min_by(|&a, &b| dist_to_query[a].total_cmp(&dist_to_query[b]))
            .unwrap();
        let run = |t: f64| {
            let (g, b) = temps(1, t);
            let out = pooling_forward(&Tensor::constant(f.clone()), &g, &b).unwrap();
            out.weights.value().iter().copied().collect::<Vec<_>>()
        };
        let hot = run(1e6);
        assert!((entropy(ndarray::ArrayView1::from(&hot)) - 8f64.ln()).abs() < 1e-4);
        let cold = run(1e-3);
        assert!(cold[nearest] > 0.99);
    }

    #[test]
    fn temperatures_are_clamped() {
        let g = Tensor::constant(array![0.0, 0.0].into_dyn());
        let b = Tensor::constant(array![-5.0, 1.0].into_dyn());
        let t = temperatures(&g, &b).unwrap();
        assert_eq!(t.value(), &array![TEMPERATURE_FLOOR, 2.0].into_dyn());
    }

    #[test]
    fn non_finite_features_are_rejected() {
        let f = Array::from_elem(IxDyn(&[1, 2, 3]), f64::NAN);
        let (g, b) = temps(2, 1.0);
        assert!(matches!(
            pooling_forward(&Tensor::constant(f), &g, &b),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn pooling_gradients_including_temperatures() {
        let f = normal_init(&mut rng(4), &[2, 3, 5, 4], 1.0);
        let gamma = array![0.1, -0.3, 0.4].into_dyn();
        let beta = array![0.2, 0.05, -0.1].into_dyn();
        let probe = normal_init(&mut rng(5), &[2, 3, 3, 4], 1.0);
        let probe = Tensor::constant(probe);
        let score = |z: &Tensor| -> Result<Tensor> { Ok(z.mul(&probe)?.sum()) };
        let (gt, bt) = (Tensor::constant(gamma.clone()), Tensor::constant(beta.clone()));
        let err_f = grad_check(|x| score(&pooling_forward(x, &gt, &bt)?.aggregated), &f, 1e-5).unwrap();
        let ft = Tensor::constant(f.clone());
        let err_g = grad_check(|x| score(&pooling_forward(&ft, x, &bt)?.aggregated), &gamma, 1e-5).unwrap();
        let err_b = grad_check(|x| score(&pooling_forward(&ft, &gt, x)?.aggregated), &beta, 1e-5).unwrap();
        assert!(err_f < 1e-4 && err_g < 1e-4 && err_b < 1e-4, "{err_f} {err_g} {err_b}");
    }

    fn tokenizer(store: &mut ParamStore) -> Tokenizer {
        Tokenizer::new(store, "tok", 4, 8, 3, 6, &mut rng(9))
    }

    #[test]
    fn tokens_ignore_neighbor_order() {
        let mut store = ParamStore::new();
        let tok = tokenizer(&mut store);
        let g = Graph::new(&store, Mode::Eval, rng(0));
        let x = normal_init(&mut rng(6), &[1, 3, 7, 4], 1.0);
        let mut shuffled = x.clone();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        for (dst, &src) in perm.iter().enumerate() {
            let row = x.slice(s![0, 1, src, ..]).to_owned();
            shuffled.slice_mut(s![0, 1, dst, ..]).assign(&row);
        }
        let a = tok.forward(&g, &x).unwrap();
        let b = tok.forward(&g, &shuffled).unwrap();
        assert_eq!(a.value(), b.value());
        assert_eq!(a.shape(), &[1, 3, 6]);
    }

    #[test]
    fn identical_groups_identical_tokens() {
        let mut store = ParamStore::new();
        let tok = tokenizer(&mut store);
        let g = Graph::new(&store, Mode::Eval, rng(0));
        let one = normal_init(&mut rng(8), &[1, 1, 5, 4], 1.0);
        let two = ndarray::concatenate(Axis(1), &[one.view(), one.view()]).unwrap();
        let t = tok.forward(&g, &two).unwrap();
        let v = t.value();
        assert_eq!(v.slice(s![0, 0, ..]), v.slice(s![0, 1, ..]));
    }

    #[test]
    fn tokenizer_gradients() {
        let mut store = ParamStore::new();
        let tok = tokenizer(&mut store);
        *store.value_mut(tok.pooling.gamma) = array![0.2, -0.1, 0.3].into_dyn();
        *store.value_mut(tok.pooling.beta) = array![0.1, 0.0, -0.2].into_dyn();
        let x = normal_init(&mut rng(10), &[1, 2, 5, 4], 1.0);
        let report = grad_check_params(
            |g| Ok(tok.forward(g, &x)?.square().sum()),
            &store,
            1e-5,
            40,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn positional_embedding_contract() {
        let mut store = ParamStore::new();
        let pe = PositionalEmbed::new(&mut store, "pos", 3, 6, &mut rng(2));
        let centers = array![[[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]]].into_dyn();
        let g = Graph::new(&store, Mode::Eval, rng(0));
        let out = pe.forward(&g, &Tensor::constant(centers.clone())).unwrap();
        assert_eq!(out.shape(), &[1, 2, 6]);
        assert_eq!(out.value().slice(s![0, 0, ..]), out.value().slice(s![0, 1, ..]));

        let mut zeroed = store.clone();
        for i in 0..zeroed.len() {
            zeroed.value_mut(ParamId(i)).fill(0.0);
        }
        let g = Graph::new(&zeroed, Mode::Eval, rng(0));
        let out = pe.forward(&g, &Tensor::constant(centers)).unwrap();
        assert!(out.value().iter().all(|&v| v == 0.0));
    }
}

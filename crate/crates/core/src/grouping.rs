//! Feature normalization and FPS/KNN grouping of splats.
//!
//! Grouping distances are measured in the normalized grouping space G: every
//! selected block except rotations is recentered to zero mean and divided by
//! its largest row norm, then scaled by a per-block weight. Embedding features
//! E are gathered raw, with centroids recentered on each group's center.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::{ParamKind, SplatSet};

/// Which parameters define grouping distances (G) and which are embedded and
/// reconstructed (E).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub grouping: Vec<ParamKind>,
    pub embedding: Vec<ParamKind>,
    /// Per-block grouping weights; absent blocks weigh 1.0.
    #[serde(default)]
    pub weights: BTreeMap<ParamKind, f64>,
}

impl Default for FeatureSelection {
    fn default() -> Self {
        FeatureSelection {
            grouping: vec![ParamKind::Centroid],
            embedding: vec![ParamKind::Centroid],
            weights: BTreeMap::new(),
        }
    }
}

impl FeatureSelection {
    pub fn new(grouping: &[ParamKind], embedding: &[ParamKind]) -> Result<Self> {
        let mut sel = FeatureSelection {
            grouping: grouping.to_vec(),
            embedding: embedding.to_vec(),
            weights: BTreeMap::new(),
        };
        sel.canonicalize();
        sel.validate()?;
        Ok(sel)
    }

    /// Sorts and deduplicates both sets into the fixed block order C, O, S, R, SH.
    pub fn canonicalize(&mut self) {
        self.grouping.sort();
        self.grouping.dedup();
        self.embedding.sort();
        self.embedding.dedup();
    }

    pub fn validate(&self) -> Result<()> {
        if self.grouping.is_empty() {
            return Err(Error::Config("grouping feature set G is empty".into()));
        }
        if self.embedding.is_empty() {
            return Err(Error::Config("embedding feature set E is empty".into()));
        }
        if let Some((k, w)) = self.weights.iter().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::Config(format!("grouping weight for {k} is {w}")));
        }
        Ok(())
    }

    pub fn weight(&self, kind: ParamKind) -> f64 {
        self.weights.get(&kind).copied().unwrap_or(1.0)
    }

    pub fn grouping_dim(&self) -> usize {
        self.grouping.iter().map(|k| k.grouping_dim()).sum()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding.iter().map(|k| k.dim()).sum()
    }

    /// Column range of a block inside the embedding feature.
    pub fn embedding_range(&self, kind: ParamKind) -> Option<Range<usize>> {
        block_range(&self.embedding, kind, ParamKind::dim)
    }

    /// Column range of a block inside the grouping feature.
    pub fn grouping_range(&self, kind: ParamKind) -> Option<Range<usize>> {
        block_range(&self.grouping, kind, ParamKind::grouping_dim)
    }
}

fn block_range(
    kinds: &[ParamKind],
    kind: ParamKind,
    dim: fn(ParamKind) -> usize,
) -> Option<Range<usize>> {
    let mut start = 0;
    for &k in kinds {
        if k == kind {
            return Some(start..start + dim(k));
        }
        start += dim(k);
    }
    None
}

fn grouping_block(set: &SplatSet, kind: ParamKind) -> Array2<f64> {
    match kind {
        ParamKind::Sh => set.sh_dc(),
        other => set.block(other),
    }
}

/// Per-splat normalized grouping features, p x f_G.
pub fn normalize_features(
    set: &SplatSet,
    kinds: &[ParamKind],
    weights: &BTreeMap<ParamKind, f64>,
) -> Result<Array2<f64>> {
    if kinds.is_empty() {
        return Err(Error::Config("empty feature selection".into()));
    }
    if set.is_empty() {
        return Err(Error::InvalidInput("cannot normalize an empty splat set".into()));
    }
    let blocks = kinds
        .iter()
        .map(|&kind| {
            let mut block = grouping_block(set, kind);
            if kind != ParamKind::Rotation {
                let mean = block.mean_axis(Axis(0)).expect("non-empty");
                block -= &mean;
                let max_norm = block
                    .rows()
                    .into_iter()
                    .map(|r| r.dot(&r).sqrt())
                    .fold(0.0, f64::max);
                if max_norm < 1e-12 {
                    block.fill(0.0);
                } else {
                    block /= max_norm;
                }
            }
            block * weights.get(&kind).copied().unwrap_or(1.0)
        })
        .collect::<Vec<_>>();
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    Ok(ndarray::concatenate(Axis(1), &views).expect("blocks share the row count"))
}

/// Raw embedding features, p x f_E, in the block order of `kinds`.
pub fn embedding_features(set: &SplatSet, kinds: &[ParamKind]) -> Array2<f64> {
    let blocks: Vec<_> = kinds.iter().map(|&k| set.block(k)).collect();
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("blocks share the row count")
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy farthest-point sampling starting from a seeded random index.
pub fn fps(points: ArrayView2<f64>, n: usize, seed: u64) -> Result<Vec<usize>> {
    let p = points.nrows();
    if p == 0 && n > 0 {
        return Err(Error::InvalidInput("fps on an empty point set".into()));
    }
    if n > p {
        return Err(Error::InvalidInput(format!("fps: asked for {n} of {p} points")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..p);
    fps_from(points, n, first)
}

/// Greedy farthest-point sampling from a fixed first index. Each step takes
/// the point with the largest distance to the chosen set; ties go to the
/// lowest index.
pub fn fps_from(points: ArrayView2<f64>, n: usize, first: usize) -> Result<Vec<usize>> {
    let p = points.nrows();
    if n > p || first >= p {
        return Err(Error::InvalidInput(format!(
            "fps: asked for {n} of {p} points starting at {first}"
        )));
    }
    let mut chosen = Vec::with_capacity(n);
    if n == 0 {
        return Ok(chosen);
    }
    let mut min_d = vec![f64::INFINITY; p];
    let mut taken = vec![false; p];
    let mut current = first;
    for step in 0..n {
        chosen.push(current);
        taken[current] = true;
        if step + 1 == n {
            break;
        }
        let c = points.row(current);
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, d) in min_d.iter_mut().enumerate() {
            let dist = sq_dist(points.row(i), c);
            if dist < *d {
                *d = dist;
            }
            if !taken[i] && *d > best.0 {
                best = (*d, i);
            }
        }
        current = best.1;
    }
    Ok(chosen)
}

/// Index of the point farthest from the feature mean, ties broken by the
/// lexicographically largest row. Invariant under row permutations.
pub fn content_start(points: ArrayView2<f64>) -> usize {
    let mean = points.mean_axis(Axis(0)).expect("non-empty");
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for (i, row) in points.rows().into_iter().enumerate() {
        let d = sq_dist(row, mean.view());
        let better = match d.partial_cmp(&best_d) {
            Some(Ordering::Greater) => true,
            Some(Ordering::Equal) => lex_cmp(row, points.row(best)) == Ordering::Greater,
            _ => false,
        };
        if better {
            best = i;
            best_d = d;
        }
    }
    best
}

fn lex_cmp(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

/// Exact k nearest neighbors, ascending by distance, ties to the lowest index.
pub fn knn(queries: ArrayView2<f64>, points: ArrayView2<f64>, k: usize) -> Result<Array2<usize>> {
    let p = points.nrows();
    if k > p {
        return Err(Error::InvalidInput(format!("knn: k = {k} exceeds {p} points")));
    }
    if queries.ncols() != points.ncols() {
        return Err(Error::shape("knn", queries.shape(), points.shape()));
    }
    let mut out = Array2::zeros((queries.nrows(), k));
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(p);
    for (qi, q) in queries.rows().into_iter().enumerate() {
        cand.clear();
        cand.extend(points.rows().into_iter().enumerate().map(|(i, r)| (sq_dist(q, r), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k > 0 && k < p {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        cand[..k].sort_unstable_by(cmp);
        for (j, &(_, i)) in cand[..k].iter().enumerate() {
            out[[qi, j]] = i;
        }
    }
    Ok(out)
}

/// Which space a neighbor search runs in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchSpace {
    /// The normalized grouping feature space G.
    Grouping,
    /// Raw centroids only.
    Centroid,
}

/// How FPS picks its first center.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FpsStart {
    Seeded(u64),
    /// Derived from the data itself, making grouping permutation invariant.
    Content,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupingConfig {
    pub num_groups: usize,
    pub group_size: usize,
    /// Potential neighbors per center handed to the pooling layer.
    pub pool_size: usize,
    pub fps_space: SearchSpace,
    pub pool_space: SearchSpace,
    pub start: FpsStart,
}

impl GroupingConfig {
    pub fn new(num_groups: usize, group_size: usize, pool_size: usize, seed: u64) -> Self {
        GroupingConfig {
            num_groups,
            group_size,
            pool_size,
            fps_space: SearchSpace::Grouping,
            pool_space: SearchSpace::Centroid,
            start: FpsStart::Seeded(seed),
        }
    }
}

/// A splat set split into `n` groups.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedSplats {
    /// Splat count of the (downsampled) input.
    pub p: usize,
    pub embedding: Vec<ParamKind>,
    pub center_indices: Vec<usize>,
    /// n x group_size; column 0 is the center itself.
    pub neighbor_indices: Array2<usize>,
    /// n x f_G normalized grouping features of the centers.
    pub grouping_centers: Array2<f64>,
    /// n x 3 raw centroids of the centers.
    pub center_positions: Array2<f64>,
    /// n x group_size x f_E with the centroid block relative to the center.
    pub local_embed: Array3<f64>,
    /// n x group_size x f_E as stored in the splat set.
    pub raw_embed: Array3<f64>,
    /// n x pool_size; column 0 is the center itself.
    pub pool_indices: Array2<usize>,
    /// n x pool_size x f_E, centroid block relative to the center.
    pub pool_embed: Array3<f64>,
}

impl GroupedSplats {
    pub fn num_groups(&self) -> usize {
        self.center_indices.len()
    }

    pub fn group_size(&self) -> usize {
        self.neighbor_indices.ncols()
    }

    pub fn pool_size(&self) -> usize {
        self.pool_indices.ncols()
    }

    /// Column range of a block inside the embedding features.
    pub fn embedding_range(&self, kind: ParamKind) -> Option<Range<usize>> {
        block_range(&self.embedding, kind, ParamKind::dim)
    }

    /// Keeps only the listed groups, in the given order.
    pub fn subset(&self, groups: &[usize]) -> GroupedSplats {
        GroupedSplats {
            p: self.p,
            embedding: self.embedding.clone(),
            center_indices: groups.iter().map(|&g| self.center_indices[g]).collect(),
            neighbor_indices: self.neighbor_indices.select(Axis(0), groups),
            grouping_centers: self.grouping_centers.select(Axis(0), groups),
            center_positions: self.center_positions.select(Axis(0), groups),
            local_embed: self.local_embed.select(Axis(0), groups),
            raw_embed: self.raw_embed.select(Axis(0), groups),
            pool_indices: self.pool_indices.select(Axis(0), groups),
            pool_embed: self.pool_embed.select(Axis(0), groups),
        }
    }
}

/// KNN rows with each query's own index forced into column 0.
fn knn_self_first(
    space: ArrayView2<f64>,
    centers: &[usize],
    k: usize,
) -> Result<Array2<usize>> {
    let queries = space.select(Axis(0), centers);
    let mut idx = knn(queries.view(), space, k)?;
    for (row, &c) in centers.iter().enumerate() {
        let mut r: Vec<usize> = idx.row(row).to_vec();
        if r.first() != Some(&c) {
            match r.iter().position(|&i| i == c) {
                Some(pos) => {
                    r.remove(pos);
                }
                None => {
                    r.pop();
                }
            }
            r.insert(0, c);
            idx.row_mut(row).assign(&ndarray::Array1::from(r));
        }
    }
    Ok(idx)
}

fn gather_embed(
    embed: &Array2<f64>,
    neighbors: &Array2<usize>,
    centers: &[usize],
    centroid_cols: Option<Range<usize>>,
) -> (Array3<f64>, Array3<f64>) {
    let (n, k) = neighbors.dim();
    let f = embed.ncols();
    let mut raw = Array3::zeros((n, k, f));
    for g in 0..n {
        for j in 0..k {
            raw.slice_mut(s![g, j, ..]).assign(&embed.row(neighbors[[g, j]]));
        }
    }
    let mut local = raw.clone();
    if let Some(cols) = centroid_cols {
        for g in 0..n {
            let center = embed.slice(s![centers[g], cols.clone()]).to_owned();
            for j in 0..k {
                let mut c = local.slice_mut(s![g, j, cols.clone()]);
                c -= &center;
            }
        }
    }
    (local, raw)
}

/// Splits a splat set into groups: FPS picks centers and KNN picks members in
/// the normalized grouping space; a second, larger KNN neighborhood feeds the
/// pooling layer.
pub fn build_groups(
    set: &SplatSet,
    selection: &FeatureSelection,
    config: &GroupingConfig,
) -> Result<GroupedSplats> {
    selection.validate()?;
    let p = set.len();
    let n = config.num_groups;
    if n == 0 || config.group_size == 0 || config.pool_size == 0 {
        return Err(Error::Config("group counts must be positive".into()));
    }
    if config.group_size > p || config.pool_size > p {
        return Err(Error::InvalidInput(format!(
            "group size {} / pool size {} exceed {p} splats",
            config.group_size, config.pool_size
        )));
    }
    let g_space = normalize_features(set, &selection.grouping, &selection.weights)?;
    let centroids = set.centroids.view();
    let space = |s: SearchSpace| match s {
        SearchSpace::Grouping => g_space.view(),
        SearchSpace::Centroid => centroids,
    };

    let fps_points = space(config.fps_space);
    let centers = match config.start {
        FpsStart::Seeded(seed) => fps(fps_points, n, seed)?,
        FpsStart::Content => fps_from(fps_points, n, content_start(fps_points))?,
    };
    let neighbor_indices = knn_self_first(g_space.view(), &centers, config.group_size)?;
    let pool_indices = knn_self_first(space(config.pool_space), &centers, config.pool_size)?;

    let embed = embedding_features(set, &selection.embedding);
    let centroid_cols = selection.embedding_range(ParamKind::Centroid);
    let (local_embed, raw_embed) =
        gather_embed(&embed, &neighbor_indices, &centers, centroid_cols.clone());
    let (pool_embed, _) = gather_embed(&embed, &pool_indices, &centers, centroid_cols);

    Ok(GroupedSplats {
        p,
        embedding: selection.embedding.clone(),
        grouping_centers: g_space.select(Axis(0), &centers),
        center_positions: set.centroids.select(Axis(0), &centers),
        center_indices: centers,
        neighbor_indices,
        local_embed,
        raw_embed,
        pool_indices,
        pool_embed,
    })
}

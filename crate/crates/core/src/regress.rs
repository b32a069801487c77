//! Weighted multi-output regressors used for nuisance and fitted-Q models.
//!
//! Every method fits `n x m` responses from an `n x p` row-major design with
//! optional nonnegative weights and predicts a length-`m` vector. Class
//! probabilities are fit as one-hot responses, so predictions of every
//! method average one-hot rows and sum to one.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

/// Hyperparameters of the histogram tree ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub num_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Histogram bins per feature, at most 256.
    pub max_bins: usize,
    /// Rows drawn without replacement per tree, as a fraction of `n`.
    pub sample_fraction: f64,
    /// Features tried per split; `None` tries all.
    pub mtry: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            num_trees: 50,
            max_depth: 8,
            min_leaf: 20,
            max_bins: 64,
            sample_fraction: 0.5,
            mtry: None,
        }
    }
}

/// Regression method and its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RegressorSpec {
    /// Piecewise-constant tree ensemble.
    Forest(ForestParams),
    /// Weighted average of the `k` nearest rows in Euclidean distance.
    Knn { k: usize },
    /// Ridge regression on per-feature polynomial bases of the given degree.
    Ridge { lambda: f64, degree: usize },
    /// Exact lookup of the weighted mean per distinct feature vector.
    Tabular,
}

impl Default for RegressorSpec {
    fn default() -> Self {
        RegressorSpec::Forest(ForestParams::default())
    }
}

impl RegressorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            RegressorSpec::Forest(_) => "forest",
            RegressorSpec::Knn { .. } => "knn",
            RegressorSpec::Ridge { .. } => "ridge",
            RegressorSpec::Tabular => "tabular",
        }
    }

    /// All methods accept observation weights.
    pub fn weight_capable(&self) -> bool {
        true
    }

    /// Fits `y` (row-major `n x outputs`) on `x` (row-major `n x cols`).
    pub fn fit(
        &self,
        x: &[f64],
        cols: usize,
        y: &[f64],
        outputs: usize,
        weights: Option<&[f64]>,
        seed: u64,
    ) -> Result<FittedModel> {
        let n = if cols == 0 { 0 } else { x.len() / cols };
        if n == 0 || outputs == 0 {
            return Err(Error::EmptySubset("no training rows".into()));
        }
        if x.len() != n * cols || y.len() != n * outputs {
            return Err(invalid(format!(
                "design is {}x{cols} values but responses have {} entries for {outputs} outputs",
                n,
                y.len()
            )));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite regression input".into()));
        }
        let weights = match weights {
            Some(w) => {
                if w.len() != n {
                    return Err(invalid("weight vector length differs from row count"));
                }
                if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::Data("weights must be finite, nonnegative and not all zero".into()));
                }
                // Equal weights are equivalent to no weights; drop them so both fits coincide exactly.
                if w.iter().all(|v| *v == w[0]) {
                    None
                } else {
                    Some(w)
                }
            }
            None => None,
        };
        let data = Train { x, cols, y, outputs, w: weights, n };
        if let Some(c) = data.constant_response() {
            return Ok(FittedModel::Constant(c));
        }
        Ok(match self {
            RegressorSpec::Forest(p) => FittedModel::Forest(Forest::fit(&data, p, seed)?),
            RegressorSpec::Knn { k } => FittedModel::Knn(Knn::fit(&data, *k)?),
            RegressorSpec::Ridge { lambda, degree } => FittedModel::Ridge(Ridge::fit(&data, *lambda, *degree)?),
            RegressorSpec::Tabular => FittedModel::Tabular(Tabular::fit(&data)),
        })
    }
}

struct Train<'a> {
    x: &'a [f64],
    cols: usize,
    y: &'a [f64],
    outputs: usize,
    w: Option<&'a [f64]>,
    n: usize,
}

impl Train<'_> {
    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.cols..(i + 1) * self.cols]
    }

    fn resp(&self, i: usize) -> &[f64] {
        &self.y[i * self.outputs..(i + 1) * self.outputs]
    }

    fn weight(&self, i: usize) -> f64 {
        self.w.map_or(1.0, |w| w[i])
    }

    /// Response shared by every positively weighted row, if any.
    fn constant_response(&self) -> Option<Vec<f64>> {
        let first = (0..self.n).find(|&i| self.weight(i) > 0.0)?;
        let r0 = self.resp(first);
        (0..self.n)
            .filter(|&i| self.weight(i) > 0.0)
            .all(|i| self.resp(i) == r0)
            .then(|| r0.to_vec())
    }

    /// Weighted mean of the responses of `rows`, exact when they are all equal.
    fn mean(&self, rows: impl Iterator<Item = usize> + Clone) -> Vec<f64> {
        weighted_mean(rows.map(|i| (self.weight(i), self.resp(i))), self.outputs)
    }
}

/// Weighted mean computed relative to the first positively weighted row.
fn weighted_mean<'a>(rows: impl Iterator<Item = (f64, &'a [f64])> + Clone, m: usize) -> Vec<f64> {
    let base = rows
        .clone()
        .find(|(w, _)| *w > 0.0)
        .map(|(_, r)| r.to_vec())
        .unwrap_or_else(|| vec![0.0; m]);
    let mut acc = vec![0.0; m];
    let mut total = 0.0;
    for (w, r) in rows {
        total += w;
        for j in 0..m {
            acc[j] += w * (r[j] - base[j]);
        }
    }
    if total <= 0.0 {
        return base;
    }
    base.iter().zip(acc).map(|(b, a)| b + a / total).collect()
}

// ---------------------------------------------------------------------------
// Fitted models
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FittedModel {
    Constant(Vec<f64>),
    Forest(Forest),
    Knn(Knn),
    Ridge(Ridge),
    Tabular(Tabular),
}

impl FittedModel {
    pub fn outputs(&self) -> usize {
        match self {
            FittedModel::Constant(v) => v.len(),
            FittedModel::Forest(f) => f.outputs,
            FittedModel::Knn(k) => k.outputs,
            FittedModel::Ridge(r) => r.outputs,
            FittedModel::Tabular(t) => t.outputs,
        }
    }

    pub fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            FittedModel::Constant(v) => out.copy_from_slice(v),
            FittedModel::Forest(f) => f.predict_into(x, out),
            FittedModel::Knn(k) => k.predict_into(x, out),
            FittedModel::Ridge(r) => r.predict_into(x, out),
            FittedModel::Tabular(t) => t.predict_into(x, out),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.outputs()];
        self.predict_into(x, &mut out);
        out
    }

    /// First output.
    pub fn predict_scalar(&self, x: &[f64]) -> f64 {
        match self {
            FittedModel::Constant(v) => v[0],
            _ => self.predict(x)[0],
        }
    }
}

// ---------------------------------------------------------------------------
// Histogram forest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf { value: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
    values: Vec<f64>,
}

impl Tree {
    fn leaf_values(&self, x: &[f64], m: usize) -> &[f64] {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { value } => return &self.values[value * m..(value + 1) * m],
                Node::Split { feature, threshold, left, right } => {
                    id = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

/// Ensemble of histogram-split regression trees fit on row subsamples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    outputs: usize,
    trees: Vec<Tree>,
}

struct Binned {
    /// `n x cols` bin indices.
    bins: Vec<u8>,
    /// Upper edge of each bin except the last, per feature.
    cuts: Vec<Vec<f64>>,
}

fn bin_features(data: &Train<'_>, max_bins: usize) -> Binned {
    let mut cuts = Vec::with_capacity(data.cols);
    for j in 0..data.cols {
        let mut vals: Vec<f64> = (0..data.n).map(|i| data.row(i)[j]).collect();
        vals.sort_by(f64::total_cmp);
        let mut uniq = vals.clone();
        uniq.dedup();
        let c: Vec<f64> = if uniq.len() <= max_bins {
            uniq.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect()
        } else {
            let mut c = Vec::with_capacity(max_bins);
            for b in 1..max_bins {
                let idx = b * vals.len() / max_bins;
                let (lo, hi) = (vals[idx - 1], vals[idx]);
                if lo < hi {
                    let cut = lo + (hi - lo) / 2.0;
                    if c.last().is_none_or(|&last| cut > last) {
                        c.push(cut);
                    }
                }
            }
            c
        };
        cuts.push(c);
    }
    let mut bins = vec![0u8; data.n * data.cols];
    for i in 0..data.n {
        for j in 0..data.cols {
            let v = data.row(i)[j];
            bins[i * data.cols + j] = cuts[j].partition_point(|&c| c < v) as u8;
        }
    }
    Binned { bins, cuts }
}

struct TreeBuilder<'a> {
    data: &'a Train<'a>,
    binned: &'a Binned,
    params: &'a ForestParams,
    nodes: Vec<Node>,
    values: Vec<f64>,
}

struct SplitChoice {
    feature: usize,
    bin: usize,
    gain: f64,
}

impl TreeBuilder<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let v = self.data.mean(rows.iter().copied());
        let value = self.values.len() / self.data.outputs;
        self.values.extend(v);
        self.nodes.push(Node::Leaf { value });
        self.nodes.len() - 1
    }

    fn best_split(&self, rows: &[usize], features: &[usize]) -> Option<SplitChoice> {
        let (m, cols) = (self.data.outputs, self.data.cols);
        let total_w: f64 = rows.iter().map(|&i| self.data.weight(i)).sum();
        let mut total_s = vec![0.0; m];
        for &i in rows {
            let w = self.data.weight(i);
            for (s, y) in total_s.iter_mut().zip(self.data.resp(i)) {
                *s += w * y;
            }
        }
        let parent: f64 = total_s.iter().map(|s| s * s).sum::<f64>() / total_w;
        let tol = 1e-12 * (parent.abs() + 1.0);
        let mut best: Option<SplitChoice> = None;
        for &f in features {
            let nb = self.binned.cuts[f].len() + 1;
            if nb < 2 {
                continue;
            }
            let mut cnt = vec![0usize; nb];
            let mut sw = vec![0.0; nb];
            let mut swy = vec![0.0; nb * m];
            for &i in rows {
                let b = self.binned.bins[i * cols + f] as usize;
                let w = self.data.weight(i);
                cnt[b] += 1;
                sw[b] += w;
                for (k, y) in self.data.resp(i).iter().enumerate() {
                    swy[b * m + k] += w * y;
                }
            }
            let (mut lc, mut lw) = (0usize, 0.0);
            let mut ls = vec![0.0; m];
            for b in 0..nb - 1 {
                lc += cnt[b];
                lw += sw[b];
                for k in 0..m {
                    ls[k] += swy[b * m + k];
                }
                let rc = rows.len() - lc;
                if cnt[b] == 0 || lc < self.params.min_leaf {
                    continue;
                }
                if rc < self.params.min_leaf {
                    break;
                }
                let rw = total_w - lw;
                if lw <= 0.0 || rw <= 1e-300 {
                    continue;
                }
                let mut score = 0.0;
                for k in 0..m {
                    let r = total_s[k] - ls[k];
                    score += ls[k] * ls[k] / lw + r * r / rw;
                }
                let gain = score - parent;
                if gain > tol && best.as_ref().is_none_or(|bs| gain > bs.gain) {
                    best = Some(SplitChoice { feature: f, bin: b, gain });
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        if depth >= self.params.max_depth || rows.len() < 2 * self.params.min_leaf.max(1) {
            return self.leaf(&rows);
        }
        let cols = self.data.cols;
        let features: Vec<usize> = match self.params.mtry {
            Some(k) if k < cols => {
                let mut f = sample(rng, cols, k.max(1)).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..cols).collect(),
        };
        let Some(choice) = self.best_split(&rows, &features) else {
            return self.leaf(&rows);
        };
        let (left, right): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&i| (self.binned.bins[i * cols + choice.feature] as usize) <= choice.bin);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0 });
        let l = self.grow(left, depth + 1, rng);
        let r = self.grow(right, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature: choice.feature,
            threshold: self.binned.cuts[choice.feature][choice.bin],
            left: l,
            right: r,
        };
        id
    }
}

impl Forest {
    fn fit(data: &Train<'_>, p: &ForestParams, seed: u64) -> Result<Self> {
        if p.num_trees == 0 || p.max_bins < 2 || p.max_bins > 256 {
            return Err(invalid("forest needs at least one tree and 2..=256 bins"));
        }
        if !(p.sample_fraction > 0.0 && p.sample_fraction <= 1.0) {
            return Err(invalid("forest sample fraction must lie in (0, 1]"));
        }
        let binned = bin_features(data, p.max_bins);
        let deterministic = p.sample_fraction >= 1.0 && p.mtry.is_none_or(|k| k >= data.cols);
        let num_trees = if deterministic { 1 } else { p.num_trees };
        let size = ((data.n as f64 * p.sample_fraction).round() as usize).clamp(1, data.n);
        let trees = (0..num_trees)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(b as u64);
                let mut rows = if size == data.n {
                    (0..data.n).collect::<Vec<_>>()
                } else {
                    sample(&mut rng, data.n, size).into_vec()
                };
                rows.sort_unstable();
                let mut builder = TreeBuilder { data, binned: &binned, params: p, nodes: Vec::new(), values: Vec::new() };
                builder.grow(rows, 0, &mut rng);
                Tree { nodes: builder.nodes, values: builder.values }
            })
            .collect();
        Ok(Self { outputs: data.outputs, trees })
    }

    fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        let m = self.outputs;
        if self.trees.len() == 1 {
            out.copy_from_slice(self.trees[0].leaf_values(x, m));
            return;
        }
        out.fill(0.0);
        for tree in &self.trees {
            for (o, v) in out.iter_mut().zip(tree.leaf_values(x, m)) {
                *o += v;
            }
        }
        let k = self.trees.len() as f64;
        out.iter_mut().for_each(|o| *o /= k);
    }

    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }
}

// ---------------------------------------------------------------------------
// k nearest neighbors
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knn {
    k: usize,
    cols: usize,
    outputs: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl Knn {
    fn fit(data: &Train<'_>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("knn needs k >= 1"));
        }
        Ok(Self {
            k,
            cols: data.cols,
            outputs: data.outputs,
            x: data.x.to_vec(),
            y: data.y.to_vec(),
            w: (0..data.n).map(|i| data.weight(i)).collect(),
        })
    }

    fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.w.len();
        let mut dist: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                let row = &self.x[i * self.cols..(i + 1) * self.cols];
                (row.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i)
            })
            .collect();
        let k = self.k.min(n);
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            dist.select_nth_unstable_by(k - 1, cmp);
            dist.truncate(k);
        }
        dist.sort_by_key(|d| d.1);
        let m = self.outputs;
        let mean = weighted_mean(dist.iter().map(|&(_, i)| (self.w[i], &self.y[i * m..(i + 1) * m])), m);
        out.copy_from_slice(&mean);
    }
}

// ---------------------------------------------------------------------------
// Ridge on polynomial bases
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ridge {
    degree: usize,
    outputs: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    /// `(1 + cols * degree) x outputs`, column-major by output.
    coef: Vec<f64>,
}

impl Ridge {
    fn basis(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        for (j, v) in x.iter().enumerate() {
            let z = (v - self.center[j]) / self.scale[j];
            let mut p = 1.0;
            for _ in 0..self.degree {
                p *= z;
                out.push(p);
            }
        }
    }

    fn fit(data: &Train<'_>, lambda: f64, degree: usize) -> Result<Self> {
        if degree == 0 || !(lambda >= 0.0) {
            return Err(invalid("ridge needs degree >= 1 and lambda >= 0"));
        }
        let total_w: f64 = (0..data.n).map(|i| data.weight(i)).sum();
        let mut center = vec![0.0; data.cols];
        let mut scale = vec![0.0; data.cols];
        for j in 0..data.cols {
            center[j] = (0..data.n).map(|i| data.weight(i) * data.row(i)[j]).sum::<f64>() / total_w;
            let var = (0..data.n)
                .map(|i| data.weight(i) * (data.row(i)[j] - center[j]).powi(2))
                .sum::<f64>()
                / total_w;
            scale[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        let mut model = Self { degree, outputs: data.outputs, center, scale, coef: Vec::new() };
        let p = 1 + data.cols * degree;
        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DMatrix::<f64>::zeros(p, data.outputs);
        let mut b = Vec::with_capacity(p);
        for i in 0..data.n {
            let w = data.weight(i);
            model.basis(data.row(i), &mut b);
            for r in 0..p {
                for c in 0..p {
                    gram[(r, c)] += w * b[r] * b[c];
                }
                for (k, y) in data.resp(i).iter().enumerate() {
                    rhs[(r, k)] += w * b[r] * y;
                }
            }
        }
        for r in 1..p {
            gram[(r, r)] += lambda + 1e-10 * total_w;
        }
        let sol = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => gram
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Data("singular ridge system".into()))?,
        };
        model.coef = sol.as_slice().to_vec();
        Ok(model)
    }

    fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        let mut b = Vec::new();
        self.basis(x, &mut b);
        let p = b.len();
        let bv = DVector::from_vec(b);
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.coef[k * p..(k + 1) * p].iter().zip(bv.iter()).map(|(c, v)| c * v).sum();
        }
    }
}

// ---------------------------------------------------------------------------
// Lookup table
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tabular {
    outputs: usize,
    /// Sorted by the bit patterns of the key.
    entries: Vec<(Vec<f64>, Vec<f64>)>,
}

fn key_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().map(|v| v.to_bits()).cmp(b.iter().map(|v| v.to_bits()))
}

impl Tabular {
    fn fit(data: &Train<'_>) -> Self {
        let mut order: Vec<usize> = (0..data.n).collect();
        order.sort_by(|&a, &b| key_cmp(data.row(a), data.row(b)).then(a.cmp(&b)));
        let mut entries = Vec::new();
        let mut start = 0;
        while start < order.len() {
            let key = data.row(order[start]);
            let mut end = start + 1;
            while end < order.len() && key_cmp(data.row(order[end]), key) == Ordering::Equal {
                end += 1;
            }
            entries.push((key.to_vec(), data.mean(order[start..end].iter().copied())));
            start = end;
        }
        Self { outputs: data.outputs, entries }
    }

    fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        match self.entries.binary_search_by(|(k, _)| key_cmp(k, x)) {
            Ok(i) => out.copy_from_slice(&self.entries[i].1),
            Err(_) => {
                let nearest = self
                    .entries
                    .iter()
                    .map(|(k, v)| (k.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), v))
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .expect("table is never empty");
                out.copy_from_slice(nearest.1);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_data(n: usize) -> (Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..n).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        (x, y)
    }

    #[test]
    fn deep_tree_interpolates_training_points() {
        let (x, y) = grid_data(40);
        let spec = RegressorSpec::Forest(ForestParams {
            num_trees: 20,
            max_depth: 10,
            min_leaf: 1,
            max_bins: 64,
            sample_fraction: 1.0,
            mtry: None,
        });
        let m = spec.fit(&x, 1, &y, 1, None, 1).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(m.predict_scalar(&[*xi]), *yi);
        }
    }

    #[test]
    fn equal_weights_match_unweighted_fit() {
        let (x, mut y) = grid_data(200);
        for (i, v) in y.iter_mut().enumerate() {
            *v += ((i * 37) % 11) as f64 / 7.0;
        }
        let w = vec![2.5; 200];
        for spec in [
            RegressorSpec::default(),
            RegressorSpec::Knn { k: 7 },
            RegressorSpec::Ridge { lambda: 0.1, degree: 3 },
            RegressorSpec::Tabular,
        ] {
            let a = spec.fit(&x, 1, &y, 1, None, 4).unwrap();
            let b = spec.fit(&x, 1, &y, 1, Some(&w), 4).unwrap();
            assert_eq!(a, b, "{}", spec.name());
        }
    }

    #[test]
    fn class_probabilities_sum_to_one() {
        let n = 300;
        let x: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
        let mut y = vec![0.0; n * 3];
        for i in 0..n {
            let c = ((x[i] * 3.0) as usize + i % 2).min(2);
            y[i * 3 + c] = 1.0;
        }
        for spec in [RegressorSpec::default(), RegressorSpec::Knn { k: 15 }, RegressorSpec::Ridge { lambda: 1.0, degree: 2 }] {
            let m = spec.fit(&x, 1, &y, 3, None, 2).unwrap();
            for v in [0.0, 0.3, 0.55, 0.99, 1.7] {
                let p = m.predict(&[v]);
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{} {:?}", spec.name(), p);
            }
        }
    }

    #[test]
    fn forest_is_deterministic_given_seed() {
        let (x, y) = grid_data(500);
        let spec = RegressorSpec::default();
        let a = spec.fit(&x, 1, &y, 1, None, 11).unwrap();
        let b = spec.fit(&x, 1, &y, 1, None, 11).unwrap();
        assert_eq!(a, b);
        let c = spec.fit(&x, 1, &y, 1, None, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn weighted_forest_leaf_is_weighted_mean() {
        let x = vec![0.0, 0.0, 1.0, 1.0];
        let y = vec![0.0, 4.0, 10.0, 10.0];
        let w = vec![3.0, 1.0, 1.0, 1.0];
        let spec = RegressorSpec::Forest(ForestParams { min_leaf: 1, sample_fraction: 1.0, ..Default::default() });
        let m = spec.fit(&x, 1, &y, 1, Some(&w), 0).unwrap();
        assert_eq!(m.predict_scalar(&[0.0]), 1.0);
        assert_eq!(m.predict_scalar(&[1.0]), 10.0);
    }

    #[test]
    fn tabular_lookup_and_fallback() {
        let x = vec![0.0, 0.0, 1.0, 2.0];
        let y = vec![1.0, 3.0, 5.0, 7.0];
        let m = RegressorSpec::Tabular.fit(&x, 1, &y, 1, None, 0).unwrap();
        assert_eq!(m.predict_scalar(&[0.0]), 2.0);
        assert_eq!(m.predict_scalar(&[2.0]), 7.0);
        assert_eq!(m.predict_scalar(&[1.2]), 5.0);
    }

    #[test]
    fn ridge_recovers_polynomial() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 10.0 - 2.5).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 + 2.0 * v - 0.5 * v * v).collect();
        let m = RegressorSpec::Ridge { lambda: 0.0, degree: 2 }.fit(&x, 1, &y, 1, None, 0).unwrap();
        assert!((m.predict_scalar(&[1.5]) - (1.0 + 3.0 - 1.125)).abs() < 1e-6);
    }

    #[test]
    fn knn_averages_neighbors() {
        let x = vec![0.0, 1.0, 2.0, 10.0];
        let y = vec![1.0, 2.0, 3.0, 100.0];
        let m = RegressorSpec::Knn { k: 3 }.fit(&x, 1, &y, 1, None, 0).unwrap();
        assert_eq!(m.predict_scalar(&[1.0]), 2.0);
    }

    #[test]
    fn empty_and_bad_inputs_error() {
        assert!(matches!(RegressorSpec::default().fit(&[], 1, &[], 1, None, 0), Err(Error::EmptySubset(_))));
        assert!(RegressorSpec::default().fit(&[0.0, 1.0], 1, &[1.0, 2.0], 1, Some(&[-1.0, 1.0]), 0).is_err());
        assert!(RegressorSpec::default().fit(&[f64::NAN], 1, &[1.0], 1, None, 0).is_err());
    }

    #[test]
    fn models_survive_json_round_trip() {
        let (x, y) = grid_data(100);
        for spec in [RegressorSpec::default(), RegressorSpec::Knn { k: 3 }, RegressorSpec::Ridge { lambda: 0.5, degree: 2 }, RegressorSpec::Tabular] {
            let m = spec.fit(&x, 1, &y, 1, None, 5).unwrap();
            let back: FittedModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
            assert_eq!(back, m);
        }
    }
}

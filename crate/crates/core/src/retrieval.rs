//! Shape retrieval: signatures from the classifier, an LFDA projection,
//! Euclidean ranking and average precision.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::train::{self, Checkpoint, TrainError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("within-class scatter is rank deficient even with regularization {0}")]
    RankDeficient(f64),
    #[error("invalid target rank {r} for dimension {d}")]
    InvalidRank { r: usize, d: usize },
    #[error("query has no ground-truth positives")]
    NoPositives,
    #[error("ranking holds {found} positives but GTP is {gtp}")]
    TooManyPositives { found: usize, gtp: usize },
    #[error("non-finite feature in sample {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

pub const DEFAULT_NEIGHBORS: usize = 7;
pub const DEFAULT_EPSILON: f64 = 1e-6;
const MAX_EPSILON: f64 = 1e-2;
const JACOBI_TOLERANCE: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSignature {
    pub id: String,
    pub label: usize,
    pub feature: Vec<f64>,
    pub projected: Option<Vec<f64>>,
}

impl ShapeSignature {
    /// The projected vector when present, else the raw feature.
    pub fn vector(&self) -> &[f64] {
        self.projected.as_deref().unwrap_or(&self.feature)
    }
}

/// The activation feeding the classifier layer, for every shape, under
/// evaluation conditions.
pub fn extract_signatures(ck: &Checkpoint, dataset: &Dataset) -> Result<Vec<ShapeSignature>> {
    let feats = train::signatures(ck, dataset)?;
    Ok(dataset
        .shapes
        .iter()
        .zip(feats)
        .map(|(s, feature)| ShapeSignature { id: s.id.clone(), label: s.label, feature, projected: None })
        .collect())
}

/// Row-major `n × n` symmetric matrix helpers.
fn mat_get(a: &[f64], n: usize, i: usize, j: usize) -> f64 {
    a[i * n + j]
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn mat_vec(a: &[f64], n: usize, v: &[f64]) -> Vec<f64> {
    (0..n).map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum()).collect()
}

/// Lower-triangular `L` with `L·Lᵀ = a`, or `None` when `a` is not
/// positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the column-eigenvector matrix (row-major).
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = frobenius(&a).max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum::<f64>().sqrt();
        if off <= JACOBI_TOLERANCE * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Local within- and between-class scatter matrices (`d × d`).
pub fn local_scatter(x: &[Vec<f64>], labels: &[usize], k: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let d = x[0].len();
    let dist2 = |i: usize, j: usize| x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    // σ_i: distance to the k-th nearest same-class neighbour (the farthest
    // one when the class is smaller).
    let sigma: Vec<f64> = (0..n)
        .map(|i| {
            let mut ds: Vec<f64> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).map(|j| dist2(i, j).sqrt()).collect();
            ds.sort_by(f64::total_cmp);
            let s = ds.get(k.min(ds.len()).saturating_sub(1)).copied().unwrap_or(0.0);
            s.max(1e-12)
        })
        .collect();
    let nf = n as f64;
    let mut ww = vec![0.0; n * n];
    let mut wb = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                let a = (-dist2(i, j) / (sigma[i] * sigma[j])).exp();
                let nc = counts[&labels[i]] as f64;
                ww[i * n + j] = a / nc;
                wb[i * n + j] = a * (1.0 / nf - 1.0 / nc);
            } else {
                wb[i * n + j] = 1.0 / nf;
            }
        }
    }
    // ½ Σ W_ij (x_i − x_j)(x_i − x_j)ᵀ = Xᵀ (D − W) X
    let scatter = |w: &[f64]| {
        let mut s = vec![0.0; d * d];
        for i in 0..n {
            let row: f64 = (0..n).map(|j| w[i * n + j]).sum();
            for j in 0..n {
                let l = if i == j { row - w[i * n + j] } else { -w[i * n + j] };
                if l == 0.0 {
                    continue;
                }
                for a in 0..d {
                    let xa = l * x[i][a];
                    for b in 0..d {
                        s[a * d + b] += xa * x[j][b];
                    }
                }
            }
        }
        // symmetrize against rounding
        for a in 0..d {
            for b in 0..a {
                let m = 0.5 * (s[a * d + b] + s[b * d + a]);
                s[a * d + b] = m;
                s[b * d + a] = m;
            }
        }
        s
    };
    (scatter(&ww), scatter(&wb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LfdaModel {
    pub dim: usize,
    pub rank: usize,
    /// `dim × rank`, row-major; columns are unit-norm generalized eigenvectors.
    pub projection: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub neighbors: usize,
    /// Regularization actually used (after any escalation).
    pub epsilon: f64,
    pub within: Vec<f64>,
    pub between: Vec<f64>,
}

impl LfdaModel {
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.dim).map(|i| self.projection[i * self.rank + c]).collect()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(RetrievalError::DimMismatch { expected: self.dim, got: x.len() });
        }
        Ok((0..self.rank).map(|c| (0..self.dim).map(|i| self.projection[i * self.rank + c] * x[i]).sum()).collect())
    }

    /// Largest `‖S_b v − λ (S_w + εI) v‖ / (‖S_b‖ + |λ|·‖S_w + εI‖)` over the
    /// columns (Frobenius norms, unit `v`).
    pub fn eigen_residual(&self) -> f64 {
        let d = self.dim;
        let b = regularized(&self.within, d, self.epsilon);
        let (nb, nw) = (frobenius(&self.between), frobenius(&b));
        (0..self.rank)
            .map(|c| {
                let v = self.column(c);
                let lam = self.eigenvalues[c];
                let sv = mat_vec(&self.between, d, &v);
                let bv = mat_vec(&b, d, &v);
                let r = sv.iter().zip(&bv).map(|(s, w)| (s - lam * w).powi(2)).sum::<f64>().sqrt();
                r / (nb + lam.abs() * nw).max(f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max)
    }
}

fn regularized(s: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let mut b = s.to_vec();
    for i in 0..d {
        b[i * d + i] += eps;
    }
    b
}

/// Fits LFDA: top-`r` solutions of `S_b v = λ (S_w + εI) v`.
pub fn lfda_fit(features: &[Vec<f64>], labels: &[usize], r: usize, k: usize, epsilon: f64) -> Result<LfdaModel> {
    if features.len() != labels.len() {
        return Err(RetrievalError::DimMismatch { expected: features.len(), got: labels.len() });
    }
    let d = features.first().map(|f| f.len()).ok_or_else(|| RetrievalError::TooFewSamples("no samples".into()))?;
    for (i, f) in features.iter().enumerate() {
        if f.len() != d {
            return Err(RetrievalError::DimMismatch { expected: d, got: f.len() });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite(i));
        }
    }
    if r == 0 || r > d {
        return Err(RetrievalError::InvalidRank { r, d });
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 2) {
        return Err(RetrievalError::TooFewSamples("need two classes with at least two samples each".into()));
    }
    let (sw, sb) = local_scatter(features, labels, k.max(1));
    let mut eps = epsilon.max(0.0);
    let l = loop {
        if let Some(l) = cholesky(&regularized(&sw, d, eps), d) {
            break l;
        }
        let next = if eps == 0.0 { 1e-12 } else { eps * 10.0 };
        if next > MAX_EPSILON * (1.0 + 1e-9) {
            return Err(RetrievalError::RankDeficient(eps));
        }
        eps = next;
    };
    // C = L⁻¹ S_b L⁻ᵀ
    let solve_lower = |b: &[f64]| {
        let mut y = vec![0.0; d];
        for i in 0..d {
            let s: f64 = (0..i).map(|k| l[i * d + k] * y[k]).sum();
            y[i] = (b[i] - s) / l[i * d + i];
        }
        y
    };
    let solve_upper_t = |b: &[f64]| {
        let mut y = vec![0.0; d];
        for i in (0..d).rev() {
            let s: f64 = (i + 1..d).map(|k| l[k * d + i] * y[k]).sum();
            y[i] = (b[i] - s) / l[i * d + i];
        }
        y
    };
    let mut tmp = vec![0.0; d * d];
    for c in 0..d {
        let col: Vec<f64> = (0..d).map(|i| sb[i * d + c]).collect();
        let y = solve_lower(&col);
        for i in 0..d {
            tmp[i * d + c] = y[i];
        }
    }
    let mut cmat = vec![0.0; d * d];
    for i in 0..d {
        let row: Vec<f64> = (0..d).map(|c| tmp[i * d + c]).collect();
        let y = solve_lower(&row);
        for c in 0..d {
            cmat[i * d + c] = y[c];
        }
    }
    for a in 0..d {
        for b in 0..a {
            let m = 0.5 * (cmat[a * d + b] + cmat[b * d + a]);
            cmat[a * d + b] = m;
            cmat[b * d + a] = m;
        }
    }
    let (vals, vecs) = jacobi_eigen(&cmat, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let mut projection = vec![0.0; d * r];
    let mut eigenvalues = Vec::with_capacity(r);
    for (c, &idx) in order.iter().take(r).enumerate() {
        let y: Vec<f64> = (0..d).map(|i| mat_get(&vecs, d, i, idx)).collect();
        let mut v = solve_upper_t(&y);
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        let big = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if big < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        for i in 0..d {
            projection[i * r + c] = v[i];
        }
        eigenvalues.push(vals[idx]);
    }
    Ok(LfdaModel { dim: d, rank: r, projection, eigenvalues, neighbors: k, epsilon: eps, within: sw, between: sb })
}

/// Fisher trace ratio `tr(VᵀS_bV) / tr(VᵀS_wV)` for a `d × r` row-major `V`.
pub fn fisher_ratio(within: &[f64], between: &[f64], v: &[f64], d: usize, r: usize) -> f64 {
    let quad = |s: &[f64]| {
        (0..r)
            .map(|c| {
                let col: Vec<f64> = (0..d).map(|i| v[i * r + c]).collect();
                col.iter().zip(mat_vec(s, d, &col)).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum::<f64>()
    };
    quad(between) / quad(within)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Gallery indices by ascending Euclidean distance, ties by index.
pub fn retrieve(query: &[f64], gallery: &[&[f64]]) -> Result<Vec<(usize, f64)>> {
    for g in gallery {
        if g.len() != query.len() {
            return Err(RetrievalError::DimMismatch { expected: query.len(), got: g.len() });
        }
    }
    let mut ranked: Vec<(usize, f64)> = gallery.iter().enumerate().map(|(i, g)| (i, euclidean(query, g))).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// `(1/GTP) Σ_hits precision@rank`.
    #[default]
    Standard,
    /// `(1/GTP) Σ_n 1(S_n)/n` taken literally; a perfect ranking scores below 1.
    Literal,
}

pub fn average_precision(relevant: &[bool], gtp: usize, mode: ApMode) -> Result<f64> {
    if gtp == 0 {
        return Err(RetrievalError::NoPositives);
    }
    let found = relevant.iter().filter(|&&r| r).count();
    if found > gtp {
        return Err(RetrievalError::TooManyPositives { found, gtp });
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (n, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += match mode {
                ApMode::Standard => hits as f64 / (n + 1) as f64,
                ApMode::Literal => 1.0 / (n + 1) as f64,
            };
        }
    }
    Ok(sum / gtp as f64)
}

/// Mean of [`average_precision`] over `(ranking, GTP)` queries.
pub fn mean_ap(queries: &[(Vec<bool>, usize)], mode: ApMode) -> Result<f64> {
    if queries.is_empty() {
        return Err(RetrievalError::TooFewSamples("no queries".into()));
    }
    let aps = queries.iter().map(|(r, g)| average_precision(r, *g, mode)).collect::<Result<Vec<_>>>()?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    pub ranking: Vec<(usize, f64)>,
    pub average_precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub mode: ApMode,
    pub map: f64,
    pub queries: Vec<QueryResult>,
}

/// Ranks the whole gallery for every query; GTP is the number of gallery
/// items sharing the query's label. Queries whose class is absent from the
/// gallery are an error.
pub fn evaluate_retrieval(queries: &[ShapeSignature], gallery: &[ShapeSignature], mode: ApMode) -> Result<RetrievalReport> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(RetrievalError::TooFewSamples("empty query set or gallery".into()));
    }
    let vectors: Vec<&[f64]> = gallery.iter().map(|g| g.vector()).collect();
    let results = queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let ranking = retrieve(q.vector(), &vectors)?;
            let flags: Vec<bool> = ranking.iter().map(|&(i, _)| gallery[i].label == q.label).collect();
            let gtp = gallery.iter().filter(|g| g.label == q.label).count();
            Ok(QueryResult { query: qi, average_precision: average_precision(&flags, gtp, mode)?, ranking })
        })
        .collect::<Result<Vec<_>>>()?;
    let map = results.iter().map(|r| r.average_precision).sum::<f64>() / results.len() as f64;
    Ok(RetrievalReport { mode, map, queries: results })
}

/// Projects every signature in place.
pub fn apply_projection(model: &LfdaModel, signatures: &mut [ShapeSignature]) -> Result<()> {
    for s in signatures {
        s.projected = Some(model.project(&s.feature)?);
    }
    Ok(())
}

/// `id,label,f0,f1,…` using the raw features.
pub fn signatures_csv(signatures: &[ShapeSignature]) -> String {
    let d = signatures.first().map_or(0, |s| s.feature.len());
    let mut out = String::from("id,label");
    for i in 0..d {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for s in signatures {
        out.push_str(&format!("{},{}", s.id, s.label));
        for v in &s.feature {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// `query_id,rank,gallery_id,distance,relevant`, first `top` ranks per query.
pub fn retrieval_csv(report: &RetrievalReport, queries: &[ShapeSignature], gallery: &[ShapeSignature], top: usize) -> String {
    let mut out = String::from("query_id,rank,gallery_id,distance,relevant\n");
    for q in &report.queries {
        let qs = &queries[q.query];
        for (rank, &(gi, dist)) in q.ranking.iter().take(top).enumerate() {
            let g = &gallery[gi];
            out.push_str(&format!("{},{},{},{},{}\n", qs.id, rank + 1, g.id, dist, (g.label == qs.label) as u8));
        }
    }
    out
}

//! Held-out perplexity, topic usage, and the embedding-plane grids behind
//! paintbox plots.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Document, HeldoutSplit};
use crate::model::{DocContext, GlobalState, LocalConfig, LocalState, ModelError};
use crate::nnet::Matrix;
use crate::stats::expect_exp_normal;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no test tokens to evaluate")]
    EmptyTestSet,
    #[error("embedding matrix has rank zero")]
    RankZero,
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("predictive probability {prob} for word {word} is not in (0, 1]")]
    BadProbability { word: u32, prob: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("grid file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fits local factors for each document with the globals frozen.
pub fn fit_locals(
    globals: &GlobalState,
    docs: &[&Document],
    config: &LocalConfig,
) -> Result<Vec<LocalState>, ModelError> {
    let exps = globals.expectations();
    let moments = globals.doc_moments(docs)?;
    docs.iter()
        .zip(&moments)
        .map(|(doc, m)| {
            let ctx = DocContext::new(doc, &exps, m);
            crate::model::local_loop(&ctx, None, globals.hyper.h_prior_var, config)
        })
        .collect()
}

/// Topic proportions `π_k = E[Z_k] / Σ_j E[Z_j]` of a fitted document.
pub fn mixture_weights(local: &LocalState) -> Vec<f64> {
    let ez = local.expect_z();
    let total: f64 = ez.iter().sum();
    ez.iter().map(|z| z / total).collect()
}

/// `exp(−Σ log p / T)` pooled over all test tokens, where `predictive(doc,
/// word)` is the probability assigned to `word` in test document `doc`.
pub fn pooled_perplexity<F>(tests: &[&Document], mut predictive: F) -> Result<f64, EvalError>
where
    F: FnMut(usize, u32) -> f64,
{
    let mut log_lik = 0.0;
    let mut tokens = 0u64;
    for (n, doc) in tests.iter().enumerate() {
        for &(w, c) in doc.counts() {
            let p = predictive(n, w);
            if !(p > 0.0 && p <= 1.0 + 1e-12) {
                return Err(EvalError::BadProbability { word: w, prob: p });
            }
            log_lik += c as f64 * p.ln();
            tokens += c as u64;
        }
    }
    if tokens == 0 {
        return Err(EvalError::EmptyTestSet);
    }
    Ok((-log_lik / tokens as f64).exp())
}

/// Perplexity of the uniform predictive over `num_words` terms.
pub fn uniform_perplexity(tests: &[&Document], num_words: usize) -> Result<f64, EvalError> {
    let p = 1.0 / num_words as f64;
    pooled_perplexity(tests, |_, _| p)
}

/// Document-completion perplexity. Local factors are fitted on each
/// document's training words, then test words are scored under
/// `p(w) = Σ_k π_k · γ_kw / Σ_d γ_kd` with the variational means plugged in.
pub fn perplexity(globals: &GlobalState, heldout: &[HeldoutSplit], config: &LocalConfig) -> Result<f64, EvalError> {
    let train: Vec<&Document> = heldout.iter().map(|s| &s.train).collect();
    let tests: Vec<&Document> = heldout.iter().map(|s| &s.test).collect();
    if tests.iter().all(|d| d.is_empty()) {
        return Err(EvalError::EmptyTestSet);
    }
    let locals = fit_locals(globals, &train, config)?;
    let topics = globals.topic_means();
    let weights: Vec<Vec<f64>> = locals.iter().map(mixture_weights).collect();
    pooled_perplexity(&tests, |n, w| {
        weights[n]
            .iter()
            .enumerate()
            .map(|(k, pi)| pi * topics.get(k, w as usize))
            .sum()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopicUsage {
    pub rank: usize,
    pub topic: usize,
    pub proportion: f64,
}

/// `usage_k = Σ_n E[Z_nk] / Σ_{n,k} E[Z_nk]`, ranked in decreasing order
/// (ties broken by topic id).
pub fn topic_usage(locals: &[LocalState]) -> Vec<TopicUsage> {
    let k = locals.first().map_or(0, |l| l.a.len());
    let mut mass = vec![0.0; k];
    for l in locals {
        for (m, z) in mass.iter_mut().zip(l.expect_z()) {
            *m += z;
        }
    }
    let total: f64 = mass.iter().sum();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| mass[j].total_cmp(&mass[i]).then(i.cmp(&j)));
    order
        .into_iter()
        .enumerate()
        .map(|(rank, topic)| TopicUsage {
            rank: rank + 1,
            topic,
            proportion: mass[topic] / total,
        })
        .collect()
}

/// Topic usage of a fitted corpus.
pub fn corpus_usage(globals: &GlobalState, corpus: &Corpus, config: &LocalConfig) -> Result<Vec<TopicUsage>, EvalError> {
    let docs: Vec<&Document> = corpus.docs.iter().collect();
    Ok(topic_usage(&fit_locals(globals, &docs, config)?))
}

pub fn write_usage_csv<W: Write>(usage: &[TopicUsage], mut w: W) -> std::io::Result<()> {
    writeln!(w, "rank,topic,proportion")?;
    for u in usage {
        writeln!(w, "{},{},{}", u.rank, u.topic, u.proportion)?;
    }
    Ok(())
}

/// The mean of a set of codes and its two leading principal directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub mean: Vec<f64>,
    pub directions: [Vec<f64>; 2],
    pub singular_values: [f64; 2],
    /// Every singular value of the centered matrix, descending.
    pub spectrum: Vec<f64>,
}

impl Embedding {
    /// The degenerate embedding of zero-dimensional codes.
    pub fn empty() -> Self {
        Self {
            mean: Vec::new(),
            directions: [Vec::new(), Vec::new()],
            singular_values: [0.0, 0.0],
            spectrum: Vec::new(),
        }
    }

    /// The code at plane coordinates `(x, y)`: `m + x·s₁·d₁ + y·s₂·d₂`.
    pub fn point(&self, x: f64, y: f64) -> Vec<f64> {
        let [s1, s2] = self.singular_values;
        (0..self.mean.len())
            .map(|i| self.mean[i] + x * s1 * self.directions[0][i] + y * s2 * self.directions[1][i])
            .collect()
    }

    /// Plane coordinates of a code: `(h − m)·dᵢ / sᵢ` (zero when `sᵢ = 0`).
    pub fn project(&self, h: &[f64]) -> (f64, f64) {
        let coord = |i: usize| {
            let s = self.singular_values[i];
            if s == 0.0 {
                return 0.0;
            }
            let dot: f64 = h
                .iter()
                .zip(&self.mean)
                .zip(&self.directions[i])
                .map(|((h, m), d)| (h - m) * d)
                .sum();
            dot / s
        };
        (coord(0), coord(1))
    }
}

/// Right singular vectors and singular values of `a` (one-sided Jacobi),
/// sorted by decreasing singular value.
pub fn jacobi_svd(a: &Matrix) -> (Vec<f64>, Matrix) {
    let (n, d) = (a.rows(), a.cols());
    // Work on columns.
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..d).map(|j| (0..d).map(|i| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for vecs in [&mut cols, &mut v] {
                    let (left, right) = vecs.split_at_mut(q);
                    for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                        let (xp, yq) = (*x, *y);
                        *x = c * xp - s * yq;
                        *y = s * xp + c * yq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&j| norms[j]).collect();
    let mut right = Matrix::zeros(d, d);
    for (out_col, &j) in order.iter().enumerate() {
        for i in 0..d {
            right.set(i, out_col, v[j][i]);
        }
    }
    (values, right)
}

/// Centers `h` (rows are documents) and returns its two most informative
/// directions. Directions are signed so their first non-negligible entry is
/// positive.
pub fn svd_embed(h: &Matrix) -> Result<Embedding, EvalError> {
    let (n, d) = (h.rows(), h.cols());
    if n < 2 {
        return Err(EvalError::TooFewRows { need: 2, got: n });
    }
    if d == 0 {
        return Err(EvalError::RankZero);
    }
    let mean: Vec<f64> = h.col_sums().iter().map(|s| s / n as f64).collect();
    let mut centered = h.clone();
    for i in 0..n {
        for (x, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    let (spectrum, right) = jacobi_svd(&centered);
    let top = spectrum[0];
    if top == 0.0 {
        return Err(EvalError::RankZero);
    }
    let direction = |c: usize| -> (Vec<f64>, f64) {
        if c >= d {
            return (vec![0.0; d], 0.0);
        }
        let mut dir: Vec<f64> = (0..d).map(|i| right.get(i, c)).collect();
        let scale = dir.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if let Some(first) = dir.iter().find(|x| x.abs() > 1e-12 * scale) {
            if *first < 0.0 {
                dir.iter_mut().for_each(|x| *x = -*x);
            }
        }
        // Directions of numerically zero singular values carry no signal.
        let s = if spectrum[c] <= 1e-12 * top { 0.0 } else { spectrum[c] };
        (dir, s)
    };
    let (d1, s1) = direction(0);
    let (d2, s2) = direction(1);
    Ok(Embedding {
        mean,
        directions: [d1, d2],
        singular_values: [s1, s2],
        spectrum,
    })
}

/// Expected topic strength `β·p_k·E[exp f(h, ℓ_k)]` over a square of the
/// embedding plane. `values[(i, j)]` is the point `y = coords[i]`,
/// `x = coords[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaintboxGrid {
    pub topic: usize,
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
    pub beta_p: f64,
    pub values: Matrix,
}

impl PaintboxGrid {
    /// Grid coordinate `i`: `lo + (hi − lo)·i / (R − 1)`.
    pub fn coord(&self, i: usize) -> f64 {
        grid_coord(self.lo, self.hi, self.resolution, i)
    }
}

fn grid_coord(lo: f64, hi: f64, resolution: usize, i: usize) -> f64 {
    if i + 1 == resolution {
        hi
    } else {
        lo + (hi - lo) * i as f64 / (resolution - 1) as f64
    }
}

pub const DEFAULT_GRID_RANGE: (f64, f64) = (-0.2, 0.2);
pub const DEFAULT_GRID_RESOLUTION: usize = 64;

/// Evaluates the topic-strength grid for topic `k`.
pub fn paintbox_grid(
    globals: &GlobalState,
    embed: &Embedding,
    k: usize,
    range: (f64, f64),
    resolution: usize,
) -> Result<PaintboxGrid, EvalError> {
    if k >= globals.k() {
        return Err(EvalError::Invalid(format!("topic {k} out of range (K = {})", globals.k())));
    }
    if resolution < 2 {
        return Err(EvalError::Invalid("resolution must be at least 2".into()));
    }
    let (lo, hi) = range;
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(EvalError::Invalid(format!("bad grid range [{lo}, {hi}]")));
    }
    if embed.mean.len() != globals.hyper.code_dim() {
        return Err(EvalError::Invalid("embedding dimension does not match the model".into()));
    }
    let beta_p = globals.hyper.beta * globals.stick_weights()[k];
    let r = resolution;
    let mut values = Matrix::zeros(r, r);
    match &globals.decoder {
        None => values.data_mut().iter_mut().for_each(|v| *v = beta_p),
        Some(decoder) => {
            let d_in = decoder.input_dim();
            let mut x = Matrix::zeros(r * r, d_in);
            let ell = globals.ell.row(k);
            for i in 0..r {
                for j in 0..r {
                    let h = embed.point(grid_coord(lo, hi, r, j), grid_coord(lo, hi, r, i));
                    let row = x.row_mut(i * r + j);
                    row[..h.len()].copy_from_slice(&h);
                    row[h.len()..].copy_from_slice(ell);
                }
            }
            let y = decoder.predict(&x).map_err(ModelError::from)?;
            for (idx, v) in values.data_mut().iter_mut().enumerate() {
                *v = beta_p * expect_exp_normal(y.get(idx, 0), y.get(idx, 1));
            }
        }
    }
    Ok(PaintboxGrid {
        topic: k,
        lo,
        hi,
        resolution,
        beta_p,
        values,
    })
}

/// First line `k=..,lo=..,hi=..,resolution=..,beta_p=..`, then one line per
/// grid row (increasing `y`), values in increasing `x`.
pub fn write_grid_csv<W: Write>(grid: &PaintboxGrid, mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "k={},lo={},hi={},resolution={},beta_p={}",
        grid.topic, grid.lo, grid.hi, grid.resolution, grid.beta_p
    )?;
    for i in 0..grid.resolution {
        let line: Vec<String> = grid.values.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_grid_csv<R: BufRead>(r: R) -> Result<PaintboxGrid, EvalError> {
    let mut lines = r.lines();
    let header = lines.next().ok_or(EvalError::Parse {
        line: 1,
        msg: "missing header".into(),
    })??;
    let bad = |line: usize, msg: String| EvalError::Parse { line, msg };
    let mut fields = std::collections::HashMap::new();
    for part in header.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| bad(1, format!("expected key=value, got {part:?}")))?;
        fields.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| fields.get(key).ok_or_else(|| bad(1, format!("missing {key}")));
    let num = |key: &str| -> Result<f64, EvalError> {
        get(key)?.parse().map_err(|_| bad(1, format!("bad value for {key}")))
    };
    let topic: usize = get("k")?.parse().map_err(|_| bad(1, "bad k".into()))?;
    let resolution: usize = get("resolution")?
        .parse()
        .map_err(|_| bad(1, "bad resolution".into()))?;
    let (lo, hi, beta_p) = (num("lo")?, num("hi")?, num("beta_p")?);
    let mut values = Matrix::zeros(resolution, resolution);
    for i in 0..resolution {
        let line = lines
            .next()
            .ok_or_else(|| bad(i + 2, "missing grid row".into()))??;
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(i + 2, e.to_string()))?;
        if row.len() != resolution {
            return Err(bad(i + 2, format!("expected {resolution} values, got {}", row.len())));
        }
        values.row_mut(i).copy_from_slice(&row);
    }
    Ok(PaintboxGrid {
        topic,
        lo,
        hi,
        resolution,
        beta_p,
        values,
    })
}

/// Per-document plane coordinates, header `doc,x,y`.
pub fn write_projections_csv<W: Write>(points: &[(usize, f64, f64)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "doc,x,y")?;
    for (doc, x, y) in points {
        writeln!(w, "{doc},{x},{y}")?;
    }
    Ok(())
}


#[cfg(test)]
mod tests;

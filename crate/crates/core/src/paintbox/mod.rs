//! Generative samplers: binary feature paintboxes over the unit square and
//! the full topic-model prior, with the latent variables kept for recovery
//! checks.

use rand::distributions::WeightedIndex;
use rand::Rng;
use rand_distr::{Beta, Dirichlet, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Document};
use crate::model::{GlobalState, ModelError};
use crate::nnet::Matrix;
use crate::rng::rng_for;

#[derive(Debug, Error)]
pub enum PaintboxError {
    #[error("rectangle {index} is not inside the unit square: {rect:?}")]
    BadRect { index: usize, rect: Rect },
    #[error("feature subset must be non-empty and index existing features")]
    BadSubset,
    #[error("invalid planted model: {0}")]
    Planted(String),
    #[error("document {doc}: all topic weights underflowed to zero")]
    NoMass { doc: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Axis-aligned rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn unit() -> Self {
        Self::new(0.0, 0.0, 1.0, 1.0)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn contains(&self, u: (f64, f64)) -> bool {
        u.0 >= self.x0 && u.0 < self.x1 && u.1 >= self.y0 && u.1 < self.y1
    }

    fn is_valid(&self) -> bool {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        inside(self.x0) && inside(self.x1) && inside(self.y0) && inside(self.y1) && self.x0 <= self.x1 && self.y0 <= self.y1
    }
}

/// One rectangle per feature; `Z_k = 1` when a uniform point of the unit
/// square falls in rectangle `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectPaintbox {
    rects: Vec<Rect>,
}

impl RectPaintbox {
    pub fn new(rects: Vec<Rect>) -> Result<Self, PaintboxError> {
        for (index, rect) in rects.iter().enumerate() {
            if !rect.is_valid() {
                return Err(PaintboxError::BadRect { index, rect: *rect });
            }
        }
        Ok(Self { rects })
    }

    /// Rectangles with corners drawn uniformly in the unit square.
    pub fn random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        let rects = (0..k)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.gen(), rng.gen());
                let (c, d): (f64, f64) = (rng.gen(), rng.gen());
                Rect::new(a.min(b), c.min(d), a.max(b), c.max(d))
            })
            .collect();
        Self { rects }
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    /// Feature memberships of a point.
    pub fn paint(&self, u: (f64, f64)) -> Vec<bool> {
        self.rects.iter().map(|r| r.contains(u)).collect()
    }
}

/// `n` rows of feature memberships for iid uniform points.
pub fn sample_paintbox_rows(paintbox: &RectPaintbox, n: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = rng_for(seed, &[]);
    (0..n).map(|_| paintbox.paint((rng.gen(), rng.gen()))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of `E[∏_{k∈J} Z_k]`, the probability that a uniform
/// point lies in every rectangle of `subset`.
pub fn joint_moment_mc(
    paintbox: &RectPaintbox,
    subset: &[usize],
    samples: usize,
    seed: u64,
) -> Result<MomentEstimate, PaintboxError> {
    if subset.is_empty() || samples == 0 || subset.iter().any(|&k| k >= paintbox.len()) {
        return Err(PaintboxError::BadSubset);
    }
    let mut rng = rng_for(seed, &[]);
    let mut hits = 0usize;
    for _ in 0..samples {
        let u = (rng.gen(), rng.gen());
        if subset.iter().all(|&k| paintbox.rects[k].contains(u)) {
            hits += 1;
        }
    }
    let mean = hits as f64 / samples as f64;
    Ok(MomentEstimate {
        mean,
        stderr: (mean * (1.0 - mean) / samples as f64).sqrt(),
        samples,
    })
}

/// How the planted decoder maps `(h, ℓ_k)` to the moments of `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantedDecoder {
    /// `f = 0`.
    Constant,
    /// `μ = offset + scale·hᵀℓ_k`, fixed variance.
    Bilinear { scale: f64, offset: f64, var: f64 },
}

/// Everything needed to generate documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedModel {
    pub beta: f64,
    /// Prior variance of the document codes.
    pub h_prior_var: f64,
    /// Code dimension; must equal the location dimension for bilinear
    /// decoders.
    pub d_h: usize,
    pub p: Vec<f64>,
    /// `K × d` topic locations.
    pub ell: Matrix,
    /// `K × D` topic-word distributions (rows sum to one).
    pub topics: Matrix,
    pub decoder: PlantedDecoder,
}

/// Source of the decoder moments during sampling.
enum MomentSource<'a> {
    Planted(&'a PlantedModel),
    Model(&'a GlobalState),
}

impl MomentSource<'_> {
    fn moments(&self, h: &[f64], k: usize) -> Result<Vec<(f64, f64)>, PaintboxError> {
        match self {
            MomentSource::Planted(m) => Ok(match m.decoder {
                PlantedDecoder::Constant => vec![(0.0, 0.0); k],
                PlantedDecoder::Bilinear { scale, offset, var } => (0..k)
                    .map(|t| {
                        let dot: f64 = h.iter().zip(m.ell.row(t)).map(|(a, b)| a * b).sum();
                        (offset + scale * dot, var)
                    })
                    .collect(),
            }),
            MomentSource::Model(g) => Ok((0..k).map(|t| g.decoder_moments(h, t)).collect::<Result<_, _>>()?),
        }
    }
}

impl PlantedModel {
    pub fn validate(&self) -> Result<(), PaintboxError> {
        let k = self.p.len();
        let bad = |m: &str| Err(PaintboxError::Planted(m.to_string()));
        if k == 0 {
            return bad("need at least one topic");
        }
        if !(self.beta > 0.0 && self.h_prior_var > 0.0) {
            return bad("beta and h_prior_var must be positive");
        }
        if self.p.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return bad("stick weights must be positive");
        }
        if self.topics.rows() != k || self.ell.rows() != k {
            return bad("topics and locations need one row per stick weight");
        }
        if self.topics.cols() == 0 {
            return bad("empty vocabulary");
        }
        for t in 0..k {
            let row = self.topics.row(t);
            if row.iter().any(|&x| x < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("topic rows must be probability vectors");
            }
        }
        if let PlantedDecoder::Bilinear { var, .. } = self.decoder {
            if self.ell.cols() != self.d_h {
                return bad("bilinear decoder needs d_h equal to the location dimension");
            }
            if var < 0.0 {
                return bad("variance must be non-negative");
            }
        }
        Ok(())
    }

    /// Two groups of topics that switch on together. Topics `0..k/2` sit at
    /// location `e₁`, the rest at `e₂`; codes are 2-dimensional, so
    /// `μ = offset + scale·h₁` for the first group and `offset + scale·h₂`
    /// for the second. Topics are drawn from `Dir(gamma0)`.
    pub fn two_groups<R: Rng + ?Sized>(
        k: usize,
        num_words: usize,
        beta: f64,
        gamma0: f64,
        scale: f64,
        var: f64,
        rng: &mut R,
    ) -> Result<Self, PaintboxError> {
        if k < 2 {
            return Err(PaintboxError::Planted("two groups need at least two topics".into()));
        }
        let mut ell = Matrix::zeros(k, 2);
        for t in 0..k {
            ell.set(t, usize::from(t >= k / 2), 1.0);
        }
        let model = Self {
            beta,
            h_prior_var: 1.0,
            d_h: 2,
            p: vec![1.0 / k as f64; k],
            ell,
            topics: sample_topics(k, num_words, gamma0, rng)?,
            decoder: PlantedDecoder::Bilinear {
                scale,
                offset: 0.0,
                var,
            },
        };
        model.validate()?;
        Ok(model)
    }

    /// Sticks from `Beta(1, α)`, locations from `N(0, bI)` and topics from
    /// `Dir(γ0)`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_prior<R: Rng + ?Sized>(
        k: usize,
        num_words: usize,
        alpha: f64,
        beta: f64,
        gamma0: f64,
        d: usize,
        ell_prior_var: f64,
        decoder: PlantedDecoder,
        rng: &mut R,
    ) -> Result<Self, PaintboxError> {
        let stick = Beta::new(1.0, alpha).map_err(|e| PaintboxError::Planted(e.to_string()))?;
        let mut rest = 1.0;
        let p = (0..k)
            .map(|_| {
                let v: f64 = stick.sample(rng);
                let w = v * rest;
                rest *= 1.0 - v;
                w.max(f64::MIN_POSITIVE)
            })
            .collect();
        let normal = Normal::new(0.0, ell_prior_var.sqrt()).map_err(|e| PaintboxError::Planted(e.to_string()))?;
        let ell = Matrix::from_vec(k, d, (0..k * d).map(|_| normal.sample(rng)).collect());
        let model = Self {
            beta,
            h_prior_var: 1.0,
            d_h: d,
            p,
            ell,
            topics: sample_topics(k, num_words, gamma0, rng)?,
            decoder,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.p.len()
    }

    pub fn num_words(&self) -> usize {
        self.topics.cols()
    }
}

/// Each row drawn from a symmetric `Dir(gamma0)`.
pub fn sample_topics<R: Rng + ?Sized>(k: usize, num_words: usize, gamma0: f64, rng: &mut R) -> Result<Matrix, PaintboxError> {
    if num_words < 2 {
        return Ok(Matrix::from_vec(k, num_words, vec![1.0; k * num_words]));
    }
    let dir = Dirichlet::new_with_size(gamma0, num_words).map_err(|e| PaintboxError::Planted(e.to_string()))?;
    let mut topics = Matrix::zeros(k, num_words);
    for t in 0..k {
        let mut row: Vec<f64> = dir.sample(rng);
        // Tiny concentrations can round every draw to zero; fall back to a
        // point mass on a random word.
        let s: f64 = row.iter().sum();
        if !(s > 0.0) || row.iter().any(|x| !x.is_finite()) {
            row = vec![0.0; num_words];
            row[rng.gen_range(0..num_words)] = 1.0;
        } else {
            row.iter_mut().for_each(|x| *x /= s);
        }
        topics.row_mut(t).copy_from_slice(&row);
    }
    Ok(topics)
}

/// Latent variables behind a sampled corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub model: Option<PlantedModel>,
    /// `N × d_h` document codes.
    pub h: Matrix,
    /// `N × K` draws of `f`.
    pub f: Matrix,
    /// `N × K` draws of `Z`.
    pub z: Matrix,
}

#[allow(clippy::too_many_arguments)]
fn sample_docs<R: Rng + ?Sized>(
    source: MomentSource,
    beta_p: &[f64],
    h_prior_var: f64,
    d_h: usize,
    topics: &Matrix,
    n: usize,
    doc_len: usize,
    rng: &mut R,
) -> Result<(Corpus, GroundTruth), PaintboxError> {
    let k = beta_p.len();
    let d = topics.cols();
    let words: Vec<WeightedIndex<f64>> = (0..k)
        .map(|t| WeightedIndex::new(topics.row(t)).map_err(|e| PaintboxError::Planted(e.to_string())))
        .collect::<Result<_, _>>()?;
    let code = Normal::new(0.0, h_prior_var.sqrt()).map_err(|e| PaintboxError::Planted(e.to_string()))?;
    let shapes: Vec<Gamma<f64>> = beta_p
        .iter()
        .map(|&s| Gamma::new(s, 1.0).map_err(|e| PaintboxError::Planted(e.to_string())))
        .collect::<Result<_, _>>()?;

    let mut h_all = Matrix::zeros(n, d_h);
    let mut f_all = Matrix::zeros(n, k);
    let mut z_all = Matrix::zeros(n, k);
    let mut docs = Vec::with_capacity(n);
    for doc in 0..n {
        let h: Vec<f64> = (0..d_h).map(|_| code.sample(rng)).collect();
        let moments = source.moments(&h, k)?;
        let mut z = vec![0.0; k];
        let mut f = vec![0.0; k];
        let mut total = 0.0;
        for _attempt in 0..100 {
            for t in 0..k {
                let (mu, var) = moments[t];
                f[t] = if var > 0.0 { mu + var.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal) } else { mu };
                // Gamma(shape, scale e^f) = e^f · Gamma(shape, 1).
                z[t] = shapes[t].sample(rng) * f[t].exp();
            }
            total = z.iter().sum();
            if total > 0.0 {
                break;
            }
        }
        if !(total > 0.0 && total.is_finite()) {
            return Err(PaintboxError::NoMass { doc });
        }
        let pick = WeightedIndex::new(&z).map_err(|_| PaintboxError::NoMass { doc })?;
        let mut counts = vec![0u32; d];
        for _ in 0..doc_len {
            let topic = pick.sample(rng);
            counts[words[topic].sample(rng)] += 1;
        }
        docs.push(Document::from_counts(
            counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(w, &c)| (w as u32, c)),
        ));
        h_all.row_mut(doc).copy_from_slice(&h);
        f_all.row_mut(doc).copy_from_slice(&f);
        z_all.row_mut(doc).copy_from_slice(&z);
    }
    Ok((
        Corpus::new(d, docs),
        GroundTruth {
            model: None,
            h: h_all,
            f: f_all,
            z: z_all,
        },
    ))
}

/// Draws `n` documents of `doc_len` tokens each: `h ~ N(0, aI)`,
/// `f_k ~ N(μ, σ²)`, `Z_k ~ Gamma(βp_k, e^{f_k})`, then every token picks a
/// topic from `Z / ΣZ` and a word from that topic.
pub fn sample_prme_corpus(
    model: &PlantedModel,
    n: usize,
    doc_len: usize,
    seed: u64,
) -> Result<(Corpus, GroundTruth), PaintboxError> {
    model.validate()?;
    let mut rng = rng_for(seed, &[]);
    let beta_p: Vec<f64> = model.p.iter().map(|&p| model.beta * p).collect();
    let (corpus, mut truth) = sample_docs(
        MomentSource::Planted(model),
        &beta_p,
        model.h_prior_var,
        model.d_h,
        &model.topics,
        n,
        doc_len,
        &mut rng,
    )?;
    truth.model = Some(model.clone());
    Ok((corpus, truth))
}

/// Samples from the prior of a fitted model: its sticks, locations,
/// decoder and mean topics.
pub fn sample_from_globals(
    globals: &GlobalState,
    n: usize,
    doc_len: usize,
    seed: u64,
) -> Result<(Corpus, GroundTruth), PaintboxError> {
    let mut rng = rng_for(seed, &[]);
    let beta_p: Vec<f64> = globals.stick_weights().iter().map(|&p| globals.hyper.beta * p).collect();
    sample_docs(
        MomentSource::Model(globals),
        &beta_p,
        globals.hyper.h_prior_var,
        globals.hyper.code_dim(),
        &globals.topic_means(),
        n,
        doc_len,
        &mut rng,
    )
}

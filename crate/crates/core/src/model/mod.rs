//! The correlated Gamma-process topic model and its amortized variational
//! inference.
//!
//! Generative chain for document `n` and topic `k` (truncated at `K`):
//!
//! ```text
//! V_k ~ Beta(1, α)            p_k = V_k ∏_{j<k} (1 − V_j)
//! h_n ~ N(0, a·I)             ℓ_k ~ N(0, b·I)
//! f_nk ~ N(μ_f(h_n, ℓ_k), σ²_f(h_n, ℓ_k))
//! Z_nk ~ Gamma(shape β·p_k, scale exp(f_nk))
//! θ_k ~ Dir(γ0)               C_nm ~ Disc(Z_n / Σ_k Z_nk)     X_nm ~ Disc(θ_{C_nm})
//! ```
//!
//! The variational family keeps point estimates for `V`, `ℓ` and `h`
//! (`h_n = g(X_n)` through an encoder network), a Dirichlet for each topic,
//! a Gamma for each `Z_nk`, and a categorical for every token.

mod checkpoint;
mod elbo;
mod global;
mod local;
mod train;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_features, Document};
use crate::nnet::{
    build_architecture, AdamConfig, AdamState, ArchKind, ArchOptions, Bounding, Layer, Matrix, NetError,
    Network, Role,
};
use crate::stats::{expect_log_dirichlet_into, expect_neg_exp_normal, ln_gamma_unchecked, sigmoid};

pub use checkpoint::{
    checkpoint_load, checkpoint_save, read_checkpoint_header, ArrayEntry, CheckpointHeader, ResumeHeader, TrainResume,
};
pub use elbo::{elbo, ElboReport, LocalTerms};
pub use global::{
    elbo_gradient, grad_step_globals, natural_grad_theta, update_q_theta_batch, GlobalGrads,
};
pub use local::{
    local_loop, local_objective, update_q_c, update_q_z, update_q_z_eps, DocContext, LocalConfig, LocalState, WarmStart,
};
pub use train::{rho_schedule, train_batch, train_stochastic, IterRecord, StochasticConfig, TrainConfig, Trainer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("held-out evaluation failed: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Decoder configurations. `Constant` fixes `f = 0` (an HDP-style
/// `Gamma(βp_k, 1)` prior); `Linear` uses a bounded linear mean with a learned
/// input-independent variance; the rest are neural decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Constant,
    Linear,
    Mlp,
    MlpBn,
    Resnet,
    ResnetBn,
}

impl DecoderKind {
    fn arch(self) -> Option<ArchKind> {
        match self {
            DecoderKind::Constant | DecoderKind::Linear => None,
            DecoderKind::Mlp => Some(ArchKind::Mlp),
            DecoderKind::MlpBn => Some(ArchKind::MlpBn),
            DecoderKind::Resnet => Some(ArchKind::Resnet),
            DecoderKind::ResnetBn => Some(ArchKind::ResnetBn),
        }
    }
}

/// Model hyperparameters and network shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyper {
    /// Truncation level.
    pub k: usize,
    /// Stick-breaking `Beta(1, α)` parameter.
    pub alpha: f64,
    /// Gamma-process concentration.
    pub beta: f64,
    /// Symmetric Dirichlet prior on topics.
    pub gamma0: f64,
    /// Prior variance of document codes `h`.
    pub h_prior_var: f64,
    /// Prior variance of topic locations `ℓ`.
    pub ell_prior_var: f64,
    pub d_h: usize,
    pub d_ell: usize,
    pub decoder: DecoderKind,
    /// Combined encoder + decoder depth (2, 4, 6, 8, …).
    pub depth: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub bounding: Bounding,
    /// Initial decoder variance; for the linear decoder this is the starting
    /// value of its single learned variance.
    pub decoder_init_var: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            k: 100,
            alpha: 1.0,
            beta: 5.0,
            gamma0: 0.2,
            h_prior_var: 1.0,
            ell_prior_var: 1.0,
            d_h: 20,
            d_ell: 20,
            decoder: DecoderKind::MlpBn,
            depth: 4,
            enc_hidden: 1000,
            dec_hidden: 80,
            bounding: Bounding::default(),
            decoder_init_var: 0.1,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma0", self.gamma0),
            ("h_prior_var", self.h_prior_var),
            ("ell_prior_var", self.ell_prior_var),
            ("bn_eps", self.bn_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.k == 0 {
            return Err(ModelError::Config("k must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(ModelError::Config("bn_momentum must lie in [0, 1)".into()));
        }
        self.bounding.validate()?;
        if !(self.decoder_init_var > 0.0 && self.decoder_init_var < self.bounding.var_max) {
            return Err(ModelError::Config("decoder_init_var must lie in (0, var_max)".into()));
        }
        if self.decoder != DecoderKind::Constant {
            if self.d_h == 0 || self.d_ell == 0 || self.enc_hidden == 0 || self.dec_hidden == 0 {
                return Err(ModelError::Config("network dimensions must be positive".into()));
            }
            if self.depth < 2 || self.depth % 2 != 0 {
                return Err(ModelError::Config(format!("depth must be even and >= 2, got {}", self.depth)));
            }
            if matches!(self.decoder, DecoderKind::Resnet | DecoderKind::ResnetBn) && self.depth < 4 {
                return Err(ModelError::Config("residual decoders need depth >= 4".into()));
            }
        }
        Ok(())
    }

    /// Dimension of `h` actually used (zero for the constant decoder).
    pub fn code_dim(&self) -> usize {
        if self.decoder == DecoderKind::Constant {
            0
        } else {
            self.d_h
        }
    }

    pub fn location_dim(&self) -> usize {
        if self.decoder == DecoderKind::Constant {
            0
        } else {
            self.d_ell
        }
    }

    fn arch_options(&self) -> ArchOptions {
        ArchOptions {
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
            bounding: self.bounding,
        }
    }

    /// Initial stick proportion: the prior mean `1/(1+α)`, lowered when
    /// needed so the last stick weight stays above `1e-5 · V`.
    pub fn initial_stick(&self) -> f64 {
        let prior_mean = 1.0 / (1.0 + self.alpha);
        if self.k <= 1 {
            return prior_mean;
        }
        let cap = 1.0 - 1e-5f64.powf(1.0 / (self.k - 1) as f64);
        prior_mean.min(cap)
    }
}

/// Global variational parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub hyper: Hyper,
    pub num_words: usize,
    /// `V̂_k = sigmoid(v_logits[k])`.
    pub v_logits: Vec<f64>,
    /// Topic locations, `K × d_ell`.
    pub ell: Matrix,
    /// Dirichlet parameters of the topics, `K × D`.
    pub gamma: Matrix,
    pub encoder: Option<Network>,
    pub decoder: Option<Network>,
    pub adam: AdamState,
    /// Completed global iterations.
    pub iteration: u64,
}

/// Quantities derived from the global state that every local update needs.
#[derive(Debug, Clone)]
pub struct GlobalExpectations {
    pub p: Vec<f64>,
    pub beta_p: Vec<f64>,
    pub ln_gamma_beta_p: Vec<f64>,
    /// `E[ln θ_kd]`, `K × D`.
    pub elog_theta: Matrix,
}

/// Per-document network outputs: the code `h` and decoder moments per topic.
#[derive(Debug, Clone, PartialEq)]
pub struct DocMoments {
    pub h: Vec<f64>,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl DocMoments {
    /// `E[exp(−f_k)]` per topic.
    pub fn expect_neg_exp(&self) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.var)
            .map(|(&m, &v)| expect_neg_exp_normal(m, v))
            .collect()
    }
}

/// `p_k = V_k ∏_{j<k} (1 − V_j)` with `V = sigmoid(logits)`. `1 − V` is
/// evaluated as `sigmoid(−logit)` to keep precision for sticks near one.
pub fn stick_weights(v_logits: &[f64]) -> Vec<f64> {
    let mut rest = 1.0;
    v_logits
        .iter()
        .map(|&v| {
            let p = sigmoid(v) * rest;
            rest *= sigmoid(-v);
            p
        })
        .collect()
}

impl GlobalState {
    /// Random initial state for a vocabulary of `num_words` terms.
    ///
    /// Topics start at `γ0 + s·Exp(1)` with `s = mean_doc_tokens·num_docs / (K·D)`;
    /// sticks at [`Hyper::initial_stick`]; locations from their prior. Network
    /// decoders start with a zero output layer so that `μ_f = (μ_lo+μ_hi)/2`
    /// and `σ²_f = decoder_init_var` everywhere.
    pub fn init<R: Rng + ?Sized>(
        hyper: &Hyper,
        num_words: usize,
        total_tokens: u64,
        adam: AdamConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        hyper.validate()?;
        if num_words == 0 {
            return Err(ModelError::Config("empty vocabulary".into()));
        }
        let k = hyper.k;
        let v0 = hyper.initial_stick();
        let v_logits = vec![(v0 / (1.0 - v0)).ln(); k];

        let scale = (total_tokens as f64 / (k * num_words) as f64).max(0.1);
        let gamma_data = (0..k * num_words)
            .map(|_| hyper.gamma0 + scale * <Exp1 as Distribution<f64>>::sample(&Exp1, rng))
            .collect();
        let gamma = Matrix::from_vec(k, num_words, gamma_data);

        let d_ell = hyper.location_dim();
        let sd = hyper.ell_prior_var.sqrt();
        let ell = Matrix::from_vec(
            k,
            d_ell,
            (0..k * d_ell).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect(),
        );

        let opts = hyper.arch_options();
        let (encoder, decoder) = match hyper.decoder {
            DecoderKind::Constant => (None, None),
            kind => {
                let enc_kind = kind.arch().unwrap_or(ArchKind::Mlp);
                let encoder = build_architecture(
                    enc_kind,
                    Role::Encoder,
                    hyper.depth,
                    num_words,
                    hyper.enc_hidden,
                    hyper.d_h,
                    &opts,
                    rng,
                )?;
                let d_in = hyper.d_h + hyper.d_ell;
                let mut decoder = match kind.arch() {
                    Some(arch) => build_architecture(arch, Role::Decoder, hyper.depth, d_in, hyper.dec_hidden, 2, &opts, rng)?,
                    None => Network::new(vec![
                        Layer::Dense(crate::nnet::Dense::random(d_in, 2, rng)),
                        Layer::Bounding(hyper.bounding),
                    ])?,
                };
                let raw_var = hyper.bounding.raw_for_var(hyper.decoder_init_var);
                let last_dense = decoder
                    .layers_mut()
                    .iter_mut()
                    .rev()
                    .find_map(|l| match l {
                        Layer::Dense(d) => Some(d),
                        _ => None,
                    })
                    .expect("decoder has a dense layer");
                last_dense.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
                last_dense.bias[0] = 0.0;
                last_dense.bias[1] = raw_var;
                (Some(encoder), Some(decoder))
            }
        };

        let mut state = Self {
            hyper: hyper.clone(),
            num_words,
            v_logits,
            ell,
            gamma,
            encoder,
            decoder,
            adam: AdamState::new(&[], adam),
            iteration: 0,
        };
        state.adam = AdamState::new(&state.gradient_shapes(), adam);
        Ok(state)
    }

    /// Lengths of the arrays moved by gradient steps, in optimizer order:
    /// stick logits, locations, encoder parameters, decoder parameters.
    pub fn gradient_shapes(&self) -> Vec<usize> {
        let mut shapes = vec![self.v_logits.len(), self.ell.data().len()];
        if let Some(e) = &self.encoder {
            shapes.extend(e.param_shapes());
        }
        if let Some(d) = &self.decoder {
            shapes.extend(d.param_shapes());
        }
        shapes
    }

    /// The arrays trained by gradient steps, in [`GlobalGrads::flatten`] order.
    pub fn gradient_params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.v_logits, self.ell.data_mut()];
        if let Some(e) = &mut self.encoder {
            out.extend(e.params_mut());
        }
        if let Some(d) = &mut self.decoder {
            out.extend(d.params_mut());
        }
        out
    }

    pub fn k(&self) -> usize {
        self.hyper.k
    }

    pub fn sticks(&self) -> Vec<f64> {
        self.v_logits.iter().map(|&v| sigmoid(v)).collect()
    }

    pub fn stick_weights(&self) -> Vec<f64> {
        stick_weights(&self.v_logits)
    }

    pub fn expectations(&self) -> GlobalExpectations {
        let p = self.stick_weights();
        let beta_p: Vec<f64> = p.iter().map(|&x| self.hyper.beta * x).collect();
        let ln_gamma_beta_p = beta_p.iter().map(|&x| ln_gamma_unchecked(x)).collect();
        let (k, d) = (self.gamma.rows(), self.gamma.cols());
        let mut elog_theta = Matrix::zeros(k, d);
        for t in 0..k {
            expect_log_dirichlet_into(self.gamma.row(t), elog_theta.row_mut(t));
        }
        GlobalExpectations {
            p,
            beta_p,
            ln_gamma_beta_p,
            elog_theta,
        }
    }

    /// Mean topic-word distributions `γ_kd / Σ_d γ_kd`.
    pub fn topic_means(&self) -> Matrix {
        let mut out = self.gamma.clone();
        for t in 0..out.rows() {
            let row = out.row_mut(t);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        out
    }

    /// Decoder moments `(μ_f, σ²_f)` for code `h` and topic `k`.
    pub fn decoder_moments(&self, h: &[f64], k: usize) -> Result<(f64, f64), ModelError> {
        assert!(k < self.k(), "topic {k} out of range");
        let Some(decoder) = &self.decoder else {
            return Ok((0.0, 0.0));
        };
        let mut row = Vec::with_capacity(h.len() + self.ell.cols());
        row.extend_from_slice(h);
        row.extend_from_slice(self.ell.row(k));
        let out = decoder.predict(&Matrix::from_vec(1, row.len(), row))?;
        Ok((out.get(0, 0), out.get(0, 1)))
    }

    /// Eval-mode encoder codes for a set of documents (`n × d_h`).
    pub fn encode(&self, docs: &[&Document]) -> Result<Matrix, ModelError> {
        let Some(encoder) = &self.encoder else {
            return Ok(Matrix::zeros(docs.len(), 0));
        };
        let features = self.features(docs);
        Ok(encoder.predict(&features)?)
    }

    pub(crate) fn features(&self, docs: &[&Document]) -> Matrix {
        let mut features = Matrix::zeros(docs.len(), self.num_words);
        for (i, d) in docs.iter().enumerate() {
            write_features(d, features.row_mut(i));
        }
        features
    }

    /// Decoder input rows `[h_n; ℓ_k]`, ordered document-major.
    pub(crate) fn decoder_inputs(&self, codes: &Matrix) -> Matrix {
        let (n, k) = (codes.rows(), self.k());
        let (dh, dl) = (codes.cols(), self.ell.cols());
        let mut x = Matrix::zeros(n * k, dh + dl);
        for i in 0..n {
            for t in 0..k {
                let row = x.row_mut(i * k + t);
                row[..dh].copy_from_slice(codes.row(i));
                row[dh..].copy_from_slice(self.ell.row(t));
            }
        }
        x
    }

    /// Eval-mode codes and decoder moments for each document.
    pub fn doc_moments(&self, docs: &[&Document]) -> Result<Vec<DocMoments>, ModelError> {
        const CHUNK: usize = 256;
        let k = self.k();
        let mut out = Vec::with_capacity(docs.len());
        for chunk in docs.chunks(CHUNK) {
            let codes = self.encode(chunk)?;
            match &self.decoder {
                None => {
                    for i in 0..chunk.len() {
                        out.push(DocMoments {
                            h: codes.row(i).to_vec(),
                            mu: vec![0.0; k],
                            var: vec![0.0; k],
                        });
                    }
                }
                Some(decoder) => {
                    let y = decoder.predict(&self.decoder_inputs(&codes))?;
                    for i in 0..chunk.len() {
                        let rows = i * k..(i + 1) * k;
                        out.push(DocMoments {
                            h: codes.row(i).to_vec(),
                            mu: rows.clone().map(|r| y.get(r, 0)).collect(),
                            var: rows.map(|r| y.get(r, 1)).collect(),
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

use serde::{Deserialize, Serialize};

use super::{DocMoments, GlobalExpectations, ModelError};
use crate::corpus::Document;
use crate::stats::{digamma_unchecked, exp_flush, gamma_entropy_unchecked};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalConfig {
    /// Maximum coordinate-ascent sweeps per document.
    pub max_iter: usize,
    /// Stop when the document objective changes by less than
    /// `tol · max(1, |objective|)`.
    pub tol: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-6 }
    }
}

/// Variational factors of one document: `q(Z_nk) = Gamma(a_k, b_k)`, token
/// responsibilities `φ` per distinct word type (row-major `W × K`, aligned
/// with [`Document::counts`]) and the auxiliary bound parameter `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalState {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub phi: Vec<f64>,
    pub eps: f64,
    pub sweeps: usize,
    pub converged: bool,
}

/// The part of a [`LocalState`] needed to restart coordinate ascent: `φ` is
/// recomputed from `(a, b)` by the first sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub eps: f64,
}

impl From<&LocalState> for WarmStart {
    fn from(s: &LocalState) -> Self {
        Self {
            a: s.a.clone(),
            b: s.b.clone(),
            eps: s.eps,
        }
    }
}

/// Everything a document's local updates read from the model.
pub struct DocContext<'a> {
    pub doc: &'a Document,
    pub exps: &'a GlobalExpectations,
    pub moments: &'a DocMoments,
    pub(crate) eneg: Vec<f64>,
    /// `E[ln θ]` gathered for the document's word types, `W × K`.
    pub(crate) elog: Vec<f64>,
}

impl<'a> DocContext<'a> {
    pub fn new(doc: &'a Document, exps: &'a GlobalExpectations, moments: &'a DocMoments) -> Self {
        let k = exps.p.len();
        assert_eq!(moments.mu.len(), k, "moments do not match the truncation level");
        let mut elog = Vec::with_capacity(doc.num_types() * k);
        for &(w, _) in doc.counts() {
            elog.extend((0..k).map(|t| exps.elog_theta.get(t, w as usize)));
        }
        Self {
            doc,
            exps,
            moments,
            eneg: moments.expect_neg_exp(),
            elog,
        }
    }

    pub fn k(&self) -> usize {
        self.exps.p.len()
    }
}

impl LocalState {
    /// Starting point: `a = βp + M/K`, `b = 1`, `ε = Σ a·b` and uniform `φ`.
    pub fn init(ctx: &DocContext) -> Self {
        let k = ctx.k();
        let m = ctx.doc.len() as f64;
        let a: Vec<f64> = ctx.exps.beta_p.iter().map(|&bp| bp + m / k as f64).collect();
        let b = vec![1.0; k];
        let eps = a.iter().sum();
        Self {
            a,
            b,
            phi: vec![1.0 / k as f64; ctx.doc.num_types() * k],
            eps,
            sweeps: 0,
            converged: false,
        }
    }

    pub fn from_warm(ctx: &DocContext, warm: &WarmStart) -> Self {
        let k = ctx.k();
        assert_eq!(warm.a.len(), k, "warm start has the wrong truncation level");
        Self {
            a: warm.a.clone(),
            b: warm.b.clone(),
            phi: vec![1.0 / k as f64; ctx.doc.num_types() * k],
            eps: warm.eps,
            sweeps: 0,
            converged: false,
        }
    }

    /// `E[Z_k] = a_k b_k`.
    pub fn expect_z(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| a * b).collect()
    }

    /// `E[ln Z_k] = ψ(a_k) + ln b_k`.
    pub fn expect_ln_z(&self) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(&a, &b)| digamma_unchecked(a) + b.ln())
            .collect()
    }

    /// Expected topic counts `Σ_w c_w φ_wk`.
    pub fn topic_counts(&self, doc: &Document) -> Vec<f64> {
        let k = self.a.len();
        let mut s = vec![0.0; k];
        for (i, &(_, c)) in doc.counts().iter().enumerate() {
            let c = c as f64;
            for (acc, &p) in s.iter_mut().zip(&self.phi[i * k..(i + 1) * k]) {
                *acc += c * p;
            }
        }
        s
    }

    /// Refreshes `ε` to `Σ_k E[Z_k]`, the minimizer of the bound on
    /// `E[ln Σ_k Z_k]`.
    pub fn refresh_eps(&mut self) {
        self.eps = self.expect_z().iter().sum();
    }
}

/// Closed-form optimum of `q(Z)` given `φ` and `ε`:
/// `a = βp + Σ_w c_w φ_w`, `b = 1 / (E[e^{−f}] + M/ε)`.
pub fn update_q_z(local: &mut LocalState, ctx: &DocContext) {
    let s = local.topic_counts(ctx.doc);
    let m = ctx.doc.len() as f64;
    for k in 0..ctx.k() {
        local.a[k] = ctx.exps.beta_p[k] + s[k];
        local.b[k] = 1.0 / (ctx.eneg[k] + m / local.eps);
    }
}

/// Joint optimum of `q(Z)` and `ε` given `φ`. Alternating [`update_q_z`]
/// with `ε = Σ_k E[Z_k]` converges to this point only at rate
/// `M / (M + Σ_k βp_k)`, which is close to one for long documents. The fixed
/// point solves `Σ_k a_k e_k ε / (e_k ε + M) = Σ_k βp_k` (with
/// `e_k = E[e^{−f_k}]`), whose left side is increasing and concave in `ε`, so
/// Newton's method from `ε = 0` approaches the root monotonically from below.
pub fn update_q_z_eps(local: &mut LocalState, ctx: &DocContext) {
    let s = local.topic_counts(ctx.doc);
    let m = ctx.doc.len() as f64;
    for k in 0..ctx.k() {
        local.a[k] = ctx.exps.beta_p[k] + s[k];
    }
    if m > 0.0 {
        let target: f64 = ctx.exps.beta_p.iter().sum();
        let mut eps = 0.0f64;
        for _ in 0..200 {
            let mut f = -target;
            let mut df = 0.0;
            for (&a, &e) in local.a.iter().zip(&ctx.eneg) {
                let den = e * eps + m;
                f += a * e * eps / den;
                df += a * e * m / (den * den);
            }
            let next = eps - f / df;
            if !(next > eps) || (next - eps) <= 1e-15 * next {
                eps = eps.max(next);
                break;
            }
            eps = next;
        }
        local.eps = eps;
    }
    for k in 0..ctx.k() {
        local.b[k] = 1.0 / (ctx.eneg[k] + m / local.eps);
    }
    if m == 0.0 {
        local.refresh_eps();
    }
}

/// Closed-form optimum of the token responsibilities given `q(Z)`:
/// `φ_wk ∝ exp(E[ln θ_kw] + E[ln Z_k])`.
pub fn update_q_c(local: &mut LocalState, ctx: &DocContext) {
    let k = ctx.k();
    let eln_z = local.expect_ln_z();
    let mut logits = vec![0.0; k];
    for i in 0..ctx.doc.num_types() {
        let elog = &ctx.elog[i * k..(i + 1) * k];
        for t in 0..k {
            logits[t] = elog[t] + eln_z[t];
        }
        // Softmax with a single exponential per entry.
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let phi = &mut local.phi[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for (p, &l) in phi.iter_mut().zip(&logits) {
            *p = exp_flush(l - max);
            sum += *p;
        }
        let inv = 1.0 / sum;
        phi.iter_mut().for_each(|p| *p *= inv);
    }
}

/// Unscaled per-document ELBO contributions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalTerms {
    pub log_prior_h: f64,
    pub loglik_z: f64,
    pub loglik_c: f64,
    pub loglik_x: f64,
    pub entropy_z: f64,
    pub entropy_c: f64,
}

impl LocalTerms {
    pub fn total(&self) -> f64 {
        self.log_prior_h + self.loglik_z + self.loglik_c + self.loglik_x + self.entropy_z + self.entropy_c
    }

    pub(crate) fn add_scaled(&mut self, other: &LocalTerms, scale: f64) {
        self.log_prior_h += scale * other.log_prior_h;
        self.loglik_z += scale * other.loglik_z;
        self.loglik_c += scale * other.loglik_c;
        self.loglik_x += scale * other.loglik_x;
        self.entropy_z += scale * other.entropy_z;
        self.entropy_c += scale * other.entropy_c;
    }
}

/// The document's share of the surrogate ELBO, with `E[ln Σ_k Z_k]` replaced
/// by its `ε` upper bound.
pub fn local_objective(local: &LocalState, ctx: &DocContext, h_prior_var: f64) -> LocalTerms {
    let k = ctx.k();
    let exps = ctx.exps;
    let m = ctx.doc.len() as f64;
    let ez = local.expect_z();
    let eln_z = local.expect_ln_z();
    let s = local.topic_counts(ctx.doc);

    let h = &ctx.moments.h;
    let log_prior_h = if h.is_empty() {
        0.0
    } else {
        let sq: f64 = h.iter().map(|x| x * x).sum();
        -0.5 * h.len() as f64 * (2.0 * std::f64::consts::PI * h_prior_var).ln() - sq / (2.0 * h_prior_var)
    };

    let mut loglik_z = 0.0;
    let mut entropy_z = 0.0;
    let mut sum_ez = 0.0;
    let mut c_term = 0.0;
    for t in 0..k {
        let bp = exps.beta_p[t];
        loglik_z += -exps.ln_gamma_beta_p[t] - bp * ctx.moments.mu[t] + (bp - 1.0) * eln_z[t] - ez[t] * ctx.eneg[t];
        entropy_z += gamma_entropy_unchecked(local.a[t], local.b[t]);
        sum_ez += ez[t];
        c_term += s[t] * eln_z[t];
    }
    let bound = local.eps.ln() + (sum_ez - local.eps) / local.eps;
    let loglik_c = c_term - m * bound;

    let mut loglik_x = 0.0;
    let mut entropy_c = 0.0;
    for (i, &(_, c)) in ctx.doc.counts().iter().enumerate() {
        let c = c as f64;
        let phi = &local.phi[i * k..(i + 1) * k];
        let elog = &ctx.elog[i * k..(i + 1) * k];
        let mut x = 0.0;
        let mut ent = 0.0;
        for t in 0..k {
            let p = phi[t];
            // Subnormal responsibilities add less than 1e-305 each.
            if p >= f64::MIN_POSITIVE {
                x += p * elog[t];
                ent -= p * p.ln();
            } else if p > 0.0 {
                x += p * elog[t];
            }
        }
        loglik_x += c * x;
        entropy_c += c * ent;
    }

    LocalTerms {
        log_prior_h,
        loglik_z,
        loglik_c,
        loglik_x,
        entropy_z,
        entropy_c,
    }
}

/// Coordinate ascent on one document: each sweep updates `φ`, then `q(Z)`
/// and `ε` jointly. Every step is an exact block optimum, so the document
/// objective never decreases.
pub fn local_loop(
    ctx: &DocContext,
    warm: Option<&WarmStart>,
    h_prior_var: f64,
    config: &LocalConfig,
) -> Result<LocalState, ModelError> {
    let mut local = match warm {
        Some(w) => LocalState::from_warm(ctx, w),
        None => LocalState::init(ctx),
    };
    let mut prev = f64::NEG_INFINITY;
    for sweep in 1..=config.max_iter.max(1) {
        update_q_c(&mut local, ctx);
        update_q_z_eps(&mut local, ctx);
        local.sweeps = sweep;
        let obj = local_objective(&local, ctx, h_prior_var).total();
        if !obj.is_finite() {
            return Err(ModelError::NonFinite("local objective".into()));
        }
        if (obj - prev).abs() <= config.tol * obj.abs().max(1.0) {
            local.converged = true;
            break;
        }
        prev = obj;
    }
    Ok(local)
}

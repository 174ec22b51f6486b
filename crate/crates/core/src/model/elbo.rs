use serde::{Deserialize, Serialize};

pub use super::local::LocalTerms;
use super::local::{local_objective, DocContext, LocalState};
use super::{DocMoments, GlobalState, ModelError};
use crate::corpus::Document;
use crate::nnet::{Matrix, Mode};
use crate::stats::{ln_gamma_unchecked, ln_sigmoid};

/// ELBO broken into its terms. Document-level terms are already multiplied
/// by the minibatch scale `N / |batch|`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub log_prior_v: f64,
    pub log_prior_ell: f64,
    pub log_prior_theta: f64,
    pub log_prior_h: f64,
    pub loglik_z: f64,
    pub loglik_c: f64,
    pub loglik_x: f64,
    pub entropy_theta: f64,
    pub entropy_z: f64,
    pub entropy_c: f64,
    pub total: f64,
}

impl ElboReport {
    pub fn sum_of_terms(&self) -> f64 {
        self.log_prior_v
            + self.log_prior_ell
            + self.log_prior_theta
            + self.log_prior_h
            + self.loglik_z
            + self.loglik_c
            + self.loglik_x
            + self.entropy_theta
            + self.entropy_z
            + self.entropy_c
    }
}

/// Codes and decoder moments for a batch. Train mode normalizes with the
/// statistics of this batch (running averages are not touched).
pub(crate) fn batch_moments(
    globals: &GlobalState,
    docs: &[&Document],
    mode: Mode,
) -> Result<Vec<DocMoments>, ModelError> {
    if mode == Mode::Eval || globals.encoder.is_none() {
        return globals.doc_moments(docs);
    }
    let (enc, dec) = (globals.encoder.as_ref().unwrap(), globals.decoder.as_ref().unwrap());
    let (codes, _) = enc.forward_frozen(&globals.features(docs), Mode::Train)?;
    let (y, _) = dec.forward_frozen(&globals.decoder_inputs(&codes), Mode::Train)?;
    Ok(split_moments(&codes, &y, globals.k()))
}

pub(crate) fn split_moments(codes: &Matrix, y: &Matrix, k: usize) -> Vec<DocMoments> {
    (0..codes.rows())
        .map(|i| DocMoments {
            h: codes.row(i).to_vec(),
            mu: (i * k..(i + 1) * k).map(|r| y.get(r, 0)).collect(),
            var: (i * k..(i + 1) * k).map(|r| y.get(r, 1)).collect(),
        })
        .collect()
}

/// Global-only terms: priors on `V`, `ℓ`, `θ` and the entropy of `q(θ)`.
fn global_terms(globals: &GlobalState, report: &mut ElboReport, elog_theta: &Matrix) {
    let h = &globals.hyper;
    report.log_prior_v = globals
        .v_logits
        .iter()
        .map(|&v| h.alpha.ln() + (h.alpha - 1.0) * ln_sigmoid(-v))
        .sum();

    let d_ell = globals.ell.cols();
    if d_ell > 0 {
        let b = h.ell_prior_var;
        let sq: f64 = globals.ell.data().iter().map(|x| x * x).sum();
        report.log_prior_ell =
            -0.5 * (globals.k() * d_ell) as f64 * (2.0 * std::f64::consts::PI * b).ln() - sq / (2.0 * b);
    }

    let d = globals.num_words as f64;
    let norm = ln_gamma_unchecked(d * h.gamma0) - d * ln_gamma_unchecked(h.gamma0);
    let mut prior = 0.0;
    let mut entropy = 0.0;
    for k in 0..globals.k() {
        let g = globals.gamma.row(k);
        let el = elog_theta.row(k);
        let total: f64 = g.iter().sum();
        let mut weighted = 0.0;
        let mut lg = 0.0;
        let mut sum_el = 0.0;
        for (&gi, &ei) in g.iter().zip(el) {
            weighted += (gi - 1.0) * ei;
            lg += ln_gamma_unchecked(gi);
            sum_el += ei;
        }
        prior += norm + (h.gamma0 - 1.0) * sum_el;
        entropy += lg - ln_gamma_unchecked(total) - weighted;
    }
    report.log_prior_theta = prior;
    report.entropy_theta = entropy;
}

/// Surrogate ELBO of `docs` under their local factors, with local terms
/// multiplied by `scale`. `mode` selects how batch-norm layers normalize.
pub fn elbo(
    globals: &GlobalState,
    docs: &[&Document],
    locals: &[LocalState],
    scale: f64,
    mode: Mode,
) -> Result<ElboReport, ModelError> {
    assert_eq!(docs.len(), locals.len(), "one local state per document");
    let exps = globals.expectations();
    let moments = batch_moments(globals, docs, mode)?;
    let mut report = ElboReport::default();
    global_terms(globals, &mut report, &exps.elog_theta);

    let mut terms = LocalTerms::default();
    for ((doc, local), m) in docs.iter().zip(locals).zip(&moments) {
        let ctx = DocContext::new(doc, &exps, m);
        terms.add_scaled(&local_objective(local, &ctx, globals.hyper.h_prior_var), scale);
    }
    report.log_prior_h = terms.log_prior_h;
    report.loglik_z = terms.loglik_z;
    report.loglik_c = terms.loglik_c;
    report.loglik_x = terms.loglik_x;
    report.entropy_z = terms.entropy_z;
    report.entropy_c = terms.entropy_c;
    report.total = report.sum_of_terms();
    if !report.total.is_finite() {
        return Err(ModelError::NonFinite("ELBO".into()));
    }
    Ok(report)
}

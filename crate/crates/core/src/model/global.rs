use super::elbo::split_moments;
use super::local::LocalState;
use super::{DecoderKind, GlobalState, ModelError};
use crate::corpus::Document;
use crate::nnet::{BatchStats, Grads, Layer, Matrix, Mode};
use crate::stats::{digamma_unchecked, sigmoid};

/// Stochastic natural-gradient step on the topics:
/// `γ ← (1−ρ)γ + ρ(γ0 + scale · Σ_n c_nw φ_nwk)`.
pub fn natural_grad_theta(
    globals: &mut GlobalState,
    docs: &[&Document],
    locals: &[LocalState],
    scale: f64,
    rho: f64,
) -> Result<(), ModelError> {
    assert_eq!(docs.len(), locals.len(), "one local state per document");
    if !(0.0..=1.0).contains(&rho) {
        return Err(ModelError::Config(format!("step size must lie in [0, 1], got {rho}")));
    }
    if rho == 0.0 {
        return Ok(());
    }
    let k = globals.k();
    let d = globals.num_words;
    let mut stats = vec![0.0; k * d];
    for (doc, local) in docs.iter().zip(locals) {
        for (i, &(w, c)) in doc.counts().iter().enumerate() {
            let c = c as f64;
            let w = w as usize;
            for (t, &p) in local.phi[i * k..(i + 1) * k].iter().enumerate() {
                stats[t * d + w] += c * p;
            }
        }
    }
    let gamma0 = globals.hyper.gamma0;
    for (g, s) in globals.gamma.data_mut().iter_mut().zip(stats) {
        let target = gamma0 + scale * s;
        *g = if rho == 1.0 { target } else { (1.0 - rho) * *g + rho * target };
    }
    if !globals.gamma.is_finite() {
        return Err(ModelError::NonFinite("topic update".into()));
    }
    Ok(())
}

/// Closed-form batch update `γ = γ0 + Σ_n c_nw φ_nwk`.
pub fn update_q_theta_batch(
    globals: &mut GlobalState,
    docs: &[&Document],
    locals: &[LocalState],
) -> Result<(), ModelError> {
    natural_grad_theta(globals, docs, locals, 1.0, 1.0)
}

/// Gradient of the (scaled) ELBO with respect to every array moved by the
/// optimizer, in [`GlobalState::gradient_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalGrads {
    pub v_logits: Vec<f64>,
    pub ell: Vec<f64>,
    pub encoder: Grads,
    pub decoder: Grads,
}

impl GlobalGrads {
    pub fn flatten(&self) -> Vec<Vec<f64>> {
        let mut out = vec![self.v_logits.clone(), self.ell.clone()];
        out.extend(self.encoder.iter().cloned());
        out.extend(self.decoder.iter().cloned());
        out
    }

    fn check_finite(&self) -> Result<(), ModelError> {
        let parts: [(&str, Box<dyn Iterator<Item = &f64>>); 4] = [
            ("stick logits", Box::new(self.v_logits.iter())),
            ("topic locations", Box::new(self.ell.iter())),
            ("encoder", Box::new(self.encoder.iter().flatten())),
            ("decoder", Box::new(self.decoder.iter().flatten())),
        ];
        for (name, mut values) in parts {
            if values.any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(())
    }
}

struct GradientPass {
    grads: GlobalGrads,
    enc_stats: Option<BatchStats>,
    dec_stats: Option<BatchStats>,
}

fn gradient_pass(
    globals: &GlobalState,
    docs: &[&Document],
    locals: &[LocalState],
    scale: f64,
) -> Result<GradientPass, ModelError> {
    assert_eq!(docs.len(), locals.len(), "one local state per document");
    let hyper = &globals.hyper;
    let k = globals.k();
    let n = docs.len();
    let p = globals.stick_weights();
    let beta = hyper.beta;

    let mut enc_stats = None;
    let mut dec_stats = None;
    let mut encoder_grads = Vec::new();
    let mut decoder_grads = Vec::new();
    let mut ell_grad: Vec<f64> = globals.ell.data().iter().map(|&l| -l / hyper.ell_prior_var).collect();

    // Moments, plus tapes when there are networks.
    let (moments, tapes) = match (&globals.encoder, &globals.decoder) {
        (Some(enc), Some(dec)) => {
            let (codes, tape_e, se) = enc.forward_deferred(&globals.features(docs), Mode::Train)?;
            let x = globals.decoder_inputs(&codes);
            let (y, tape_d, sd) = dec.forward_deferred(&x, Mode::Train)?;
            enc_stats = Some(se);
            dec_stats = Some(sd);
            (split_moments(&codes, &y, k), Some((codes, tape_e, tape_d)))
        }
        _ => (globals.doc_moments(docs)?, None),
    };

    let mut dp = vec![0.0; k];
    let mut dy = Matrix::zeros(n * k, 2);
    for (i, (local, m)) in locals.iter().zip(&moments).enumerate() {
        let ez = local.expect_z();
        let eln_z = local.expect_ln_z();
        for t in 0..k {
            let bp = beta * p[t];
            dp[t] += scale * beta * (-digamma_unchecked(bp) - m.mu[t] + eln_z[t]);
            let e = ez[t] * (-m.mu[t] + 0.5 * m.var[t]).exp();
            dy.set(i * k + t, 0, scale * (-bp + e));
            dy.set(i * k + t, 1, scale * (-0.5 * e));
        }
    }

    if let (Some((codes, tape_e, tape_d)), Some(enc), Some(dec)) = (tapes, &globals.encoder, &globals.decoder) {
        let (dg, dx) = dec.backward(&tape_d, &dy)?;
        decoder_grads = dg;
        let dh_dim = codes.cols();
        let dl_dim = globals.ell.cols();
        let mut dh = Matrix::zeros(n, dh_dim);
        for i in 0..n {
            let row = dh.row_mut(i);
            for (r, &hv) in row.iter_mut().zip(codes.row(i)) {
                *r = -scale * hv / hyper.h_prior_var;
            }
            for t in 0..k {
                let xr = dx.row(i * k + t);
                for j in 0..dh_dim {
                    row[j] += xr[j];
                }
                let lg = &mut ell_grad[t * dl_dim..(t + 1) * dl_dim];
                for j in 0..dl_dim {
                    lg[j] += xr[dh_dim + j];
                }
            }
        }
        let (eg, _) = enc.backward(&tape_e, &dh)?;
        encoder_grads = eg;
    }

    // Chain rule from stick weights to logits, plus the Beta(1, α) prior.
    let v: Vec<f64> = globals.v_logits.iter().map(|&x| sigmoid(x)).collect();
    let mut v_grad = vec![0.0; k];
    let mut tail = 0.0;
    for j in (0..k).rev() {
        v_grad[j] = dp[j] * p[j] * (1.0 - v[j]) - v[j] * tail - (hyper.alpha - 1.0) * v[j];
        tail += dp[j] * p[j];
    }

    let grads = GlobalGrads {
        v_logits: v_grad,
        ell: ell_grad,
        encoder: encoder_grads,
        decoder: decoder_grads,
    };
    grads.check_finite()?;
    Ok(GradientPass {
        grads,
        enc_stats,
        dec_stats,
    })
}

/// Gradient of the train-mode ELBO (batch-norm layers use the statistics of
/// `docs`) with the local factors held fixed.
pub fn elbo_gradient(
    globals: &GlobalState,
    docs: &[&Document],
    locals: &[LocalState],
    scale: f64,
) -> Result<GlobalGrads, ModelError> {
    gradient_pass(globals, docs, locals, scale).map(|g| g.grads)
}

/// One Adam ascent step on stick logits, locations and network weights, then
/// folds this batch's statistics into the batch-norm running averages.
pub fn grad_step_globals(
    globals: &mut GlobalState,
    docs: &[&Document],
    locals: &[LocalState],
    scale: f64,
    lr: f64,
) -> Result<(), ModelError> {
    let pass = gradient_pass(globals, docs, locals, scale)?;
    let mut descent: Vec<Vec<f64>> = pass.grads.flatten();
    for g in &mut descent {
        g.iter_mut().for_each(|v| *v = -*v);
    }
    if globals.hyper.decoder == DecoderKind::Linear {
        // The variance channel of the linear decoder is input independent:
        // only its bias is learned.
        let offset = 2 + globals.encoder.as_ref().map_or(0, |e| e.param_shapes().len());
        if let Some(Layer::Dense(d)) = globals.decoder.as_ref().and_then(|d| d.layers().first()) {
            let w = &mut descent[offset];
            for row in 0..d.weight.rows() {
                w[row * 2 + 1] = 0.0;
            }
        }
    }
    let mut adam = std::mem::replace(&mut globals.adam, crate::nnet::AdamState::new(&[], Default::default()));
    let result = {
        let mut params = globals.gradient_params_mut();
        adam.step(&mut params, &descent, lr)
    };
    globals.adam = adam;
    result?;
    if let (Some(enc), Some(s)) = (&mut globals.encoder, pass.enc_stats) {
        enc.apply_batch_stats(s);
    }
    if let (Some(dec), Some(s)) = (&mut globals.decoder, pass.dec_stats) {
        dec.apply_batch_stats(s);
    }
    Ok(())
}

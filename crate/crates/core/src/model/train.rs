use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::elbo::elbo;
use super::global::{grad_step_globals, natural_grad_theta};
use super::local::{local_loop, DocContext, LocalConfig, LocalState, WarmStart};
use super::{ElboReport, GlobalState, Hyper, ModelError};
use crate::corpus::{Corpus, Document, HeldoutSplit};
use crate::nnet::{AdamConfig, Mode};
use crate::rng::rng_for;

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Adam step size for sticks, locations and networks.
    pub lr: f64,
    pub seed: u64,
    pub local: LocalConfig,
    pub adam: AdamConfig,
    /// When false only the closed-form updates run and sticks, locations and
    /// networks stay frozen.
    pub gradient_steps: bool,
    /// Restart each document's coordinate ascent from its previous `q(Z)`.
    pub warm_start: bool,
    /// Held-out perplexity every this many iterations (0 disables).
    pub eval_every: usize,
    pub record_elbo: bool,
    /// Adds elapsed seconds to trace records, which makes logs
    /// run-dependent.
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            lr: 1e-4,
            seed: 0,
            local: LocalConfig::default(),
            adam: AdamConfig::default(),
            gradient_steps: true,
            warm_start: true,
            eval_every: 0,
            record_elbo: true,
            record_wallclock: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StochasticConfig {
    pub batch_size: usize,
    pub t0: f64,
    pub kappa: f64,
    /// Fixed step size instead of the `(t0 + t)^−κ` schedule.
    pub rho_override: Option<f64>,
}

impl Default for StochasticConfig {
    fn default() -> Self {
        Self {
            batch_size: 500,
            t0: 100.0,
            kappa: 0.75,
            rho_override: None,
        }
    }
}

/// `ρ(t) = (t0 + t)^−κ`, with `t` counted from zero.
pub fn rho_schedule(t: u64, t0: f64, kappa: f64) -> f64 {
    (t0 + t as f64).powf(-kappa)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elbo: Option<ElboReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_perplexity: Option<f64>,
    pub mean_local_sweeps: f64,
    pub unconverged_docs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wallclock_secs: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Schedule {
    Batch,
    Stochastic(StochasticConfig),
}

/// Drives global iterations over a corpus, either full-batch
/// ([`Trainer::new`]) or on sampled minibatches ([`Trainer::new_stochastic`]).
pub struct Trainer<'a> {
    corpus: &'a Corpus,
    heldout: Option<&'a [HeldoutSplit]>,
    pub globals: GlobalState,
    pub config: TrainConfig,
    schedule: Schedule,
    warm: Vec<Option<WarmStart>>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    fn build(
        corpus: &'a Corpus,
        globals: GlobalState,
        config: TrainConfig,
        schedule: Schedule,
    ) -> Result<Self, ModelError> {
        if globals.num_words != corpus.num_words {
            return Err(ModelError::Config(format!(
                "model vocabulary has {} terms, corpus has {}",
                globals.num_words, corpus.num_words
            )));
        }
        if corpus.is_empty() {
            return Err(ModelError::Config("training corpus is empty".into()));
        }
        if !(config.lr >= 0.0 && config.lr.is_finite()) {
            return Err(ModelError::Config("lr must be non-negative".into()));
        }
        if let Schedule::Stochastic(s) = schedule {
            if s.batch_size == 0 || s.batch_size > corpus.len() {
                return Err(ModelError::Config(format!(
                    "batch_size must lie in 1..={}, got {}",
                    corpus.len(),
                    s.batch_size
                )));
            }
            if let Some(r) = s.rho_override {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(ModelError::Config("rho_override must lie in (0, 1]".into()));
                }
            } else if !(s.kappa > 0.5 && s.kappa <= 1.0 && s.t0 >= 0.0) {
                return Err(ModelError::Config("need kappa in (0.5, 1] and t0 >= 0".into()));
            }
        }
        Ok(Self {
            corpus,
            heldout: None,
            warm: vec![None; corpus.len()],
            globals,
            config,
            schedule,
            started: Instant::now(),
        })
    }

    /// Fresh globals initialized from `config.seed`.
    pub fn init_globals(corpus: &Corpus, hyper: &Hyper, config: &TrainConfig) -> Result<GlobalState, ModelError> {
        let mut rng = rng_for(config.seed, &[STREAM_INIT]);
        GlobalState::init(hyper, corpus.num_words, corpus.num_tokens(), config.adam, &mut rng)
    }

    pub fn with_heldout(mut self, heldout: &'a [HeldoutSplit]) -> Self {
        self.heldout = Some(heldout);
        self
    }

    /// Warm starts per training document (for checkpointing).
    pub fn warm_starts(&self) -> &[Option<WarmStart>] {
        &self.warm
    }

    pub fn set_warm_starts(&mut self, warm: Vec<Option<WarmStart>>) -> Result<(), ModelError> {
        if warm.len() != self.corpus.len() {
            return Err(ModelError::Config("warm starts do not match the corpus".into()));
        }
        if warm.iter().flatten().any(|w| w.a.len() != self.globals.k() || w.b.len() != self.globals.k()) {
            return Err(ModelError::Config("warm starts do not match the truncation level".into()));
        }
        self.warm = warm;
        Ok(())
    }

    fn batch_indices(&self) -> Vec<usize> {
        match self.schedule {
            Schedule::Batch => (0..self.corpus.len()).collect(),
            Schedule::Stochastic(s) => {
                let mut rng = rng_for(self.config.seed, &[STREAM_BATCH, self.globals.iteration]);
                let mut idx = index::sample(&mut rng, self.corpus.len(), s.batch_size).into_vec();
                idx.sort_unstable();
                idx
            }
        }
    }

    /// Fits local factors for the given training documents under the current
    /// globals.
    fn fit_locals(&self, ids: &[usize]) -> Result<Vec<LocalState>, ModelError> {
        let docs: Vec<&Document> = ids.iter().map(|&i| &self.corpus.docs[i]).collect();
        let exps = self.globals.expectations();
        let moments = self.globals.doc_moments(&docs)?;
        let mut locals = Vec::with_capacity(ids.len());
        for ((&id, doc), m) in ids.iter().zip(&docs).zip(&moments) {
            let ctx = DocContext::new(doc, &exps, m);
            let warm = if self.config.warm_start { self.warm[id].as_ref() } else { None };
            locals.push(local_loop(&ctx, warm, self.globals.hyper.h_prior_var, &self.config.local)?);
        }
        Ok(locals)
    }

    /// One global iteration: local coordinate ascent on the batch, the topic
    /// update, then (optionally) an Adam step on the remaining globals.
    pub fn step(&mut self) -> Result<IterRecord, ModelError> {
        let ids = self.batch_indices();
        let docs: Vec<&Document> = ids.iter().map(|&i| &self.corpus.docs[i]).collect();
        let locals = self.fit_locals(&ids)?;
        let scale = self.corpus.len() as f64 / ids.len() as f64;
        let t = self.globals.iteration;
        let rho = match self.schedule {
            Schedule::Batch => None,
            Schedule::Stochastic(s) => Some(s.rho_override.unwrap_or_else(|| rho_schedule(t, s.t0, s.kappa))),
        };
        natural_grad_theta(&mut self.globals, &docs, &locals, scale, rho.unwrap_or(1.0))?;

        let elbo_report = if self.config.record_elbo {
            Some(elbo(&self.globals, &docs, &locals, scale, Mode::Eval)?)
        } else {
            None
        };

        if self.config.gradient_steps {
            grad_step_globals(&mut self.globals, &docs, &locals, scale, self.config.lr)?;
        }

        let unconverged = locals.iter().filter(|l| !l.converged).count();
        if unconverged > 0 {
            log::warn!(
                "iteration {t}: {unconverged} of {} documents hit the local sweep limit",
                locals.len()
            );
        }
        let mean_sweeps = locals.iter().map(|l| l.sweeps as f64).sum::<f64>() / locals.len() as f64;
        for (&id, local) in ids.iter().zip(&locals) {
            self.warm[id] = Some(WarmStart::from(local));
        }
        self.globals.iteration += 1;

        let heldout_perplexity = match self.heldout {
            Some(h) if self.config.eval_every > 0 && self.globals.iteration % self.config.eval_every as u64 == 0 => {
                Some(
                    crate::eval::perplexity(&self.globals, h, &self.config.local)
                        .map_err(|e| ModelError::Evaluation(e.to_string()))?,
                )
            }
            _ => None,
        };

        Ok(IterRecord {
            iteration: self.globals.iteration,
            rho,
            batch_size: ids.len(),
            elbo: elbo_report,
            heldout_perplexity,
            mean_local_sweeps: mean_sweeps,
            unconverged_docs: unconverged,
            wallclock_secs: self.config.record_wallclock.then(|| self.started.elapsed().as_secs_f64()),
        })
    }

    /// Runs until `config.iterations` global iterations have completed in
    /// total, calling `on_record` after each one.
    pub fn run<F: FnMut(&IterRecord, &Trainer) -> Result<(), ModelError>>(
        &mut self,
        mut on_record: F,
    ) -> Result<(), ModelError> {
        while (self.globals.iteration as usize) < self.config.iterations {
            let record = self.step()?;
            log::info!(
                "iteration {} elbo {:?} perplexity {:?}",
                record.iteration,
                record.elbo.map(|e| e.total),
                record.heldout_perplexity
            );
            on_record(&record, self)?;
        }
        Ok(())
    }
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a Corpus, globals: GlobalState, config: TrainConfig) -> Result<Self, ModelError> {
        Self::build(corpus, globals, config, Schedule::Batch)
    }

    pub fn new_stochastic(
        corpus: &'a Corpus,
        globals: GlobalState,
        config: TrainConfig,
        stochastic: StochasticConfig,
    ) -> Result<Self, ModelError> {
        Self::build(corpus, globals, config, Schedule::Stochastic(stochastic))
    }
}

/// Full-batch training from a fresh initialization.
pub fn train_batch(
    corpus: &Corpus,
    hyper: &Hyper,
    config: &TrainConfig,
) -> Result<(GlobalState, Vec<IterRecord>), ModelError> {
    let globals = Trainer::init_globals(corpus, hyper, config)?;
    let mut trainer = Trainer::new(corpus, globals, config.clone())?;
    let mut trace = Vec::new();
    trainer.run(|r, _| {
        trace.push(r.clone());
        Ok(())
    })?;
    Ok((trainer.globals, trace))
}

/// Minibatch training from a fresh initialization.
pub fn train_stochastic(
    corpus: &Corpus,
    hyper: &Hyper,
    config: &TrainConfig,
    stochastic: &StochasticConfig,
) -> Result<(GlobalState, Vec<IterRecord>), ModelError> {
    let globals = Trainer::init_globals(corpus, hyper, config)?;
    let mut trainer = Trainer::new_stochastic(corpus, globals, config.clone(), *stochastic)?;
    let mut trace = Vec::new();
    trainer.run(|r, _| {
        trace.push(r.clone());
        Ok(())
    })?;
    Ok((trainer.globals, trace))
}

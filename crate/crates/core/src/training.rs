//! Source pretraining and adversarial adaptation.
//!
//! Pretraining minimizes the multi-label attribute loss on labelled source
//! samples. Adaptation then alternates two updates per step:
//!
//! 1. the discriminator `D` learns to tell frozen-source features `M_a(x)`
//!    from features of the adapted mapping `M`, with both encoders detached;
//! 2. `M` (and the auxiliary classifier `C`, when enabled) minimizes the
//!    mapping loss, plus `alpha` times the attribute loss of `C(M(x))` on
//!    source samples, with `D` held fixed.
//!
//! `M_a` and `C_a` are only ever read.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::eval::EvalError;
use crate::graph::{Graph, Var};
use crate::losses::{self, AdversarialLoss, LossError};
use crate::models::{clone_params, default_specs, init_mlp, ArchConfig, ModelError, ParamSet, Role};
use crate::synthdata::{DataError, Dataset, Split, UnlabeledDataset};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite value during {phase} (epoch {epoch}, step {step}): {detail}")]
    NonFinite {
        phase: &'static str,
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("{phase} (epoch {epoch}, step {step}): {source}")]
    Step {
        phase: &'static str,
        epoch: usize,
        step: usize,
        source: LossError,
    },
}

/// Location of a training step, for diagnostics.
#[derive(Debug, Clone, Copy)]
struct At {
    phase: &'static str,
    epoch: usize,
    step: usize,
}

impl At {
    fn wrap(self, e: impl Into<LossError>) -> TrainError {
        match e.into() {
            LossError::Tensor(TensorError::NonFinite { op }) => TrainError::NonFinite {
                phase: self.phase,
                epoch: self.epoch,
                step: self.step,
                detail: format!("{op} produced NaN or infinity"),
            },
            other => TrainError::Step {
                phase: self.phase,
                epoch: self.epoch,
                step: self.step,
                source: other,
            },
        }
    }

    fn non_finite(self, detail: impl Into<String>) -> TrainError {
        TrainError::NonFinite {
            phase: self.phase,
            epoch: self.epoch,
            step: self.step,
            detail: detail.into(),
        }
    }
}

impl From<ModelError> for LossError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => LossError::Tensor(t),
            ModelError::Config(msg) => LossError::Tensor(TensorError::Contract(msg)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Scalar = f32> {
    pub config: AdamConfig,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        Self::with_shapes(params.named_tensors().iter().map(|(_, t)| t.len()))
    }

    pub fn with_shapes(lens: impl IntoIterator<Item = usize>) -> Self {
        let first: Vec<Vec<F>> = lens.into_iter().map(|n| vec![F::zero(); n]).collect();
        Self {
            config: AdamConfig::default(),
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of `params` (each a flat buffer) in place.
    pub fn update(&mut self, params: &mut [&mut [F]], grads: &[&[F]], lr: f64) {
        assert_eq!(params.len(), self.first.len(), "parameter count changed");
        assert_eq!(grads.len(), self.first.len(), "gradient count mismatch");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = F::of(1.0 - beta1.powi(t));
        let c2 = F::of(1.0 - beta2.powi(t));
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let (eps, lr) = (F::of(eps), F::of(lr));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            assert_eq!(p.len(), m.len(), "parameter {k} changed shape");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Applies one Adam step to every tensor of `params`, using gradients read
/// from the bound graph vars (missing gradients count as zero).
pub fn adam_step<F: Scalar>(
    params: &mut ParamSet<F>,
    graph: &Graph<F>,
    vars: &[Var],
    state: &mut AdamState<F>,
    lr: f64,
) {
    let zeros: Vec<Vec<F>> = params
        .named_tensors()
        .iter()
        .map(|(_, t)| vec![F::zero(); t.len()])
        .collect();
    let grads: Vec<&[F]> = vars
        .iter()
        .zip(&zeros)
        .map(|(&v, z)| graph.grad(v).unwrap_or(z.as_slice()))
        .collect();
    let mut bufs: Vec<&mut [F]> = params.tensors_mut().map(Tensor::data_mut).collect();
    state.update(&mut bufs, &grads, lr);
}

fn all_params_finite<F: Scalar>(p: &ParamSet<F>) -> bool {
    p.named_tensors().iter().all(|(_, t)| t.is_finite())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "pretrain epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "pretrain learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    /// `M_a`, frozen.
    pub encoder: ParamSet<f32>,
    /// `C_a`, frozen.
    pub classifier: ParamSet<f32>,
    /// Mean attribute loss per epoch.
    pub history: Vec<f64>,
}

fn seed_for(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

/// Trains `M_a` and `C_a` on the train split of `source` by minibatch Adam on
/// the attribute loss.
pub fn pretrain_source(
    source: &Dataset,
    arch: &ArchConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutput, TrainError> {
    cfg.validate()?;
    let train = source.split(Split::Train);
    if train.is_empty() {
        return Err(TrainError::Config("source dataset has no train samples".into()));
    }
    if !train.all_labelled() {
        return Err(DataError::Contract("every source sample must carry attribute labels".into()).into());
    }
    if arch.d_in != source.d_in || arch.m != source.m {
        return Err(TrainError::Config(format!(
            "architecture expects d_in={} m={}, dataset has d_in={} m={}",
            arch.d_in, arch.m, source.d_in, source.m
        )));
    }
    let specs = default_specs(arch);
    let mut encoder = init_mlp::<f32>(&specs.encoder, Role::SourceEncoder, seed_for(cfg.seed, 1))?;
    let mut classifier = init_mlp::<f32>(&specs.classifier, Role::SourceClassifier, seed_for(cfg.seed, 2))?;
    let mut enc_state = AdamState::new(&encoder);
    let mut cls_state = AdamState::new(&classifier);
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, 3));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let at = At {
                phase: "pretrain",
                epoch,
                step,
            };
            let mut g = Graph::<f32>::new();
            let x = g.constant(train.features(batch));
            let y = g.constant(train.labels(batch)?);
            let eb = encoder.bind(&mut g, true);
            let feats = eb.forward(&mut g, x).map_err(|e| at.wrap(e))?;
            let cb = classifier.bind(&mut g, true);
            let logits = cb.forward(&mut g, feats).map_err(|e| at.wrap(e))?;
            let loss = losses::attr_loss(&mut g, logits, y).map_err(|e| at.wrap(e))?;
            g.backward(loss).map_err(|e| at.wrap(e))?;
            total += f64::from(g.value(loss).item()) * batch.len() as f64;
            adam_step(&mut encoder, &g, &eb.flat(), &mut enc_state, cfg.learning_rate);
            adam_step(&mut classifier, &g, &cb.flat(), &mut cls_state, cfg.learning_rate);
            if !all_params_finite(&encoder) || !all_params_finite(&classifier) {
                return Err(at.non_finite("parameters diverged"));
            }
        }
        history.push(total / train.len() as f64);
    }

    Ok(PretrainOutput {
        encoder: encoder.freeze(),
        classifier: classifier.freeze(),
        history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub variant: AdversarialLoss,
    pub with_classifier: bool,
    pub d_steps_per_m_step: usize,
    /// Share of source rows in the mapping batch (least-squares variant only).
    pub source_fraction_in_union_batch: f64,
    pub seed: u64,
    pub eval_every_n_epochs: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-4,
            alpha: 0.1,
            variant: AdversarialLoss::LsganBothDomains,
            with_classifier: true,
            d_steps_per_m_step: 1,
            source_fraction_in_union_batch: 0.5,
            seed: 0,
            eval_every_n_epochs: 1,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.d_steps_per_m_step == 0 || self.eval_every_n_epochs == 0 {
            return fail(
                "adapt epochs, batch_size, d_steps_per_m_step and eval_every_n_epochs must be positive".into(),
            );
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "adapt learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.variant == AdversarialLoss::LsganBothDomains
            && !(0.0..1.0).contains(&self.source_fraction_in_union_batch)
        {
            return fail(format!(
                "source_fraction_in_union_batch must be in [0, 1), got {}",
                self.source_fraction_in_union_batch
            ));
        }
        Ok(())
    }

    /// Source share actually used: the log-likelihood variant feeds only
    /// target samples through the adapted mapping.
    pub fn effective_source_fraction(&self) -> f64 {
        match self.variant {
            AdversarialLoss::AddaLog => 0.0,
            AdversarialLoss::LsganBothDomains => self.source_fraction_in_union_batch,
        }
    }

    /// `(source rows, target rows)` of one mapping batch.
    pub fn union_split(&self) -> (usize, usize) {
        let src = (self.batch_size as f64 * self.effective_source_fraction()).round() as usize;
        let src = src.min(self.batch_size - 1);
        (src, self.batch_size - src)
    }
}

/// Metrics an evaluation hook reports for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochMetrics {
    pub rank1: Option<f64>,
    pub map: Option<f64>,
    pub source_attr_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochRecord {
    pub epoch: usize,
    pub d_loss: Option<f64>,
    pub m_loss: Option<f64>,
    pub attr_loss: Option<f64>,
    pub metrics: EpochMetrics,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub records: Vec<EpochRecord>,
}

impl Trace {
    pub const CSV_HEADER: &'static str = "epoch,d_loss,m_loss,attr_loss,rank1,map";

    /// `epoch,d_loss,m_loss,attr_loss,rank1,map`; absent values are empty.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            out += &format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                cell(r.d_loss),
                cell(r.m_loss),
                cell(r.attr_loss),
                cell(r.metrics.rank1),
                cell(r.metrics.map)
            );
        }
        out
    }

    pub fn rank1_series(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.metrics.rank1.map(|v| (r.epoch, v)))
            .collect()
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_csv())
    }
}

#[derive(Debug, Clone)]
pub struct AdaptOutput {
    /// Adapted mapping `M`.
    pub encoder: ParamSet<f32>,
    /// Auxiliary classifier `C`; an untouched copy of `C_a` when disabled.
    pub classifier: ParamSet<f32>,
    pub discriminator: ParamSet<f32>,
    pub trace: Trace,
}

/// Per-epoch evaluation callback: receives read-only `M` and `C`.
pub type EvalHook<'a> = dyn FnMut(&ParamSet<f32>, &ParamSet<f32>) -> Result<EpochMetrics, EvalError> + 'a;

/// Cycles through a reshuffled index list, drawing fixed-size batches.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Default)]
struct Running {
    sum: f64,
    n: usize,
}

impl Running {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Adversarially adapts `M_a` to the unlabelled target domain.
///
/// One epoch is one pass over `target_train`. Epoch 0 of the returned trace
/// is the unadapted model (`M = M_a`), evaluated before any update.
pub fn adapt(
    source_encoder: &ParamSet<f32>,
    source_classifier: &ParamSet<f32>,
    source: &Dataset,
    target_train: &UnlabeledDataset,
    arch: &ArchConfig,
    cfg: &AdaptConfig,
    mut hook: Option<&mut EvalHook<'_>>,
) -> Result<AdaptOutput, TrainError> {
    cfg.validate()?;
    let src = source.split(Split::Train);
    if src.is_empty() || !src.all_labelled() {
        return Err(DataError::Contract("adaptation needs labelled source train samples".into()).into());
    }
    if target_train.is_empty() {
        return Err(TrainError::Config("target train set is empty".into()));
    }
    if target_train.d_in != source_encoder.spec.input_dim() || src.d_in != source_encoder.spec.input_dim() {
        return Err(TrainError::Config(
            "input width differs between data and encoder".into(),
        ));
    }

    let frozen_encoder = source_encoder.clone().freeze();
    let mut encoder = clone_params(source_encoder, Role::TargetEncoder);
    let mut classifier = clone_params(source_classifier, Role::AdaptClassifier);
    let disc_arch = ArchConfig {
        feat_dim: source_encoder.spec.output_dim(),
        classifier_enabled: cfg.with_classifier,
        ..arch.clone()
    };
    let mut disc = init_mlp::<f32>(
        &default_specs(&disc_arch).discriminator,
        Role::Discriminator,
        seed_for(cfg.seed, 11),
    )?;
    let mut enc_state = AdamState::new(&encoder);
    let mut cls_state = AdamState::new(&classifier);
    let mut disc_state = AdamState::new(&disc);
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, 12));
    let mut src_cycle = Cycler::new(src.len(), &mut rng);
    let mut tgt_order: Vec<usize> = (0..target_train.len()).collect();
    let (n_src_union, n_tgt) = cfg.union_split();
    let alpha = cfg.alpha as f32;

    let mut trace = Trace::default();
    let mut record = |epoch: usize,
                      d: Option<f64>,
                      m: Option<f64>,
                      a: Option<f64>,
                      enc: &ParamSet<f32>,
                      cls: &ParamSet<f32>,
                      hook: &mut Option<&mut EvalHook<'_>>|
     -> Result<(), TrainError> {
        let due = epoch == 0 || epoch.is_multiple_of(cfg.eval_every_n_epochs) || epoch == cfg.epochs;
        let metrics = match hook {
            Some(h) if due => h(enc, cls)?,
            _ => EpochMetrics::default(),
        };
        trace.records.push(EpochRecord {
            epoch,
            d_loss: d,
            m_loss: m,
            attr_loss: a,
            metrics,
        });
        Ok(())
    };
    record(0, None, None, None, &encoder, &classifier, &mut hook)?;

    for epoch in 1..=cfg.epochs {
        tgt_order.shuffle(&mut rng);
        let (mut d_run, mut m_run, mut a_run) = (Running::default(), Running::default(), Running::default());
        for (step, tgt_idx) in tgt_order.chunks(n_tgt).enumerate() {
            let src_idx = src_cycle.take(cfg.batch_size, &mut rng);
            let union_src = &src_idx[..n_src_union];
            let x_src = src.features(&src_idx);
            let x_tgt = target_train.features(tgt_idx);

            // Discriminator: encoders detached.
            let at = At {
                phase: "discriminator update",
                epoch,
                step,
            };
            let real = frozen_encoder.infer(&x_src).map_err(|e| at.wrap(e))?;
            let fake = {
                let x_union = if union_src.is_empty() {
                    x_tgt.clone()
                } else {
                    union_rows(&src.features(union_src), &x_tgt)
                };
                encoder.infer(&x_union).map_err(|e| at.wrap(e))?
            };
            for _ in 0..cfg.d_steps_per_m_step {
                let mut g = Graph::<f32>::new();
                let r = g.constant(real.clone());
                let f = g.constant(fake.clone());
                let db = disc.bind(&mut g, true);
                let d_real = db.forward(&mut g, r).map_err(|e| at.wrap(e))?;
                let d_fake = db.forward(&mut g, f).map_err(|e| at.wrap(e))?;
                let d_loss = match cfg.variant {
                    AdversarialLoss::AddaLog => losses::adda_d_loss(&mut g, d_real, d_fake),
                    AdversarialLoss::LsganBothDomains => losses::lsgan_d_loss(&mut g, d_real, d_fake),
                }
                .map_err(|e| at.wrap(e))?;
                g.backward(d_loss).map_err(|e| at.wrap(e))?;
                d_run.push(f64::from(g.value(d_loss).item()));
                adam_step(&mut disc, &g, &db.flat(), &mut disc_state, cfg.learning_rate);
                if !all_params_finite(&disc) {
                    return Err(at.non_finite("discriminator parameters diverged"));
                }
            }

            // Mapping (+ classifier): discriminator fixed.
            let at = At {
                phase: "mapping update",
                epoch,
                step,
            };
            let mut g = Graph::<f32>::new();
            let t = g.constant(x_tgt);
            let union = if n_src_union > 0 {
                let s = g.constant(src.features(union_src));
                g.concat_rows(s, t).map_err(|e| at.wrap(e))?
            } else {
                t
            };
            let mb = encoder.bind(&mut g, true);
            let feats_union = mb.forward(&mut g, union).map_err(|e| at.wrap(e))?;
            let db = disc.bind(&mut g, false);
            let d_union = db.forward(&mut g, feats_union).map_err(|e| at.wrap(e))?;
            let m_adv = match cfg.variant {
                AdversarialLoss::AddaLog => losses::adda_m_loss(&mut g, d_union),
                AdversarialLoss::LsganBothDomains => losses::lsgan_m_loss(&mut g, d_union),
            }
            .map_err(|e| at.wrap(e))?;

            let xs = g.constant(x_src);
            let ys = g.constant(src.labels(&src_idx)?);
            let feats_src = mb.forward(&mut g, xs).map_err(|e| at.wrap(e))?;
            let cb = classifier.bind(&mut g, cfg.with_classifier);
            let logits = cb.forward(&mut g, feats_src).map_err(|e| at.wrap(e))?;
            let attr = losses::attr_loss(&mut g, logits, ys).map_err(|e| at.wrap(e))?;
            let objective = if cfg.with_classifier {
                losses::combined_objective(&mut g, m_adv, attr, alpha).map_err(|e| at.wrap(e))?
            } else {
                m_adv
            };
            g.backward(objective).map_err(|e| at.wrap(e))?;
            m_run.push(f64::from(g.value(m_adv).item()));
            a_run.push(f64::from(g.value(attr).item()));
            adam_step(&mut encoder, &g, &mb.flat(), &mut enc_state, cfg.learning_rate);
            if cfg.with_classifier {
                adam_step(&mut classifier, &g, &cb.flat(), &mut cls_state, cfg.learning_rate);
            }
            if !all_params_finite(&encoder) || !all_params_finite(&classifier) {
                return Err(at.non_finite("mapping parameters diverged"));
            }
        }
        record(
            epoch,
            d_run.mean(),
            m_run.mean(),
            a_run.mean(),
            &encoder,
            &classifier,
            &mut hook,
        )?;
    }

    Ok(AdaptOutput {
        encoder,
        classifier,
        discriminator: disc,
        trace,
    })
}

fn union_rows(src: &Tensor<f32>, tgt: &Tensor<f32>) -> Tensor<f32> {
    let mut data = src.data().to_vec();
    data.extend_from_slice(tgt.data());
    Tensor::new(&[src.rows() + tgt.rows(), tgt.cols()], data).expect("finite rows")
}

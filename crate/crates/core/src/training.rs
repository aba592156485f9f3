//! Optimization loops: pre-training of a bundle, source fine-tuning
//! (source-free step 1), source-free target adaptation (step 2) and vanilla
//! adversarial adaptation, each with optional TriDA terms.

use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::baselines::{
    adversarial_loss, cluster_pseudo_labels, shot_loss, source_loss, AdaptationObjective, Discriminator, ObjectiveKind,
};
use crate::data::{epoch_batches, CyclicSampler, LabeledDataset, PairedBatches};
use crate::diagnostics::{track_epoch, DiagnosticsConfig, DiagnosticsRecord, EvalSets};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelBundle};
use crate::objectives::{
    objective_sfuda_step1, objective_sfuda_step2, objective_uda, pretrain_loss, sample_lambda, trida_terms, LossBreakdown,
    StepGraph, TridaConfig, TridaInputs, TridaTerms,
};
use crate::optim::{learning_rate_schedule, Schedule, Sgd, SgdConfig};
use crate::seed::{stream, sub_seed};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub schedule: Schedule,
    pub seed: u64,
    /// Rewritten after every epoch that finished with finite losses.
    pub checkpoint: Option<PathBuf>,
}

impl TrainSettings {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            sgd: SgdConfig::default(),
            schedule: Schedule::PolyDecay,
            seed,
            checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        let c = &self.sgd;
        if !(c.lr_backbone > 0.0 && c.lr_new > 0.0) || !c.lr_backbone.is_finite() || !c.lr_new.is_finite() {
            return Err(Error::invalid("learning rates must be positive and finite"));
        }
        if !(0.0..1.0).contains(&c.momentum) || !(c.weight_decay >= 0.0 && c.weight_decay.is_finite()) {
            return Err(Error::invalid("momentum must lie in [0, 1) and weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Evaluation subsets measured before training and after every epoch.
#[derive(Clone, Copy, Debug)]
pub struct Tracker<'a> {
    pub sets: &'a EvalSets,
    pub cfg: &'a DiagnosticsConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub lambda: Option<f64>,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub diagnostics: Vec<DiagnosticsRecord>,
    pub losses: Vec<LossRecord>,
    /// Pseudo-label accuracy on the target evaluation subset per epoch,
    /// for reporting only.
    pub pseudo_label_accuracy: Vec<f64>,
}

/// Shuffled batches of one epoch; a trailing single sample is dropped
/// because batch normalization needs two.
fn batches(len: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut b = epoch_batches(len, batch, rng);
    if b.last().is_some_and(|l| l.len() < 2) {
        b.pop();
    }
    b
}

fn steps_per_epoch(len: usize, batch: usize) -> usize {
    let n = len.div_ceil(batch);
    if len % batch == 1 {
        n - 1
    } else {
        n
    }
}

struct Loop<'s> {
    settings: &'s TrainSettings,
    opt: Sgd,
    step: usize,
    total: usize,
    log: TrainLog,
}

impl<'s> Loop<'s> {
    fn start(bundle: &ModelBundle, settings: &'s TrainSettings, per_epoch: usize, tracker: Option<&Tracker>) -> Result<Self> {
        settings.validate()?;
        if per_epoch == 0 {
            return Err(Error::invalid("dataset too small for one batch of two samples"));
        }
        let mut l = Self {
            settings,
            opt: Sgd::new(settings.sgd),
            step: 0,
            total: per_epoch * settings.epochs,
            log: TrainLog::default(),
        };
        l.save(bundle)?;
        l.track(bundle, tracker, 0)?;
        Ok(l)
    }

    fn lr_scale(&self) -> f64 {
        learning_rate_schedule(1.0, self.step, self.total, self.settings.schedule)
    }

    fn progress(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.step as f64 / self.total as f64
        }
    }

    fn save(&self, bundle: &ModelBundle) -> Result<()> {
        match &self.settings.checkpoint {
            Some(p) => bundle.save(p),
            None => Ok(()),
        }
    }

    fn track(&mut self, bundle: &ModelBundle, tracker: Option<&Tracker>, epoch: usize) -> Result<()> {
        if let Some(t) = tracker {
            self.log.diagnostics.push(track_epoch(bundle, t.sets, t.cfg, epoch)?);
        }
        Ok(())
    }

    /// Backpropagates `loss`, updates the bundle except `frozen` parameters
    /// and commits the recorded batch statistics. Returns the graph so that
    /// other parameter stores can read their gradients.
    fn apply(
        &mut self,
        bundle: &mut ModelBundle,
        parts: (Graph, Vec<(usize, crate::autodiff::BatchMoments)>),
        loss: Var,
        frozen: &[usize],
        record: LossRecord,
    ) -> Result<Graph> {
        let (mut graph, moments) = parts;
        let value = graph.value(loss).item();
        if !value.is_finite() {
            let checkpoint = self
                .settings
                .checkpoint
                .as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string());
            return Err(Error::NonFinite {
                step: self.step,
                checkpoint,
            });
        }
        graph.backward(loss);
        let mut grads = bundle.store().grads(&graph);
        for &i in frozen {
            grads[i] = None;
        }
        let scale = self.lr_scale();
        self.opt.step(bundle.store_mut(), &grads, scale);
        bundle.commit_moments(&moments);
        self.log.losses.push(record);
        self.step += 1;
        Ok(graph)
    }

    fn end_epoch(&mut self, bundle: &ModelBundle, tracker: Option<&Tracker>, epoch: usize) -> Result<()> {
        self.save(bundle)?;
        self.track(bundle, tracker, epoch + 1)
    }
}

fn labeled_batch(ds: &LabeledDataset, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    Ok((ds.images(idx), ds.labels(idx)?))
}

fn require_pretrain<'a>(trida: &TridaConfig, bundle: &ModelBundle, pretrain: Option<&'a LabeledDataset>) -> Result<Option<&'a LabeledDataset>> {
    if !trida.is_active() {
        return Ok(None);
    }
    let p = pretrain.ok_or_else(|| Error::invalid("TriDA terms need pre-training data"))?;
    if !bundle.has_pretrain_head() {
        return Err(Error::HeadRemoved);
    }
    if p.class_set() != bundle.pretrain_classes() {
        return Err(Error::invalid("pre-training classes differ from the bundle's pre-training head"));
    }
    p.all_labels()?;
    Ok(Some(p))
}

/// Trains the bundle's `f` and `h_p` on labeled pre-training data.
pub fn pretrain_bundle(bundle: &mut ModelBundle, pretrain: &LabeledDataset, settings: &TrainSettings) -> Result<TrainLog> {
    if !bundle.has_pretrain_head() {
        return Err(Error::HeadRemoved);
    }
    let mut l = Loop::start(bundle, settings, steps_per_epoch(pretrain.len(), settings.batch_size), None)?;
    let mut rng = stream(settings.seed, "batches/pretrain-stage");
    for epoch in 0..settings.epochs {
        for (step, idx) in batches(pretrain.len(), settings.batch_size, &mut rng).into_iter().enumerate() {
            let (x, y) = labeled_batch(pretrain, &idx)?;
            let mut sg = StepGraph::new(bundle, Mode::Train);
            let f = sg.features(&x)?;
            let loss = pretrain_loss(&mut sg, f, &y)?;
            let v = sg.value(loss);
            let record = LossRecord {
                epoch,
                step,
                lambda: None,
                breakdown: LossBreakdown {
                    baseline: v,
                    pretrain: Some(v),
                    total: v,
                    ..LossBreakdown::default()
                },
            };
            l.apply(bundle, sg.into_parts(), loss, &[], record)?;
        }
        l.end_epoch(bundle, None, epoch)?;
    }
    Ok(l.log)
}

/// Supervised fine-tuning on source data, optionally with `L_p`.
pub fn train_source(
    bundle: &mut ModelBundle,
    source: &LabeledDataset,
    pretrain: Option<&LabeledDataset>,
    trida: &TridaConfig,
    objective: &AdaptationObjective,
    settings: &TrainSettings,
    tracker: Option<&Tracker>,
) -> Result<TrainLog> {
    trida.validate()?;
    let use_lp = trida.use_pretrain;
    let pretrain = if use_lp {
        require_pretrain(trida, bundle, pretrain)?
    } else {
        None
    };
    source.all_labels()?;
    let mut l = Loop::start(bundle, settings, steps_per_epoch(source.len(), settings.batch_size), tracker)?;
    let mut rng = stream(settings.seed, "batches/source");
    let mut sampler = pretrain
        .map(|p| CyclicSampler::new(p.len(), sub_seed(settings.seed, "batches/pretrain")))
        .transpose()?;
    for epoch in 0..settings.epochs {
        for (step, idx) in batches(source.len(), settings.batch_size, &mut rng).into_iter().enumerate() {
            let (x_s, y_s) = labeled_batch(source, &idx)?;
            let mut sg = StepGraph::new(bundle, Mode::Train);
            let f_s = sg.features(&x_s)?;
            let l_s = source_loss(&mut sg, f_s, &y_s, objective.label_smoothing)?;
            let l_p = match (pretrain, sampler.as_mut()) {
                (Some(p), Some(s)) => {
                    let (x_p, y_p) = labeled_batch(p, &s.draw(idx.len()))?;
                    let f_p = sg.features(&x_p)?;
                    Some(pretrain_loss(&mut sg, f_p, &y_p)?)
                }
                _ => None,
            };
            let (loss, breakdown) = objective_sfuda_step1(&mut sg.graph, l_s, l_p);
            let record = LossRecord {
                epoch,
                step,
                lambda: None,
                breakdown,
            };
            l.apply(bundle, sg.into_parts(), loss, &[], record)?;
        }
        l.end_epoch(bundle, tracker, epoch)?;
    }
    Ok(l.log)
}

struct TridaStream<'a> {
    data: &'a LabeledDataset,
    sampler: CyclicSampler,
    lambda_rng: ChaCha8Rng,
}

impl<'a> TridaStream<'a> {
    fn new(data: Option<&'a LabeledDataset>, seed: u64) -> Result<Option<Self>> {
        data.map(|d| {
            Ok(Self {
                data: d,
                sampler: CyclicSampler::new(d.len(), sub_seed(seed, "batches/pretrain"))?,
                lambda_rng: stream(seed, "lambda"),
            })
        })
        .transpose()
    }

    /// Records the enabled TriDA terms for one target batch.
    fn terms(
        &mut self,
        sg: &mut StepGraph,
        cfg: &TridaConfig,
        x_t: &Tensor,
        f_t: Var,
        y_hat_t: &[usize],
    ) -> Result<(TridaTerms, Option<f64>)> {
        let (x_p, y_p) = labeled_batch(self.data, &self.sampler.draw(x_t.rows()))?;
        let lam = if cfg.uses_mixing() {
            Some(sample_lambda(cfg.alpha, &mut self.lambda_rng)?)
        } else {
            None
        };
        let inputs = TridaInputs {
            x_p: &x_p,
            y_p: &y_p,
            x_t,
            f_t,
            y_hat_t,
            lam: lam.unwrap_or(0.0),
        };
        Ok((trida_terms(sg, cfg, &inputs)?, lam))
    }
}

/// Source-free adaptation: centroid pseudo-labels refreshed every epoch,
/// information maximization plus pseudo-label cross-entropy, `h` frozen.
/// Target labels are never read.
pub fn train_sfuda_step2(
    bundle: &mut ModelBundle,
    target: &LabeledDataset,
    pretrain: Option<&LabeledDataset>,
    trida: &TridaConfig,
    objective: &AdaptationObjective,
    settings: &TrainSettings,
    tracker: Option<&Tracker>,
) -> Result<TrainLog> {
    trida.validate()?;
    let pretrain = require_pretrain(trida, bundle, pretrain)?;
    let target = target.unlabeled();
    let mut l = Loop::start(bundle, settings, steps_per_epoch(target.len(), settings.batch_size), tracker)?;
    let mut rng = stream(settings.seed, "batches/target");
    let mut extra = TridaStream::new(pretrain, settings.seed)?;
    let frozen = bundle.head_params();
    for epoch in 0..settings.epochs {
        let pseudo = cluster_pseudo_labels(bundle, &target, epoch)?;
        if let Some(t) = tracker {
            let truth: Vec<usize> = t.sets.target.indices.iter().map(|&i| pseudo.labels[i]).collect();
            let hits = truth.iter().zip(&t.sets.target.labels).filter(|(a, b)| a == b).count();
            l.log.pseudo_label_accuracy.push(hits as f64 / truth.len() as f64);
        }
        for (step, idx) in batches(target.len(), settings.batch_size, &mut rng).into_iter().enumerate() {
            let x_t = target.images(&idx);
            let y_hat = pseudo.batch_labels(&idx);
            let mut sg = StepGraph::new(bundle, Mode::Train);
            let f_t = sg.features(&x_t)?;
            let base = shot_loss(&mut sg, f_t, &y_hat, objective.w_pl)?;
            let (terms, lambda) = match extra.as_mut() {
                Some(e) => e.terms(&mut sg, trida, &x_t, f_t, &y_hat)?,
                None => (TridaTerms::default(), None),
            };
            let (loss, breakdown) = objective_sfuda_step2(&mut sg.graph, base, &terms, trida);
            let record = LossRecord {
                epoch,
                step,
                lambda,
                breakdown,
            };
            l.apply(bundle, sg.into_parts(), loss, &frozen, record)?;
        }
        l.end_epoch(bundle, tracker, epoch)?;
    }
    Ok(l.log)
}

/// Vanilla adaptation: source cross-entropy plus the domain-adversarial
/// loss over paired source/target batches. Target pseudo-labels for the
/// mixed-domain term are the current hard predictions of `h`.
#[allow(clippy::too_many_arguments)]
pub fn train_uda(
    bundle: &mut ModelBundle,
    disc: &mut Discriminator,
    source: &LabeledDataset,
    target: &LabeledDataset,
    pretrain: Option<&LabeledDataset>,
    trida: &TridaConfig,
    objective: &AdaptationObjective,
    settings: &TrainSettings,
    tracker: Option<&Tracker>,
) -> Result<TrainLog> {
    trida.validate()?;
    let pretrain = require_pretrain(trida, bundle, pretrain)?;
    source.all_labels()?;
    let target = target.unlabeled();
    let mut pairs = PairedBatches::new(source.len(), target.len(), settings.batch_size, sub_seed(settings.seed, "batches/uda"))?;
    let per_epoch = pairs.steps_per_epoch();
    let mut l = Loop::start(bundle, settings, per_epoch, tracker)?;
    let mut disc_opt = Sgd::new(settings.sgd);
    let mut extra = TridaStream::new(pretrain, settings.seed)?;
    let adversarial = objective.kind == ObjectiveKind::UdaAdversarial;
    for epoch in 0..settings.epochs {
        for _ in 0..per_epoch {
            let pair = pairs.next().expect("endless stream");
            if pair.a.len() < 2 {
                continue;
            }
            let (x_s, y_s) = labeled_batch(source, &pair.a)?;
            let x_t = target.images(&pair.b);
            let coeff = objective.grl_coefficient(l.progress());
            let mut sg = StepGraph::new(bundle, Mode::Train);
            let f_s = sg.features(&x_s)?;
            let f_t = sg.features(&x_t)?;
            let l_s = source_loss(&mut sg, f_s, &y_s, objective.label_smoothing)?;
            let uda = if adversarial {
                adversarial_loss(&mut sg.graph, disc, f_s, f_t, coeff)
            } else {
                sg.graph.constant(Tensor::scalar(0.0))
            };
            let (terms, lambda) = match extra.as_mut() {
                Some(e) => {
                    let y_hat = if trida.uses_mixing() && trida.use_sem {
                        let z = sg.target_logits(f_t);
                        sg.graph.value(z).argmax_rows()
                    } else {
                        vec![0; x_t.rows()]
                    };
                    e.terms(&mut sg, trida, &x_t, f_t, &y_hat)?
                }
                None => (TridaTerms::default(), None),
            };
            let (loss, breakdown) = objective_uda(&mut sg.graph, uda, l_s, &terms, trida);
            let record = LossRecord {
                epoch,
                step: pair.step,
                lambda,
                breakdown,
            };
            let scale = l.lr_scale();
            let graph = l.apply(bundle, sg.into_parts(), loss, &[], record)?;
            if adversarial {
                let grads = disc.store().grads(&graph);
                disc_opt.step(disc.store_mut(), &grads, scale);
            }
        }
        l.end_epoch(bundle, tracker, epoch)?;
    }
    Ok(l.log)
}

/// Fraction of `dataset` classified correctly by the target head.
pub fn target_accuracy(bundle: &ModelBundle, dataset: &LabeledDataset) -> Result<f64> {
    let labels = dataset.all_labels()?;
    let pred = bundle.classify_target(&dataset.all_images())?.argmax_rows();
    Ok(pred.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / labels.len().max(1) as f64)
}

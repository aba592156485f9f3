//! Reference objectives that TriDA wraps: source cross-entropy, a
//! SHOT-style source-free objective with centroid pseudo-labels, and a
//! gradient-reversal domain-adversarial objective.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Mode, ModelBundle};
use crate::nn::{Dense, ParamGroup, ParamStore, DISCRIMINATOR_OWNER};
use crate::objectives::StepGraph;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    SourceOnly,
    SfudaShotLike,
    UdaAdversarial,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::SourceOnly => "source_only",
            ObjectiveKind::SfudaShotLike => "sfuda_shot_like",
            ObjectiveKind::UdaAdversarial => "uda_adversarial",
        }
    }
}

/// A baseline objective and its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptationObjective {
    pub kind: ObjectiveKind,
    /// Label smoothing of the source cross-entropy.
    pub label_smoothing: f64,
    /// Weight of the pseudo-label cross-entropy in the SHOT-style loss.
    pub w_pl: f64,
    /// Final gradient-reversal coefficient (ramped up during training).
    pub grl_max: f64,
    pub disc_hidden: usize,
}

impl AdaptationObjective {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            label_smoothing: 0.1,
            w_pl: 0.3,
            grl_max: 1.0,
            disc_hidden: 64,
        }
    }

    pub fn hyperparameters(&self) -> Vec<(&'static str, String)> {
        vec![
            ("kind", self.kind.as_str().to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("w_pl", self.w_pl.to_string()),
            ("grl_max", self.grl_max.to_string()),
            ("disc_hidden", self.disc_hidden.to_string()),
        ]
    }

    /// Gradient-reversal coefficient at training progress `p`:
    /// `grl_max * (2 / (1 + exp(-10 p)) - 1)`.
    pub fn grl_coefficient(&self, p: f64) -> f64 {
        self.grl_max * (2.0 / (1.0 + (-10.0 * p.clamp(0.0, 1.0)).exp()) - 1.0)
    }
}

/// Mean (optionally smoothed) cross-entropy of `h(f(x_s))`.
pub fn source_loss(sg: &mut StepGraph, f_s: Var, y_s: &[usize], smoothing: f64) -> Result<Var> {
    let k = sg.bundle.target_classes().len();
    if let Some(l) = y_s.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("source label {l} outside {k} classes")));
    }
    let z = sg.target_logits(f_s);
    Ok(sg.graph.cross_entropy(z, y_s, smoothing))
}

pub fn loss_source(bundle: &ModelBundle, x_s: &Tensor, y_s: &[usize], smoothing: f64, mode: Mode) -> Result<f64> {
    let mut sg = StepGraph::inference(bundle, mode);
    let f = sg.features(x_s)?;
    let l = source_loss(&mut sg, f, y_s, smoothing)?;
    Ok(sg.value(l))
}

/// Mean per-sample prediction entropy minus the entropy of the mean
/// prediction. Bounded below by `-ln K`.
pub fn information_maximization(g: &mut Graph, logits: Var) -> Var {
    let n = g.value(logits).rows() as f64;
    let k = g.value(logits).row_len();
    let p = g.softmax(logits);
    let logp = g.log_softmax(logits);
    let plogp = g.mul(p, logp);
    let s = g.sum(plogp);
    let ent = g.scale(s, -1.0 / n);
    let pbar = g.mean_rows(p);
    let eps = g.constant(Tensor::full(&[k], 1e-12));
    let shifted = g.add(pbar, eps);
    let logbar = g.ln(shifted);
    let prod = g.mul(pbar, logbar);
    let neg_div_entropy = g.sum(prod);
    g.add(ent, neg_div_entropy)
}

/// `IM(h(f(x_t))) + w_pl CE(h(f(x_t)), y^_t)`.
pub fn shot_loss(sg: &mut StepGraph, f_t: Var, pseudo: &[usize], w_pl: f64) -> Result<Var> {
    let k = sg.bundle.target_classes().len();
    if let Some(l) = pseudo.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("pseudo-label {l} outside {k} classes")));
    }
    let z = sg.target_logits(f_t);
    let im = information_maximization(&mut sg.graph, z);
    if w_pl == 0.0 {
        return Ok(im);
    }
    let ce = sg.graph.cross_entropy(z, pseudo, 0.0);
    let w = sg.graph.scale(ce, w_pl);
    Ok(sg.graph.add(im, w))
}

pub fn loss_sfuda_shot_like(bundle: &ModelBundle, x_t: &Tensor, pseudo: &[usize], w_pl: f64, mode: Mode) -> Result<f64> {
    let mut sg = StepGraph::inference(bundle, mode);
    let f = sg.features(x_t)?;
    let l = shot_loss(&mut sg, f, pseudo, w_pl)?;
    Ok(sg.value(l))
}

/// Centroid pseudo-labels for a target set.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelState {
    /// One feature-space centroid per target class.
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Cosine similarity of each sample to its assigned centroid.
    pub similarity: Vec<f64>,
    pub refresh_epoch: usize,
}

impl PseudoLabelState {
    /// Pseudo-labels for a batch of dataset indices.
    pub fn batch_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Fraction of labels that agree with `truth`.
    pub fn accuracy(&self, truth: &[usize]) -> f64 {
        let hits = self.labels.iter().zip(truth).filter(|(a, b)| a == b).count();
        hits as f64 / truth.len().max(1) as f64
    }

    /// CSV with columns `index,pseudo_label,similarity`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "pseudo_label", "similarity"])?;
        for (i, (l, s)) in self.labels.iter().zip(&self.similarity).enumerate() {
            w.write_record([i.to_string(), l.to_string(), format!("{s}")])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let text = self.to_csv()?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return f64::NEG_INFINITY;
    }
    dot / (na * nb)
}

fn assign(features: &Tensor, centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    (0..features.rows())
        .map(|i| {
            let f = features.row(i);
            let mut best = (0, f64::NEG_INFINITY);
            for (k, c) in centroids.iter().enumerate() {
                let s = cosine(f, c);
                if s > best.1 {
                    best = (k, s);
                }
            }
            best
        })
        .unzip()
}

/// Centroid clustering from eval-mode features and class probabilities.
/// Round 0 uses probability-weighted means; one refinement recomputes the
/// centroids from the hard labels of round 0 and reassigns.
pub fn cluster_from_outputs(features: &Tensor, probs: &Tensor, epoch: usize) -> Result<PseudoLabelState> {
    let (n, d, k) = (features.rows(), features.row_len(), probs.row_len());
    if probs.rows() != n || n == 0 {
        return Err(Error::invalid("features and probabilities must describe the same non-empty set"));
    }
    let mut centroids = vec![vec![0.0; d]; k];
    for (c, cent) in centroids.iter_mut().enumerate() {
        let mass: f64 = (0..n).map(|i| probs.row(i)[c]).sum();
        if mass <= 0.0 {
            log::warn!("class {c} has zero probability mass; its centroid is left at the origin");
            continue;
        }
        for i in 0..n {
            let w = probs.row(i)[c] / mass;
            for (x, f) in cent.iter_mut().zip(features.row(i)) {
                *x += w * f;
            }
        }
    }
    let (labels, _) = assign(features, &centroids);
    let mut refined = centroids.clone();
    for (c, cent) in refined.iter_mut().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            log::warn!("class {c} received no pseudo-labels; keeping its previous centroid");
            continue;
        }
        cent.iter_mut().for_each(|x| *x = 0.0);
        for &i in &members {
            for (x, f) in cent.iter_mut().zip(features.row(i)) {
                *x += f;
            }
        }
        let m = members.len() as f64;
        cent.iter_mut().for_each(|x| *x /= m);
    }
    let (labels, similarity) = assign(features, &refined);
    Ok(PseudoLabelState {
        centroids: refined,
        labels,
        similarity,
        refresh_epoch: epoch,
    })
}

/// Features and target probabilities in eval mode, chunked.
pub fn target_outputs(bundle: &ModelBundle, images: &Tensor) -> Result<(Tensor, Tensor)> {
    let features = bundle.forward_features(images, Mode::Eval)?;
    let mut g = Graph::inference();
    let f = g.constant(features.clone());
    let z = bundle.target_logits_graph(&mut g, f);
    Ok((features, g.value(z).softmax_rows()))
}

pub fn cluster_pseudo_labels(bundle: &ModelBundle, target: &LabeledDataset, epoch: usize) -> Result<PseudoLabelState> {
    if target.is_empty() {
        return Err(Error::invalid("target dataset is empty"));
    }
    let (f, p) = target_outputs(bundle, &target.all_images())?;
    cluster_from_outputs(&f, &p, epoch)
}

/// Two-layer domain classifier on bottleneck features.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    store: ParamStore,
    hidden: Dense,
    out: Dense,
}

impl Discriminator {
    pub fn new(feature_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(DISCRIMINATOR_OWNER);
        let h = Dense::new(&mut store, &mut rng, "disc.0", feature_dim, hidden, ParamGroup::New, false);
        let o = Dense::new(&mut store, &mut rng, "disc.1", hidden, 1, ParamGroup::New, false);
        Self { store, hidden: h, out: o }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Domain logits `[n, 1]` (positive means source).
    pub fn forward(&self, g: &mut Graph, features: Var) -> Var {
        let h = self.hidden.forward(&self.store, g, features);
        let h = g.relu(h);
        self.out.forward(&self.store, g, h)
    }
}

/// Binary domain loss with gradient reversal of strength `coeff` between
/// the features and the discriminator. The discriminator itself descends
/// the loss; the feature extractor ascends it.
pub fn adversarial_loss(g: &mut Graph, disc: &Discriminator, f_s: Var, f_t: Var, coeff: f64) -> Var {
    let rs = g.grad_scale(f_s, -coeff);
    let rt = g.grad_scale(f_t, -coeff);
    let zs = disc.forward(g, rs);
    let zt = disc.forward(g, rt);
    let ls = g.bce_with_logits(zs, &vec![1.0; g.value(zs).numel()]);
    let lt = g.bce_with_logits(zt, &vec![0.0; g.value(zt).numel()]);
    let s = g.add(ls, lt);
    g.scale(s, 0.5)
}

pub fn loss_uda_adversarial(bundle: &ModelBundle, disc: &Discriminator, x_s: &Tensor, x_t: &Tensor, mode: Mode) -> Result<f64> {
    let mut sg = StepGraph::inference(bundle, mode);
    let fs = sg.features(x_s)?;
    let ft = sg.features(x_t)?;
    let l = adversarial_loss(&mut sg.graph, disc, fs, ft, 1.0);
    Ok(sg.value(l))
}

//! Model inversion: class-conditional proxy images optimized against a
//! frozen bundle, with image-prior and feature-statistics regularizers and
//! an optional text-embedding classifier in place of `h_p`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::data::{write_image_folder, DomainRole, LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelBundle};
use crate::seed::stream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthesisInit {
    UniformNoise,
    /// `N(0.5, 0.2^2)` clamped to `[0, 1]`.
    GaussianNoise,
}

impl SynthesisInit {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthesisInit::UniformNoise => "uniform_noise",
            SynthesisInit::GaussianNoise => "gaussian_noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform_noise" => Some(SynthesisInit::UniformNoise),
            "gaussian_noise" => Some(SynthesisInit::GaussianNoise),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegWeights {
    pub w_tv: f64,
    pub w_l2: f64,
    pub w_feat: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self {
            w_tv: 1e-4,
            w_l2: 1e-5,
            w_feat: 1e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthesisConfig {
    pub steps: usize,
    pub step_size: f64,
    pub reg_weights: RegWeights,
    pub images_per_class: usize,
    pub init: SynthesisInit,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            step_size: 0.05,
            reg_weights: RegWeights::default(),
            images_per_class: 10,
            init: SynthesisInit::UniformNoise,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.reg_weights;
        if [w.w_tv, w.w_l2, w.w_feat].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("regularizer weights must be finite and non-negative"));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::invalid("synthesis step size must be positive"));
        }
        if self.images_per_class == 0 {
            return Err(Error::invalid("images_per_class must be positive"));
        }
        Ok(())
    }
}

/// Unit-norm text embeddings of class identifiers and the softmax
/// temperature that goes with them.
pub trait TextEmbeddingProvider: Sync {
    fn embed(&self, class_id: &str) -> Result<Vec<f64>>;
    fn temperature(&self) -> f64;
}

/// Embeddings supplied up front, e.g. exported from a text encoder.
#[derive(Clone, Debug)]
pub struct FixedEmbeddings {
    vectors: BTreeMap<String, Vec<f64>>,
    temperature: f64,
}

impl FixedEmbeddings {
    /// Normalizes every vector to unit length.
    pub fn new(vectors: impl IntoIterator<Item = (String, Vec<f64>)>, temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        let mut out = BTreeMap::new();
        let mut dim = None;
        for (k, v) in vectors {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::invalid(format!("embedding of `{k}` has zero or non-finite norm")));
            }
            if *dim.get_or_insert(v.len()) != v.len() {
                return Err(Error::invalid("embeddings differ in dimension"));
            }
            out.insert(k, v.into_iter().map(|x| x / n).collect());
        }
        Ok(Self {
            vectors: out,
            temperature,
        })
    }

    /// Parses `class v1 v2 ...` lines.
    pub fn parse(text: &str, temperature: f64) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let name = it.next().unwrap_or_default().to_string();
            let v = it
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            rows.push((name, v));
        }
        Self::new(rows, temperature)
    }
}

impl TextEmbeddingProvider for FixedEmbeddings {
    fn embed(&self, class_id: &str) -> Result<Vec<f64>> {
        self.vectors.get(class_id).cloned().ok_or_else(|| Error::Lookup(class_id.to_string()))
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// Text-embedding classifier over a list of classes.
#[derive(Clone, Copy)]
pub struct ClipGuide<'a> {
    pub provider: &'a dyn TextEmbeddingProvider,
    pub classes: &'a [String],
}

impl ClipGuide<'_> {
    /// `[d, K]` matrix of class embeddings.
    fn embedding_matrix(&self, dim: usize) -> Result<Tensor> {
        let k = self.classes.len();
        let mut m = Tensor::zeros(&[dim, k]);
        for (j, c) in self.classes.iter().enumerate() {
            let e = self.provider.embed(c)?;
            if e.len() != dim {
                return Err(Error::Shape {
                    expected: vec![dim],
                    got: vec![e.len()],
                });
            }
            for (i, v) in e.iter().enumerate() {
                m.data_mut()[i * k + j] = *v;
            }
        }
        Ok(m)
    }

    fn index(&self, class_id: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == class_id)
            .ok_or_else(|| Error::invalid(format!("class `{class_id}` is not among the text-embedding classes")))
    }
}

/// Softmax over classes of `cos(features, w(c)) / t`, evaluated for
/// `class_id`.
pub fn clip_style_probability(features: &[f64], class_id: &str, provider: &dyn TextEmbeddingProvider, target_classes: &[String]) -> Result<f64> {
    let guide = ClipGuide {
        provider,
        classes: target_classes,
    };
    let j = guide.index(class_id)?;
    Ok(clip_style_probabilities(features, provider, target_classes)?[j])
}

/// The full probability row of [`clip_style_probability`].
pub fn clip_style_probabilities(features: &[f64], provider: &dyn TextEmbeddingProvider, target_classes: &[String]) -> Result<Vec<f64>> {
    if target_classes.is_empty() {
        return Err(Error::invalid("need at least one class"));
    }
    let fnorm = features.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let t = provider.temperature();
    let logits = target_classes
        .iter()
        .map(|c| {
            let e = provider.embed(c)?;
            if e.len() != features.len() {
                return Err(Error::Shape {
                    expected: vec![features.len()],
                    got: vec![e.len()],
                });
            }
            Ok(features.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / fnorm / t)
        })
        .collect::<Result<Vec<f64>>>()?;
    let z = Tensor::from_vec(&[1, logits.len()], logits)?;
    Ok(z.softmax_rows().into_data())
}

/// Regularizer terms recorded in `g` for the batch `x`; the feature-
/// statistics term compares the inputs of every backbone normalization
/// layer with its stored running statistics.
fn regularizer_graph(g: &mut Graph, bundle: &ModelBundle, x: Var, taps: &[Var], w: &RegWeights) -> Var {
    let n = g.value(x).rows().max(1) as f64;
    let tv = g.total_variation(x);
    let mut total = g.scale(tv, w.w_tv);
    let sq = g.mul(x, x);
    let sq = g.sum(sq);
    let l2 = g.scale(sq, w.w_l2 / n);
    total = g.add(total, l2);
    if w.w_feat != 0.0 {
        for (tap, stats) in taps.iter().zip(bundle.normalization_stats()) {
            let m = g.moment_match(*tap, &stats.mean, &stats.var);
            let m = g.scale(m, w.w_feat);
            total = g.add(total, m);
        }
    }
    total
}

/// `w_tv TV(x) + w_l2 |x|^2 + w_feat sum_layers (|mu - mu_stored|^2 +
/// |var - var_stored|^2)` for a batch `[n, c, h, w]`; the `l2` term is
/// averaged over the batch. The bundle is read in eval mode.
pub fn regularizer_eval(images: &Tensor, bundle: &ModelBundle, weights: &RegWeights) -> Result<f64> {
    bundle.check_input(images)?;
    let mut g = Graph::inference();
    let x = g.constant(images.clone());
    let out = bundle.features_graph(&mut g, x, Mode::Eval);
    let r = regularizer_graph(&mut g, bundle, x, &out.taps, weights);
    Ok(g.value(r).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisResult {
    pub class_id: String,
    pub images: Vec<Tensor>,
    /// Final probability of `class_id` per image.
    pub confidences: Vec<f64>,
    /// Objective after initialization and after every step.
    pub loss_history: Vec<f64>,
}

fn initial_images(bundle: &ModelBundle, class_id: &str, cfg: &SynthesisConfig) -> Result<Tensor> {
    let [c, h, w] = bundle.input_shape();
    let n = cfg.images_per_class * c * h * w;
    let mut rng = stream(cfg.seed, &format!("synthesis/{class_id}"));
    let data: Vec<f64> = match cfg.init {
        SynthesisInit::UniformNoise => (0..n).map(|_| rng.random::<f64>()).collect(),
        SynthesisInit::GaussianNoise => {
            let normal = Normal::new(0.5, 0.2).expect("valid normal");
            (0..n).map(|_| Distribution::<f64>::sample(&normal, &mut rng).clamp(0.0, 1.0)).collect()
        }
    };
    Tensor::from_vec(&[cfg.images_per_class, c, h, w], data)
}

struct Objective<'a> {
    bundle: &'a ModelBundle,
    class_index: usize,
    guide: Option<(ClipGuide<'a>, Tensor)>,
    weights: RegWeights,
}

impl Objective<'_> {
    fn logits(&self, g: &mut Graph, features: Var) -> Result<Var> {
        match &self.guide {
            Some((guide, emb)) => {
                let f = g.row_normalize(features);
                let e = g.constant(emb.clone());
                let cos = g.matmul(f, e);
                Ok(g.scale(cos, 1.0 / guide.provider.temperature()))
            }
            None => self.bundle.pretrain_logits_graph(g, features),
        }
    }

    /// Loss, pixel gradient and per-image class probability at `x`.
    fn eval(&self, x: &Tensor) -> Result<(f64, Tensor, Vec<f64>)> {
        let mut g = Graph::inference();
        let xv = g.variable(x.clone());
        let out = self.bundle.features_graph(&mut g, xv, Mode::Eval);
        let z = self.logits(&mut g, out.features)?;
        let targets = vec![self.class_index; x.rows()];
        let ce = g.cross_entropy(z, &targets, 0.0);
        let reg = regularizer_graph(&mut g, self.bundle, xv, &out.taps, &self.weights);
        let loss = g.add(ce, reg);
        let probs = g.value(z).softmax_rows();
        let conf = (0..probs.rows()).map(|i| probs.row(i)[self.class_index]).collect();
        let value = g.value(loss).item();
        g.backward(loss);
        let grad = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((value, grad, conf))
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizes `images_per_class` images of `class_id` against the frozen
/// bundle. Steps follow the Adam direction; a step that would increase the
/// objective is rejected and the step size halved, so the recorded loss is
/// non-increasing. Pixels are clamped to `[0, 1]` after every step.
///
/// Without a guide the class is looked up in `h_p`; with one, the text
/// classifier over the guide's classes replaces `h_p`.
pub fn synthesize_class_images(bundle: &ModelBundle, class_id: &str, cfg: &SynthesisConfig, guide: Option<ClipGuide>) -> Result<SynthesisResult> {
    cfg.validate()?;
    let (class_index, guide) = match guide {
        Some(gd) => {
            let idx = gd.index(class_id)?;
            let emb = gd.embedding_matrix(bundle.feature_dim())?;
            (idx, Some((gd, emb)))
        }
        None => {
            if !bundle.has_pretrain_head() {
                return Err(Error::HeadRemoved);
            }
            let idx = bundle
                .pretrain_classes()
                .iter()
                .position(|c| c == class_id)
                .ok_or_else(|| Error::invalid(format!("class `{class_id}` is not in the pre-training head")))?;
            (idx, None)
        }
    };
    let obj = Objective {
        bundle,
        class_index,
        guide,
        weights: cfg.reg_weights,
    };
    let mut x = initial_images(bundle, class_id, cfg)?;
    let (mut loss, mut grad, mut conf) = obj.eval(&x)?;
    let mut history = vec![loss];
    let mut m = Tensor::zeros(x.shape());
    let mut v = Tensor::zeros(x.shape());
    let mut t = 0i32;
    let mut lr = cfg.step_size;
    for _ in 0..cfg.steps {
        let (mut m2, mut v2) = (m.clone(), v.clone());
        for ((mi, vi), gi) in m2.data_mut().iter_mut().zip(v2.data_mut().iter_mut()).zip(grad.data()) {
            *mi = ADAM_B1 * *mi + (1.0 - ADAM_B1) * gi;
            *vi = ADAM_B2 * *vi + (1.0 - ADAM_B2) * gi * gi;
        }
        let (c1, c2) = (1.0 - ADAM_B1.powi(t + 1), 1.0 - ADAM_B2.powi(t + 1));
        let mut proposal = x.clone();
        for ((p, mi), vi) in proposal.data_mut().iter_mut().zip(m2.data()).zip(v2.data()) {
            *p = (*p - lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS)).clamp(0.0, 1.0);
        }
        let (l2, g2, c2v) = obj.eval(&proposal)?;
        if l2 <= loss {
            x = proposal;
            (loss, grad, conf) = (l2, g2, c2v);
            (m, v) = (m2, v2);
            t += 1;
        } else {
            lr *= 0.5;
        }
        history.push(loss);
    }
    let images = (0..x.rows()).map(|i| {
        let [c, h, w] = bundle.input_shape();
        Tensor::from_vec(&[c, h, w], x.row(i).to_vec()).expect("row has image size")
    });
    Ok(SynthesisResult {
        class_id: class_id.to_string(),
        images: images.collect(),
        confidences: conf,
        loss_history: history,
    })
}

/// Synthesizes every class of `classes`, spread over up to `workers`
/// threads. Results are in `classes` order regardless of scheduling.
pub fn synthesize_dataset(
    bundle: &ModelBundle,
    classes: &[String],
    cfg: &SynthesisConfig,
    guide: Option<ClipGuide>,
    workers: usize,
) -> Result<(LabeledDataset, Vec<SynthesisResult>)> {
    if classes.is_empty() {
        return Err(Error::invalid("no classes to synthesize"));
    }
    let workers = workers.clamp(1, classes.len());
    let chunk = classes.len().div_ceil(workers);
    let results: Vec<Result<SynthesisResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = classes
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|c| synthesize_class_images(bundle, c, cfg, guide)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("synthesis worker panicked")).collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let samples = results
        .iter()
        .enumerate()
        .flat_map(|(label, r)| {
            r.images.iter().map(move |img| Sample {
                image: img.clone(),
                label: Some(label),
                role: DomainRole::Pretrain,
            })
        })
        .collect();
    let ds = LabeledDataset::new(samples, classes.to_vec(), DomainRole::Pretrain)?;
    Ok((ds, results))
}

/// Writes the synthesized set as an image folder under `root`, plus
/// `manifest.csv` (`path,class,confidence`) and `synthesis.txt` with the
/// configuration.
pub fn export_synthetic(dataset: &LabeledDataset, results: &[SynthesisResult], cfg: &SynthesisConfig, root: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let paths = write_image_folder(dataset, &root.join("images"))?;
    let confidences: Vec<(&str, f64)> = results
        .iter()
        .flat_map(|r| r.confidences.iter().map(move |c| (r.class_id.as_str(), *c)))
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["path", "class", "confidence"])?;
    for (p, (class, c)) in paths.iter().zip(confidences) {
        let rel = p.strip_prefix(root).unwrap_or(p);
        w.write_record([rel.display().to_string(), class.to_string(), c.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    let manifest = root.join("manifest.csv");
    fs::write(&manifest, bytes).map_err(|e| Error::io(&manifest, e))?;
    let mut txt = String::new();
    let rw = &cfg.reg_weights;
    for (k, v) in [
        ("steps", cfg.steps.to_string()),
        ("step_size", cfg.step_size.to_string()),
        ("w_tv", rw.w_tv.to_string()),
        ("w_l2", rw.w_l2.to_string()),
        ("w_feat", rw.w_feat.to_string()),
        ("images_per_class", cfg.images_per_class.to_string()),
        ("init", cfg.init.as_str().to_string()),
        ("seed", cfg.seed.to_string()),
    ] {
        writeln!(txt, "{k}={v}").expect("string write");
    }
    let cfg_path = root.join("synthesis.txt");
    fs::write(&cfg_path, txt).map_err(|e| Error::io(&cfg_path, e))?;
    let mut out = vec![manifest, cfg_path];
    out.extend(paths);
    Ok(out)
}

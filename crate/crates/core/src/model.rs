//! The network triple: shared feature extractor `f` (backbone, bottleneck,
//! batch norm), target classifier `h` and removable pre-training classifier
//! `h_p`.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{BatchMoments, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Dense, Norm, ParamGroup, ParamStore, BUNDLE_OWNER};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 256;
const CHECKPOINT_MAGIC: &str = "TRIDA-CHECKPOINT 1";

#[derive(Clone, Debug, PartialEq)]
pub enum BackboneKind {
    /// `conv3x3 -> batch norm -> relu -> maxpool2` per entry, then flatten.
    Conv { channels: Vec<usize> },
    /// `f(x)` is the flattened input; no bottleneck. Used for loss tests.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_side: usize,
    pub backbone: BackboneKind,
    pub bottleneck_dim: usize,
    pub weight_norm_head: bool,
    /// When false the backbone is trained from scratch and joins the
    /// new-layer learning-rate group.
    pub backbone_pretrained: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_side: 32,
            backbone: BackboneKind::Conv {
                channels: vec![8, 16, 32],
            },
            bottleneck_dim: 256,
            weight_norm_head: false,
            backbone_pretrained: true,
        }
    }
}

impl ModelConfig {
    fn to_lines(&self) -> Vec<String> {
        let backbone = match &self.backbone {
            BackboneKind::Conv { channels } => {
                let c: Vec<String> = channels.iter().map(|c| c.to_string()).collect();
                format!("conv:{}", c.join(","))
            }
            BackboneKind::Identity => "identity".to_string(),
        };
        vec![
            format!("config.in_channels={}", self.in_channels),
            format!("config.image_side={}", self.image_side),
            format!("config.backbone={backbone}"),
            format!("config.bottleneck_dim={}", self.bottleneck_dim),
            format!("config.weight_norm_head={}", self.weight_norm_head),
            format!("config.backbone_pretrained={}", self.backbone_pretrained),
        ]
    }

    /// SHA-256 of the canonical key-value rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_lines().join("\n").as_bytes()))
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let perr = |m: String| Error::Parse { line, message: m };
        match key {
            "config.in_channels" => self.in_channels = value.parse().map_err(|e| perr(format!("{key}: {e}")))?,
            "config.image_side" => self.image_side = value.parse().map_err(|e| perr(format!("{key}: {e}")))?,
            "config.bottleneck_dim" => self.bottleneck_dim = value.parse().map_err(|e| perr(format!("{key}: {e}")))?,
            "config.weight_norm_head" => self.weight_norm_head = value.parse().map_err(|e| perr(format!("{key}: {e}")))?,
            "config.backbone_pretrained" => {
                self.backbone_pretrained = value.parse().map_err(|e| perr(format!("{key}: {e}")))?
            }
            "config.backbone" => {
                self.backbone = if value == "identity" {
                    BackboneKind::Identity
                } else if let Some(list) = value.strip_prefix("conv:") {
                    let channels = list
                        .split(',')
                        .map(|c| c.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| perr(format!("{key}: {e}")))?;
                    BackboneKind::Conv { channels }
                } else {
                    return Err(perr(format!("unknown backbone `{value}`")));
                }
            }
            _ => return Err(perr(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norms use batch statistics and report them for a later
    /// [`ModelBundle::commit_moments`].
    Train,
    /// Batch norms use running statistics; forward passes are pure.
    Eval,
}

/// Result of a feature-extractor forward pass recorded in a graph.
pub struct FeatureOutput {
    pub features: Var,
    /// Inputs to each backbone batch norm, for feature-statistics matching.
    pub taps: Vec<Var>,
    /// Batch statistics per norm layer (train mode only).
    pub moments: Vec<(usize, BatchMoments)>,
}

/// Running statistics of one backbone normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterGroups {
    pub backbone: Vec<String>,
    pub new: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    config: ModelConfig,
    store: ParamStore,
    convs: Vec<Conv>,
    /// Backbone norms followed by the bottleneck norm, when present.
    norms: Vec<Norm>,
    bottleneck: Option<Dense>,
    head: Dense,
    pretrain_head: Option<Dense>,
    target_classes: Vec<String>,
    pretrain_classes: Vec<String>,
}

impl ModelBundle {
    /// Builds a freshly initialized bundle. An empty `pretrain_classes`
    /// list gives a bundle without `h_p`.
    pub fn new(config: ModelConfig, target_classes: Vec<String>, pretrain_classes: Vec<String>, seed: u64) -> Result<Self> {
        if config.in_channels == 0 || config.image_side == 0 {
            return Err(Error::invalid("image channels and side must be positive"));
        }
        if target_classes.is_empty() {
            return Err(Error::invalid("at least one target class is required"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(BUNDLE_OWNER);
        let backbone_group = if config.backbone_pretrained {
            ParamGroup::Backbone
        } else {
            ParamGroup::New
        };
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut bottleneck = None;
        let feature_dim = match &config.backbone {
            BackboneKind::Identity => config.in_channels * config.image_side * config.image_side,
            BackboneKind::Conv { channels } => {
                let mut cin = config.in_channels;
                let mut side = config.image_side;
                for (i, &c) in channels.iter().enumerate() {
                    if c == 0 || side < 2 {
                        return Err(Error::invalid(format!(
                            "conv block {i} cannot be applied (channels {c}, spatial side {side})"
                        )));
                    }
                    convs.push(Conv::new(&mut store, &mut rng, &format!("backbone.{i}.conv"), cin, c, 3, backbone_group));
                    norms.push(Norm::new(&mut store, &format!("backbone.{i}.bn"), c, backbone_group));
                    cin = c;
                    side /= 2;
                }
                let flat = cin * side * side;
                if config.bottleneck_dim == 0 {
                    return Err(Error::invalid("bottleneck width must be positive"));
                }
                bottleneck = Some(Dense::new(&mut store, &mut rng, "bottleneck.fc", flat, config.bottleneck_dim, ParamGroup::New, false));
                norms.push(Norm::new(&mut store, "bottleneck.bn", config.bottleneck_dim, ParamGroup::New));
                config.bottleneck_dim
            }
        };
        let head = Dense::new(&mut store, &mut rng, "head", feature_dim, target_classes.len(), ParamGroup::New, config.weight_norm_head);
        let pretrain_head = (!pretrain_classes.is_empty()).then(|| {
            Dense::new(&mut store, &mut rng, "pretrain_head", feature_dim, pretrain_classes.len(), ParamGroup::New, false)
        });
        Ok(Self {
            config,
            store,
            convs,
            norms,
            bottleneck,
            head,
            pretrain_head,
            target_classes,
            pretrain_classes,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn target_classes(&self) -> &[String] {
        &self.target_classes
    }

    pub fn pretrain_classes(&self) -> &[String] {
        if self.pretrain_head.is_some() {
            &self.pretrain_classes
        } else {
            &[]
        }
    }

    pub fn has_pretrain_head(&self) -> bool {
        self.pretrain_head.is_some()
    }

    pub fn feature_dim(&self) -> usize {
        match self.bottleneck {
            Some(_) => self.config.bottleneck_dim,
            None => self.config.in_channels * self.config.image_side * self.config.image_side,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.in_channels, self.config.image_side, self.config.image_side]
    }

    /// Indices of the target head's parameters in the store.
    pub fn head_params(&self) -> Vec<usize> {
        self.head.indices()
    }

    pub fn check_input(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        let [c, h, w] = self.input_shape();
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w || s[0] == 0 {
            return Err(Error::Shape {
                expected: vec![s.first().copied().unwrap_or(0).max(1), c, h, w],
                got: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Records `f(x)` in `g`.
    pub fn features_graph(&self, g: &mut Graph, x: Var, mode: Mode) -> FeatureOutput {
        let train = mode == Mode::Train;
        let mut taps = Vec::new();
        let mut moments = Vec::new();
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&self.store, g, h);
            taps.push(h);
            let (y, m) = self.norms[i].forward(&self.store, g, h, train);
            if let Some(m) = m {
                moments.push((i, m));
            }
            h = g.relu(y);
            h = g.max_pool2(h);
        }
        h = g.flatten(h);
        if let Some(fc) = &self.bottleneck {
            h = fc.forward(&self.store, g, h);
            let li = self.convs.len();
            let (y, m) = self.norms[li].forward(&self.store, g, h, train);
            if let Some(m) = m {
                moments.push((li, m));
            }
            h = y;
        }
        FeatureOutput {
            features: h,
            taps,
            moments,
        }
    }

    pub fn target_logits_graph(&self, g: &mut Graph, features: Var) -> Var {
        self.head.forward(&self.store, g, features)
    }

    pub fn pretrain_logits_graph(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let head = self.pretrain_head.as_ref().ok_or(Error::HeadRemoved)?;
        Ok(head.forward(&self.store, g, features))
    }

    /// Folds observed batch statistics into the running estimates.
    pub fn commit_moments(&mut self, moments: &[(usize, BatchMoments)]) {
        for (i, m) in moments {
            self.norms[*i].update(m);
        }
    }

    fn eval_chunks<T>(&self, images: &Tensor, mut f: impl FnMut(&mut Graph, Var) -> Result<Vec<T>>) -> Result<Vec<T>> {
        self.check_input(images)?;
        let n = images.rows();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut g = Graph::inference();
            let x = g.constant(images.select_rows(&idx));
            out.extend(f(&mut g, x)?);
            start = end;
        }
        Ok(out)
    }

    fn rows_to_tensor(rows: Vec<Vec<f64>>, width: usize) -> Tensor {
        let n = rows.len();
        Tensor::from_vec(&[n, width], rows.into_iter().flatten().collect()).unwrap()
    }

    /// `f(x)` for a batch `[n, c, h, w]`. Eval mode uses running
    /// statistics and is deterministic; train mode normalizes with the
    /// batch's own statistics (nothing is committed).
    pub fn forward_features(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Train {
            self.check_input(images)?;
            let mut g = Graph::inference();
            let x = g.constant(images.clone());
            let out = self.features_graph(&mut g, x, Mode::Train);
            return Ok(g.value(out.features).clone());
        }
        let d = self.feature_dim();
        let rows = self.eval_chunks(images, |g, x| {
            let f = self.features_graph(g, x, Mode::Eval).features;
            Ok(split_rows(g.value(f)))
        })?;
        Ok(Self::rows_to_tensor(rows, d))
    }

    /// Target-class logits in eval mode.
    pub fn classify_target(&self, images: &Tensor) -> Result<Tensor> {
        let k = self.target_classes.len();
        let rows = self.eval_chunks(images, |g, x| {
            let f = self.features_graph(g, x, Mode::Eval).features;
            let z = self.target_logits_graph(g, f);
            Ok(split_rows(g.value(z)))
        })?;
        Ok(Self::rows_to_tensor(rows, k))
    }

    /// Pre-training-class logits in eval mode.
    pub fn classify_pretrain(&self, images: &Tensor) -> Result<Tensor> {
        if self.pretrain_head.is_none() {
            return Err(Error::HeadRemoved);
        }
        let k = self.pretrain_classes.len();
        let rows = self.eval_chunks(images, |g, x| {
            let f = self.features_graph(g, x, Mode::Eval).features;
            let z = self.pretrain_logits_graph(g, f)?;
            Ok(split_rows(g.value(z)))
        })?;
        Ok(Self::rows_to_tensor(rows, k))
    }

    /// Both heads from one shared feature pass.
    pub fn classify_joint(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        if self.pretrain_head.is_none() {
            return Err(Error::HeadRemoved);
        }
        let (kt, kp) = (self.target_classes.len(), self.pretrain_classes.len());
        let rows = self.eval_chunks(images, |g, x| {
            let f = self.features_graph(g, x, Mode::Eval).features;
            let zt = self.target_logits_graph(g, f);
            let zp = self.pretrain_logits_graph(g, f)?;
            Ok(split_rows(g.value(zt)).into_iter().zip(split_rows(g.value(zp))).collect())
        })?;
        let (t, p): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        Ok((Self::rows_to_tensor(t, kt), Self::rows_to_tensor(p, kp)))
    }

    /// Drops `h_p`. Target-path outputs are unchanged.
    pub fn strip_pretrain_head(mut self) -> Self {
        if let Some(head) = self.pretrain_head.take() {
            let first = head.indices().into_iter().min().unwrap_or(self.store.len());
            self.store.truncate(first);
            self.pretrain_classes.clear();
        }
        self
    }

    /// Replaces `h_p` with a freshly initialized head over `classes`.
    pub fn reset_pretrain_head(mut self, classes: Vec<String>, seed: u64) -> Self {
        self = self.strip_pretrain_head();
        if !classes.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = self.feature_dim();
            self.pretrain_head = Some(Dense::new(&mut self.store, &mut rng, "pretrain_head", d, classes.len(), ParamGroup::New, false));
            self.pretrain_classes = classes;
        }
        self
    }

    /// Disjoint, exhaustive partition of the trainable parameters by
    /// learning-rate group.
    pub fn parameter_groups(&self) -> ParameterGroups {
        let mut groups = ParameterGroups {
            backbone: Vec::new(),
            new: Vec::new(),
        };
        for p in self.store.iter() {
            match p.group {
                ParamGroup::Backbone => groups.backbone.push(p.name.clone()),
                ParamGroup::New => groups.new.push(p.name.clone()),
            }
        }
        groups
    }

    /// Running statistics of the backbone normalization layers.
    pub fn normalization_stats(&self) -> Vec<NormStats> {
        self.norms[..self.convs.len()]
            .iter()
            .map(|n| NormStats {
                mean: n.running_mean.clone(),
                var: n.running_var.clone(),
            })
            .collect()
    }

    /// Copies the backbone (convolutions and their norms) from `other`.
    pub fn load_backbone_from(&mut self, other: &ModelBundle) -> Result<()> {
        if self.config.backbone != other.config.backbone || self.config.in_channels != other.config.in_channels {
            return Err(Error::invalid("backbone architectures differ"));
        }
        for (i, (a, b)) in self.convs.iter().zip(&other.convs).enumerate() {
            for (dst, src) in [(a.w, b.w), (a.b, b.b)] {
                self.store.get_mut(dst).value = other.store.get(src).value.clone();
            }
            let (na, nb) = (&self.norms[i], &other.norms[i]);
            for (dst, src) in [(na.gamma, nb.gamma), (na.beta, nb.beta)] {
                self.store.get_mut(dst).value = other.store.get(src).value.clone();
            }
            self.norms[i].running_mean = other.norms[i].running_mean.clone();
            self.norms[i].running_var = other.norms[i].running_var.clone();
        }
        Ok(())
    }

    /// SHA-256 over parameter names, values and normalization statistics.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.store.iter() {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        for n in &self.norms {
            for v in n.running_mean.iter().chain(&n.running_var) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    // ---- checkpoints ----------------------------------------------------

    /// Serializes the bundle: a UTF-8 header of `key=value` lines ending in
    /// `end`, followed by every listed tensor and buffer as little-endian
    /// `f64` in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let _ = writeln!(header, "{CHECKPOINT_MAGIC}");
        for l in self.config.to_lines() {
            let _ = writeln!(header, "{l}");
        }
        let _ = writeln!(header, "config_hash={}", self.config.hash());
        for c in &self.target_classes {
            let _ = writeln!(header, "target_class={c}");
        }
        for c in self.pretrain_classes() {
            let _ = writeln!(header, "pretrain_class={c}");
        }
        for p in self.store.iter() {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(header, "tensor={} {} {}", p.name, p.group.as_str(), dims.join("x"));
        }
        for (i, n) in self.norms.iter().enumerate() {
            let _ = writeln!(header, "buffer=norm{i}.running_mean {}", n.running_mean.len());
            let _ = writeln!(header, "buffer=norm{i}.running_var {}", n.running_var.len());
        }
        let _ = writeln!(header, "end");
        let mut out = header.into_bytes();
        for p in self.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for n in &self.norms {
            for v in n.running_mean.iter().chain(&n.running_var) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut r = BufReader::new(reader);
        let mut line = String::new();
        let mut lineno = 0;
        let mut next_line = |r: &mut BufReader<_>, line: &mut String| -> Result<usize> {
            line.clear();
            lineno += 1;
            let n = r.read_line(line).map_err(|e| Error::io("<checkpoint>", e))?;
            if n == 0 {
                return Err(Error::Parse {
                    line: lineno,
                    message: "unexpected end of header".into(),
                });
            }
            while line.ends_with('\n') || line.ends_with('\r') {
                line.pop();
            }
            Ok(lineno)
        };
        next_line(&mut r, &mut line)?;
        if line != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                line: 1,
                message: "not a checkpoint file".into(),
            });
        }
        let mut config = ModelConfig::default();
        let mut targets = Vec::new();
        let mut pretrains = Vec::new();
        let mut tensors: Vec<(String, ParamGroup, Vec<usize>)> = Vec::new();
        let mut buffers: Vec<usize> = Vec::new();
        let mut stored_hash = None;
        loop {
            let ln = next_line(&mut r, &mut line)?;
            if line == "end" {
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: ln,
                message: format!("expected key=value, got `{line}`"),
            })?;
            match k {
                "config_hash" => stored_hash = Some(v.to_string()),
                "target_class" => targets.push(v.to_string()),
                "pretrain_class" => pretrains.push(v.to_string()),
                "tensor" => {
                    let parts: Vec<&str> = v.split(' ').collect();
                    let bad = || Error::Parse {
                        line: ln,
                        message: format!("malformed tensor entry `{v}`"),
                    };
                    if parts.len() != 3 {
                        return Err(bad());
                    }
                    let group = ParamGroup::parse(parts[1]).ok_or_else(bad)?;
                    let dims = if parts[2].is_empty() {
                        Vec::new()
                    } else {
                        parts[2].split('x').map(|d| d.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|_| bad())?
                    };
                    tensors.push((parts[0].to_string(), group, dims));
                }
                "buffer" => {
                    let len = v
                        .rsplit_once(' ')
                        .and_then(|(_, n)| n.parse::<usize>().ok())
                        .ok_or_else(|| Error::Parse {
                            line: ln,
                            message: format!("malformed buffer entry `{v}`"),
                        })?;
                    buffers.push(len);
                }
                _ => config.set(k, v, ln)?,
            }
        }
        if stored_hash.as_deref() != Some(config.hash().as_str()) {
            return Err(Error::invalid("checkpoint config hash does not match its config"));
        }
        let mut bundle = ModelBundle::new(config, targets, pretrains.clone(), 0)?;
        if pretrains.is_empty() {
            bundle = bundle.strip_pretrain_head();
        }
        if tensors.len() != bundle.store.len() {
            return Err(Error::invalid(format!(
                "checkpoint lists {} tensors, architecture has {}",
                tensors.len(),
                bundle.store.len()
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| Error::io("<checkpoint>", e))?;
        let mut floats = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
        let need: usize = tensors.iter().map(|t| t.2.iter().product::<usize>()).sum::<usize>() + buffers.iter().sum::<usize>();
        if payload.len() != need * 8 {
            return Err(Error::invalid(format!("checkpoint payload has {} bytes, expected {}", payload.len(), need * 8)));
        }
        for (i, (name, group, dims)) in tensors.into_iter().enumerate() {
            let p = bundle.store.get_mut(i);
            if p.name != name || p.value.shape() != dims.as_slice() {
                return Err(Error::invalid(format!("checkpoint tensor `{name}` does not match `{}`", p.name)));
            }
            p.group = group;
            let n = p.value.numel();
            p.value = Tensor::from_vec(&dims, floats.by_ref().take(n).collect())?;
        }
        if buffers.len() != 2 * bundle.norms.len() {
            return Err(Error::invalid("checkpoint normalization buffers do not match architecture"));
        }
        for n in bundle.norms.iter_mut() {
            let c = n.running_mean.len();
            n.running_mean = floats.by_ref().take(c).collect();
            n.running_var = floats.by_ref().take(c).collect();
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f)
    }
}

fn split_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn names(n: usize, p: &str) -> Vec<String> {
        (0..n).map(|i| format!("{p}{i}")).collect()
    }

    fn small() -> ModelBundle {
        let cfg = ModelConfig {
            image_side: 8,
            backbone: BackboneKind::Conv { channels: vec![4, 6] },
            bottleneck_dim: 16,
            ..ModelConfig::default()
        };
        ModelBundle::new(cfg, names(3, "t"), names(5, "p"), 11).unwrap()
    }

    fn images(n: usize, side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, 3, side, side], (0..n * 3 * side * side).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn default_config_shapes() {
        let b = ModelBundle::new(ModelConfig::default(), names(4, "t"), names(8, "p"), 0).unwrap();
        let x = images(5, 32, 1);
        assert_eq!(b.forward_features(&x, Mode::Eval).unwrap().shape(), &[5, 256]);
        assert_eq!(b.classify_target(&x).unwrap().shape(), &[5, 4]);
        assert_eq!(b.classify_pretrain(&x).unwrap().shape(), &[5, 8]);
    }

    #[test]
    fn default_parameter_count_matches_layer_dims() {
        let b = ModelBundle::new(ModelConfig::default(), names(4, "t"), names(8, "p"), 0).unwrap();
        // conv k*k*cin*cout + cout, bn 2*c, per block; 32 -> 4 after three pools.
        let conv = |cin: usize, cout: usize| 9 * cin * cout + cout + 2 * cout;
        let backbone = conv(3, 8) + conv(8, 16) + conv(16, 32);
        let bottleneck = 32 * 4 * 4 * 256 + 256 + 2 * 256;
        let heads = (256 * 4 + 4) + (256 * 8 + 8);
        assert_eq!(b.store().numel(), backbone + bottleneck + heads);
        let groups = b.parameter_groups();
        let backbone_numel: usize = b.store().iter().filter(|p| p.group == ParamGroup::Backbone).map(|p| p.value.numel()).sum();
        assert_eq!(backbone_numel, backbone);
        assert_eq!(groups.backbone.len(), 12);
        assert_eq!(groups.backbone.len() + groups.new.len(), b.store().len());
    }

    #[test]
    fn scratch_backbone_is_single_group() {
        let cfg = ModelConfig {
            backbone_pretrained: false,
            ..ModelConfig::default()
        };
        let b = ModelBundle::new(cfg, names(2, "t"), vec![], 0).unwrap();
        let g = b.parameter_groups();
        assert!(g.backbone.is_empty());
        assert_eq!(g.new.len(), b.store().len());
    }

    #[test]
    fn identity_backbone_features_are_flattened_inputs() {
        let cfg = ModelConfig {
            image_side: 4,
            backbone: BackboneKind::Identity,
            ..ModelConfig::default()
        };
        let b = ModelBundle::new(cfg, names(2, "t"), names(2, "p"), 0).unwrap();
        let x = images(3, 4, 2);
        let f = b.forward_features(&x, Mode::Eval).unwrap();
        assert_eq!(f.data(), x.data());
        assert_eq!(f.shape(), &[3, 48]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let b = small();
        assert!(matches!(b.classify_target(&images(2, 9, 0)), Err(Error::Shape { .. })));
        assert!(b.classify_target(&Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn eval_is_deterministic_and_joint_matches_separate() {
        let b = small();
        let x = images(7, 8, 3);
        assert_eq!(b.forward_features(&x, Mode::Eval).unwrap(), b.forward_features(&x, Mode::Eval).unwrap());
        let (t, p) = b.classify_joint(&x).unwrap();
        assert_eq!(t, b.classify_target(&x).unwrap());
        assert_eq!(p, b.classify_pretrain(&x).unwrap());
        let probs = t.softmax_rows();
        for i in 0..probs.rows() {
            assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn strip_preserves_target_path() {
        let b = small();
        let x = images(6, 8, 4);
        let before = b.classify_target(&x).unwrap();
        let full_len = b.to_bytes().len();
        let s = b.strip_pretrain_head();
        assert_eq!(s.classify_target(&x).unwrap(), before);
        assert!(s.to_bytes().len() < full_len);
        assert!(matches!(s.classify_pretrain(&x), Err(Error::HeadRemoved)));
    }

    #[test]
    fn checkpoint_roundtrip_restores_outputs() {
        let mut b = small();
        // give the norms non-trivial statistics
        let x = images(6, 8, 5);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = b.features_graph(&mut g, xv, Mode::Train);
        b.commit_moments(&out.moments);
        let restored = ModelBundle::from_reader(&b.to_bytes()[..]).unwrap();
        assert_eq!(restored, b);
        let stripped = b.clone().strip_pretrain_head();
        let r2 = ModelBundle::from_reader(&stripped.to_bytes()[..]).unwrap();
        assert_eq!(r2.classify_target(&x).unwrap(), b.classify_target(&x).unwrap());
        assert!(!r2.has_pretrain_head());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let b = small();
        let mut bytes = b.to_bytes();
        bytes.truncate(bytes.len() - 8);
        assert!(ModelBundle::from_reader(&bytes[..]).is_err());
        assert!(ModelBundle::from_reader(&b"garbage\n"[..]).is_err());
    }
}

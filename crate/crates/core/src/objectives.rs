//! Pre-training supervision, the intermediate domain between target and
//! pre-training images, and the composite adaptation objectives.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::autodiff::{BatchMoments, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelBundle};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TridaConfig {
    /// Weight of the intermediate-domain terms.
    pub beta: f64,
    /// `lambda ~ Beta(alpha, alpha)`.
    pub alpha: f64,
    pub use_pretrain: bool,
    pub use_sem: bool,
    pub use_feat: bool,
}

impl Default for TridaConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            alpha: 2.0,
            use_pretrain: true,
            use_sem: true,
            use_feat: true,
        }
    }
}

impl TridaConfig {
    /// Every term switched off: the objectives reduce to the bare baseline.
    pub fn disabled() -> Self {
        Self {
            use_pretrain: false,
            use_sem: false,
            use_feat: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be finite and > 0, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Whether a step builds mixed images at all.
    pub fn uses_mixing(&self) -> bool {
        self.beta != 0.0 && (self.use_sem || self.use_feat)
    }

    /// Whether a step needs pre-training images.
    pub fn is_active(&self) -> bool {
        self.use_pretrain || self.uses_mixing()
    }
}

/// One draw of `lambda ~ Beta(alpha, alpha)`.
pub fn sample_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be finite and > 0, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(beta.sample(rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub x_p: Tensor,
    pub y_p: Vec<usize>,
    pub x_t: Tensor,
    pub y_hat_t: Vec<usize>,
    pub lam: f64,
    /// `lam * x_p + (1 - lam) * x_t`.
    pub x_mixed: Tensor,
}

pub fn mix_images(x_p: &Tensor, x_t: &Tensor, lam: f64) -> Result<Tensor> {
    if x_p.shape() != x_t.shape() {
        return Err(Error::Shape {
            expected: x_t.shape().to_vec(),
            got: x_p.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1], got {lam}")));
    }
    let data = x_p.data().iter().zip(x_t.data()).map(|(p, t)| lam * p + (1.0 - lam) * t).collect();
    Tensor::from_vec(x_t.shape(), data)
}

pub fn mix_batch(x_p: &Tensor, y_p: &[usize], x_t: &Tensor, y_hat_t: &[usize], lam: f64) -> Result<MixedBatch> {
    let x_mixed = mix_images(x_p, x_t, lam)?;
    let n = x_t.shape().first().copied().unwrap_or(0);
    if y_p.len() != n || y_hat_t.len() != n {
        return Err(Error::invalid(format!(
            "label counts ({} pre-training, {} target) must match the batch size {n}",
            y_p.len(),
            y_hat_t.len()
        )));
    }
    Ok(MixedBatch {
        x_p: x_p.clone(),
        y_p: y_p.to_vec(),
        x_t: x_t.clone(),
        y_hat_t: y_hat_t.to_vec(),
        lam,
        x_mixed,
    })
}

/// A graph plus the bundle it evaluates, collecting the batch statistics of
/// every training-mode forward pass so they can be committed after the
/// optimizer step.
pub struct StepGraph<'a> {
    pub bundle: &'a ModelBundle,
    pub graph: Graph,
    pub mode: Mode,
    moments: Vec<(usize, BatchMoments)>,
}

impl<'a> StepGraph<'a> {
    /// Parameters receive gradients.
    pub fn new(bundle: &'a ModelBundle, mode: Mode) -> Self {
        Self {
            bundle,
            graph: Graph::new(),
            mode,
            moments: Vec::new(),
        }
    }

    /// Parameters are constants; only explicit variables get gradients.
    pub fn inference(bundle: &'a ModelBundle, mode: Mode) -> Self {
        Self {
            graph: Graph::inference(),
            ..Self::new(bundle, mode)
        }
    }

    pub fn features(&mut self, images: &Tensor) -> Result<Var> {
        self.bundle.check_input(images)?;
        let x = self.graph.constant(images.clone());
        Ok(self.features_of(x))
    }

    pub fn features_of(&mut self, x: Var) -> Var {
        let out = self.bundle.features_graph(&mut self.graph, x, self.mode);
        self.moments.extend(out.moments);
        out.features
    }

    pub fn target_logits(&mut self, features: Var) -> Var {
        self.bundle.target_logits_graph(&mut self.graph, features)
    }

    pub fn pretrain_logits(&mut self, features: Var) -> Result<Var> {
        self.bundle.pretrain_logits_graph(&mut self.graph, features)
    }

    pub fn value(&self, v: Var) -> f64 {
        self.graph.value(v).item()
    }

    pub fn into_parts(self) -> (Graph, Vec<(usize, BatchMoments)>) {
        (self.graph, self.moments)
    }
}

fn check_labels(labels: &[usize], k: usize, what: &str) -> Result<()> {
    match labels.iter().find(|&&l| l >= k) {
        Some(l) => Err(Error::invalid(format!("{what} label {l} outside {k} classes"))),
        None => Ok(()),
    }
}

/// `CE(h_p(f(x_p)), y_p)` on precomputed features.
pub fn pretrain_loss(sg: &mut StepGraph, f_p: Var, y_p: &[usize]) -> Result<Var> {
    let z = sg.pretrain_logits(f_p)?;
    check_labels(y_p, sg.bundle.pretrain_classes().len(), "pre-training")?;
    if y_p.len() != sg.graph.value(z).rows() {
        return Err(Error::invalid("one pre-training label per image is required"));
    }
    Ok(sg.graph.cross_entropy(z, y_p, 0.0))
}

/// `lam CE(h_p(f(x~)), y_p) + (1 - lam) CE(h(f(x~)), y^_t)`.
pub fn sem_loss(sg: &mut StepGraph, f_mix: Var, y_p: &[usize], y_hat_t: &[usize], lam: f64) -> Result<Var> {
    let lp = pretrain_loss(sg, f_mix, y_p)?;
    check_labels(y_hat_t, sg.bundle.target_classes().len(), "target")?;
    let zt = sg.target_logits(f_mix);
    let lt = sg.graph.cross_entropy(zt, y_hat_t, 0.0);
    let a = sg.graph.scale(lp, lam);
    let b = sg.graph.scale(lt, 1.0 - lam);
    Ok(sg.graph.add(a, b))
}

/// Batch mean of `|lam f(x_p) + (1 - lam) f(x_t) - f(x~)|_1`. Gradients flow
/// through all three feature passes.
pub fn feat_loss(g: &mut Graph, f_p: Var, f_t: Var, f_mix: Var, lam: f64) -> Var {
    let n = g.value(f_mix).rows() as f64;
    let a = g.scale(f_p, lam);
    let b = g.scale(f_t, 1.0 - lam);
    let interp = g.add(a, b);
    let r = g.sub(interp, f_mix);
    let r = g.abs(r);
    let s = g.sum(r);
    g.scale(s, 1.0 / n)
}

/// Mean cross-entropy of `h_p(f(x_p))`.
pub fn loss_pretrain(bundle: &ModelBundle, x_p: &Tensor, y_p: &[usize], mode: Mode) -> Result<f64> {
    let mut sg = StepGraph::inference(bundle, mode);
    let f = sg.features(x_p)?;
    let l = pretrain_loss(&mut sg, f, y_p)?;
    Ok(sg.value(l))
}

pub fn loss_sem(bundle: &ModelBundle, mixed: &MixedBatch, mode: Mode) -> Result<f64> {
    let mut sg = StepGraph::inference(bundle, mode);
    let f = sg.features(&mixed.x_mixed)?;
    let l = sem_loss(&mut sg, f, &mixed.y_p, &mixed.y_hat_t, mixed.lam)?;
    Ok(sg.value(l))
}

pub fn loss_feat(bundle: &ModelBundle, mixed: &MixedBatch, mode: Mode) -> Result<f64> {
    let mut sg = StepGraph::inference(bundle, mode);
    let fp = sg.features(&mixed.x_p)?;
    let ft = sg.features(&mixed.x_t)?;
    let fm = sg.features(&mixed.x_mixed)?;
    let l = feat_loss(&mut sg.graph, fp, ft, fm, mixed.lam);
    Ok(sg.value(l))
}

/// The optional TriDA terms of one step, recorded in the step's graph.
#[derive(Clone, Copy, Debug, Default)]
pub struct TridaTerms {
    pub pretrain: Option<Var>,
    pub sem: Option<Var>,
    pub feat: Option<Var>,
}

/// Inputs for [`trida_terms`]: the pre-training batch and the target batch
/// whose features `f_t` are already in the graph.
pub struct TridaInputs<'b> {
    pub x_p: &'b Tensor,
    pub y_p: &'b [usize],
    pub x_t: &'b Tensor,
    pub f_t: Var,
    pub y_hat_t: &'b [usize],
    pub lam: f64,
}

/// Records the enabled TriDA terms. Nothing is added to the graph for
/// disabled terms, and mixed images are only built when `beta != 0`.
pub fn trida_terms(sg: &mut StepGraph, cfg: &TridaConfig, inp: &TridaInputs) -> Result<TridaTerms> {
    let mut terms = TridaTerms::default();
    let mixing = cfg.uses_mixing();
    let need_fp = cfg.use_pretrain || (mixing && cfg.use_feat);
    let f_p = if need_fp { Some(sg.features(inp.x_p)?) } else { None };
    if cfg.use_pretrain {
        terms.pretrain = Some(pretrain_loss(sg, f_p.expect("computed above"), inp.y_p)?);
    }
    if mixing {
        let x_mixed = mix_images(inp.x_p, inp.x_t, inp.lam)?;
        let f_mix = sg.features(&x_mixed)?;
        if cfg.use_sem {
            terms.sem = Some(sem_loss(sg, f_mix, inp.y_p, inp.y_hat_t, inp.lam)?);
        }
        if cfg.use_feat {
            terms.feat = Some(feat_loss(&mut sg.graph, f_p.expect("computed above"), inp.f_t, f_mix, inp.lam));
        }
    }
    Ok(terms)
}

/// Values of every component of a composite objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// `L_s` in step 1, `L_SFUDA` in step 2, `L_UDA` in vanilla UDA.
    pub baseline: f64,
    /// `L_s` inside the vanilla UDA objective.
    pub source: Option<f64>,
    pub pretrain: Option<f64>,
    pub sem: Option<f64>,
    pub feat: Option<f64>,
    pub total: f64,
}

fn add_terms(g: &mut Graph, base: Var, terms: &TridaTerms, beta: f64, bd: &mut LossBreakdown) -> Var {
    let mut total = base;
    if let Some(lp) = terms.pretrain {
        bd.pretrain = Some(g.value(lp).item());
        total = g.add(total, lp);
    }
    let inner = match (terms.sem, terms.feat) {
        (Some(s), Some(f)) => Some(g.add(s, f)),
        (Some(v), None) | (None, Some(v)) => Some(v),
        (None, None) => None,
    };
    bd.sem = terms.sem.map(|v| g.value(v).item());
    bd.feat = terms.feat.map(|v| g.value(v).item());
    if let Some(inner) = inner.filter(|_| beta != 0.0) {
        let w = g.scale(inner, beta);
        total = g.add(total, w);
    }
    bd.total = g.value(total).item();
    total
}

/// `L_s + L_p`.
pub fn objective_sfuda_step1(g: &mut Graph, l_s: Var, l_p: Option<Var>) -> (Var, LossBreakdown) {
    let mut bd = LossBreakdown {
        baseline: g.value(l_s).item(),
        ..LossBreakdown::default()
    };
    let terms = TridaTerms {
        pretrain: l_p,
        ..TridaTerms::default()
    };
    let total = add_terms(g, l_s, &terms, 0.0, &mut bd);
    (total, bd)
}

/// `L_SFUDA + L_p + beta (L_sem + L_feat)`.
pub fn objective_sfuda_step2(g: &mut Graph, baseline: Var, terms: &TridaTerms, cfg: &TridaConfig) -> (Var, LossBreakdown) {
    let mut bd = LossBreakdown {
        baseline: g.value(baseline).item(),
        ..LossBreakdown::default()
    };
    let total = add_terms(g, baseline, terms, cfg.beta, &mut bd);
    (total, bd)
}

/// `L_UDA + L_s + L_p + beta (L_sem + L_feat)`.
pub fn objective_uda(g: &mut Graph, uda: Var, l_s: Var, terms: &TridaTerms, cfg: &TridaConfig) -> (Var, LossBreakdown) {
    let mut bd = LossBreakdown {
        baseline: g.value(uda).item(),
        source: Some(g.value(l_s).item()),
        ..LossBreakdown::default()
    };
    let base = g.add(uda, l_s);
    let total = add_terms(g, base, terms, cfg.beta, &mut bd);
    (total, bd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneKind, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(k: usize, p: &str) -> Vec<String> {
        (0..k).map(|i| format!("{p}{i}")).collect()
    }

    fn small_bundle() -> ModelBundle {
        let cfg = ModelConfig {
            image_side: 8,
            backbone: BackboneKind::Conv { channels: vec![3, 4] },
            bottleneck_dim: 6,
            ..ModelConfig::default()
        };
        ModelBundle::new(cfg, names(3, "t"), names(4, "p"), 5).unwrap()
    }

    fn images(n: usize, side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, 3, side, side], (0..n * 3 * side * side).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn lambda_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let u: Vec<f64> = (0..n).map(|_| sample_lambda(1.0, &mut rng).unwrap()).collect();
        let mean = u.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
        let b: Vec<f64> = (0..n).map(|_| sample_lambda(2.0, &mut rng).unwrap()).collect();
        let m = b.iter().sum::<f64>() / n as f64;
        let var = b.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0 / 20.0).abs() < 0.005, "{var}");
        assert!(b.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(sample_lambda(0.0, &mut rng).is_err());
        assert!(sample_lambda(-1.0, &mut rng).is_err());
    }

    #[test]
    fn lambda_is_symmetric() {
        // two-sample Kolmogorov-Smirnov statistic of lambda against 1 - lambda
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut a: Vec<f64> = (0..n).map(|_| sample_lambda(2.0, &mut rng).unwrap()).collect();
        let mut b: Vec<f64> = (0..n).map(|_| 1.0 - sample_lambda(2.0, &mut rng).unwrap()).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < n && j < n {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 - j as f64).abs() / n as f64);
        }
        // critical value for p = 0.01 with equal sample sizes
        let crit = 1.628 * (2.0 / n as f64).sqrt();
        assert!(d < crit, "KS {d} >= {crit}");
    }

    #[test]
    fn mixing_endpoints_and_arithmetic() {
        let xp = images(2, 4, 0);
        let xt = images(2, 4, 1);
        let m1 = mix_batch(&xp, &[0, 1], &xt, &[1, 2], 1.0).unwrap();
        assert_eq!(m1.x_mixed, xp);
        let m0 = mix_batch(&xp, &[0, 1], &xt, &[1, 2], 0.0).unwrap();
        assert_eq!(m0.x_mixed, xt);
        let z = Tensor::zeros(&[1, 3, 2, 2]);
        let o = Tensor::full(&[1, 3, 2, 2], 1.0);
        let m = mix_batch(&z, &[0], &o, &[0], 0.25).unwrap();
        assert!(m.x_mixed.data().iter().all(|&v| v == 0.75));
        assert!(mix_batch(&xp, &[0, 1], &images(3, 4, 1), &[0, 1, 2], 0.5).is_err());
        assert!(mix_batch(&xp, &[0, 1], &xt, &[0, 1], 1.5).is_err());
    }

    #[test]
    fn pretrain_loss_matches_hand_ce() {
        let b = small_bundle();
        let x = images(2, 8, 3);
        let z = b.classify_pretrain(&x).unwrap();
        let y = [1usize, 3];
        let hand: f64 = (0..2)
            .map(|i| {
                let r = z.row(i);
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - r[y[i]]
            })
            .sum::<f64>()
            / 2.0;
        let l = loss_pretrain(&b, &x, &y, Mode::Eval).unwrap();
        assert!((l - hand).abs() < 1e-12);
        assert!(loss_pretrain(&b, &x, &[0, 4], Mode::Eval).is_err());
    }

    #[test]
    fn sem_and_feat_endpoint_identities() {
        let b = small_bundle();
        let (xp, xt) = (images(4, 8, 4), images(4, 8, 5));
        let (yp, yt) = ([0, 1, 2, 3], [2, 1, 0, 0]);
        for mode in [Mode::Train, Mode::Eval] {
            let m1 = mix_batch(&xp, &yp, &xt, &yt, 1.0).unwrap();
            assert_eq!(loss_sem(&b, &m1, mode).unwrap(), loss_pretrain(&b, &xp, &yp, mode).unwrap());
            assert_eq!(loss_feat(&b, &m1, mode).unwrap(), 0.0);
            let m0 = mix_batch(&xp, &yp, &xt, &yt, 0.0).unwrap();
            let mut sg = StepGraph::inference(&b, mode);
            let f = sg.features(&xt).unwrap();
            let z = sg.target_logits(f);
            let ce = sg.graph.cross_entropy(z, &yt, 0.0);
            assert_eq!(loss_sem(&b, &m0, mode).unwrap(), sg.value(ce));
            assert_eq!(loss_feat(&b, &m0, mode).unwrap(), 0.0);
        }
    }

    #[test]
    fn feat_loss_vanishes_for_linear_features() {
        let cfg = ModelConfig {
            image_side: 4,
            backbone: BackboneKind::Identity,
            ..ModelConfig::default()
        };
        let b = ModelBundle::new(cfg, names(2, "t"), names(2, "p"), 0).unwrap();
        let m = mix_batch(&images(3, 4, 6), &[0, 1, 0], &images(3, 4, 7), &[1, 1, 0], 0.37).unwrap();
        assert!(loss_feat(&b, &m, Mode::Train).unwrap() < 1e-12);
    }

    #[test]
    fn feat_loss_matches_raw_recomputation() {
        let b = small_bundle();
        let m = mix_batch(&images(3, 8, 8), &[0, 1, 2], &images(3, 8, 9), &[0, 1, 2], 0.5).unwrap();
        let fp = b.forward_features(&m.x_p, Mode::Eval).unwrap();
        let ft = b.forward_features(&m.x_t, Mode::Eval).unwrap();
        let fm = b.forward_features(&m.x_mixed, Mode::Eval).unwrap();
        let mut total = 0.0;
        for i in 0..3 {
            for j in 0..fp.row_len() {
                total += (0.5 * fp.row(i)[j] + 0.5 * ft.row(i)[j] - fm.row(i)[j]).abs();
            }
        }
        let l = loss_feat(&b, &m, Mode::Eval).unwrap();
        assert!((l - total / 3.0).abs() < 1e-12);
        assert!(l > 0.0);
    }

    fn step2_total(b: &ModelBundle, cfg: &TridaConfig, lam: f64) -> (LossBreakdown, f64, Vec<Option<Tensor>>) {
        let (xp, xt) = (images(4, 8, 10), images(4, 8, 11));
        let (yp, yt) = ([3, 1, 2, 0], [0, 2, 1, 1]);
        let mut sg = StepGraph::new(b, Mode::Train);
        let ft = sg.features(&xt).unwrap();
        let zt = sg.target_logits(ft);
        let base = sg.graph.cross_entropy(zt, &yt, 0.0);
        let inp = TridaInputs {
            x_p: &xp,
            y_p: &yp,
            x_t: &xt,
            f_t: ft,
            y_hat_t: &yt,
            lam,
        };
        let terms = trida_terms(&mut sg, cfg, &inp).unwrap();
        let (total, bd) = objective_sfuda_step2(&mut sg.graph, base, &terms, cfg);
        sg.graph.backward(total);
        let grads = b.store().grads(&sg.graph);
        (bd, sg.value(total), grads)
    }

    #[test]
    fn step2_decomposes_and_disables_bitwise() {
        let b = small_bundle();
        let (bd, total, _) = step2_total(&b, &TridaConfig::default(), 0.3);
        let recomposed = bd.baseline + bd.pretrain.unwrap() + 0.1 * (bd.sem.unwrap() + bd.feat.unwrap());
        assert!((recomposed - total).abs() < 1e-7);
        assert!(bd.pretrain.unwrap() >= 0.0 && bd.sem.unwrap() >= 0.0 && bd.feat.unwrap() >= 0.0);

        let (off, off_total, off_grads) = step2_total(&b, &TridaConfig::disabled(), 0.3);
        let beta0 = TridaConfig {
            beta: 0.0,
            use_pretrain: false,
            ..TridaConfig::default()
        };
        let (z, z_total, z_grads) = step2_total(&b, &beta0, 0.3);
        assert_eq!(off_total.to_bits(), off.baseline.to_bits());
        assert_eq!(z_total.to_bits(), off_total.to_bits());
        assert_eq!(z.sem, None);
        assert_eq!(off_grads, z_grads);
    }

    #[test]
    fn uda_and_step1_decompose() {
        let b = small_bundle();
        let (xs, xp) = (images(2, 8, 12), images(2, 8, 13));
        let mut sg = StepGraph::new(&b, Mode::Train);
        let fs = sg.features(&xs).unwrap();
        let zs = sg.target_logits(fs);
        let ls = sg.graph.cross_entropy(zs, &[0, 2], 0.1);
        let fp = sg.features(&xp).unwrap();
        let lp = pretrain_loss(&mut sg, fp, &[1, 3]).unwrap();
        let (t1, bd1) = objective_sfuda_step1(&mut sg.graph, ls, Some(lp));
        assert!((sg.value(t1) - (bd1.baseline + bd1.pretrain.unwrap())).abs() < 1e-7);
        let (t0, _) = objective_sfuda_step1(&mut sg.graph, ls, None);
        assert_eq!(t0, ls);

        let fake_uda = sg.graph.scale(lp, 0.5);
        let terms = TridaTerms {
            pretrain: Some(lp),
            sem: Some(ls),
            feat: None,
        };
        let cfg = TridaConfig::default();
        let (t, bd) = objective_uda(&mut sg.graph, fake_uda, ls, &terms, &cfg);
        let expect = bd.baseline + bd.source.unwrap() + bd.pretrain.unwrap() + 0.1 * bd.sem.unwrap();
        assert!((sg.value(t) - expect).abs() < 1e-7);
    }
}

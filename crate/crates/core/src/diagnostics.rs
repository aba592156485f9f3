//! Domain-discrepancy and cluster-quality measurements tracked during
//! adaptation, and the noisy-label fine-tuning probe.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Mode, ModelBundle};
use crate::seed::stream;
use crate::tensor::Tensor;
use crate::training::{train_source, TrainLog, TrainSettings, Tracker};
use crate::objectives::TridaConfig;
use crate::baselines::{AdaptationObjective, ObjectiveKind};

pub const DEFAULT_PROJECTIONS: usize = 128;
pub const DEFAULT_EVAL_CAP: usize = 512;

/// Exact Wasserstein-1 distance between two empirical distributions on the
/// line, as the integral of the absolute difference of their quantile
/// functions.
pub fn wasserstein_1d_exact(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("wasserstein distance needs non-empty samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as u128, b.len() as u128);
    if n == m {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(s / n as f64);
    }
    // Quantile levels are multiples of 1/(n m): a's steps at i m, b's at j n.
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0u128;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i as u128 + 1) * m;
        let next_b = (j as u128 + 1) * n;
        let next = next_a.min(next_b);
        total += (next - prev) as f64 * (a[i] - b[j]).abs();
        prev = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    Ok(total / (n * m) as f64)
}

/// W1 between projected samples via the CDF form `∫ |F_a − F_b| dx`.
fn wasserstein_1d_cdf(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut total = 0.0;
    let mut x = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / n - j as f64 / m).abs() * (next - x);
        x = next;
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
    }
    total
}

/// Random unit directions shared by every call with the same seed.
pub fn projection_directions(dim: usize, n_projections: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, "diagnostics/projections");
    (0..n_projections)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn check_feature_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::invalid("features must be [n, d] matrices"));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::invalid("feature sets must be non-empty"));
    }
    if a.row_len() != b.row_len() {
        return Err(Error::Shape {
            expected: vec![b.rows(), a.row_len()],
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn project(x: &Tensor, dir: &[f64]) -> Vec<f64> {
    (0..x.rows()).map(|i| x.row(i).iter().zip(dir).map(|(a, b)| a * b).sum()).collect()
}

/// Sliced Wasserstein-1: mean over random unit directions of the exact 1D
/// distance between projected samples.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_projections: usize, seed: u64) -> Result<f64> {
    check_feature_pair(a, b)?;
    if n_projections == 0 {
        return Err(Error::invalid("need at least one projection"));
    }
    let dirs = projection_directions(a.row_len(), n_projections, seed);
    let total: f64 = dirs
        .iter()
        .map(|d| wasserstein_1d_cdf(&mut project(a, d), &mut project(b, d)))
        .sum();
    Ok(total / n_projections as f64)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette with Euclidean distances. Samples in singleton clusters
/// score 0, as does `0/0`.
pub fn silhouette_score(features: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::Shape {
            expected: vec![n],
            got: vec![labels.len()],
        });
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::invalid("silhouette needs at least two distinct labels"));
    }
    let slot: Vec<usize> = labels.iter().map(|l| clusters.binary_search(l).unwrap()).collect();
    let mut sizes = vec![0usize; clusters.len()];
    for &s in &slot {
        sizes[s] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; clusters.len()];
    for i in 0..n {
        if sizes[slot[i]] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[slot[j]] += euclidean(features.row(i), features.row(j));
            }
        }
        let a = sums[slot[i]] / (sizes[slot[i]] - 1) as f64;
        let b = (0..clusters.len())
            .filter(|&c| c != slot[i])
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosticsConfig {
    pub n_projections: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            n_projections: DEFAULT_PROJECTIONS,
            n_eval: DEFAULT_EVAL_CAP,
            seed: 0,
        }
    }
}

/// A fixed, labeled evaluation subset of one domain.
#[derive(Clone, Debug)]
pub struct EvalSubset {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl EvalSubset {
    fn draw(dataset: &LabeledDataset, cap: usize, seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::invalid(format!("{} evaluation set is empty", dataset.role())));
        }
        let mut idx: Vec<usize> = (0..dataset.len()).collect();
        if dataset.len() > cap {
            let mut rng = stream(seed, &format!("diagnostics/eval/{}", dataset.role()));
            idx.shuffle(&mut rng);
            idx.truncate(cap);
            idx.sort_unstable();
        }
        let labels = dataset
            .labels(&idx)
            .map_err(|_| Error::invalid(format!("{} evaluation set needs labels", dataset.role())))?;
        Ok(Self {
            images: dataset.images(&idx),
            indices: idx,
            labels,
        })
    }
}

/// Evaluation subsets of the three domains, drawn once per run.
#[derive(Clone, Debug)]
pub struct EvalSets {
    pub source: EvalSubset,
    pub target: EvalSubset,
    pub pretrain: EvalSubset,
}

impl EvalSets {
    pub fn new(source: &LabeledDataset, target: &LabeledDataset, pretrain: &LabeledDataset, cfg: &DiagnosticsConfig) -> Result<Self> {
        if cfg.n_eval == 0 {
            return Err(Error::invalid("evaluation cap must be positive"));
        }
        Ok(Self {
            source: EvalSubset::draw(source, cfg.n_eval, cfg.seed)?,
            target: EvalSubset::draw(target, cfg.n_eval, cfg.seed)?,
            pretrain: EvalSubset::draw(pretrain, cfg.n_eval, cfg.seed)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRecord {
    pub epoch: usize,
    pub w_st: f64,
    pub w_sp: f64,
    pub w_tp: f64,
    pub silhouette_pretrain: f64,
    pub acc_source: f64,
    pub acc_target: f64,
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = logits.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Measures the bundle on the evaluation subsets. Pure: eval-mode forward
/// passes only.
pub fn track_epoch(bundle: &ModelBundle, sets: &EvalSets, cfg: &DiagnosticsConfig, epoch: usize) -> Result<DiagnosticsRecord> {
    let fs = bundle.forward_features(&sets.source.images, Mode::Eval)?;
    let ft = bundle.forward_features(&sets.target.images, Mode::Eval)?;
    let fp = bundle.forward_features(&sets.pretrain.images, Mode::Eval)?;
    let w = |a: &Tensor, b: &Tensor| sliced_wasserstein(a, b, cfg.n_projections, cfg.seed);
    let k = bundle.target_classes().len();
    let target_acc = |s: &EvalSubset, f: &Tensor| -> Result<f64> {
        if s.labels.iter().any(|&y| y >= k) {
            return Err(Error::invalid("evaluation labels exceed the target head"));
        }
        Ok(accuracy(&head_logits(bundle, f)?, &s.labels))
    };
    Ok(DiagnosticsRecord {
        epoch,
        w_st: w(&fs, &ft)?,
        w_sp: w(&fs, &fp)?,
        w_tp: w(&ft, &fp)?,
        silhouette_pretrain: silhouette_score(&fp, &sets.pretrain.labels)?,
        acc_source: target_acc(&sets.source, &fs)?,
        acc_target: target_acc(&sets.target, &ft)?,
    })
}

fn head_logits(bundle: &ModelBundle, features: &Tensor) -> Result<Tensor> {
    let mut g = crate::autodiff::Graph::inference();
    let f = g.constant(features.clone());
    let z = bundle.target_logits_graph(&mut g, f);
    Ok(g.value(z).clone())
}

pub const CSV_HEADER: [&str; 7] = ["epoch", "w_st", "w_sp", "w_tp", "silhouette_pretrain", "acc_source", "acc_target"];

pub fn diagnostics_csv(records: &[DiagnosticsRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.w_st.to_string(),
            r.w_sp.to_string(),
            r.w_tp.to_string(),
            r.silhouette_pretrain.to_string(),
            r.acc_source.to_string(),
            r.acc_target.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parses the output of [`diagnostics_csv`].
pub fn parse_diagnostics_csv(text: &str) -> Result<Vec<DiagnosticsRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    if r.headers()?.iter().ne(CSV_HEADER) {
        return Err(Error::invalid(format!("diagnostics CSV header must be {}", CSV_HEADER.join(","))));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let bad = |m: String| Error::Parse { line: i + 2, message: m };
            let num = |k: usize| rec.get(k).unwrap_or("").parse::<f64>().map_err(|e| bad(format!("column {}: {e}", CSV_HEADER[k])));
            Ok(DiagnosticsRecord {
                epoch: rec.get(0).unwrap_or("").parse().map_err(|e| bad(format!("epoch: {e}")))?,
                w_st: num(1)?,
                w_sp: num(2)?,
                w_tp: num(3)?,
                silhouette_pretrain: num(4)?,
                acc_source: num(5)?,
                acc_target: num(6)?,
            })
        })
        .collect()
}

/// Writes `diag_<run_id>.csv` into `dir` and returns its path.
pub fn write_diagnostics_csv(records: &[DiagnosticsRecord], dir: &Path, run_id: &str) -> Result<std::path::PathBuf> {
    let path = dir.join(format!("diag_{run_id}.csv"));
    fs::write(&path, diagnostics_csv(records)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Two-dimensional PCA projection of a small feature sample, as
/// `x,y,domain,label` rows. For manual inspection.
pub fn embedding_2d_csv(bundle: &ModelBundle, sets: &EvalSets, per_domain: usize) -> Result<String> {
    let mut rows: Vec<(Vec<f64>, &str, usize)> = Vec::new();
    for (name, s) in [("source", &sets.source), ("target", &sets.target), ("pretrain", &sets.pretrain)] {
        let n = s.labels.len().min(per_domain);
        let idx: Vec<usize> = (0..n).collect();
        let f = bundle.forward_features(&s.images.select_rows(&idx), Mode::Eval)?;
        for i in 0..n {
            rows.push((f.row(i).to_vec(), name, s.labels[i]));
        }
    }
    let d = rows.first().map_or(0, |r| r.0.len());
    let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r.0[k]).sum::<f64>() / rows.len() as f64).collect();
    for r in &mut rows {
        r.0.iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
    }
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for a in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|k| if k % 2 == a { 1.0 } else { 0.5 }).collect();
        for _ in 0..100 {
            let mut next = vec![0.0; d];
            for r in &rows {
                let p: f64 = r.0.iter().zip(&v).map(|(x, y)| x * y).sum();
                next.iter_mut().zip(&r.0).for_each(|(n, x)| *n += p * x);
            }
            for prev in &axes {
                let p: f64 = next.iter().zip(prev).map(|(x, y)| x * y).sum();
                next.iter_mut().zip(prev).for_each(|(n, y)| *n -= p * y);
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                break;
            }
            v = next.into_iter().map(|x| x / norm).collect();
        }
        axes.push(v);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "y", "domain", "label"])?;
    for r in &rows {
        let c: Vec<f64> = axes.iter().map(|ax| r.0.iter().zip(ax).map(|(x, y)| x * y).sum()).collect();
        w.write_record([c[0].to_string(), c[1].to_string(), r.1.to_string(), r.2.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Replaces `round(fraction · n)` labels, chosen uniformly without
/// replacement, by a uniformly drawn different class. Returns the new
/// labels and the sorted corrupted indices.
pub fn corrupt_labels(labels: &[usize], n_classes: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("noise fraction must lie in [0, 1], got {fraction}")));
    }
    if labels.iter().any(|&y| y >= n_classes) {
        return Err(Error::invalid("label outside the class set"));
    }
    let count = (fraction * labels.len() as f64).round() as usize;
    if count > 0 && n_classes < 2 {
        return Err(Error::invalid("label corruption needs at least two classes"));
    }
    let mut rng = stream(seed, "diagnostics/noise");
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng);
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();
    let mut out = labels.to_vec();
    for &i in &chosen {
        let r = rng.random_range(0..n_classes - 1);
        out[i] = if r >= labels[i] { r + 1 } else { r };
    }
    Ok((out, chosen))
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub noise_fraction: f64,
    /// Also optimize `L_p` on the pre-training data while fine-tuning.
    pub with_pretrain_loss: bool,
    pub train: TrainSettings,
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub records: Vec<DiagnosticsRecord>,
    pub corrupted: Vec<usize>,
    pub log: TrainLog,
}

/// Fine-tunes on `dataset` with a fraction of its labels corrupted and
/// records diagnostics before training and after each epoch.
pub fn noisy_label_probe(
    bundle: &mut ModelBundle,
    dataset: &LabeledDataset,
    pretrain: &LabeledDataset,
    sets: &EvalSets,
    diag: &DiagnosticsConfig,
    probe: &ProbeConfig,
) -> Result<ProbeOutcome> {
    let labels = dataset.all_labels()?;
    let (noisy, corrupted) = corrupt_labels(&labels, dataset.class_set().len(), probe.noise_fraction, probe.train.seed)?;
    let noisy_set = dataset.with_labels(&noisy)?;
    let trida = TridaConfig {
        use_pretrain: probe.with_pretrain_loss,
        ..TridaConfig::disabled()
    };
    let tracker = Tracker { sets, cfg: diag };
    let log = train_source(
        bundle,
        &noisy_set,
        probe.with_pretrain_loss.then_some(pretrain),
        &trida,
        &AdaptationObjective::new(ObjectiveKind::SourceOnly),
        &probe.train,
        Some(&tracker),
    )?;
    Ok(ProbeOutcome {
        records: log.diagnostics.clone(),
        corrupted,
        log,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len(), 1], v.to_vec()).unwrap()
    }


    #[test]
    fn diagnostics_csv_roundtrip() {
        let recs = vec![
            DiagnosticsRecord { epoch: 0, w_st: 0.5, w_sp: 1.25, w_tp: 0.1, silhouette_pretrain: -0.2, acc_source: 0.9, acc_target: 0.4 },
            DiagnosticsRecord { epoch: 1, w_st: 0.3, w_sp: 1.0, w_tp: 0.05, silhouette_pretrain: 0.1, acc_source: 1.0, acc_target: 0.5 },
        ];
        let text = diagnostics_csv(&recs).unwrap();
        assert_eq!(parse_diagnostics_csv(&text).unwrap(), recs);
        assert!(parse_diagnostics_csv("a,b\n1,2\n").is_err());
        let broken = text.replace("1.25", "x");
        assert!(matches!(parse_diagnostics_csv(&broken), Err(Error::Parse { line: 2, .. })));
    }
    #[test]
    fn exact_1d_examples() {
        assert_eq!(wasserstein_1d_exact(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(wasserstein_1d_exact(&[0.0], &[3.0]).unwrap(), 3.0);
        assert_eq!(wasserstein_1d_exact(&[2.0, 0.0], &[1.0, 3.0]).unwrap(), 1.0);
        // {0} vs {0, 2}: half the mass moves by 2
        assert_abs_diff_eq!(wasserstein_1d_exact(&[0.0], &[0.0, 2.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert!(wasserstein_1d_exact(&[], &[1.0]).is_err());
    }

    #[test]
    fn point_masses() {
        for k in [1, 3, 17] {
            let d = sliced_wasserstein(&col(&[-1.5]), &col(&[2.0]), k, 9).unwrap();
            assert_abs_diff_eq!(d, 3.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = Tensor::zeros(&[3, 2]);
        let b = Tensor::zeros(&[3, 4]);
        assert!(sliced_wasserstein(&a, &b, 4, 0).unwrap_err().is_validation());
    }

    #[test]
    fn silhouette_two_pairs_closed_form() {
        let (eps, big) = (0.1, 10.0);
        let f = Tensor::from_vec(&[4, 1], vec![0.0, eps, big, big + eps]).unwrap();
        let s = silhouette_score(&f, &[0, 0, 1, 1]).unwrap();
        // point 0: a = eps, b = (big + big + eps) / 2
        let b0 = (2.0 * big + eps) / 2.0;
        let b1 = (2.0 * big - eps) / 2.0;
        let expect = ((b0 - eps) / b0 + (b1 - eps) / b1) / 2.0;
        assert_abs_diff_eq!(s, expect, epsilon = 1e-12);
        let far = Tensor::from_vec(&[4, 1], vec![0.0, eps, 1e6, 1e6 + eps]).unwrap();
        assert!(silhouette_score(&far, &[0, 0, 1, 1]).unwrap() > 0.9999);
    }

    #[test]
    fn silhouette_degenerate_cases() {
        let same = Tensor::full(&[4, 3], 0.7);
        assert_eq!(silhouette_score(&same, &[0, 1, 0, 1]).unwrap(), 0.0);
        assert!(silhouette_score(&same, &[2, 2, 2, 2]).unwrap_err().is_validation());
        // singletons contribute 0 but count in the mean
        let f = Tensor::from_vec(&[3, 1], vec![0.0, 0.0, 5.0]).unwrap();
        assert_abs_diff_eq!(silhouette_score(&f, &[0, 0, 1]).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
    }

    /// Direct transcription of the definition, one sample at a time.
    fn brute_silhouette(x: &[Vec<f64>], y: &[usize]) -> f64 {
        let dist = |i: usize, j: usize| -> f64 { x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() };
        let mut s = Vec::new();
        for i in 0..x.len() {
            let own: Vec<usize> = (0..x.len()).filter(|&j| j != i && y[j] == y[i]).collect();
            if own.is_empty() {
                s.push(0.0);
                continue;
            }
            let a = own.iter().map(|&j| dist(i, j)).sum::<f64>() / own.len() as f64;
            let mut b = f64::MAX;
            let mut others: Vec<usize> = y.iter().copied().filter(|&c| c != y[i]).collect();
            others.dedup();
            for c in others {
                let m: Vec<usize> = (0..x.len()).filter(|&j| y[j] == c).collect();
                b = b.min(m.iter().map(|&j| dist(i, j)).sum::<f64>() / m.len() as f64);
            }
            let m = a.max(b);
            s.push(if m == 0.0 { 0.0 } else { (b - a) / m });
        }
        s.iter().sum::<f64>() / s.len() as f64
    }

    #[test]
    fn silhouette_six_point_fixture() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.5, 0.2],
            vec![0.1, 0.9],
            vec![3.0, 3.0],
            vec![2.5, 3.2],
            vec![-1.0, 2.0],
        ];
        let y = [0, 0, 0, 1, 1, 2];
        let f = Tensor::from_vec(&[6, 2], pts.concat()).unwrap();
        assert_abs_diff_eq!(silhouette_score(&f, &y).unwrap(), brute_silhouette(&pts, &y), epsilon = 1e-12);
    }

    #[test]
    fn corruption_is_reproducible_and_changes_labels() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let (a, ia) = corrupt_labels(&labels, 4, 0.5, 3).unwrap();
        let (b, ib) = corrupt_labels(&labels, 4, 0.5, 3).unwrap();
        assert_eq!((a.clone(), ia.clone()), (b, ib));
        assert_eq!(ia.len(), 50);
        for i in 0..100 {
            assert_eq!(a[i] != labels[i], ia.binary_search(&i).is_ok());
        }
        let (c, ic) = corrupt_labels(&labels, 4, 0.0, 3).unwrap();
        assert_eq!(c, labels);
        assert!(ic.is_empty());
        assert!(corrupt_labels(&labels, 4, 1.5, 3).is_err());
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::from_vec(&[n, d], (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn sliced_is_symmetric_and_nonnegative(seed in 0u64..1000, n in 1usize..30, m in 1usize..30, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, n, d);
            let b = random_matrix(&mut rng, m, d);
            let ab = sliced_wasserstein(&a, &b, 16, seed).unwrap();
            let ba = sliced_wasserstein(&b, &a, 16, seed).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn sliced_is_zero_on_identical_multisets(seed in 0u64..1000, n in 1usize..30, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, n, d);
            let rev: Vec<usize> = (0..n).rev().collect();
            prop_assert_eq!(sliced_wasserstein(&a, &a.select_rows(&rev), 8, seed).unwrap(), 0.0);
        }

        #[test]
        fn silhouette_is_bounded(seed in 0u64..1000, n in 2usize..40, k in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_matrix(&mut rng, n, 3);
            let mut y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            y[0] = 0;
            y[1] = 1;
            let s = silhouette_score(&f, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}

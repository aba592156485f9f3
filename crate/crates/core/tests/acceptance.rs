//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `EXPECTED_FAILURES` are reported as failing; the test
//! asserts that every other criterion passes and that the listed ones still
//! fail, so a change in either direction is noticed.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use trida_core::baselines::{adversarial_loss, information_maximization, source_loss, AdaptationObjective, Discriminator, ObjectiveKind};
use trida_core::data::{generate_toy_benchmark, ToyBenchmark, ToyBenchmarkSpec};
use trida_core::diagnostics::{silhouette_score, sliced_wasserstein, wasserstein_1d_exact};
use trida_core::harness::{mean_std, prepare, run_prepared, Recipe, RunConfig, RunReport, Workspace, SOURCE_CHECKPOINT};
use trida_core::objectives::{
    feat_loss, loss_feat, loss_pretrain, loss_sem, mix_batch, objective_sfuda_step1, objective_sfuda_step2, objective_uda, pretrain_loss,
    sem_loss, trida_terms, StepGraph, TridaConfig, TridaInputs,
};
use trida_core::synthesis::synthesize_dataset;
use trida_core::taxonomy::{load_taxonomy, select_pretrain_classes, Taxonomy};
use trida_core::training::{pretrain_bundle, train_sfuda_step2, train_source, train_uda, TrainSettings};
use trida_core::{BackboneKind, Mode, ModelBundle, ModelConfig, Tensor};

macro_rules! report {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stderr(), $($t)*);
    }};
}

/// Criterion numbers that fail on this implementation.
const EXPECTED_FAILURES: &[usize] = &[4, 5, 6, 7, 9];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn names(k: usize, p: &str) -> Vec<String> {
    (0..k).map(|i| format!("{p}{i}")).collect()
}

fn rand_images(n: usize, side: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(&[n, 3, side, side], (0..n * 3 * side * side).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

// ---------------------------------------------------------------- criterion 1

fn silhouette_brute(x: &[Vec<f64>], labels: &[usize]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
    let n = x.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for j in 0..n {
            if j != i {
                groups.entry(labels[j]).or_default().push(dist(&x[i], &x[j]));
            }
        }
        let Some(own) = groups.remove(&labels[i]) else { continue };
        let a = own.iter().sum::<f64>() / own.len() as f64;
        let b = groups.values().map(|d| d.iter().sum::<f64>() / d.len() as f64).fold(f64::INFINITY, f64::min);
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

fn all_pairs_distances(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    (0..n)
        .map(|s| {
            let mut d = vec![usize::MAX; n];
            d[s] = 0;
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for &v in &adj[u] {
                    if d[v] == usize::MAX {
                        d[v] = d[u] + 1;
                        q.push_back(v);
                    }
                }
            }
            d
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_w = 0.0f64;
    for f in 0..100 {
        let (n, m) = (rng.random_range(1..40), rng.random_range(1..40));
        let a: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal) + 1.0).collect();
        let exact = wasserstein_1d_exact(&a, &b).unwrap();
        let ta = Tensor::from_vec(&[n, 1], a).unwrap();
        let tb = Tensor::from_vec(&[m, 1], b).unwrap();
        let sliced = sliced_wasserstein(&ta, &tb, 128, f).unwrap();
        worst_w = worst_w.max((sliced - exact).abs());
    }
    let mut worst_s = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=50);
        let d = rng.random_range(1..=5);
        let k = rng.random_range(2..=5).min(n);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let t = Tensor::from_vec(&[n, d], x.concat()).unwrap();
        worst_s = worst_s.max((silhouette_score(&t, &labels).unwrap() - silhouette_brute(&x, &labels)).abs());
    }
    let mut selection_mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(5..=200);
        let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
        for _ in 0..n / 10 {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if a != b {
                edges.push((a, b));
            }
        }
        let node = |i: usize| format!("n{i:03}");
        let named: Vec<(String, String)> = edges.iter().map(|&(a, b)| (node(a), node(b))).collect();
        let tax = Taxonomy::from_edges(&named).unwrap();
        let dist = all_pairs_distances(n, &edges);
        let pool: Vec<usize> = (0..n).collect();
        let pick = |rng: &mut ChaCha8Rng, k: usize| -> Vec<usize> {
            let mut p = pool.clone();
            for i in 0..k {
                let j = rng.random_range(i..n);
                p.swap(i, j);
            }
            p.truncate(k);
            p
        };
        let k = rng.random_range(1..=n.min(40));
        let pre = pick(&mut rng, k);
        let k = rng.random_range(1..=n.min(10));
        let tgt = pick(&mut rng, k);
        let tau = [0.1, 0.2, 0.25, 1.0 / 3.0, 0.4, 0.5][rng.random_range(0..6)];
        let sel = select_pretrain_classes(&tax, &pre.iter().map(|&i| node(i)).collect::<Vec<_>>(), &tgt.iter().map(|&i| node(i)).collect::<Vec<_>>(), tau).unwrap();
        let mut expected: Vec<(f64, String)> = pre
            .iter()
            .map(|&p| (tgt.iter().map(|&t| 1.0 / (1.0 + dist[p][t] as f64)).fold(0.0, f64::max), node(p)))
            .filter(|(s, _)| *s > tau)
            .collect();
        expected.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let expected: Vec<String> = expected.into_iter().map(|e| e.1).collect();
        if expected != sel.selected {
            selection_mismatches += 1;
        }
    }
    outcome(
        worst_w <= 1e-9 && worst_s <= 1e-9 && selection_mismatches == 0,
        format!("max |sliced-exact| {worst_w:.2e}, max |silhouette-brute| {worst_s:.2e}, selection mismatches {selection_mismatches}/100"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn small_bundle(seed: u64) -> ModelBundle {
    let cfg = ModelConfig {
        image_side: 8,
        backbone: BackboneKind::Conv { channels: vec![3, 4] },
        bottleneck_dim: 6,
        ..ModelConfig::default()
    };
    ModelBundle::new(cfg, names(3, "t"), names(4, "p"), seed).unwrap()
}

fn tiny_toy() -> ToyBenchmark {
    generate_toy_benchmark(&ToyBenchmarkSpec {
        n_classes_task: 3,
        n_classes_pretrain: 4,
        image_side: 8,
        samples_per_class_per_domain: 6,
        ..ToyBenchmarkSpec::default()
    })
    .unwrap()
}

fn toy_bundle(data: &ToyBenchmark) -> ModelBundle {
    let cfg = ModelConfig {
        image_side: 8,
        backbone: BackboneKind::Conv { channels: vec![4] },
        bottleneck_dim: 8,
        ..ModelConfig::default()
    };
    ModelBundle::new(cfg, data.source.class_set().to_vec(), data.pretrain.class_set().to_vec(), 3).unwrap()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut problems = Vec::new();
    let mut worst_sum = 0.0f64;
    for f in 0..20 {
        let b = small_bundle(f);
        let (xp, xt) = (rand_images(4, 8, &mut rng), rand_images(4, 8, &mut rng));
        let yp: Vec<usize> = (0..4).map(|_| rng.random_range(0..4)).collect();
        let yt: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        for mode in [Mode::Train, Mode::Eval] {
            let m1 = mix_batch(&xp, &yp, &xt, &yt, 1.0).unwrap();
            let m0 = mix_batch(&xp, &yp, &xt, &yt, 0.0).unwrap();
            if loss_sem(&b, &m1, mode).unwrap() != loss_pretrain(&b, &xp, &yp, mode).unwrap() {
                problems.push("L_sem(lambda=1) != L_p");
            }
            let mut sg = StepGraph::inference(&b, mode);
            let ft = sg.features(&xt).unwrap();
            let zt = sg.target_logits(ft);
            let ce = sg.graph.cross_entropy(zt, &yt, 0.0);
            if loss_sem(&b, &m0, mode).unwrap() != sg.value(ce) {
                problems.push("L_sem(lambda=0) != CE on target");
            }
            if loss_feat(&b, &m1, mode).unwrap() != 0.0 || loss_feat(&b, &m0, mode).unwrap() != 0.0 {
                problems.push("L_feat endpoint nonzero");
            }
        }
        let lam = rng.random_range(0.0..1.0);
        let cfg = TridaConfig {
            use_pretrain: rng.random_bool(0.5),
            use_sem: rng.random_bool(0.5),
            use_feat: rng.random_bool(0.5),
            beta: rng.random_range(0.0..1.0),
            ..TridaConfig::default()
        };
        let mut sg = StepGraph::new(&b, Mode::Train);
        let fs = sg.features(&xt).unwrap();
        let ls = source_loss(&mut sg, fs, &yt, 0.1).unwrap();
        let fp = sg.features(&xp).unwrap();
        let lp = pretrain_loss(&mut sg, fp, &yp).unwrap();
        let (t1, bd1) = objective_sfuda_step1(&mut sg.graph, ls, Some(lp));
        worst_sum = worst_sum.max((sg.value(t1) - (bd1.baseline + bd1.pretrain.unwrap())).abs());
        let inp = TridaInputs {
            x_p: &xp,
            y_p: &yp,
            x_t: &xt,
            f_t: fs,
            y_hat_t: &yt,
            lam,
        };
        let terms = trida_terms(&mut sg, &cfg, &inp).unwrap();
        let w = |v: Option<f64>| v.unwrap_or(0.0);
        let (t2, bd2) = objective_sfuda_step2(&mut sg.graph, ls, &terms, &cfg);
        let r2 = bd2.baseline + w(bd2.pretrain) + cfg.beta * (w(bd2.sem) + w(bd2.feat));
        worst_sum = worst_sum.max((sg.value(t2) - r2).abs());
        let z = sg.target_logits(fs);
        let im = information_maximization(&mut sg.graph, z);
        let (t3, bd3) = objective_uda(&mut sg.graph, im, ls, &terms, &cfg);
        let r3 = bd3.baseline + bd3.source.unwrap() + w(bd3.pretrain) + cfg.beta * (w(bd3.sem) + w(bd3.feat));
        worst_sum = worst_sum.max((sg.value(t3) - r3).abs());
        let disc = Discriminator::new(6, 8, f);
        let adv = adversarial_loss(&mut sg.graph, &disc, fs, fp, 1.0);
        let nonneg = [Some(bd1.baseline), bd2.pretrain, bd2.sem, bd2.feat, Some(sg.value(adv))];
        if nonneg.iter().flatten().any(|v| *v < 0.0) {
            problems.push("negative loss value");
        }
    }

    let data = tiny_toy();
    let hash_of = |f: &dyn Fn(&mut ModelBundle) -> trida_core::Result<()>| {
        let mut b = toy_bundle(&data);
        f(&mut b).unwrap();
        b.param_hash()
    };
    let settings = TrainSettings::new(2, 6, 5);
    let beta0 = TridaConfig {
        beta: 0.0,
        use_pretrain: false,
        ..TridaConfig::default()
    };
    let off = TridaConfig::disabled();
    let shot = AdaptationObjective::new(ObjectiveKind::SfudaShotLike);
    let src = AdaptationObjective::new(ObjectiveKind::SourceOnly);
    let uda = AdaptationObjective::new(ObjectiveKind::UdaAdversarial);
    let pairs: [(&str, [String; 3]); 3] = [
        ("step1", [false, true, true].map(|with| {
            let cfg = if with { beta0 } else { off };
            hash_of(&|b| train_source(b, &data.source, with.then_some(&data.pretrain), &cfg, &src, &settings, None).map(|_| ()))
        })),
        ("step2", [false, true, true].map(|with| {
            let cfg = if with { beta0 } else { off };
            hash_of(&|b| train_sfuda_step2(b, &data.target, with.then_some(&data.pretrain), &cfg, &shot, &settings, None).map(|_| ()))
        })),
        ("uda", [false, true, true].map(|with| {
            let cfg = if with { beta0 } else { off };
            hash_of(&|b| {
                let mut d = Discriminator::new(b.feature_dim(), 16, 9);
                train_uda(b, &mut d, &data.source, &data.target, with.then_some(&data.pretrain), &cfg, &uda, &settings, None).map(|_| ())
            })
        })),
    ];
    for (name, h) in &pairs {
        if h[0] != h[1] || h[1] != h[2] {
            problems.push(match *name {
                "step1" => "step1 beta=0 not bitwise baseline",
                "step2" => "step2 beta=0 not bitwise baseline",
                _ => "uda beta=0 not bitwise baseline",
            });
        }
    }
    problems.dedup();
    outcome(
        problems.is_empty() && worst_sum <= 1e-7,
        format!("max decomposition error {worst_sum:.2e}; endpoint, non-negativity and bitwise checks: {}", if problems.is_empty() { "ok".to_string() } else { problems.join("; ") }),
    )
}

// ---------------------------------------------------------------- criterion 3

fn probe_bundle() -> ModelBundle {
    let cfg = ModelConfig {
        image_side: 4,
        backbone: BackboneKind::Conv { channels: vec![2] },
        bottleneck_dim: 12,
        ..ModelConfig::default()
    };
    ModelBundle::new(cfg, names(3, "t"), names(4, "p"), 17).unwrap()
}

type Build<'a> = dyn Fn(&mut StepGraph, &Discriminator) -> trida_core::Var + 'a;

fn perturbed(b: &ModelBundle, d: &Discriminator, dir_b: &[Tensor], dir_d: &[Tensor], eps: f64) -> (ModelBundle, Discriminator) {
    let (mut b, mut d) = (b.clone(), d.clone());
    for (i, t) in dir_b.iter().enumerate() {
        b.store_mut().get_mut(i).value.add_scaled(t, eps);
    }
    for (i, t) in dir_d.iter().enumerate() {
        d.store_mut().get_mut(i).value.add_scaled(t, eps);
    }
    (b, d)
}

/// Worst relative error of directional derivatives over random directions.
fn grad_check(b: &ModelBundle, d: &Discriminator, build: &Build, mode: Mode, rng: &mut ChaCha8Rng) -> f64 {
    let mut sg = StepGraph::new(b, mode);
    let loss = build(&mut sg, d);
    let (mut g, _) = sg.into_parts();
    g.backward(loss);
    let gb = b.store().grads(&g);
    let gd = d.store().grads(&g);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let dir_b: Vec<Tensor> = b.store().iter().map(|p| normal_tensor(p.value.shape(), rng)).collect();
        let dir_d: Vec<Tensor> = d.store().iter().map(|p| normal_tensor(p.value.shape(), rng)).collect();
        let dot = |grads: &[Option<Tensor>], dirs: &[Tensor]| -> f64 {
            grads.iter().zip(dirs).filter_map(|(g, v)| g.as_ref().map(|g| g.data().iter().zip(v.data()).map(|(a, b)| a * b).sum::<f64>())).sum()
        };
        let analytic = dot(&gb, &dir_b) + dot(&gd, &dir_d);
        let eps = 1e-5;
        let value = |e: f64| {
            let (pb, pd) = perturbed(b, d, &dir_b, &dir_d, e);
            let mut sg = StepGraph::inference(&pb, mode);
            let l = build(&mut sg, &pd);
            sg.value(l)
        };
        let numeric = (value(eps) - value(-eps)) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

fn criterion_3() -> Outcome {
    let b = probe_bundle();
    let disc = Discriminator::new(b.feature_dim(), 8, 4);
    let n_params = b.store().numel() + disc.store().numel();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let xs = rand_images(4, 4, &mut rng);
    let xt = rand_images(4, 4, &mut rng);
    let xp = rand_images(4, 4, &mut rng);
    let (ys, yt, yp) = (vec![0, 2, 1, 2], vec![1, 1, 0, 2], vec![3, 0, 2, 1]);
    let lam = 0.35;
    let mixed = mix_batch(&xp, &yp, &xt, &yt, lam).unwrap();
    let xm = mixed.x_mixed.clone();
    let cases: Vec<(&str, Box<Build<'_>>)> = vec![
        ("L_p", Box::new(|sg, _| {
            let f = sg.features(&xp).unwrap();
            pretrain_loss(sg, f, &yp).unwrap()
        })),
        ("L_sem", Box::new(|sg, _| {
            let f = sg.features(&xm).unwrap();
            sem_loss(sg, f, &yp, &yt, lam).unwrap()
        })),
        ("L_feat", Box::new(|sg, _| {
            let fp = sg.features(&xp).unwrap();
            let ft = sg.features(&xt).unwrap();
            let fm = sg.features(&xm).unwrap();
            feat_loss(&mut sg.graph, fp, ft, fm, lam)
        })),
        ("L_s", Box::new(|sg, _| {
            let f = sg.features(&xs).unwrap();
            source_loss(sg, f, &ys, 0.1).unwrap()
        })),
        ("info-max", Box::new(|sg, _| {
            let f = sg.features(&xt).unwrap();
            let z = sg.target_logits(f);
            information_maximization(&mut sg.graph, z)
        })),
        // coefficient -1 makes the reversal layer an identity in both passes
        ("adversarial", Box::new(|sg, d| {
            let fs = sg.features(&xs).unwrap();
            let ft = sg.features(&xt).unwrap();
            adversarial_loss(&mut sg.graph, d, fs, ft, -1.0)
        })),
    ];
    let mut details = Vec::new();
    let mut pass = n_params <= 1000;
    for (name, build) in &cases {
        let worst = [Mode::Train, Mode::Eval].map(|m| grad_check(&b, &disc, build.as_ref(), m, &mut rng)).into_iter().fold(0.0, f64::max);
        pass &= worst <= 1e-4;
        details.push(format!("{name} {worst:.1e}"));
    }
    outcome(pass, format!("{n_params} params; max rel error: {}", details.join(", ")))
}

// ----------------------------------------------------------- criteria 4 to 7

fn toy_config(recipe: Recipe, seed: u64, out: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_text("epochs = 10\npretrain_epochs = 15\nbatch_size = 32\n").unwrap();
    c.recipe = recipe;
    c.seed = seed;
    c.output_dir = out.to_path_buf();
    c
}

fn run(cfg: &RunConfig, ws: &Workspace) -> RunReport {
    run_prepared(cfg, ws).unwrap().report
}

fn final_silhouette(r: &RunReport) -> f64 {
    r.diagnostics.last().unwrap().silhouette_pretrain
}

fn criterion_4(tmp: &Path) -> Outcome {
    let ws = prepare(&toy_config(Recipe::NoisyProbe, 0, tmp)).unwrap();
    let (mut lower, mut raised) = (0, 0);
    let mut rows = Vec::new();
    for seed in 0..3 {
        let arm = |noise: f64, lp: bool| {
            let mut c = toy_config(Recipe::NoisyProbe, seed, &tmp.join(format!("c4_{seed}_{noise}_{lp}")));
            c.noise_fraction = noise;
            c.probe_pretrain_loss = lp;
            final_silhouette(&run(&c, &ws))
        };
        let (clean, noisy, noisy_lp) = (arm(0.0, false), arm(0.5, false), arm(0.5, true));
        lower += usize::from(noisy < clean);
        raised += usize::from(noisy_lp > noisy);
        rows.push(format!("s{seed}: clean {clean:.4} noisy {noisy:.4} noisy+L_p {noisy_lp:.4}"));
    }
    outcome(lower == 3 && raised == 3, format!("noisy<clean {lower}/3, L_p raises {raised}/3 ({})", rows.join("; ")))
}

struct SfudaArms {
    baseline: Vec<f64>,
    trida: Vec<f64>,
    wtp_drops: usize,
    wtp: Vec<String>,
}

fn sfuda_pair(ws: &Workspace, tmp: &Path, tag: &str, seed: u64, trida: bool, synth: bool) -> RunReport {
    let dir = tmp.join(format!("{tag}_{seed}"));
    let mut c1 = toy_config(Recipe::SfudaStep1, seed, &dir.join("step1"));
    c1.set("trida", if trida { "on" } else { "off" }).unwrap();
    c1.synth_for_pretrain = synth;
    run(&c1, ws);
    let mut c2 = c1.clone();
    c2.recipe = Recipe::SfudaStep2;
    c2.output_dir = dir.join("step2");
    c2.source_checkpoint = Some(dir.join("step1").join(SOURCE_CHECKPOINT));
    run(&c2, ws)
}

fn sfuda_arms(tmp: &Path) -> SfudaArms {
    let ws = prepare(&toy_config(Recipe::SfudaStep1, 0, tmp)).unwrap();
    let mut arms = SfudaArms {
        baseline: Vec::new(),
        trida: Vec::new(),
        wtp_drops: 0,
        wtp: Vec::new(),
    };
    for seed in 0..5 {
        let b = sfuda_pair(&ws, tmp, "sfuda_base", seed, false, false);
        let t = sfuda_pair(&ws, tmp, "sfuda_trida", seed, true, false);
        arms.baseline.push(b.accuracy("target").unwrap());
        arms.trida.push(t.accuracy("target").unwrap());
        if seed < 3 {
            let (w0, w1) = (t.diagnostics[0].w_tp, t.diagnostics.last().unwrap().w_tp);
            arms.wtp_drops += usize::from(w1 < w0);
            arms.wtp.push(format!("s{seed}: {w0:.3}->{w1:.3}"));
        }
    }
    arms
}

fn criterion_5(arms: &SfudaArms) -> Outcome {
    outcome(arms.wtp_drops == 3, format!("W(t,p) final < epoch 0 in {}/3 seeds ({})", arms.wtp_drops, arms.wtp.join("; ")))
}

fn uda_arms(tmp: &Path) -> (Vec<f64>, Vec<f64>) {
    let ws = prepare(&toy_config(Recipe::Uda, 0, tmp)).unwrap();
    let (mut base, mut tri) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        for (on, acc) in [(false, &mut base), (true, &mut tri)] {
            let mut c = toy_config(Recipe::Uda, seed, &tmp.join(format!("uda_{on}_{seed}")));
            c.set("trida", if on { "on" } else { "off" }).unwrap();
            acc.push(run(&c, &ws).accuracy("target").unwrap());
        }
    }
    (base, tri)
}

fn criterion_6(arms: &SfudaArms, uda: &(Vec<f64>, Vec<f64>)) -> Outcome {
    let (sb, st) = (mean_std(&arms.baseline).0, mean_std(&arms.trida).0);
    let (ub, ut) = (mean_std(&uda.0).0, mean_std(&uda.1).0);
    outcome(
        st >= sb && ut >= ub,
        format!("mean target acc over 5 seeds: SFUDA baseline {sb:.4} vs TriDA {st:.4}; UDA baseline {ub:.4} vs TriDA {ut:.4}"),
    )
}

fn criterion_7(tmp: &Path, arms: &SfudaArms) -> Outcome {
    let mut cfg = toy_config(Recipe::SfudaStep1, 0, tmp);
    cfg.synth_for_pretrain = true;
    let ws = prepare(&cfg).unwrap();
    let base = ws.base.as_ref().unwrap();
    let (_, results) = synthesize_dataset(base, &ws.selection.selected, &cfg.synth, None, 1).unwrap();
    let min_conf = results.iter().flat_map(|r| r.confidences.iter().copied()).fold(f64::INFINITY, f64::min);
    let n_images: usize = results.iter().map(|r| r.confidences.len()).sum();
    let synth_acc: Vec<f64> = (0..5).map(|s| sfuda_pair(&ws, tmp, "sfuda_synth", s, true, true).accuracy("target").unwrap()).collect();
    let (mb, ms) = (mean_std(&arms.baseline).0, mean_std(&synth_acc).0);
    outcome(
        min_conf >= 0.9 && ms - mb >= 0.0,
        format!("{n_images} synthesized images, min confidence {min_conf:.4}; SFUDA baseline {mb:.4} vs TriDA with synthesized data {ms:.4}"),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8(tmp: &Path) -> Outcome {
    let data = generate_toy_benchmark(&ToyBenchmarkSpec {
        samples_per_class_per_domain: 8,
        ..ToyBenchmarkSpec::default()
    })
    .unwrap();
    let mut b = ModelBundle::new(ModelConfig::default(), data.source.class_set().to_vec(), data.pretrain.class_set().to_vec(), 8).unwrap();
    pretrain_bundle(&mut b, &data.pretrain, &TrainSettings::new(1, 16, 8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let x = rand_images(1000, 32, &mut rng);
    let before = b.classify_target(&x).unwrap();
    let path = tmp.join("stripped.ckpt");
    b.clone().strip_pretrain_head().save(&path).unwrap();
    let loaded = ModelBundle::load(&path).unwrap();
    let after = loaded.classify_target(&x).unwrap();
    let identical = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    outcome(
        identical && !loaded.has_pretrain_head(),
        format!("1000 inputs, logits bit-identical: {identical}, pretrain head removed: {}", !loaded.has_pretrain_head()),
    )
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Outcome {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let wordnet = data.join("wordnet/noun_hypernyms.txt");
    let imagenet: Vec<String> = std::fs::read_to_string(data.join("imagenet_classes.txt"))
        .unwrap()
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    let mut pass = true;
    for (name, file, tau, paper) in [
        ("Office-Home", "officehome_classes.map", 0.4, 63usize),
        ("Office-31", "office31_classes.map", 0.2, 72),
        ("VisDA-C", "visda_classes.map", 0.2, 59),
    ] {
        let mut tax = load_taxonomy(wordnet.to_str().unwrap()).unwrap();
        let map: PathBuf = data.join(file);
        tax.load_class_mapping(&map).unwrap();
        let classes: Vec<String> = std::fs::read_to_string(&map)
            .unwrap()
            .lines()
            .filter_map(|l| l.split_whitespace().next().map(String::from))
            .fold(Vec::new(), |mut v, c| {
                if !v.contains(&c) {
                    v.push(c);
                }
                v
            });
        let n = select_pretrain_classes(&tax, &imagenet, &classes, tau).unwrap().selected.len();
        let ok = n.abs_diff(paper) <= 5;
        pass &= ok;
        rows.push(format!("{name} tau={tau}: {n} (table {paper}{})", if n == paper { ", exact" } else if ok { "" } else { ", outside +-5" }));
    }
    outcome(pass, rows.join("; "))
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let tmp = tmp.path();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        report!("criterion {n} ({name}): {} [{secs:.1}s] {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o, secs));
    };
    timed(1, "oracle equivalence", &mut criterion_1);
    timed(2, "loss identities", &mut criterion_2);
    timed(3, "gradient checks", &mut criterion_3);
    timed(4, "degeneration reproduction", &mut || criterion_4(tmp));
    let t = Instant::now();
    let arms = sfuda_arms(tmp);
    let uda = uda_arms(tmp);
    report!("paired SFUDA and UDA runs took {:.1}s", t.elapsed().as_secs_f64());
    timed(5, "pre-training gravity", &mut || criterion_5(&arms));
    timed(6, "direction of improvement", &mut || criterion_6(&arms, &uda));
    timed(7, "synthesis efficacy", &mut || criterion_7(tmp, &arms));
    timed(8, "head-removal invariance", &mut || criterion_8(tmp));
    timed(9, "selection table consistency", &mut criterion_9);

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    report!("failing criteria: {failed:?} (expected {EXPECTED_FAILURES:?})");
    assert_eq!(failed, EXPECTED_FAILURES, "acceptance outcome changed");
}

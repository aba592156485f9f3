//! Desk-scale three-domain benchmark: rendered shapes whose class is the
//! shape and whose domain is the rendering style.
//!
//! * source: warm foreground on a dark, flat background, little noise
//! * target: hue-rotated, low-contrast foreground on a bright striped
//!   background with heavier noise
//! * pretrain: every style in between, over a superset of classes that
//!   adds further shapes and a few pure-texture classes

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DomainRole, LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::seed::sub_seed;
use crate::tensor::Tensor;

/// Every renderable class with its parent in the bundled toy taxonomy.
/// Shapes come first and are the only classes eligible as task classes.
pub const SHAPE_CATALOGUE: &[(&str, &str)] = &[
    ("circle", "round"),
    ("square", "polygon"),
    ("triangle", "polygon"),
    ("cross", "stroke"),
    ("ring", "round"),
    ("diamond", "polygon"),
    ("hbar", "stroke"),
    ("ellipse", "round"),
    ("frame", "polygon"),
    ("vbar", "stroke"),
    ("xcross", "stroke"),
];

const TEXTURES: &[&str] = &["stripes", "checker", "dots"];

/// `parent child` edges of the bundled toy taxonomy.
pub fn toy_taxonomy_edges() -> Vec<(String, String)> {
    let mut edges: Vec<(String, String)> = [
        ("entity", "shape"),
        ("entity", "texture"),
        ("shape", "round"),
        ("shape", "polygon"),
        ("shape", "stroke"),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    for (c, p) in SHAPE_CATALOGUE {
        edges.push((p.to_string(), c.to_string()));
    }
    for t in TEXTURES {
        edges.push(("texture".to_string(), t.to_string()));
    }
    edges
}

/// Photometric difference of the target domain relative to the source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainShift {
    /// Foreground hue rotation, in turns.
    pub hue: f64,
    /// Amplitude of the background stripe texture.
    pub texture: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Foreground/background contrast factor in `(0, 1]`.
    pub contrast: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            hue: 0.5,
            texture: 0.15,
            noise: 0.08,
            contrast: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBenchmarkSpec {
    pub n_classes_task: usize,
    pub n_classes_pretrain: usize,
    pub image_side: usize,
    pub samples_per_class_per_domain: usize,
    pub shift: DomainShift,
    pub seed: u64,
}

impl Default for ToyBenchmarkSpec {
    fn default() -> Self {
        Self {
            n_classes_task: 4,
            n_classes_pretrain: 8,
            image_side: 32,
            samples_per_class_per_domain: 40,
            shift: DomainShift::default(),
            seed: 0,
        }
    }
}

impl ToyBenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes_task < 2 {
            return Err(Error::invalid("at least two task classes are required"));
        }
        if self.n_classes_pretrain < self.n_classes_task {
            return Err(Error::invalid(format!(
                "n_classes_pretrain ({}) must be at least n_classes_task ({})",
                self.n_classes_pretrain, self.n_classes_task
            )));
        }
        if self.n_classes_task > SHAPE_CATALOGUE.len() {
            return Err(Error::invalid(format!("at most {} task classes are available", SHAPE_CATALOGUE.len())));
        }
        if self.n_classes_pretrain > SHAPE_CATALOGUE.len() + TEXTURES.len() {
            return Err(Error::invalid(format!(
                "at most {} pre-training classes are available",
                SHAPE_CATALOGUE.len() + TEXTURES.len()
            )));
        }
        if self.image_side < 8 {
            return Err(Error::invalid("image side must be at least 8"));
        }
        if self.samples_per_class_per_domain == 0 {
            return Err(Error::invalid("samples_per_class_per_domain must be positive"));
        }
        let s = &self.shift;
        if !(s.contrast > 0.0 && s.contrast <= 1.0) || s.noise < 0.0 || s.texture < 0.0 || !s.hue.is_finite() {
            return Err(Error::invalid("domain shift parameters out of range"));
        }
        Ok(())
    }

    pub fn task_classes(&self) -> Vec<String> {
        SHAPE_CATALOGUE[..self.n_classes_task].iter().map(|(c, _)| c.to_string()).collect()
    }

    /// Task classes followed by the extra shapes interleaved with textures.
    pub fn pretrain_classes(&self) -> Vec<String> {
        let mut extras = Vec::new();
        let shapes = &SHAPE_CATALOGUE[self.n_classes_task..];
        for i in 0..shapes.len().max(TEXTURES.len()) {
            if let Some((s, _)) = shapes.get(i) {
                extras.push(s.to_string());
            }
            if let Some(t) = TEXTURES.get(i) {
                extras.push(t.to_string());
            }
        }
        let mut out = self.task_classes();
        out.extend(extras.into_iter().take(self.n_classes_pretrain - self.n_classes_task));
        out
    }

    fn to_lines(&self) -> Vec<String> {
        vec![
            format!("seed={}", self.seed),
            format!("n_classes_task={}", self.n_classes_task),
            format!("n_classes_pretrain={}", self.n_classes_pretrain),
            format!("image_side={}", self.image_side),
            format!("samples_per_class_per_domain={}", self.samples_per_class_per_domain),
            format!("shift.hue={}", self.shift.hue),
            format!("shift.texture={}", self.shift.texture),
            format!("shift.noise={}", self.shift.noise),
            format!("shift.contrast={}", self.shift.contrast),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBenchmark {
    pub spec: ToyBenchmarkSpec,
    pub source: LabeledDataset,
    pub target: LabeledDataset,
    pub pretrain: LabeledDataset,
}

struct Style {
    fg: [f64; 3],
    bg: [f64; 3],
    texture: f64,
    tex_freq: f64,
    tex_angle: f64,
    tex_phase: f64,
    noise: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn mix(bg: [f64; 3], fg: [f64; 3], c: f64) -> [f64; 3] {
    [bg[0] + c * (fg[0] - bg[0]), bg[1] + c * (fg[1] - bg[1]), bg[2] + c * (fg[2] - bg[2])]
}

fn sample_style(role: DomainRole, shift: &DomainShift, rng: &mut ChaCha8Rng) -> Style {
    let base_hue = rng.random_range(0.0..0.08);
    let tex = (rng.random_range(2.0..5.0), rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI));
    match role {
        DomainRole::Source => {
            let g = rng.random_range(0.05..0.2);
            Style {
                fg: hsv(base_hue, 0.85, 0.95),
                bg: [g, g, g],
                texture: 0.0,
                tex_freq: tex.0,
                tex_angle: tex.1,
                tex_phase: tex.2,
                noise: 0.03,
            }
        }
        DomainRole::Target => {
            let g = rng.random_range(0.35..0.55);
            let bg = [g, g, g];
            Style {
                fg: mix(bg, hsv(base_hue + shift.hue, 0.6, 0.95), shift.contrast),
                bg,
                texture: shift.texture,
                tex_freq: tex.0,
                tex_angle: tex.1,
                tex_phase: tex.2,
                noise: shift.noise,
            }
        }
        DomainRole::Pretrain => {
            let bg = hsv(rng.random_range(0.0..1.0), rng.random_range(0.0..0.3), rng.random_range(0.0..0.6));
            let fg = hsv(rng.random_range(0.0..1.0), rng.random_range(0.3..1.0), rng.random_range(0.7..1.0));
            Style {
                fg: mix(bg, fg, rng.random_range(0.5..1.0)),
                bg,
                texture: rng.random_range(0.0..0.2),
                tex_freq: tex.0,
                tex_angle: tex.1,
                tex_phase: tex.2,
                noise: rng.random_range(0.0..0.08),
            }
        }
    }
}

/// Whether shape-local point `(u, v)` (roughly `[-1, 1]^2`) is covered.
fn inside(kind: &str, u: f64, v: f64, pattern: (f64, f64)) -> bool {
    let (r, ax, ay) = ((u * u + v * v).sqrt(), u.abs(), v.abs());
    match kind {
        "circle" => r < 0.9,
        "ring" => (0.55..0.95).contains(&r),
        "ellipse" => (u / 0.95).powi(2) + (v / 0.5).powi(2) < 1.0,
        "square" => ax.max(ay) < 0.75,
        "frame" => (0.45..0.85).contains(&ax.max(ay)),
        "diamond" => ax + ay < 0.95,
        "triangle" => (-0.8..0.8).contains(&v) && ax < 0.95 * (v + 0.8) / 1.6,
        "cross" => (ax < 0.25 && ay < 0.9) || (ay < 0.25 && ax < 0.9),
        "xcross" => {
            let (p, q) = ((u + v).abs() / 2f64.sqrt(), (u - v).abs() / 2f64.sqrt());
            (p < 0.22 && q < 0.9) || (q < 0.22 && p < 0.9)
        }
        "hbar" => ay < 0.28 && ax < 0.95,
        "vbar" => ax < 0.28 && ay < 0.95,
        "stripes" => (pattern.0 * u * PI + pattern.1).sin() > 0.0,
        "checker" => ((pattern.0 * u + pattern.1).floor() + (pattern.0 * v).floor()).rem_euclid(2.0) < 1.0,
        "dots" => {
            let (fu, fv) = ((pattern.0 * u + pattern.1).fract() - 0.5, (pattern.0 * v).fract() - 0.5);
            (fu * fu + fv * fv).sqrt() < 0.3
        }
        _ => false,
    }
}

fn render(kind: &str, side: usize, style: &Style, rng: &mut ChaCha8Rng) -> Tensor {
    let textured = TEXTURES.contains(&kind);
    let s = side as f64;
    let radius = if textured { 1.6 * s / 2.0 } else { rng.random_range(0.55..0.8) * s / 2.0 };
    let cx = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let angle: f64 = rng.random_range(-0.3..0.3);
    let pattern = (rng.random_range(2.5..4.0), rng.random_range(0.0..1.0));
    let (ca, sa) = (angle.cos(), angle.sin());
    let noise = Normal::new(0.0, style.noise.max(1e-12)).expect("finite noise");
    let mut data = vec![0.0; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let mut cover = 0.0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let (dx, dy) = ((x as f64 + ox - cx) / radius, (y as f64 + oy - cy) / radius);
                let (u, v) = (ca * dx + sa * dy, -sa * dx + ca * dy);
                if inside(kind, u, v, pattern) {
                    cover += 0.25;
                }
            }
            let t = (x as f64 * style.tex_angle.cos() + y as f64 * style.tex_angle.sin()) / s;
            let wave = style.texture * (2.0 * PI * style.tex_freq * t + style.tex_phase).sin();
            let bg = [style.bg[0] + wave, style.bg[1] + wave, style.bg[2] + wave];
            let px = mix(bg, style.fg, cover);
            for (c, val) in px.iter().enumerate() {
                let n = if style.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                data[(c * side + y) * side + x] = (val + n).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(&[3, side, side], data).expect("image shape")
}

fn generate_domain(spec: &ToyBenchmarkSpec, role: DomainRole, classes: &[String]) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, &format!("toy/{role}")));
    let mut samples = Vec::with_capacity(classes.len() * spec.samples_per_class_per_domain);
    for _ in 0..spec.samples_per_class_per_domain {
        for (label, class) in classes.iter().enumerate() {
            let style = sample_style(role, &spec.shift, &mut rng);
            samples.push(Sample {
                image: render(class, spec.image_side, &style, &mut rng),
                label: Some(label),
                role,
            });
        }
    }
    LabeledDataset::new(samples, classes.to_vec(), role)
}

/// Renders the three domains. Identical specs give bit-identical output.
pub fn generate_toy_benchmark(spec: &ToyBenchmarkSpec) -> Result<ToyBenchmark> {
    spec.validate()?;
    let task = spec.task_classes();
    Ok(ToyBenchmark {
        spec: spec.clone(),
        source: generate_domain(spec, DomainRole::Source, &task)?,
        target: generate_domain(spec, DomainRole::Target, &task)?,
        pretrain: generate_domain(spec, DomainRole::Pretrain, &spec.pretrain_classes())?,
    })
}

const MANIFEST: &str = "manifest.txt";
const FORMAT_LINE: &str = "format=trida-toy-benchmark 1";

/// Writes `manifest.txt` (key=value lines) plus, per domain,
/// `<role>.images.f64` (little-endian `f64`, samples in order, each
/// `c*h*w` values) and `<role>.labels.txt` (one label index per line).
pub fn save_toy_benchmark(bench: &ToyBenchmark, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = String::new();
    let _ = writeln!(m, "{FORMAT_LINE}");
    for l in bench.spec.to_lines() {
        let _ = writeln!(m, "{l}");
    }
    let side = bench.spec.image_side;
    let _ = writeln!(m, "image_shape=3x{side}x{side}");
    for d in [&bench.source, &bench.target, &bench.pretrain] {
        let role = d.role();
        let _ = writeln!(m, "{role}.classes={}", d.class_set().join(","));
        let _ = writeln!(m, "{role}.count={}", d.len());
        let mut bytes = Vec::with_capacity(d.len() * 3 * side * side * 8);
        let mut labels = String::new();
        for s in d.samples() {
            for v in s.image.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let _ = writeln!(labels, "{}", s.label.map_or("-".to_string(), |l| l.to_string()));
        }
        let p = dir.join(format!("{role}.images.f64"));
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        let p = dir.join(format!("{role}.labels.txt"));
        fs::write(&p, labels).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join(MANIFEST);
    fs::write(&p, m).map_err(|e| Error::io(&p, e))
}

pub fn load_toy_benchmark(dir: &Path) -> Result<ToyBenchmark> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(FORMAT_LINE) {
        return Err(Error::Parse {
            line: 1,
            message: "not a toy benchmark manifest".into(),
        });
    }
    let mut kv = std::collections::BTreeMap::new();
    for (i, l) in lines.enumerate() {
        let (k, v) = l.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 2,
            message: format!("expected key=value, got `{l}`"),
        })?;
        kv.insert(k.to_string(), (v.to_string(), i + 2));
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::invalid(format!("manifest is missing `{k}`")));
    fn num<T: std::str::FromStr>(v: &(String, usize)) -> Result<T> {
        v.0.parse().map_err(|_| Error::Parse {
            line: v.1,
            message: format!("invalid number `{}`", v.0),
        })
    }
    let spec = ToyBenchmarkSpec {
        seed: num(get("seed")?)?,
        n_classes_task: num(get("n_classes_task")?)?,
        n_classes_pretrain: num(get("n_classes_pretrain")?)?,
        image_side: num(get("image_side")?)?,
        samples_per_class_per_domain: num(get("samples_per_class_per_domain")?)?,
        shift: DomainShift {
            hue: num(get("shift.hue")?)?,
            texture: num(get("shift.texture")?)?,
            noise: num(get("shift.noise")?)?,
            contrast: num(get("shift.contrast")?)?,
        },
    };
    let side = spec.image_side;
    let load = |role: DomainRole| -> Result<LabeledDataset> {
        let classes: Vec<String> = get(&format!("{role}.classes"))?.0.split(',').map(str::to_string).collect();
        let count: usize = num(get(&format!("{role}.count"))?)?;
        let p = dir.join(format!("{role}.images.f64"));
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let per = 3 * side * side;
        if bytes.len() != count * per * 8 {
            return Err(Error::invalid(format!("{} has {} bytes, expected {}", p.display(), bytes.len(), count * per * 8)));
        }
        let p = dir.join(format!("{role}.labels.txt"));
        let labels_text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let labels: Vec<Option<usize>> = labels_text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                if l == "-" {
                    Ok(None)
                } else {
                    l.parse().map(Some).map_err(|_| Error::Parse {
                        line: i + 1,
                        message: format!("invalid label `{l}`"),
                    })
                }
            })
            .collect::<Result<_>>()?;
        if labels.len() != count {
            return Err(Error::invalid(format!("{} lists {} labels, expected {count}", p.display(), labels.len())));
        }
        let samples = bytes
            .chunks_exact(per * 8)
            .zip(labels)
            .map(|(chunk, label)| {
                let data = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                Ok(Sample {
                    image: Tensor::from_vec(&[3, side, side], data)?,
                    label,
                    role,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        LabeledDataset::new(samples, classes, role)
    };
    Ok(ToyBenchmark {
        source: load(DomainRole::Source)?,
        target: load(DomainRole::Target)?,
        pretrain: load(DomainRole::Pretrain)?,
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> ToyBenchmarkSpec {
        ToyBenchmarkSpec {
            image_side: 16,
            samples_per_class_per_domain: 3,
            seed,
            ..ToyBenchmarkSpec::default()
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = generate_toy_benchmark(&small_spec(0)).unwrap();
        let b = generate_toy_benchmark(&small_spec(0)).unwrap();
        assert_eq!(a, b);
        let c = generate_toy_benchmark(&small_spec(1)).unwrap();
        assert_ne!(a.source, c.source);
    }

    #[test]
    fn pretrain_classes_strictly_contain_task_classes() {
        let b = generate_toy_benchmark(&small_spec(0)).unwrap();
        let task = b.source.class_set();
        assert_eq!(task.len(), 4);
        assert_eq!(b.pretrain.class_set().len(), 8);
        assert!(task.iter().all(|c| b.pretrain.class_set().contains(c)));
        assert_eq!(b.target.class_set(), task);
        for d in [&b.source, &b.target, &b.pretrain] {
            assert!(d.samples().iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
            assert!(d.samples().iter().all(|s| s.label.is_some()));
        }
    }

    #[test]
    fn invalid_class_counts_are_rejected() {
        let spec = ToyBenchmarkSpec {
            n_classes_task: 5,
            n_classes_pretrain: 4,
            ..small_spec(0)
        };
        assert!(generate_toy_benchmark(&spec).is_err());
    }

    #[test]
    fn every_class_is_in_the_toy_taxonomy() {
        let edges = toy_taxonomy_edges();
        let spec = ToyBenchmarkSpec {
            n_classes_pretrain: SHAPE_CATALOGUE.len() + TEXTURES.len(),
            ..small_spec(0)
        };
        for c in spec.pretrain_classes() {
            assert!(edges.iter().any(|(_, child)| *child == c), "{c}");
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate_toy_benchmark(&small_spec(3)).unwrap();
        save_toy_benchmark(&b, dir.path()).unwrap();
        assert_eq!(load_toy_benchmark(dir.path()).unwrap(), b);
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};

use super::{DomainRole, LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads `root/<class>/<image>` into a dataset. Classes are the sorted
/// subdirectory names; images are read in sorted filename order, resized to
/// `side x side` (bilinear) and scaled to `[0, 1]` RGB.
pub fn load_image_folder(root: &Path, role: DomainRole, side: usize) -> Result<LabeledDataset> {
    if side == 0 {
        return Err(Error::invalid("image side must be positive"));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::invalid(format!("no class directories under {}", root.display())));
    }
    let mut classes = Vec::new();
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(Error::invalid(format!("class directory `{name}` contains no images")));
        }
        for f in files {
            let img = image::open(&f).map_err(|e| Error::Image {
                path: f.clone(),
                message: e.to_string(),
            })?;
            let rgb = img.resize_exact(side as u32, side as u32, FilterType::Triangle).to_rgb8();
            let mut data = vec![0.0; 3 * side * side];
            for (x, y, px) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[(c * side + y as usize) * side + x as usize] = f64::from(px[c]) / 255.0;
                }
            }
            samples.push(Sample {
                image: Tensor::from_vec(&[3, side, side], data)?,
                label: Some(label),
                role,
            });
        }
        classes.push(name);
    }
    LabeledDataset::new(samples, classes, role)
}

/// Writes labeled RGB samples as `root/<class>/<index>.png`. Returns the
/// written paths in sample order.
pub fn write_image_folder(dataset: &LabeledDataset, root: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples().iter().enumerate() {
        let label = s.label.ok_or_else(|| Error::invalid(format!("sample {i} has no label")))?;
        let shape = s.image.shape();
        if shape[0] != 3 {
            return Err(Error::invalid("only 3-channel images can be written"));
        }
        let (h, w) = (shape[1], shape[2]);
        let dir = root.join(&dataset.class_set()[label]);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let d = s.image.data();
        let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (d[(c * h + y as usize) * w + x as usize] * 255.0).round().clamp(0.0, 255.0) as u8;
            Rgb([px(0), px(1), px(2)])
        });
        let path = dir.join(format!("{i:05}.png"));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        paths.push(path);
    }
    Ok(paths)
}

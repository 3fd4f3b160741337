//! Image-folder datasets: loading, stratified splitting and export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fplab_core::data::{Dataset, Image, LabeledSample};
use fplab_core::nn::Shape3;
use fplab_core::rng::rng_from;
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(HarnessError::io(dir))?
        .map(|e| e.map(|e| e.path()).map_err(HarnessError::io(dir)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads `root/<class>/<image>` with classes in lexicographic order. Images
/// are resized to `size` x `size` and scaled to [-1, 1]; the dataset is
/// grayscale unless some image has color. Files that fail to decode are
/// skipped with a warning.
pub fn load_image_folder(root: &Path, size: usize) -> Result<(Dataset, Vec<String>)> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(HarnessError::Validation(format!(
            "{}: need at least two class subdirectories",
            root.display()
        )));
    }
    let mut warnings = Vec::new();
    let mut decoded: Vec<(DynamicImage, usize)> = Vec::new();
    let mut names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            match image::open(&file) {
                Ok(img) => decoded.push((img, label)),
                Err(e) => warnings.push(format!("skipped {}: {e}", file.display())),
            }
        }
    }
    if decoded.is_empty() {
        return Err(HarnessError::Validation(format!("{}: no readable images", root.display())));
    }
    let color = decoded.iter().any(|(img, _)| img.color().has_color());
    let channels = if color { 3 } else { 1 };
    let shape = Shape3::new(channels, size, size);
    let side = size as u32;
    let scale = |v: u8| f64::from(v) / 127.5 - 1.0;
    let samples = decoded
        .into_iter()
        .map(|(img, label)| {
            let pixels: Vec<f64> = if color {
                let rgb = image::imageops::resize(&img.to_rgb8(), side, side, FilterType::Triangle);
                // channel-major layout
                (0..3).flat_map(|c| rgb.pixels().map(move |p| scale(p.0[c])).collect::<Vec<_>>()).collect()
            } else {
                let g = image::imageops::resize(&img.to_luma8(), side, side, FilterType::Triangle);
                g.pixels().map(|p| scale(p.0[0])).collect()
            };
            Ok(LabeledSample { image: Image::new(shape, pixels)?, label })
        })
        .collect::<Result<Vec<_>>>()?;
    let k = names.len();
    Ok((Dataset::new(samples, k, Some(names))?, warnings))
}

/// Stratified split: each class contributes `round(fraction * count)` of
/// its samples to the test set, at least one when the class has two or more.
pub fn split_dataset(all: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in all.samples().iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut rng = rng_from(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for ids in by_class.values_mut() {
        ids.shuffle(&mut rng);
        let mut n_test = (test_fraction * ids.len() as f64).round() as usize;
        if ids.len() >= 2 {
            n_test = n_test.clamp(1, ids.len() - 1);
        }
        for (j, &i) in ids.iter().enumerate() {
            let s = all.samples()[i].clone();
            if j < n_test {
                test.push(s);
            } else {
                train.push(s);
            }
        }
    }
    let names = all.class_names().map(<[String]>::to_vec);
    Ok((
        Dataset::new(train, all.num_classes(), names.clone())?,
        Dataset::new(test, all.num_classes(), names)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub files: Vec<ManifestEntry>,
}

fn class_name(ds: &Dataset, label: usize) -> String {
    ds.class_names().map_or_else(|| format!("class_{label:02}"), |n| n[label].clone())
}

/// Encodes a [-1, 1] image as 8-bit grayscale or RGB.
pub fn to_dynamic_image(img: &Image) -> Result<DynamicImage> {
    let Shape3 { c, h, w } = img.shape;
    let q = |v: f64| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
    let plane = h * w;
    match c {
        1 => {
            let buf: Vec<u8> = img.pixels.iter().map(|&v| q(v)).collect();
            Ok(DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, buf).unwrap()))
        }
        3 => {
            let buf: Vec<u8> = (0..plane).flat_map(|i| (0..3).map(move |ch| q(img.pixels[ch * plane + i]))).collect();
            Ok(DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, buf).unwrap()))
        }
        other => Err(HarnessError::Runtime(format!("cannot encode {other}-channel images"))),
    }
}

/// Writes `dir/<class>/<index>.png` for every sample plus `manifest.json`
/// with a SHA-256 per file.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    let classes: Vec<String> = (0..ds.num_classes()).map(|l| class_name(ds, l)).collect();
    for c in &classes {
        let p = dir.join(c);
        std::fs::create_dir_all(&p).map_err(HarnessError::io(&p))?;
    }
    let mut files = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples().iter().enumerate() {
        let rel = format!("{}/{i:05}.png", classes[s.label]);
        let path = dir.join(&rel);
        let mut bytes = Vec::new();
        to_dynamic_image(&s.image)?
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| HarnessError::format(&path, e))?;
        std::fs::write(&path, &bytes).map_err(HarnessError::io(&path))?;
        let sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        files.push(ManifestEntry { file: rel, label: s.label, sha256 });
    }
    let manifest = Manifest { classes, files };
    crate::io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fplab_core::data::synth_texture_dataset;

    #[test]
    fn split_is_stratified_and_disjoint() {
        let ds = synth_texture_dataset(3, 10, 8, 1).unwrap();
        let (train, test) = split_dataset(&ds, 0.2, 5).unwrap();
        assert_eq!(train.class_counts(), vec![8, 8, 8]);
        assert_eq!(test.class_counts(), vec![2, 2, 2]);
    }

    #[test]
    fn quantization_is_within_half_a_step() {
        let ds = synth_texture_dataset(2, 1, 8, 3).unwrap();
        let img = &ds.samples()[0].image;
        let enc = to_dynamic_image(img).unwrap().to_luma8();
        for (p, &v) in enc.pixels().zip(&img.pixels) {
            assert!((f64::from(p.0[0]) / 127.5 - 1.0 - v).abs() <= 0.5 / 127.5 + 1e-12);
        }
    }
}

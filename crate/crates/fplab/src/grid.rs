//! Tiled image of generator samples, one row per checkpoint.

use std::path::Path;

use fplab_core::data::Image;
use fplab_core::fl::attacker_dataset;
use fplab_core::psg::{generate_poison_set, train_psg_with_checkpoints, PoisonGenerator};
use image::{DynamicImage, GenericImage};

use crate::config::ExperimentConfig;
use crate::dataset::to_dynamic_image;
use crate::error::{HarnessError, Result};

/// Samples drawn for each checkpoint, same noise for every row so rows
/// differ only by training progress.
pub fn checkpoint_samples(generators: &[PoisonGenerator], per_checkpoint: usize, seed: u64) -> Result<Vec<Vec<Image>>> {
    generators
        .iter()
        .map(|g| {
            let set = generate_poison_set(g, per_checkpoint, seed)?;
            Ok(set.samples().iter().map(|s| s.image.clone()).collect())
        })
        .collect()
}

/// Lays out `rows[i][j]` at tile (row i, column j) without padding.
pub fn tile(rows: &[Vec<Image>]) -> Result<DynamicImage> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| HarnessError::Validation("grid needs at least one checkpoint and one sample".into()))?;
    let (h, w, c) = (first.shape.h as u32, first.shape.w as u32, first.shape.c);
    let cols = rows[0].len() as u32;
    if rows.iter().any(|r| r.len() as u32 != cols || r.iter().any(|i| i.shape != first.shape)) {
        return Err(HarnessError::Validation("grid rows must have equal length and image shape".into()));
    }
    let (gw, gh) = (cols * w, rows.len() as u32 * h);
    let mut canvas = if c == 1 { DynamicImage::new_luma8(gw, gh) } else { DynamicImage::new_rgb8(gw, gh) };
    for (i, row) in rows.iter().enumerate() {
        for (j, img) in row.iter().enumerate() {
            canvas
                .copy_from(&to_dynamic_image(img)?, j as u32 * w, i as u32 * h)
                .map_err(|e| HarnessError::Runtime(format!("grid layout: {e}")))?;
        }
    }
    Ok(canvas)
}

pub fn export_sample_grid(generators: &[PoisonGenerator], per_checkpoint: usize, seed: u64) -> Result<DynamicImage> {
    if generators.is_empty() || per_checkpoint == 0 {
        return Err(HarnessError::Validation("grid needs at least one checkpoint and one sample".into()));
    }
    tile(&checkpoint_samples(generators, per_checkpoint, seed)?)
}

pub fn save_png(img: &DynamicImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| HarnessError::format(path, e))
}

/// Evenly spaced checkpoints ending at `iterations`.
pub fn default_checkpoints(iterations: u32, count: u32) -> Vec<u32> {
    let mut v: Vec<u32> = (1..=count).map(|i| (iterations * i / count).max(1)).collect();
    v.dedup();
    v
}

/// Trains the configured generator on the attacker's pooled data and
/// snapshots it at each checkpoint.
pub fn train_checkpoints(cfg: &ExperimentConfig, checkpoints: &[u32]) -> Result<Vec<PoisonGenerator>> {
    if checkpoints.is_empty() || checkpoints.contains(&0) {
        return Err(HarnessError::Validation("checkpoints must be positive iteration counts".into()));
    }
    let (train, _, _) = cfg.load_data()?;
    let local = attacker_dataset(&train, &cfg.federation)?;
    let mut psg = cfg.psg_config();
    psg.iterations = *checkpoints.iter().max().unwrap();
    let (_, snaps) = train_psg_with_checkpoints(&local, &psg, checkpoints)?;
    Ok(snaps)
}

/// Mean over generated images of the per-pixel RMS distance to the nearest
/// reference image.
pub fn mean_nearest_rms(generated: &[Image], reference: &[&Image]) -> f64 {
    let rms = |a: &Image, b: &Image| {
        (a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.pixels.len() as f64).sqrt()
    };
    let total: f64 = generated
        .iter()
        .map(|g| reference.iter().map(|r| rms(g, r)).fold(f64::INFINITY, f64::min))
        .sum();
    total / generated.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use fplab_core::nn::Shape3;

    fn img(v: f64) -> Image {
        Image::new(Shape3::new(1, 8, 8), vec![v; 64]).unwrap()
    }

    #[test]
    fn grid_layout() {
        let rows = vec![vec![img(-1.0); 8]; 4];
        let g = tile(&rows).unwrap();
        assert_eq!((g.width(), g.height()), (64, 32));
        let single = tile(&[vec![img(1.0)]]).unwrap();
        assert_eq!((single.width(), single.height()), (8, 8));
        assert_eq!(single.to_luma8().get_pixel(3, 3).0[0], 255);
        assert!(tile(&[]).is_err());
    }

    #[test]
    fn checkpoint_spacing() {
        assert_eq!(default_checkpoints(400, 4), vec![100, 200, 300, 400]);
        assert_eq!(default_checkpoints(2, 4), vec![1, 2]);
    }

    #[test]
    fn nearest_distance() {
        let a = img(0.5);
        let refs = [&img(0.0), &img(0.4)];
        assert!((mean_nearest_rms(&[a], &refs) - 0.1).abs() < 1e-12);
    }
}

//! Attention entropy, mask overlap and grayscale image export.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tokensplit_tensor::Tensor;

use crate::error::{Error, Result};

/// Shannon entropy (nats) of the softmax of all cells.
pub fn attention_entropy(slice: &Tensor<f64>) -> f64 {
    let data = slice.data();
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = data.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter()
        .map(|&e| e / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum::<f64>()
        .max(0.0)
}

/// Entropy of one token across recorded steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySeries {
    pub token: String,
    /// `(timestep, entropy)` per recorded step.
    pub values: Vec<(usize, f64)>,
}

impl EntropySeries {
    pub fn delta(&self) -> Result<f64> {
        entropy_delta(&self.values.iter().map(|&(_, h)| h).collect::<Vec<_>>())
    }
}

/// Mean of consecutive differences.
pub fn entropy_delta(series: &[f64]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::contract(format!(
            "entropy change needs at least 2 steps, got {}",
            series.len()
        )));
    }
    let diffs: f64 = series.windows(2).map(|w| w[1] - w[0]).sum();
    Ok(diffs / (series.len() - 1) as f64)
}

/// Intersection over union; two empty masks score 0.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("masks have {} and {} cells", a.len(), b.len())));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

pub fn iou_matrix(masks: &[Vec<bool>]) -> Result<Vec<Vec<f64>>> {
    masks
        .iter()
        .map(|a| masks.iter().map(|b| mask_iou(a, b)).collect())
        .collect()
}

/// Mean IoU over unordered pairs; zero for fewer than two masks.
pub fn mean_pairwise_iou(masks: &[Vec<bool>]) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            total += mask_iou(&masks[i], &masks[j])?;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

/// 8-bit min-max quantization; a constant map becomes mid-gray.
pub fn quantize(data: &[f64]) -> Vec<u8> {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // also catches NaN and empty input
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![128; data.len()];
    }
    data.iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Binary PGM (P5) of an 8-bit grid.
pub fn pgm_bytes(pixels: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5 {width} {height} 255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn export_map(slice: &Tensor<f64>, path: &Path) -> Result<()> {
    let (h, w) = slice.dims2("export_map")?;
    fs::write(path, pgm_bytes(&quantize(slice.data()), h, w))?;
    Ok(())
}

/// Maps side by side, separated by one-pixel black columns, each quantized
/// on its own.
pub fn export_grid(slices: &[Tensor<f64>], path: &Path) -> Result<()> {
    let Some(first) = slices.first() else {
        return Err(Error::contract("grid of no maps"));
    };
    let (h, w) = first.dims2("export_grid")?;
    if slices.iter().any(|s| s.shape() != [h, w]) {
        return Err(Error::contract("grid maps differ in shape"));
    }
    let total_w = slices.len() * (w + 1) - 1;
    let mut pixels = vec![0u8; h * total_w];
    for (k, s) in slices.iter().enumerate() {
        let q = quantize(s.data());
        for y in 0..h {
            let o = y * total_w + k * (w + 1);
            pixels[o..o + w].copy_from_slice(&q[y * w..(y + 1) * w]);
        }
    }
    fs::write(path, pgm_bytes(&pixels, h, total_w))?;
    Ok(())
}

/// Binary PPM (P6) of an `[H, W, ≥3]` image in `[0, 1]`; extra channels
/// are dropped.
pub fn export_rgb(image: &Tensor<f64>, path: &Path) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] < 3 {
        return Err(Error::contract(format!("expected [H, W, >=3], got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut out = format!("P6 {w} {h} 255\n").into_bytes();
    for px in image.data().chunks(c) {
        out.extend(px[..3].iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a P5 file written by this module: `(height, width, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format(format!("unsupported PGM header {fields:?}")));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM dimension `{s}`")))
    };
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let pixels = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Format("truncated PGM data".into()))?;
    Ok((h, w, pixels.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_bounds() {
        let uniform = Tensor::full(&[16, 16], 0.3);
        assert!((attention_entropy(&uniform) - 256f64.ln()).abs() < 1e-12);
        assert!((256f64.ln() - 5.5452).abs() < 1e-4);
        let mut spike = Tensor::zeros(&[16, 16]);
        spike.data_mut()[7] = 1e3;
        assert!(attention_entropy(&spike) < 1e-9);
    }

    #[test]
    fn entropy_delta_examples() {
        assert_eq!(entropy_delta(&[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(entropy_delta(&[5.0, 4.0, 3.0]).unwrap(), -1.0);
        assert!(entropy_delta(&[1.0]).is_err());
    }

    #[test]
    fn iou_examples() {
        let full = vec![true; 8];
        let top: Vec<bool> = (0..8).map(|i| i < 4).collect();
        let bottom: Vec<bool> = (0..8).map(|i| i >= 4).collect();
        assert_eq!(mask_iou(&top, &top).unwrap(), 1.0);
        assert_eq!(mask_iou(&top, &bottom).unwrap(), 0.0);
        assert_eq!(mask_iou(&top, &full).unwrap(), 0.5);
        assert_eq!(mask_iou(&[false; 8], &[false; 8]).unwrap(), 0.0);
        let m = iou_matrix(&[top, full]).unwrap();
        assert_eq!(m, vec![vec![1.0, 0.5], vec![0.5, 1.0]]);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let data: Vec<f64> = (0..256).map(|i| (i as f64 * 0.37).sin()).collect();
        let map = Tensor::from_vec(&[16, 16], data.clone()).unwrap();
        export_map(&map, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5 16 16 255\n"));
        let (h, w, px) = read_pgm(&path).unwrap();
        assert_eq!((h, w), (16, 16));
        assert_eq!(px, quantize(&data));
        export_map(&map, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn constant_map_is_gray() {
        assert_eq!(quantize(&[0.4; 5]), vec![128; 5]);
    }

    #[test]
    fn grid_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        let a = Tensor::from_f64(&[2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        export_grid(&[a.clone(), a], &path).unwrap();
        let (h, w, px) = read_pgm(&path).unwrap();
        assert_eq!((h, w), (2, 5));
        assert_eq!(px, vec![0, 85, 0, 0, 85, 170, 255, 0, 170, 255]);
    }
}

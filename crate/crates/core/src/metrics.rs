//! Image-similarity scores for reconstructions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Default success threshold for [`reconstruction_rate`].
pub const DEFAULT_SSIM_THRESHOLD: f64 = 0.3;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mse", a, b)?;
    if a.is_empty() {
        return Err(Error::shape("mse", "empty images"));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

/// Peak signal-to-noise ratio for unit dynamic range. Identical images give
/// `f64::INFINITY`.
pub fn psnr(x_rec: &Tensor, x_true: &Tensor) -> Result<f64> {
    let m = mse(x_rec, x_true)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * m.log10())
}

/// Formats a PSNR value, writing the infinite sentinel as `inf`.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Mean SSIM over every 8x8 window (stride 1) of every channel plane.
///
/// Images are `[C,H,W]` or `[1,C,H,W]`; window statistics use population
/// (divide-by-N) moments.
pub fn ssim(x_rec: &Tensor, x_true: &Tensor) -> Result<f64> {
    same_shape("ssim", x_rec, x_true)?;
    let s = x_rec.shape();
    if s.len() < 2 {
        return Err(Error::shape("ssim", format!("image rank {}", s.len())));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let planes = x_rec.len() / (h * w);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..planes {
        let a = &x_rec.data()[p * h * w..(p + 1) * h * w];
        let b = &x_true.data()[p * h * w..(p + 1) * h * w];
        // Summed-area tables keep every window O(1).
        let sat = |f: &dyn Fn(usize) -> f64| {
            let mut t = vec![0.0; (h + 1) * (w + 1)];
            for i in 0..h {
                let mut row = 0.0;
                for j in 0..w {
                    row += f(i * w + j);
                    t[(i + 1) * (w + 1) + j + 1] = t[i * (w + 1) + j + 1] + row;
                }
            }
            t
        };
        let sa = sat(&|k| a[k]);
        let sb = sat(&|k| b[k]);
        let saa = sat(&|k| a[k] * a[k]);
        let sbb = sat(&|k| b[k] * b[k]);
        let sab = sat(&|k| a[k] * b[k]);
        let win = |t: &[f64], i: usize, j: usize| {
            let (i1, j1) = (i + SSIM_WINDOW, j + SSIM_WINDOW);
            t[i1 * (w + 1) + j1] - t[i * (w + 1) + j1] - t[i1 * (w + 1) + j] + t[i * (w + 1) + j]
        };
        for i in 0..=h - SSIM_WINDOW {
            for j in 0..=w - SSIM_WINDOW {
                let mx = win(&sa, i, j) / n;
                let my = win(&sb, i, j) / n;
                let vx = (win(&saa, i, j) / n - mx * mx).max(0.0);
                let vy = (win(&sbb, i, j) / n - my * my).max(0.0);
                let cxy = win(&sab, i, j) / n - mx * my;
                total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2))
                    / ((mx * mx + my * my + C1) * (vx + vy + C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Fraction of `(reconstruction, truth)` pairs whose SSIM exceeds `threshold`.
pub fn reconstruction_rate(pairs: &[(Tensor, Tensor)], threshold: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to score".into()));
    }
    let mut hits = 0usize;
    for (r, t) in pairs {
        if ssim(r, t)? > threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

//! Datasets: the synthetic shape/texture corpus, CIFAR-10 binary ingestion,
//! batch sampling and label rotation.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Public,
    Private,
}

/// Image family of the synthetic corpus. The two families share no class
/// pattern and use separate colour palettes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Geometric,
    Texture,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometric" => Ok(Family::Geometric),
            "texture" => Ok(Family::Texture),
            _ => Err(Error::Config(format!("unknown family {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} outside {classes} classes")));
        }
        let shape = images.first().map(|t| t.shape().to_vec());
        for img in &images {
            if Some(img.shape().to_vec()) != shape || img.rank() != 3 {
                return Err(Error::Data("images must share one [C,H,W] shape".into()));
            }
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Data("pixel outside [0,1]".into()));
            }
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(Tensor::shape)
    }

    /// Stacks the given samples into `[B,C,H,W]` plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut imgs = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self
                .images
                .get(i)
                .ok_or_else(|| Error::Data(format!("index {i} out of range")))?;
            imgs.push(img.clone());
            labels.push(self.labels[i]);
        }
        Ok((Tensor::stack(&imgs)?, labels))
    }

    /// Samples from index range `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            images: self.images[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
            classes: self.classes,
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Draws `b` distinct samples uniformly at random.
pub fn sample_batch(ds: &Dataset, b: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
    if b == 0 || b > ds.len() {
        return Err(Error::Data(format!(
            "batch size {b} not in 1..={}",
            ds.len()
        )));
    }
    let idx = sample(rng, ds.len(), b).into_vec();
    ds.batch(&idx)
}

/// Rotates every label to the next class: `label' = (label + 1) mod classes`.
pub fn mislabel(ds: &Dataset) -> Result<Dataset> {
    if ds.classes < 2 {
        return Err(Error::Data("mislabeling needs at least two classes".into()));
    }
    let mut out = ds.clone();
    for l in &mut out.labels {
        *l = (*l + 1) % ds.classes;
    }
    Ok(out)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses the CIFAR-10 binary layout: per record one label byte then 3072
/// channel-major pixel bytes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Data(format!("record {r}: label {label} > 9")));
        }
        labels.push(label);
        let pix = rec[1..].iter().map(|&p| p as f64 / 255.0).collect();
        images.push(Tensor::new(vec![3, 32, 32], pix)?);
    }
    Dataset::new(images, labels, 10, Split::Private)
}

pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    parse_cifar10(&std::fs::read(path)?)
}

/// Deterministic synthetic corpus. Labels cycle through the classes so
/// every class receives `count / classes` samples (plus at most one).
pub fn synth_dataset(seed: u64, count: usize, classes: usize, size: usize, family: Family) -> Result<Dataset> {
    if size != 16 && size != 32 {
        return Err(Error::Data(format!("unsupported image size {size}")));
    }
    if classes == 0 || classes > 10 {
        return Err(Error::Data(format!("classes must be in 1..=10, got {classes}")));
    }
    let mut rng = rng_from_seed(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % classes;
        let img = match family {
            Family::Geometric => draw_shape(label, size, &mut rng),
            Family::Texture => draw_texture(label, size, &mut rng),
        };
        images.push(img);
        labels.push(label);
    }
    Dataset::new(images, labels, classes, Split::Public)
}

fn uniform3(rng: &mut Rng, lo: f64, hi: f64) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(lo..hi))
}

/// Renders `coverage(u, v) in [0,1]` over a `size x size` canvas with 2x2
/// supersampling, blending foreground over background.
fn render(
    size: usize,
    bg: impl Fn(f64, f64) -> [f64; 3],
    fg: [f64; 3],
    inside: impl Fn(f64, f64) -> bool,
) -> Tensor {
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for (dy, dx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if inside(x as f64 + dx, y as f64 + dy) {
                    hits += 1;
                }
            }
            let a = hits as f64 / 4.0;
            let b = bg(x as f64 + 0.5, y as f64 + 0.5);
            for c in 0..3 {
                data[c * size * size + y * size + x] = (a * fg[c] + (1.0 - a) * b[c]).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("consistent shape")
}

fn draw_shape(label: usize, size: usize, rng: &mut Rng) -> Tensor {
    let s = size as f64;
    let c0 = uniform3(rng, 0.55, 1.0);
    let c1 = uniform3(rng, 0.55, 1.0);
    let fg = uniform3(rng, 0.0, 0.45);
    let (gx, gy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let cx = rng.random_range(0.38..0.62) * s;
    let cy = rng.random_range(0.38..0.62) * s;
    let r = rng.random_range(0.24..0.36) * s;
    let theta: f64 = rng.random_range(-0.35..0.35);
    let (sin, cos) = theta.sin_cos();
    let bg = move |x: f64, y: f64| {
        let t = (0.5 + 0.5 * (gx * (x / s - 0.5) + gy * (y / s - 0.5))).clamp(0.0, 1.0);
        [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t)
    };
    let shape = label % 10;
    let inside = move |x: f64, y: f64| {
        let (dx, dy) = ((x - cx) / r, (y - cy) / r);
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        match shape {
            0 => u * u + v * v <= 1.0,
            1 => u.abs().max(v.abs()) <= 0.8,
            2 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            3 => v <= 0.7 && v >= -1.0 && u.abs() <= 0.9 * (v + 1.0) / 1.7,
            4 => (0.45..=1.0).contains(&(u * u + v * v)),
            5 => u.abs() <= 1.0 && v.abs() <= 1.0 && (((v + 1.0) * 2.5).floor() as i64) % 2 == 0,
            6 => u.abs() + v.abs() <= 1.0,
            7 => ((u - v).abs() <= 0.4 || (u + v).abs() <= 0.4) && u.abs().max(v.abs()) <= 1.0,
            8 => {
                let (a, b) = (u.abs() - 0.55, v.abs() - 0.55);
                a * a + b * b <= 0.35 * 0.35
            }
            _ => u * u + v * v <= 1.0 && v >= 0.0,
        }
    };
    render(size, bg, fg, inside)
}

fn draw_texture(label: usize, size: usize, rng: &mut Rng) -> Tensor {
    let s = size as f64;
    let c0 = uniform3(rng, 0.0, 0.4);
    let fg = uniform3(rng, 0.3, 0.75);
    let period = rng.random_range(3.0..6.0) * s / 16.0;
    let phase = rng.random_range(0.0..period);
    let (ox, oy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let kind = label % 10;
    let band = move |t: f64| ((t + phase) / period).rem_euclid(1.0) < 0.5;
    let inside = move |x: f64, y: f64| match kind {
        0 => band(y),
        1 => band(x),
        2 => band((x + y) / std::f64::consts::SQRT_2),
        3 => band(x) ^ band(y),
        4 => waves.iter().map(|&(a, b, p)| (a * x + b * y + p).sin()).sum::<f64>() > 0.0,
        5 => !(band(x) && band(y)),
        6 => band(((x - ox).powi(2) + (y - oy).powi(2)).sqrt()),
        7 => {
            let (a, b) = (
                ((x + phase) / period).rem_euclid(1.0) - 0.5,
                ((y + phase) / period).rem_euclid(1.0) - 0.5,
            );
            a * a + b * b < 0.09
        }
        8 => band(y + (x / period * std::f64::consts::PI).sin() * period * 0.5),
        _ => band(x - y),
    };
    render(size, move |_, _| c0, fg, inside)
}

/// Binary PPM (P6) of a `[3,H,W]` or `[1,H,W]` image in `[0,1]`. Values
/// are clamped and rounded to 8 bits; a single channel is replicated.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("encode_ppm", format!("expected [C,H,W], got {:?}", image.shape())));
    };
    if c != 1 && c != 3 {
        return Err(Error::shape("encode_ppm", format!("{c} channels")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let px = |ch: usize, i: usize| (image.data()[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(px(if c == 1 { 0 } else { ch }, i));
        }
    }
    Ok(out)
}

/// Inverse of [`encode_ppm`] for 8-bit P6 files; returns `[3,H,W]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |why: &str| Error::Data(format!("ppm: {why}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only 8-bit P6 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let body = &bytes[pos + 1..];
    if body.len() != 3 * w * h {
        return Err(bad("pixel data length"));
    }
    Tensor::new(
        vec![3, h, w],
        (0..3 * h * w)
            .map(|k| {
                let (ch, i) = (k / (h * w), k % (h * w));
                f64::from(body[3 * i + ch]) / 255.0
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_dataset(3, 100, 4, 16, Family::Geometric).unwrap();
        let b = synth_dataset(3, 100, 4, 16, Family::Geometric).unwrap();
        assert_eq!(a, b);
        let mut hist = [0usize; 4];
        for &l in &a.labels {
            hist[l] += 1;
        }
        assert!(hist.iter().all(|&h| h >= 20));
        assert!(a.images.iter().all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(synth_dataset(3, 10, 4, 24, Family::Geometric).is_err());
        assert!(synth_dataset(3, 10, 11, 16, Family::Geometric).is_err());
    }

    #[test]
    fn families_are_separated() {
        let g = synth_dataset(1, 30, 10, 16, Family::Geometric).unwrap();
        let t = synth_dataset(2, 30, 10, 16, Family::Texture).unwrap();
        let mse = |a: &Tensor, b: &Tensor| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
        };
        let mean_pairs = |xs: &[Tensor], ys: &[Tensor], same: bool| {
            let mut s = 0.0;
            let mut n = 0;
            for (i, x) in xs.iter().enumerate() {
                for (j, y) in ys.iter().enumerate() {
                    if same && i >= j {
                        continue;
                    }
                    s += mse(x, y);
                    n += 1;
                }
            }
            s / n as f64
        };
        let between = mean_pairs(&g.images, &t.images, false);
        assert!(between > mean_pairs(&g.images, &g.images, true));
        assert!(between > mean_pairs(&t.images, &t.images, true));
    }

    fn fixture() -> Vec<u8> {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3;
        bytes[CIFAR_RECORD] = 9;
        for k in 0..3072 {
            bytes[CIFAR_RECORD + 1 + k] = (k % 256) as u8;
        }
        bytes
    }

    #[test]
    fn cifar_fixture_pixels() {
        let ds = parse_cifar10(&fixture()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 9]);
        assert!(ds.images[0].data().iter().all(|&v| v == 0.0));
        let img = &ds.images[1];
        // channel 1, row 0, column 5 is byte 1024 + 5 of the pixel block
        assert_eq!(img.data()[1024 + 5], ((1024 + 5) % 256) as f64 / 255.0);
        assert_eq!(img.data()[255], 1.0);
        assert_eq!(img.data()[3071], 255.0 / 255.0);
    }

    #[test]
    fn cifar_errors() {
        let mut bytes = fixture();
        bytes.pop();
        assert!(parse_cifar10(&bytes).is_err());
        let mut bytes = fixture();
        bytes[0] = 10;
        assert!(parse_cifar10(&bytes).is_err());
    }

    #[test]
    fn mislabel_rotates() {
        let ds = Dataset::new(vec![Tensor::zeros(&[1, 1, 1]); 3], vec![0, 1, 2], 3, Split::Private).unwrap();
        assert_eq!(mislabel(&ds).unwrap().labels, vec![1, 2, 0]);
        let two = Dataset::new(vec![Tensor::zeros(&[1, 1, 1]); 2], vec![0, 1], 2, Split::Private).unwrap();
        assert_eq!(mislabel(&mislabel(&two).unwrap()).unwrap().labels, two.labels);
        let one = Dataset::new(vec![Tensor::zeros(&[1, 1, 1])], vec![0], 1, Split::Private).unwrap();
        assert!(mislabel(&one).is_err());
    }

    #[test]
    fn sampling() {
        let ds = synth_dataset(5, 12, 3, 16, Family::Texture).unwrap();
        let mut rng = rng_from_seed(1);
        let (x, labels) = sample_batch(&ds, 12, &mut rng).unwrap();
        let mut rows: Vec<Vec<u64>> = (0..12)
            .map(|i| x.select(i).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut want: Vec<Vec<u64>> = ds
            .images
            .iter()
            .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        want.sort();
        assert_eq!(rows, want);
        assert_eq!(labels.len(), 12);
        let a = sample_batch(&ds, 3, &mut rng_from_seed(9)).unwrap();
        let b = sample_batch(&ds, 3, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
        assert!(sample_batch(&ds, 13, &mut rng).is_err());
    }

    proptest::proptest! {
        #[test]
        fn mislabel_has_no_fixed_point(labels in proptest::collection::vec(0usize..5, 1..20)) {
            let n = labels.len();
            let ds = Dataset::new(vec![Tensor::zeros(&[1, 1, 1]); n], labels.clone(), 5, Split::Private).unwrap();
            let out = mislabel(&ds).unwrap();
            for (a, b) in labels.iter().zip(&out.labels) {
                proptest::prop_assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn ppm_roundtrip_is_exact_on_8bit_values() {
        let img = Tensor::from_fn(&[3, 4, 5], |i| ((i * 37) % 256) as f64 / 255.0);
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n5 4\n255\n"));
        assert_eq!(bytes.len(), 11 + 60);
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back.shape(), &[3, 4, 5]);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(decode_ppm(&bytes[..20]).is_err());
        assert!(encode_ppm(&Tensor::zeros(&[2, 4, 4])).is_err());
    }
}

//! Client-side screening of a broadcast model for handcrafted parameters,
//! plus constructors for the handcrafted patterns themselves.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{Classifier, FeatureExtractor, FeatureExtractorSpec, Head, LayerSpec, SpabHead};
use crate::tensor::Tensor;

pub const DEFAULT_BIN_WIDTH: f64 = 1e-6;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Shannon entropy of the value histogram (bins `floor(v / bin_width)`),
/// divided by `ln(len)`. Vectors shorter than two elements score 1.0.
pub fn normalized_entropy(w: &[f64], bin_width: f64) -> Result<f64> {
    if !(bin_width > 0.0) {
        return Err(Error::InvalidArgument(format!("bin width {bin_width} must be positive")));
    }
    if w.len() < 2 {
        return Ok(1.0);
    }
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &v in w {
        *counts.entry((v / bin_width).floor() as i64).or_default() += 1;
    }
    let n = w.len() as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok((h / n.ln()).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVectorReport {
    pub layer: String,
    pub index: usize,
    pub size: usize,
    pub entropy: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub vectors: Vec<WeightVectorReport>,
    pub min_entropy: f64,
    pub p3_entropy: f64,
    pub threshold: f64,
    pub checksum: String,
    /// `Some(false)` when an expected architecture was supplied and differs.
    pub structure_matches: Option<bool>,
    pub anomalous: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub bin_width: f64,
    pub threshold: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            bin_width: DEFAULT_BIN_WIDTH,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Weight vectors of a classifier: one per output channel of each conv
/// layer, one per linear layer (head layers included). Biases are not
/// scanned.
pub fn weight_vectors(model: &Classifier) -> Vec<(String, usize, Vec<f64>)> {
    let mut out = Vec::new();
    for (name, layer, w) in model.extractor.weight_layers() {
        match layer {
            LayerSpec::Conv { out_ch, .. } => {
                let per = w.len() / out_ch;
                for o in 0..out_ch {
                    out.push((name.clone(), o, w.data()[o * per..(o + 1) * per].to_vec()));
                }
            }
            _ => out.push((name, 0, w.data().to_vec())),
        }
    }
    match &model.head {
        Head::Linear(h) => out.push(("head.w".into(), 0, h.w.data().to_vec())),
        Head::Spab(h) => {
            out.push(("head.w".into(), 0, h.w.data().to_vec()));
            out.push(("head.w2".into(), 0, h.w2.data().to_vec()));
        }
    }
    out
}

/// Entropy scan of every weight vector. With `expected` set, a differing
/// structural checksum also makes the verdict anomalous.
pub fn scan_model(model: &Classifier, cfg: &ScanConfig, expected: Option<&str>) -> Result<ScanReport> {
    if !(cfg.threshold > 0.0 && cfg.threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {} outside (0,1]", cfg.threshold)));
    }
    let mut vectors = Vec::new();
    for (layer, index, w) in weight_vectors(model) {
        let entropy = normalized_entropy(&w, cfg.bin_width)?;
        vectors.push(WeightVectorReport {
            layer,
            index,
            size: w.len(),
            entropy,
            flagged: entropy < cfg.threshold,
        });
    }
    let mut ent: Vec<f64> = vectors.iter().map(|r| r.entropy).collect();
    ent.sort_by(f64::total_cmp);
    let min_entropy = ent.first().copied().unwrap_or(1.0);
    let p3_entropy = percentile(&ent, 3.0);
    let descriptor = model.descriptor();
    let checksum = format!("{:016x}", structural_checksum(&descriptor));
    let structure_matches = expected.map(|e| structural_checksum(e) == structural_checksum(&descriptor));
    let anomalous = vectors.iter().any(|r| r.flagged) || structure_matches == Some(false);
    Ok(ScanReport {
        vectors,
        min_entropy,
        p3_entropy,
        threshold: cfg.threshold,
        checksum,
        structure_matches,
        anomalous,
    })
}

/// Linear-interpolated percentile of sorted values.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return 1.0;
    }
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Order-sensitive 64-bit digest of an architecture descriptor.
pub fn structural_checksum(descriptor: &str) -> u64 {
    let digest = Sha256::digest(descriptor.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn write_report_csv<W: Write>(out: W, report: &ScanReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "index", "size", "entropy", "flagged"])
        .map_err(crate::training::csv_err)?;
    for r in &report.vectors {
        w.write_record([
            r.layer.clone(),
            r.index.to_string(),
            r.size.to_string(),
            format!("{:.6}", r.entropy),
            r.flagged.to_string(),
        ])
        .map_err(crate::training::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `[in_ch, in_ch, k, k]` kernel whose output channel `i` copies input
/// channel `i`.
pub fn make_identity_kernel(in_ch: usize, k: usize) -> Result<Tensor> {
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("identity kernel needs odd size, got {k}")));
    }
    let c = k / 2;
    let mut t = Tensor::zeros(&[in_ch, in_ch, k, k]);
    for i in 0..in_ch {
        t.data_mut()[((i * in_ch + i) * k + c) * k + c] = 1.0;
    }
    Ok(t)
}

pub fn make_zero_kernel(out_ch: usize, in_ch: usize, k: usize) -> Tensor {
    Tensor::zeros(&[out_ch, in_ch, k, k])
}

/// Robbing-the-fed style measurement block: every first-layer output
/// measures mean brightness (all rows identical), biases are evenly spaced
/// cut-offs, and every class reads the same second-layer column.
pub fn make_rtf_module(m: usize, n: usize, classes: usize) -> Result<SpabHead> {
    if m == 0 || n == 0 || classes == 0 {
        return Err(Error::InvalidArgument("RtF module needs positive sizes".into()));
    }
    let w = Tensor::full(&[m, n], 1.0 / m as f64);
    let b = Tensor::from_fn(&[n], |j| -(j as f64) / n as f64);
    let col: Vec<f64> = (0..n).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let w2 = Tensor::from_fn(&[n, classes], |i| col[i / classes]);
    SpabHead::from_parts(w, b, w2, Tensor::zeros(&[classes]))
}

/// Overwrites the first `count` output channels of every conv layer with
/// identity kernels (each copying one input channel).
pub fn plant_identity_kernels(model: &Classifier, count: usize) -> Result<Classifier> {
    plant_conv(model, count, |in_ch, k, o| {
        let c = k / 2;
        let mut v = vec![0.0; in_ch * k * k];
        v[((o % in_ch) * k + c) * k + c] = 1.0;
        v
    })
}

pub fn plant_zero_kernels(model: &Classifier, count: usize) -> Result<Classifier> {
    plant_conv(model, count, |in_ch, k, _| vec![0.0; in_ch * k * k])
}

fn plant_conv(model: &Classifier, count: usize, kernel: impl Fn(usize, usize, usize) -> Vec<f64>) -> Result<Classifier> {
    let spec = model.extractor.spec().clone();
    let mut params = model.extractor.params().to_vec();
    let mut pi = 0;
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv {
                in_ch, out_ch, kernel: k, ..
            } => {
                if k % 2 == 0 {
                    return Err(Error::InvalidArgument("identity kernels need odd sizes".into()));
                }
                let per = in_ch * k * k;
                for o in 0..count.min(out_ch) {
                    params[pi].data_mut()[o * per..(o + 1) * per].copy_from_slice(&kernel(in_ch, k, o));
                }
                pi += 2;
            }
            LayerSpec::Linear { .. } => pi += 2,
            _ => {}
        }
    }
    Ok(Classifier {
        extractor: FeatureExtractor::from_params(spec, params)?,
        head: model.head.clone(),
    })
}

/// Replaces the head with an RtF measurement block of width `n`.
pub fn plant_rtf_head(model: &Classifier, n: usize) -> Result<Classifier> {
    Ok(Classifier {
        extractor: model.extractor.clone(),
        head: Head::Spab(make_rtf_module(model.extractor.ir_dim(), n, model.classes())?),
    })
}

/// Appends an identity linear layer after the IR: an inserted layer that
/// changes the structure but not the function.
pub fn insert_identity_layer(model: &Classifier) -> Result<Classifier> {
    let m = model.extractor.ir_dim();
    let mut spec: FeatureExtractorSpec = model.extractor.spec().clone();
    spec.layers.push(LayerSpec::Linear { inputs: m, outputs: m });
    let mut params = model.extractor.params().to_vec();
    params.push(Tensor::from_fn(&[m, m], |i| f64::from(i / m == i % m)));
    params.push(Tensor::zeros(&[m]));
    Ok(Classifier {
        extractor: FeatureExtractor::from_params(spec, params)?,
        head: model.head.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{load_checkpoint, save_checkpoint, Model};
    use crate::rng::rng_from_seed;
    use crate::tensor::Graph;
    use rand::Rng as _;

    fn random_model(seed: u64) -> Classifier {
        let mut rng = rng_from_seed(seed);
        Classifier {
            extractor: FeatureExtractor::init(FeatureExtractorSpec::desk_default(16, 32), &mut rng).unwrap(),
            head: Head::Spab(SpabHead::init(32, 32, 4, &mut rng)),
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(normalized_entropy(&[0.5; 7], 1e-6).unwrap(), 0.0);
        let four = [0.0, 1.0, 2.0, 3.0];
        assert!((normalized_entropy(&four, 1e-6).unwrap() - 1.0).abs() < 1e-15);
        let two = [0.0, 0.0, 1.0, 1.0];
        assert!((normalized_entropy(&two, 1e-6).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(normalized_entropy(&[3.0], 1e-6).unwrap(), 1.0);
        assert!(normalized_entropy(&two, 0.0).is_err());
        // negative values bin by floor: -0.5e-6 and 0.5e-6 land in different bins
        assert!((normalized_entropy(&[-0.5e-6, 0.5e-6], 1e-6).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_is_shift_invariant_by_bin_multiples() {
        let mut rng = rng_from_seed(2);
        let w: Vec<f64> = (0..50).map(|_| (rng.random_range(-20..20) as f64 + 0.5) * 1e-6).collect();
        let shifted: Vec<f64> = w.iter().map(|v| v + 10.0 * 1e-6).collect();
        assert_eq!(normalized_entropy(&w, 1e-6).unwrap(), normalized_entropy(&shifted, 1e-6).unwrap());
    }

    #[test]
    fn fixtures_behave() {
        let id = make_identity_kernel(3, 3).unwrap();
        let mut rng = rng_from_seed(1);
        let img = Tensor::from_fn(&[1, 3, 5, 5], |_| rng.random::<f64>());
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let k = g.constant(id);
        let y = g.conv2d(x, k, None, 1).unwrap();
        assert_eq!(g.value(y), &img);
        let z = g.constant(make_zero_kernel(2, 3, 3));
        let y = g.conv2d(x, z, None, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert!(make_identity_kernel(3, 2).is_err());
        let rtf = make_rtf_module(6, 5, 3).unwrap();
        for i in 0..6 {
            assert_eq!(rtf.w.row(i), rtf.w.row(0));
        }
        for c in 0..3 {
            assert_eq!(rtf.w2.column(c), rtf.w2.column(0));
        }
    }

    #[test]
    fn random_model_is_clean_and_fixtures_are_flagged() {
        let m = random_model(3);
        let cfg = ScanConfig::default();
        let clean = scan_model(&m, &cfg, None).unwrap();
        assert!(!clean.anomalous && clean.min_entropy > 0.8, "{}", clean.min_entropy);
        assert_eq!(clean.vectors.len(), 16 + 32 + 1 + 2);
        let fixtures = [
            plant_identity_kernels(&m, 3).unwrap(),
            plant_zero_kernels(&m, 1).unwrap(),
            plant_rtf_head(&m, 32).unwrap(),
            insert_identity_layer(&m).unwrap(),
        ];
        for f in &fixtures {
            let r = scan_model(f, &cfg, Some(&m.descriptor())).unwrap();
            assert!(r.anomalous && r.min_entropy < 0.5);
        }
        let both = plant_rtf_head(&plant_identity_kernels(&m, 3).unwrap(), 32).unwrap();
        assert!(scan_model(&both, &cfg, None).unwrap().min_entropy < 0.01);
        let moved = insert_identity_layer(&m).unwrap();
        assert_eq!(scan_model(&moved, &cfg, Some(&m.descriptor())).unwrap().structure_matches, Some(false));
    }

    #[test]
    fn checksum_properties() {
        let spec = FeatureExtractorSpec::desk_default(16, 32);
        let d = spec.descriptor();
        assert_eq!(structural_checksum(&d), structural_checksum(&d));
        let mut longer = spec.clone();
        longer.layers.push(LayerSpec::Linear { inputs: 32, outputs: 32 });
        assert_ne!(structural_checksum(&longer.descriptor()), structural_checksum(&d));
        let mut swapped = spec.clone();
        swapped.layers.swap(1, 2);
        assert_ne!(swapped.descriptor(), d);
        assert_ne!(structural_checksum(&swapped.descriptor()), structural_checksum(&d));
    }

    #[test]
    fn roundtrip_scan_is_identical() {
        let m = plant_identity_kernels(&random_model(4), 2).unwrap();
        let Model::Classifier(back) = load_checkpoint(&save_checkpoint(&Model::Classifier(m.clone()))).unwrap() else {
            panic!()
        };
        let cfg = ScanConfig::default();
        assert_eq!(scan_model(&m, &cfg, None).unwrap(), scan_model(&back, &cfg, None).unwrap());
    }
}

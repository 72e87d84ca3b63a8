//! Concrete networks and their on-disk form.

pub mod checkpoint;
mod extractor;
mod generator;
mod head;

use std::path::Path;

pub use checkpoint::Checkpoint;
pub use extractor::{FeatureExtractor, FeatureExtractorSpec, LayerSpec};
pub use generator::{Generator, GeneratorSpec};
pub use head::{Head, HeadVars, LinearHead, SpabForward, SpabHead};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Feature extractor followed by a classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub extractor: FeatureExtractor,
    pub head: Head,
}

impl Classifier {
    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn descriptor(&self) -> String {
        format!(
            "classifier|{}|{}",
            self.extractor.spec().descriptor(),
            self.head.descriptor()
        )
    }

    /// Logits for a `[B,C,H,W]` batch without gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let fe = self.extractor.bind(&mut g, false);
        let hv = self.head.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.extractor.forward(&mut g, &fe, xv)?;
        let logits = self.head.logits(&mut g, &hv, y)?;
        Ok(g.value(logits).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.descriptor());
        for (name, t) in self.extractor.named_params() {
            ck.push(name, t.clone());
        }
        for (name, t) in self.head.param_names().iter().zip(self.head.params()) {
            ck.push(*name, t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let parts: Vec<&str> = ck.descriptor.split('|').collect();
        let [kind, fe_desc, head_desc] = parts.as_slice() else {
            return Err(Error::Checkpoint(format!(
                "unknown architecture descriptor {:?}",
                ck.descriptor
            )));
        };
        if *kind != "classifier" {
            return Err(Error::Checkpoint(format!("not a classifier: {kind:?}")));
        }
        let spec = FeatureExtractorSpec::parse_descriptor(fe_desc)?;
        let names: Vec<String> = {
            let probe = FeatureExtractor::from_params(
                spec.clone(),
                spec_param_placeholders(&spec)?,
            )?;
            probe.named_params().into_iter().map(|(n, _)| n).collect()
        };
        let params = names
            .iter()
            .map(|n| ck.get(n).cloned())
            .collect::<Result<Vec<_>>>()?;
        let extractor = FeatureExtractor::from_params(spec, params)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let head = parse_head(head_desc, ck)?;
        if head_ir_dim(&head) != extractor.ir_dim() {
            return Err(Error::Checkpoint("head input width differs from IR dimension".into()));
        }
        Ok(Self { extractor, head })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn head_ir_dim(head: &Head) -> usize {
    match head {
        Head::Linear(h) => h.w.shape()[0],
        Head::Spab(h) => h.ir_dim(),
    }
}

fn spec_param_placeholders(spec: &FeatureExtractorSpec) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                out.push(Tensor::zeros(&[out_ch, in_ch, kernel, kernel]));
                out.push(Tensor::zeros(&[out_ch]));
            }
            LayerSpec::Linear { inputs, outputs } => {
                out.push(Tensor::zeros(&[inputs, outputs]));
                out.push(Tensor::zeros(&[outputs]));
            }
            _ => {}
        }
    }
    Ok(out)
}

fn parse_args(token: &str, name: &str) -> Option<Vec<usize>> {
    let inner = token.strip_prefix(name)?.strip_prefix('(')?.strip_suffix(')')?;
    inner.split(',').map(|v| v.trim().parse().ok()).collect()
}

fn parse_head(desc: &str, ck: &Checkpoint) -> Result<Head> {
    let shape_err = |e: Error| Error::Checkpoint(e.to_string());
    if let Some(args) = parse_args(desc, "spab") {
        let [m, n, c] = args[..] else {
            return Err(Error::Checkpoint(format!("bad head {desc:?}")));
        };
        let head = SpabHead::from_parts(
            ck.get("head.w")?.clone(),
            ck.get("head.b")?.clone(),
            ck.get("head.w2")?.clone(),
            ck.get("head.b2")?.clone(),
        )
        .map_err(shape_err)?;
        if (head.ir_dim(), head.width(), head.classes()) != (m, n, c) {
            return Err(Error::Checkpoint("head tensors disagree with descriptor".into()));
        }
        return Ok(Head::Spab(head));
    }
    if let Some(args) = parse_args(desc, "linear") {
        let [m, c] = args[..] else {
            return Err(Error::Checkpoint(format!("bad head {desc:?}")));
        };
        let w = ck.get("head.w")?.clone();
        let b = ck.get("head.b")?.clone();
        if w.shape() != [m, c] || b.shape() != [c] {
            return Err(Error::Checkpoint("head tensors disagree with descriptor".into()));
        }
        return Ok(Head::Linear(LinearHead { w, b }));
    }
    Err(Error::Checkpoint(format!("unknown head {desc:?}")))
}

impl Generator {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.spec().descriptor());
        for (i, p) in self.params().iter().enumerate() {
            ck.push(format!("gen.{i}"), p.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec = GeneratorSpec::parse_descriptor(&ck.descriptor)?;
        let params = ck.tensors.iter().map(|(_, t)| t.clone()).collect();
        Generator::from_params(spec, params).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Any network that can live in a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Classifier(Classifier),
    Generator(Generator),
}

pub fn save_checkpoint(model: &Model) -> Vec<u8> {
    match model {
        Model::Classifier(c) => c.to_checkpoint().to_bytes(),
        Model::Generator(g) => g.to_checkpoint().to_bytes(),
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Model> {
    let ck = Checkpoint::from_bytes(bytes)?;
    if ck.descriptor.starts_with("classifier|") {
        Ok(Model::Classifier(Classifier::from_checkpoint(&ck)?))
    } else if ck.descriptor.starts_with("generator;") {
        Ok(Model::Generator(Generator::from_checkpoint(&ck)?))
    } else {
        Err(Error::Checkpoint(format!(
            "unknown architecture descriptor {:?}",
            ck.descriptor
        )))
    }
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// One stage of a feed-forward feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        padding: usize,
    },
    Relu,
    MaxPool,
    Flatten,
    Linear {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    pub fn token(&self) -> String {
        match *self {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                padding,
            } => format!("conv({in_ch},{out_ch},{kernel},{padding})"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::MaxPool => "maxpool".into(),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::Linear { inputs, outputs } => format!("linear({inputs},{outputs})"),
        }
    }

    pub fn parse(token: &str) -> Result<Self> {
        let unknown = || Error::Checkpoint(format!("unknown layer {token:?}"));
        let (name, args) = match token.split_once('(') {
            Some((n, rest)) => {
                let inner = rest.strip_suffix(')').ok_or_else(unknown)?;
                let args = inner
                    .split(',')
                    .map(|a| a.trim().parse::<usize>().map_err(|_| unknown()))
                    .collect::<Result<Vec<_>>>()?;
                (n, args)
            }
            None => (token, Vec::new()),
        };
        match (name, args.as_slice()) {
            ("conv", &[in_ch, out_ch, kernel, padding]) => Ok(LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                padding,
            }),
            ("relu", []) => Ok(LayerSpec::Relu),
            ("maxpool", []) => Ok(LayerSpec::MaxPool),
            ("flatten", []) => Ok(LayerSpec::Flatten),
            ("linear", &[inputs, outputs]) => Ok(LayerSpec::Linear { inputs, outputs }),
            _ => Err(unknown()),
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![vec![out_ch, in_ch, kernel, kernel], vec![out_ch]],
            LayerSpec::Linear { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            _ => Vec::new(),
        }
    }
}

/// Architecture of `h_F`: an input shape and a layer list ending in the IR.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureExtractorSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl FeatureExtractorSpec {
    /// conv(3->16)-relu-pool, conv(16->32)-relu-pool, flatten, linear -> `ir_dim`.
    pub fn desk_default(image_size: usize, ir_dim: usize) -> Self {
        let flat = 32 * (image_size / 4) * (image_size / 4);
        Self {
            input: [3, image_size, image_size],
            layers: vec![
                LayerSpec::Conv {
                    in_ch: 3,
                    out_ch: 16,
                    kernel: 3,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Conv {
                    in_ch: 16,
                    out_ch: 32,
                    kernel: 3,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    inputs: flat,
                    outputs: ir_dim,
                },
            ],
        }
    }

    /// Walks the layer list and returns the IR dimension, checking every
    /// layer against the running activation shape.
    pub fn validate(&self) -> Result<usize> {
        let bad = |msg: String| Err(Error::Config(format!("feature extractor: {msg}")));
        let mut shape: Vec<usize> = self.input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    padding,
                } => {
                    if shape.len() != 3 || shape[0] != in_ch || kernel == 0 {
                        return bad(format!("layer {i} conv expects {in_ch} channels, got {shape:?}"));
                    }
                    if shape[1] + 2 * padding < kernel || shape[2] + 2 * padding < kernel {
                        return bad(format!("layer {i} kernel too large"));
                    }
                    shape = vec![
                        out_ch,
                        shape[1] + 2 * padding + 1 - kernel,
                        shape[2] + 2 * padding + 1 - kernel,
                    ];
                }
                LayerSpec::Relu => {}
                LayerSpec::MaxPool => {
                    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                        return bad(format!("layer {i} maxpool on {shape:?}"));
                    }
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                }
                LayerSpec::Flatten => shape = vec![shape.iter().product()],
                LayerSpec::Linear { inputs, outputs } => {
                    if shape != [inputs] {
                        return bad(format!("layer {i} linear expects [{inputs}], got {shape:?}"));
                    }
                    shape = vec![outputs];
                }
            }
        }
        match shape.as_slice() {
            [m] => Ok(*m),
            _ => bad(format!("output must be a vector per sample, got {shape:?}")),
        }
    }

    pub fn descriptor(&self) -> String {
        let [c, h, w] = self.input;
        let mut s = format!("in({c},{h},{w})");
        for l in &self.layers {
            s.push(';');
            s.push_str(&l.token());
        }
        s
    }

    pub fn parse_descriptor(desc: &str) -> Result<Self> {
        let mut tokens = desc.split(';');
        let input = tokens
            .next()
            .and_then(|t| t.strip_prefix("in(")?.strip_suffix(')').map(str::to_owned))
            .ok_or_else(|| Error::Checkpoint(format!("bad extractor descriptor {desc:?}")))?;
        let dims: Vec<usize> = input
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Checkpoint(format!("bad input {input:?}"))))
            .collect::<Result<_>>()?;
        let input: [usize; 3] = dims
            .try_into()
            .map_err(|_| Error::Checkpoint("input must have 3 extents".into()))?;
        let layers = tokens.map(LayerSpec::parse).collect::<Result<Vec<_>>>()?;
        let spec = Self { input, layers };
        spec.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(spec)
    }
}

/// Draws He-uniform weights (`U(±sqrt(6/fan_in))`) and zero biases.
pub(crate) fn init_weight(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// The feature extractor `h_F` with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    spec: FeatureExtractorSpec,
    ir_dim: usize,
    params: Vec<Tensor>,
}

impl FeatureExtractor {
    pub fn init(spec: FeatureExtractorSpec, rng: &mut Rng) -> Result<Self> {
        let ir_dim = spec.validate()?;
        let mut params = Vec::new();
        for layer in &spec.layers {
            let shapes = layer.param_shapes();
            if shapes.is_empty() {
                continue;
            }
            let fan_in: usize = shapes[0].iter().product::<usize>() / shapes[1][0];
            params.push(init_weight(&shapes[0], fan_in, rng));
            params.push(Tensor::zeros(&shapes[1]));
        }
        Ok(Self {
            spec,
            ir_dim,
            params,
        })
    }

    pub fn from_params(spec: FeatureExtractorSpec, params: Vec<Tensor>) -> Result<Self> {
        let ir_dim = spec.validate()?;
        let expected: Vec<Vec<usize>> = spec.layers.iter().flat_map(|l| l.param_shapes()).collect();
        if expected.len() != params.len()
            || expected.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::shape("feature_extractor", "parameter shapes do not match spec"));
        }
        Ok(Self {
            spec,
            ir_dim,
            params,
        })
    }

    pub fn spec(&self) -> &FeatureExtractorSpec {
        &self.spec
    }

    pub fn ir_dim(&self) -> usize {
        self.ir_dim
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.input
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Names paired with parameters, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        let mut it = self.params.iter();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            if !layer.param_shapes().is_empty() {
                out.push((format!("fe.{i}.weight"), it.next().expect("weight")));
                out.push((format!("fe.{i}.bias"), it.next().expect("bias")));
            }
        }
        out
    }

    /// Per-layer weight tensors with their layer kind, for entropy scans.
    pub fn weight_layers(&self) -> Vec<(String, LayerSpec, &Tensor)> {
        let mut out = Vec::new();
        let mut it = self.params.iter();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            if !layer.param_shapes().is_empty() {
                out.push((format!("fe.{i}"), *layer, it.next().expect("weight")));
                it.next();
            }
        }
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect()
    }

    /// Runs `x: [B,C,H,W]` through the layers and returns the `[B, M]` IR batch.
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != self.spec.input {
            return Err(Error::shape(
                "feature_extractor",
                format!("input {:?} vs spec {:?}", s, self.spec.input),
            ));
        }
        let mut h = x;
        let mut p = params.iter();
        for layer in &self.spec.layers {
            h = match *layer {
                LayerSpec::Conv { padding, .. } => {
                    let (w, b) = (*p.next().expect("weight"), *p.next().expect("bias"));
                    g.conv2d(h, w, Some(b), padding)?
                }
                LayerSpec::Relu => g.relu(h)?,
                LayerSpec::MaxPool => g.maxpool2(h)?,
                LayerSpec::Flatten => g.flatten(h)?,
                LayerSpec::Linear { .. } => {
                    let (w, b) = (*p.next().expect("weight"), *p.next().expect("bias"));
                    let z = g.matmul(h, w)?;
                    g.add_bias(z, b)?
                }
            };
        }
        Ok(h)
    }

    /// IRs of a `[B,C,H,W]` batch without recording gradients.
    pub fn irs(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &params, xv)?;
        Ok(g.value(y).clone())
    }
}

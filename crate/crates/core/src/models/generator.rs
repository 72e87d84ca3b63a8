use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

use super::extractor::init_weight;

/// U-net style image generator: three resolution levels, skip connections
/// by channel concatenation, nearest-neighbour upsampling and a sigmoid
/// output. The latent has the same shape as the image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub shape: [usize; 3],
    pub widths: [usize; 3],
}

impl GeneratorSpec {
    pub fn desk_default(image_size: usize) -> Self {
        Self {
            shape: [3, image_size, image_size],
            widths: [16, 32, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.shape;
        if c == 0 || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "generator shape {:?} needs spatial extents divisible by 4",
                self.shape
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("generator widths must be positive".into()));
        }
        Ok(())
    }

    pub fn descriptor(&self) -> String {
        let [c, h, w] = self.shape;
        let [a, b, d] = self.widths;
        format!("generator;in({c},{h},{w});unet({a},{b},{d})")
    }

    pub fn parse_descriptor(desc: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("unknown generator descriptor {desc:?}"));
        let parts: Vec<&str> = desc.split(';').collect();
        let [kind, input, unet] = parts.as_slice() else {
            return Err(bad());
        };
        if *kind != "generator" {
            return Err(bad());
        }
        let nums = |s: &str, prefix: &str| -> Result<[usize; 3]> {
            let inner = s
                .strip_prefix(prefix)
                .and_then(|r| r.strip_suffix(')'))
                .ok_or_else(bad)?;
            let v: Vec<usize> = inner
                .split(',')
                .map(|x| x.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            v.try_into().map_err(|_| bad())
        };
        let spec = Self {
            shape: nums(input, "in(")?,
            widths: nums(unet, "unet(")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// (out, in) channel pairs of the six 3x3 convolutions, in order.
    fn convs(&self) -> [(usize, usize); 6] {
        let c = self.shape[0];
        let [a, b, d] = self.widths;
        [(a, c), (b, a), (d, b), (b, d + b), (a, b + a), (c, a)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    spec: GeneratorSpec,
    params: Vec<Tensor>,
}

impl Generator {
    pub fn init(spec: GeneratorSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        for (out_ch, in_ch) in spec.convs() {
            params.push(init_weight(&[out_ch, in_ch, 3, 3], in_ch * 9, rng));
            params.push(Tensor::zeros(&[out_ch]));
        }
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: GeneratorSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let expected: Vec<Vec<usize>> = spec
            .convs()
            .iter()
            .flat_map(|&(o, i)| [vec![o, i, 3, 3], vec![o]])
            .collect();
        if expected.len() != params.len()
            || expected.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::shape("generator", "parameter shapes do not match spec"));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    /// Maps a `[C,H,W]` or `[1,C,H,W]` latent to a `[1,C,H,W]` image in (0,1).
    pub fn forward(&self, g: &mut Graph, params: &[Var], latent: Var) -> Result<Var> {
        let s = g.shape(latent).to_vec();
        let shape_ok = match s.as_slice() {
            [c, h, w] => [*c, *h, *w] == self.spec.shape,
            [1, c, h, w] => [*c, *h, *w] == self.spec.shape,
            _ => false,
        };
        if !shape_ok {
            return Err(Error::shape(
                "generator",
                format!("latent {s:?} vs image shape {:?}", self.spec.shape),
            ));
        }
        let [c, h, w] = self.spec.shape;
        let x = if s.len() == 3 {
            g.reshape(latent, &[1, c, h, w])?
        } else {
            latent
        };
        let conv = |g: &mut Graph, i: usize, x: Var| -> Result<Var> {
            g.conv2d(x, params[2 * i], Some(params[2 * i + 1]), 1)
        };
        let c1 = conv(g, 0, x)?;
        let e1 = g.relu(c1)?;
        let p1 = g.maxpool2(e1)?;
        let c2 = conv(g, 1, p1)?;
        let e2 = g.relu(c2)?;
        let p2 = g.maxpool2(e2)?;
        let c3 = conv(g, 2, p2)?;
        let e3 = g.relu(c3)?;
        let u2 = g.upsample2(e3)?;
        let k2 = g.concat_channels(u2, e2)?;
        let c4 = conv(g, 3, k2)?;
        let d2 = g.relu(c4)?;
        let u1 = g.upsample2(d2)?;
        let k1 = g.concat_channels(u1, e1)?;
        let c5 = conv(g, 4, k1)?;
        let d1 = g.relu(c5)?;
        let out = conv(g, 5, d1)?;
        g.sigmoid(out)
    }

    /// Generated image for a latent, without gradients.
    pub fn generate(&self, latent: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let s = g.constant(latent.clone());
        let x = self.forward(&mut g, &params, s)?;
        Ok(g.value(x).clone())
    }
}

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

use super::extractor::init_weight;

/// Linear -> ReLU -> linear classification head.
///
/// `w: [M,N]`, `b: [N]`, `w2: [N,C]`, `b2: [C]`; `N` is the block width.
#[derive(Clone, Debug, PartialEq)]
pub struct SpabHead {
    pub w: Tensor,
    pub b: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Graph handles of a bound head.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w: Var,
    pub b: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Values retained from a head forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SpabForward {
    /// `Y w + b`, `[B,N]`.
    pub z: Var,
    /// `relu(z)`.
    pub z_act: Var,
    /// `[B,C]`.
    pub logits: Var,
}

impl SpabHead {
    /// Random weights, zero biases.
    pub fn init(ir_dim: usize, width: usize, classes: usize, rng: &mut Rng) -> Self {
        Self {
            w: init_weight(&[ir_dim, width], ir_dim, rng),
            b: Tensor::zeros(&[width]),
            w2: init_weight(&[width, classes], width, rng),
            b2: Tensor::zeros(&[classes]),
        }
    }

    pub fn from_parts(w: Tensor, b: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let head = Self { w, b, w2, b2 };
        head.check()?;
        Ok(head)
    }

    fn check(&self) -> Result<()> {
        let (ws, bs, w2s, b2s) = (self.w.shape(), self.b.shape(), self.w2.shape(), self.b2.shape());
        let ok = ws.len() == 2
            && w2s.len() == 2
            && bs == [ws[1]]
            && w2s[0] == ws[1]
            && b2s == [w2s[1]];
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "spab_head",
                format!("w {ws:?}, b {bs:?}, w2 {w2s:?}, b2 {b2s:?}"),
            ))
        }
    }

    pub fn ir_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w, &self.b, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w, &mut self.b, &mut self.w2, &mut self.b2]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> HeadVars {
        HeadVars {
            w: g.leaf(self.w.clone(), trainable),
            b: g.leaf(self.b.clone(), trainable),
            w2: g.leaf(self.w2.clone(), trainable),
            b2: g.leaf(self.b2.clone(), trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: HeadVars, y: Var) -> Result<SpabForward> {
        let s = g.shape(y);
        if s.len() != 2 || s[1] != self.ir_dim() {
            return Err(Error::shape(
                "spab_head",
                format!("IR batch {s:?}, head expects width {}", self.ir_dim()),
            ));
        }
        let yw = g.matmul(y, vars.w)?;
        let z = g.add_bias(yw, vars.b)?;
        let z_act = g.relu(z)?;
        let zw = g.matmul(z_act, vars.w2)?;
        let logits = g.add_bias(zw, vars.b2)?;
        Ok(SpabForward { z, z_act, logits })
    }

    /// Plain evaluation: returns `(logits, Z, Z')` as values.
    pub fn evaluate(&self, y: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let yv = g.constant(y.clone());
        let f = self.forward(&mut g, vars, yv)?;
        Ok((
            g.value(f.logits).clone(),
            g.value(f.z).clone(),
            g.value(f.z_act).clone(),
        ))
    }
}

/// Single linear layer `M -> C`, used as the pretraining head.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearHead {
    pub fn init(ir_dim: usize, classes: usize, rng: &mut Rng) -> Self {
        Self {
            w: init_weight(&[ir_dim, classes], ir_dim, rng),
            b: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, w: Var, b: Var, y: Var) -> Result<Var> {
        let z = g.matmul(y, w)?;
        g.add_bias(z, b)
    }
}

/// Either head variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Linear(LinearHead),
    Spab(SpabHead),
}

impl Head {
    pub fn classes(&self) -> usize {
        match self {
            Head::Linear(h) => h.classes(),
            Head::Spab(h) => h.classes(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Head::Linear(h) => vec![&h.w, &h.b],
            Head::Spab(h) => h.params().to_vec(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Head::Linear(h) => vec![&mut h.w, &mut h.b],
            Head::Spab(h) => h.params_mut().into_iter().collect(),
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Head::Linear(_) => &["head.w", "head.b"],
            Head::Spab(_) => &["head.w", "head.b", "head.w2", "head.b2"],
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            Head::Linear(h) => format!("linear({},{})", h.w.shape()[0], h.classes()),
            Head::Spab(h) => format!("spab({},{},{})", h.ir_dim(), h.width(), h.classes()),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect()
    }

    /// Logits for an IR batch given bound parameters (in `params()` order).
    pub fn logits(&self, g: &mut Graph, vars: &[Var], y: Var) -> Result<Var> {
        match self {
            Head::Linear(h) => h.forward(g, vars[0], vars[1], y),
            Head::Spab(h) => {
                let hv = HeadVars {
                    w: vars[0],
                    b: vars[1],
                    w2: vars[2],
                    b2: vars[3],
                };
                Ok(h.forward(g, hv, y)?.logits)
            }
        }
    }
}

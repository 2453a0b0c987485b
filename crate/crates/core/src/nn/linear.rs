use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Float, Var};

/// `y = xW + b` for `x` of shape `L×D_in`; the bias is optional.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            w: store.uniform(format!("{name}.w"), &[d_in, d_out], d_in, rng)?,
            b: Some(store.constant(format!("{name}.b"), &[d_out], 0.0)?),
            d_in,
            d_out,
        })
    }

    pub fn without_bias<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            w: store.uniform(format!("{name}.w"), &[d_in, d_out], d_in, rng)?,
            b: None,
            d_in,
            d_out,
        })
    }

    pub fn forward<S: Float>(&self, g: &Graph<S>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(Error::dim("linear", &shape, &[self.d_in, self.d_out]));
        }
        let xw = g.matmul(x, g.param(self.w))?;
        match self.b {
            Some(b) => {
                let b = g.reshape(g.param(b), vec![1, self.d_out])?;
                g.add(xw, g.tile(b, shape[0])?)
            }
            None => Ok(xw),
        }
    }
}

/// Parametric ReLU with one learned slope.
#[derive(Debug, Clone, Copy)]
pub struct Prelu {
    pub alpha: ParamId,
}

impl Prelu {
    pub fn new<S: Float>(store: &mut ParamStore<S>, name: &str) -> Result<Self> {
        Ok(Self {
            alpha: store.constant(format!("{name}.alpha"), &[1], 0.25)?,
        })
    }

    pub fn forward<S: Float>(&self, g: &Graph<S>, x: Var) -> Result<Var> {
        g.prelu(x, g.param(self.alpha))
    }
}

/// Maps a modality's raw features into the shared clue space:
/// `relu(linear(layer_norm(x)))`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionNet {
    pub gain: ParamId,
    pub bias: ParamId,
    pub linear: Linear,
}

impl ProjectionNet {
    pub const EPS: f64 = 1e-5;

    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            gain: store.constant(format!("{name}.ln.gain"), &[d_in], 1.0)?,
            bias: store.constant(format!("{name}.ln.bias"), &[d_in], 0.0)?,
            linear: Linear::new(store, &format!("{name}.fc"), d_in, d_out, rng)?,
        })
    }

    pub fn forward<S: Float>(&self, g: &Graph<S>, x: Var) -> Result<Var> {
        let h = g.layer_norm(
            x,
            g.param(self.gain),
            g.param(self.bias),
            S::from_f64(Self::EPS),
        )?;
        g.relu(self.linear.forward(g, h)?)
    }
}

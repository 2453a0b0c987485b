use rand_chacha::ChaCha8Rng;

use super::{Graph, Linear, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Float, Var};

/// A learned map from a `T×D` sequence to a `T×D` sequence.
pub trait SequenceMap<S: Float> {
    fn forward(&self, g: &Graph<S>, x: Var) -> Result<Var>;
}

#[derive(Debug, Clone, Copy)]
struct Direction {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

/// Stacked (optionally bidirectional) LSTM. Gate order is
/// input/forget/cell/output.
#[derive(Debug, Clone)]
pub struct LstmStack {
    layers: Vec<Vec<Direction>>,
    pub input: usize,
    pub hidden: usize,
    pub bidirectional: bool,
}

impl LstmStack {
    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        bidirectional: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let dirs = if bidirectional { 2 } else { 1 };
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let d_in = if l == 0 { input } else { hidden * dirs };
            let mut layer = Vec::with_capacity(dirs);
            for d in 0..dirs {
                let p = format!("{name}.l{l}.{}", if d == 0 { "fwd" } else { "bwd" });
                let w_ih = store.uniform(format!("{p}.w_ih"), &[d_in, 4 * hidden], d_in, rng)?;
                let w_hh =
                    store.uniform(format!("{p}.w_hh"), &[hidden, 4 * hidden], hidden, rng)?;
                let b = store.constant(format!("{p}.b"), &[4 * hidden], 0.0)?;
                store.get_mut(b).data_mut()[hidden..2 * hidden].fill(S::one());
                layer.push(Direction { w_ih, w_hh, b });
            }
            layers.push(layer);
        }
        Ok(Self {
            layers,
            input,
            hidden,
            bidirectional,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.hidden * if self.bidirectional { 2 } else { 1 }
    }

    pub fn forward<S: Float>(&self, g: &Graph<S>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            let mut outs = Vec::with_capacity(layer.len());
            for (d, p) in layer.iter().enumerate() {
                outs.push(g.lstm(x, g.param(p.w_ih), g.param(p.w_hh), g.param(p.b), d == 1)?);
            }
            x = if outs.len() == 1 {
                outs[0]
            } else {
                g.concat(&outs, 1)?
            };
        }
        Ok(x)
    }
}

/// An LSTM stack followed by a linear projection back to the input width.
#[derive(Debug, Clone)]
pub struct LstmProjection {
    pub lstm: LstmStack,
    pub proj: Linear,
}

impl LstmProjection {
    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let lstm = LstmStack::new(
            store,
            &format!("{name}.lstm"),
            dim,
            hidden,
            num_layers,
            true,
            rng,
        )?;
        let proj = Linear::new(store, &format!("{name}.proj"), lstm.output_dim(), dim, rng)?;
        Ok(Self { lstm, proj })
    }
}

impl<S: Float> SequenceMap<S> for LstmProjection {
    fn forward(&self, g: &Graph<S>, x: Var) -> Result<Var> {
        let h = self.lstm.forward(g, x)?;
        self.proj.forward(g, h)
    }
}

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::{Graph, Linear, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Float, Var};

/// Scaled dot-product attention with `heads` heads over a model width `dim`.
/// No positional information is added to queries, keys or values.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

/// Attention output `Tq×D` and the per-head weights `h×Tq×Tk`.
#[derive(Debug, Clone, Copy)]
pub struct MhaOutput {
    pub out: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            dim,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            // A key bias shifts every score of a query equally and cancels
            // in the softmax.
            k: Linear::without_bias(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
        })
    }

    /// Attends from `q` (`Tq×D`) over `k`/`v` (`Tk×D`). Keys with
    /// `key_mask[j] == true` are excluded and receive weight 0.
    pub fn forward<S: Float>(
        &self,
        g: &Graph<S>,
        q: Var,
        k: Var,
        v: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<MhaOutput> {
        let (sq, sk, sv) = (g.shape(q), g.shape(k), g.shape(v));
        if sq.len() != 2 || sq[1] != self.dim {
            return Err(Error::dim("attention query", &sq, &[self.dim]));
        }
        if sk != sv || sk.len() != 2 || sk[1] != self.dim {
            return Err(Error::dim("attention key/value", &sk, &sv));
        }
        let (tq, tk) = (sq[0], sk[0]);
        let mask: Option<Rc<[bool]>> = match key_mask {
            None => None,
            Some(m) if m.len() != tk => {
                return Err(Error::dim("attention mask", &[m.len()], &[tk]))
            }
            Some(m) if m.iter().all(|&b| b) => {
                return Err(Error::Contract(
                    "attention key mask excludes every key".into(),
                ))
            }
            Some(m) => Some((0..tq).flat_map(|_| m.iter().copied()).collect()),
        };

        let dh = self.dim / self.heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let qp = self.q.forward(g, q)?;
        let kp = self.k.forward(g, k)?;
        let vp = self.v.forward(g, v)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(qp, 1, h * dh, dh)?;
            let kh = g.slice(kp, 1, h * dh, dh)?;
            let vh = g.slice(vp, 1, h * dh, dh)?;
            let mut scores = g.scale(g.matmul(qh, g.transpose(kh)?)?, scale)?;
            if let Some(m) = &mask {
                scores = g.mask_neg_inf(scores, m.clone())?;
            }
            let a = g.softmax(scores, 1)?;
            outs.push(g.matmul(a, vh)?);
            weights.push(g.reshape(a, vec![1, tq, tk])?);
        }
        let joined = g.concat(&outs, 1)?;
        Ok(MhaOutput {
            out: self.o.forward(g, joined)?,
            weights: g.concat(&weights, 0)?,
        })
    }
}

//! Single-layer, single-direction LSTM recurrence with hand-written
//! backpropagation through time. Gate order is input, forget, cell, output.

use super::Float;

#[inline]
fn sigmoid<S: Float>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Values saved by the forward pass for backward.
#[derive(Debug, Clone)]
pub(crate) struct LstmCache<S> {
    /// Post-activation gates, `T × 4H`.
    pub gates: Vec<S>,
    /// Cell state after each step, `T × H`.
    pub cells: Vec<S>,
}

pub(crate) struct LstmDims {
    pub steps: usize,
    pub input: usize,
    pub hidden: usize,
    pub reverse: bool,
}

impl LstmDims {
    fn order(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.steps).map(move |s| if self.reverse { self.steps - 1 - s } else { s })
    }

    fn prev(&self, t: usize) -> Option<usize> {
        if self.reverse {
            (t + 1 < self.steps).then_some(t + 1)
        } else {
            t.checked_sub(1)
        }
    }
}

/// Runs the recurrence; returns hidden states `T × H` and the cache.
pub(crate) fn forward<S: Float>(
    d: &LstmDims,
    x: &[S],
    w_ih: &[S],
    w_hh: &[S],
    b: &[S],
) -> (Vec<S>, LstmCache<S>) {
    let h4 = 4 * d.hidden;
    let hd = d.hidden;
    let mut z = vec![S::zero(); d.steps * h4];
    for row in z.chunks_mut(h4) {
        row.copy_from_slice(b);
    }
    S::gemm(
        false,
        false,
        d.steps,
        d.input,
        h4,
        S::one(),
        x,
        w_ih,
        S::one(),
        &mut z,
    );

    let mut hs = vec![S::zero(); d.steps * hd];
    let mut cells = vec![S::zero(); d.steps * hd];
    let mut gates = vec![S::zero(); d.steps * h4];
    for t in d.order() {
        let zt = &mut z[t * h4..(t + 1) * h4];
        if let Some(p) = d.prev(t) {
            let hp = &hs[p * hd..(p + 1) * hd];
            for (j, &hv) in hp.iter().enumerate() {
                let wrow = &w_hh[j * h4..(j + 1) * h4];
                zt.iter_mut().zip(wrow).for_each(|(zv, &w)| *zv += hv * w);
            }
        }
        let gt = &mut gates[t * h4..(t + 1) * h4];
        for k in 0..hd {
            gt[k] = sigmoid(zt[k]);
            gt[hd + k] = sigmoid(zt[hd + k]);
            gt[2 * hd + k] = zt[2 * hd + k].tanh();
            gt[3 * hd + k] = sigmoid(zt[3 * hd + k]);
        }
        for k in 0..hd {
            let c_prev = d.prev(t).map_or(S::zero(), |p| cells[p * hd + k]);
            let c = gt[hd + k] * c_prev + gt[k] * gt[2 * hd + k];
            cells[t * hd + k] = c;
            hs[t * hd + k] = gt[3 * hd + k] * c.tanh();
        }
    }
    (hs, LstmCache { gates, cells })
}

pub(crate) struct LstmGrads<S> {
    pub x: Vec<S>,
    pub w_ih: Vec<S>,
    pub w_hh: Vec<S>,
    pub b: Vec<S>,
}

/// Backpropagation through time given the output gradient `g` (`T × H`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<S: Float>(
    d: &LstmDims,
    x: &[S],
    w_ih: &[S],
    w_hh: &[S],
    hs: &[S],
    cache: &LstmCache<S>,
    g: &[S],
) -> LstmGrads<S> {
    let h4 = 4 * d.hidden;
    let hd = d.hidden;
    let mut dz = vec![S::zero(); d.steps * h4];
    let mut dh_rec = vec![S::zero(); hd];
    let mut dc_next = vec![S::zero(); hd];
    let order: Vec<usize> = d.order().collect();
    for &t in order.iter().rev() {
        let gt = &cache.gates[t * h4..(t + 1) * h4];
        let prev = d.prev(t);
        let dzt = &mut dz[t * h4..(t + 1) * h4];
        for k in 0..hd {
            let (i, f, gg, o) = (gt[k], gt[hd + k], gt[2 * hd + k], gt[3 * hd + k]);
            let c = cache.cells[t * hd + k];
            let tc = c.tanh();
            let dh = g[t * hd + k] + dh_rec[k];
            let d_o = dh * tc;
            let dc = dh * o * (S::one() - tc * tc) + dc_next[k];
            let c_prev = prev.map_or(S::zero(), |p| cache.cells[p * hd + k]);
            dzt[k] = dc * gg * i * (S::one() - i);
            dzt[hd + k] = dc * c_prev * f * (S::one() - f);
            dzt[2 * hd + k] = dc * i * (S::one() - gg * gg);
            dzt[3 * hd + k] = d_o * o * (S::one() - o);
            dc_next[k] = dc * f;
        }
        // dh_prev = dz · W_hhᵀ
        for (j, dh) in dh_rec.iter_mut().enumerate() {
            let wrow = &w_hh[j * h4..(j + 1) * h4];
            *dh = wrow.iter().zip(dzt.iter()).map(|(&w, &z)| w * z).sum();
        }
    }

    // Hidden state fed into each step; zero for the first processed step.
    let mut h_prev = vec![S::zero(); d.steps * hd];
    for t in 0..d.steps {
        if let Some(p) = d.prev(t) {
            h_prev[t * hd..(t + 1) * hd].copy_from_slice(&hs[p * hd..(p + 1) * hd]);
        }
    }
    let mut gw_hh = vec![S::zero(); hd * h4];
    S::gemm(
        true,
        false,
        hd,
        d.steps,
        h4,
        S::one(),
        &h_prev,
        &dz,
        S::zero(),
        &mut gw_hh,
    );
    let mut gw_ih = vec![S::zero(); d.input * h4];
    S::gemm(
        true,
        false,
        d.input,
        d.steps,
        h4,
        S::one(),
        x,
        &dz,
        S::zero(),
        &mut gw_ih,
    );
    let mut gx = vec![S::zero(); d.steps * d.input];
    S::gemm(
        false,
        true,
        d.steps,
        h4,
        d.input,
        S::one(),
        &dz,
        w_ih,
        S::zero(),
        &mut gx,
    );
    let mut gb = vec![S::zero(); h4];
    for row in dz.chunks(h4) {
        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    LstmGrads {
        x: gx,
        w_ih: gw_ih,
        w_hh: gw_hh,
        b: gb,
    }
}

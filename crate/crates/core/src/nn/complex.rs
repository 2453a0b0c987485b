use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, SequenceMap};
use crate::error::{Error, Result};
use crate::tensor::{Conv2dGeom, Float, Tape, Var};

/// Real and imaginary parts recorded on a tape, with identical shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexFeature {
    pub real: Var,
    pub imag: Var,
}

impl ComplexFeature {
    pub fn new<S: Float>(tape: &Tape<S>, real: Var, imag: Var) -> Result<Self> {
        let (a, b) = (tape.shape(real), tape.shape(imag));
        if a != b {
            return Err(Error::dim("complex feature", &a, &b));
        }
        Ok(Self { real, imag })
    }

    pub fn shape<S: Float>(&self, tape: &Tape<S>) -> Vec<usize> {
        tape.shape(self.real)
    }

    pub fn map<S: Float>(&self, tape: &Tape<S>, f: impl Fn(Var) -> Result<Var>) -> Result<Self> {
        Self::new(tape, f(self.real)?, f(self.imag)?)
    }
}

/// Complex cross-correlation: `(x_r + i·x_i) ⋆ (k_r + i·k_i)`, with the
/// optional complex bias added per output channel.
///
/// Evaluated as one real convolution of `[x_r; x_i]` with the block kernel
/// `[[k_r, −k_i], [k_i, k_r]]`.
pub fn complex_conv2d<S: Float>(
    tape: &Tape<S>,
    x: ComplexFeature,
    k: ComplexFeature,
    bias: Option<ComplexFeature>,
    geom: Conv2dGeom,
) -> Result<ComplexFeature> {
    check_kernel(tape, k)?;
    let neg = tape.scale(k.imag, -S::one())?;
    let top = tape.concat(&[k.real, neg], 1)?;
    let bottom = tape.concat(&[k.imag, k.real], 1)?;
    let kernel = tape.concat(&[top, bottom], 0)?;
    let y = tape.conv2d(stack(tape, x)?, kernel, stacked_bias(tape, bias)?, geom)?;
    split(tape, y)
}

/// Transposed counterpart of [`complex_conv2d`], kernel laid out
/// `C_in×C_out×kh×kw`. The block kernel is `[[k_r, k_i], [−k_i, k_r]]`.
pub fn complex_conv2d_transpose<S: Float>(
    tape: &Tape<S>,
    x: ComplexFeature,
    k: ComplexFeature,
    bias: Option<ComplexFeature>,
    geom: Conv2dGeom,
) -> Result<ComplexFeature> {
    check_kernel(tape, k)?;
    let neg = tape.scale(k.imag, -S::one())?;
    let top = tape.concat(&[k.real, k.imag], 1)?;
    let bottom = tape.concat(&[neg, k.real], 1)?;
    let kernel = tape.concat(&[top, bottom], 0)?;
    let y = tape.conv2d_transpose(stack(tape, x)?, kernel, stacked_bias(tape, bias)?, geom)?;
    split(tape, y)
}

fn check_kernel<S: Float>(tape: &Tape<S>, k: ComplexFeature) -> Result<()> {
    let (a, b) = (tape.shape(k.real), tape.shape(k.imag));
    if a != b || a.len() != 4 {
        return Err(Error::dim("complex kernel", &a, &b));
    }
    Ok(())
}

fn stack<S: Float>(tape: &Tape<S>, x: ComplexFeature) -> Result<Var> {
    let (a, b) = (tape.shape(x.real), tape.shape(x.imag));
    if a != b || a.len() != 3 {
        return Err(Error::dim("complex input", &a, &b));
    }
    tape.concat(&[x.real, x.imag], 0)
}

fn stacked_bias<S: Float>(tape: &Tape<S>, bias: Option<ComplexFeature>) -> Result<Option<Var>> {
    bias.map(|b| tape.concat(&[b.real, b.imag], 0)).transpose()
}

fn split<S: Float>(tape: &Tape<S>, y: Var) -> Result<ComplexFeature> {
    let c = tape.shape(y)[0] / 2;
    ComplexFeature::new(tape, tape.slice(y, 0, 0, c)?, tape.slice(y, 0, c, c)?)
}

/// A complex (transposed) convolution layer with learned kernel and bias.
#[derive(Debug, Clone, Copy)]
pub struct ComplexConv2d {
    pub k_real: ParamId,
    pub k_imag: ParamId,
    /// Real and imaginary bias, one entry per output channel.
    pub bias: Option<(ParamId, ParamId)>,
    pub geom: Conv2dGeom,
    pub transpose: bool,
}

impl ComplexConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        geom: Conv2dGeom,
        transpose: bool,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let shape = if transpose {
            [c_in, c_out, kh, kw]
        } else {
            [c_out, c_in, kh, kw]
        };
        let fan_in = c_in * kh * kw;
        let k_real = store.uniform(format!("{name}.k_real"), &shape, fan_in, rng)?;
        let k_imag = store.uniform(format!("{name}.k_imag"), &shape, fan_in, rng)?;
        let bias = if bias {
            Some((
                store.constant(format!("{name}.b_real"), &[c_out], 0.0)?,
                store.constant(format!("{name}.b_imag"), &[c_out], 0.0)?,
            ))
        } else {
            None
        };
        Ok(Self {
            k_real,
            k_imag,
            bias,
            geom,
            transpose,
        })
    }

    pub fn forward<S: Float>(&self, g: &Graph<S>, x: ComplexFeature) -> Result<ComplexFeature> {
        let k = ComplexFeature {
            real: g.param(self.k_real),
            imag: g.param(self.k_imag),
        };
        let b = self.bias.map(|(r, i)| ComplexFeature {
            real: g.param(r),
            imag: g.param(i),
        });
        if self.transpose {
            complex_conv2d_transpose(g.tape(), x, k, b, self.geom)
        } else {
            complex_conv2d(g.tape(), x, k, b, self.geom)
        }
    }
}

/// Clue-conditioned complex recurrence over `T×D` features:
/// `F_rr = R(Y_r+c)`, `F_ir = R(Y_i+c)`, `F_ri = I(Y_r+c)`, `F_ii = I(Y_i+c)`,
/// returning `(F_rr − F_ii, F_ri + F_ir)`.
pub fn complex_lstm_enhance<S: Float>(
    g: &Graph<S>,
    y: ComplexFeature,
    clue: Var,
    lstm_r: &dyn SequenceMap<S>,
    lstm_i: &dyn SequenceMap<S>,
) -> Result<ComplexFeature> {
    let ys = y.shape(g.tape());
    let cs = g.shape(clue);
    if ys.len() != 2 || cs != ys || g.shape(y.imag) != ys {
        return Err(Error::Contract(format!(
            "clue shape {cs:?} must equal the feature shape T×D = {ys:?}"
        )));
    }
    let yr = g.add(y.real, clue)?;
    let yi = g.add(y.imag, clue)?;
    let f_rr = lstm_r.forward(g, yr)?;
    let f_ir = lstm_r.forward(g, yi)?;
    let f_ri = lstm_i.forward(g, yr)?;
    let f_ii = lstm_i.forward(g, yi)?;
    ComplexFeature::new(g.tape(), g.sub(f_rr, f_ii)?, g.add(f_ri, f_ir)?)
}

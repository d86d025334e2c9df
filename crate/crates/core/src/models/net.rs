use crate::autodiff::{Tape, Tensor, Var};
use crate::rng::Rng;
use crate::Result;

use super::{Architecture, Flavor, Prepared};

const ENC: usize = 0;
const DEC: usize = 4;
const OUT_W: usize = 8;
const OUT_B: usize = 9;
const HEAD_W1: usize = 4;
const HEAD_B1: usize = 5;
const HEAD_W2: usize = 6;
const HEAD_B2: usize = 7;

/// Dropout mode for a forward pass.
pub enum Dropout<'a> {
    /// Deterministic pass.
    Off,
    /// One stream for the whole batch (training).
    Shared(&'a mut Rng),
    /// One stream per row (batched Monte Carlo passes).
    Rows(&'a mut [Rng]),
}

impl Dropout<'_> {
    fn apply<'t>(&mut self, x: Var<'t>, p: f64) -> Result<Var<'t>> {
        match self {
            Dropout::Off => Ok(x),
            Dropout::Shared(rng) => x.dropout(p, &mut **rng),
            Dropout::Rows(rngs) => x.dropout_rows(p, rngs),
        }
    }
}

/// PyTorch-style GRU cell; `w` holds `[w_in, w_hid, b_in, b_hid]`.
fn gru_cell<'t>(x: Var<'t>, h: Var<'t>, w: &[Var<'t>], hidden: usize) -> Result<Var<'t>> {
    let gi = x.matmul(w[0])?.add(w[2])?;
    let gh = h.matmul(w[1])?.add(w[3])?;
    let gate = |k: usize| -> Result<Var<'t>> {
        gi.slice_cols(k * hidden, (k + 1) * hidden)?
            .add(gh.slice_cols(k * hidden, (k + 1) * hidden)?)?
            .sigmoid()
    };
    let r = gate(0)?;
    let z = gate(1)?;
    let n = gi
        .slice_cols(2 * hidden, 3 * hidden)?
        .add(r.mul(gh.slice_cols(2 * hidden, 3 * hidden)?)?)?
        .tanh()?;
    n.add(z.mul(h.sub(n)?)?)
}

fn step_input(batch: &[&Prepared], k: usize) -> Result<Tensor> {
    let width = batch[0].inputs[k].len();
    let data = batch.iter().flat_map(|p| p.inputs[k].iter().copied()).collect();
    Tensor::matrix(batch.len(), width, data)
}

/// Encoder states after each of the first `steps` inputs.
pub(super) fn encoder_states<'t>(
    arch: &Architecture,
    tape: &'t Tape,
    params: &[Var<'t>],
    batch: &[&Prepared],
    steps: usize,
) -> Result<Vec<Var<'t>>> {
    let mut h = tape.constant(Tensor::zeros(&[batch.len(), arch.hidden]));
    let mut states = Vec::with_capacity(steps);
    for k in 0..steps {
        let x = tape.constant(step_input(batch, k)?);
        h = gru_cell(x, h, &params[ENC..ENC + 4], arch.hidden)?;
        states.push(h);
    }
    Ok(states)
}

pub(super) fn encode<'t>(
    arch: &Architecture,
    tape: &'t Tape,
    params: &[Var<'t>],
    batch: &[&Prepared],
    steps: usize,
) -> Result<Var<'t>> {
    let states = encoder_states(arch, tape, params, batch, steps)?;
    Ok(*states.last().expect("at least one step"))
}

/// One-step g-computation head: normalized `[x̂…, ŷ]` for the next step.
pub(super) fn gnet_head<'t>(
    arch: &Architecture,
    tape: &'t Tape,
    params: &[Var<'t>],
    h: Var<'t>,
    a: Var<'t>,
    dropout: &mut Dropout<'_>,
) -> Result<Var<'t>> {
    let z = tape
        .concat(&[h, a])?
        .matmul(params[HEAD_W1])?
        .add(params[HEAD_B1])?
        .relu()?;
    dropout
        .apply(z, arch.dropout)?
        .matmul(params[HEAD_W2])?
        .add(params[HEAD_B2])
}

/// Normalized horizon outcomes `[rows, τ]`.
///
/// With `teacher` set, the crn-lite decoder is fed the true previous outcome
/// instead of its own prediction.
#[allow(clippy::too_many_arguments)]
pub(super) fn horizon<'t>(
    arch: &Architecture,
    tape: &'t Tape,
    params: &[Var<'t>],
    h0: Var<'t>,
    y_last: Var<'t>,
    a: Var<'t>,
    teacher: Option<Var<'t>>,
    mut dropout: Dropout<'_>,
) -> Result<Var<'t>> {
    let mut outs = Vec::with_capacity(arch.tau);
    let mut h = h0;
    match arch.flavor {
        Flavor::CrnLite => {
            let mut prev = y_last;
            for i in 0..arch.tau {
                let input = tape.concat(&[a.slice_cols(i, i + 1)?, prev])?;
                h = gru_cell(input, h, &params[DEC..DEC + 4], arch.hidden)?;
                let out = dropout
                    .apply(h, arch.dropout)?
                    .matmul(params[OUT_W])?
                    .add(params[OUT_B])?;
                outs.push(out);
                prev = match teacher {
                    Some(t) => t.slice_cols(i, i + 1)?,
                    None => out,
                };
            }
        }
        Flavor::GnetLite => {
            for i in 0..arch.tau {
                let ai = a.slice_cols(i, i + 1)?;
                let o = gnet_head(arch, tape, params, h, ai, &mut dropout)?;
                let y = o.slice_cols(arch.d_x, arch.d_x + 1)?;
                outs.push(y);
                if i + 1 < arch.tau {
                    let input = tape.concat(&[o.slice_cols(0, arch.d_x)?, ai, y])?;
                    h = gru_cell(input, h, &params[ENC..ENC + 4], arch.hidden)?;
                }
            }
        }
    }
    tape.concat(&outs)
}

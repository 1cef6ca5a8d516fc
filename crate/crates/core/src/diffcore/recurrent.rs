use super::{DiffError, Real, Tape, Var};

/// Tape handles of one LSTM layer's weights. Gate blocks along the `4H` axis
/// are ordered input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[C_in × 4H]`
    pub w_ih: Var,
    /// `[H × 4H]`
    pub w_hh: Var,
    /// `[4H]`
    pub bias: Var,
}

/// One LSTM step: returns `(h', c')` for `x[B×C_in]`, `h, c[B×H]`.
pub fn lstm_cell<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    h: Var,
    c: Var,
    w: &LstmWeights,
) -> Result<(Var, Var), DiffError> {
    let (sx, swi) = (tape.shape(x), tape.shape(w.w_ih));
    if sx.len() != 2 || swi.len() != 2 || sx[1] != swi[0] {
        return Err(DiffError::Shape {
            op: "lstm_cell",
            detail: format!("input {sx:?} against W_ih {swi:?}"),
        });
    }
    let xp = tape.matmul(x, w.w_ih)?;
    let xp = tape.add_bias(xp, w.bias)?;
    lstm_cell_projected(tape, xp, h, c, w.w_hh)
}

/// LSTM step given the already projected input `x·W_ih + b` (`[B×4H]`).
/// Sequence layers project every time step with one product up front.
pub fn lstm_cell_projected<T: Real>(
    tape: &mut Tape<T>,
    x_proj: Var,
    h: Var,
    c: Var,
    w_hh: Var,
) -> Result<(Var, Var), DiffError> {
    let (sp, sh, sc, sw) = (
        tape.shape(x_proj).to_vec(),
        tape.shape(h).to_vec(),
        tape.shape(c).to_vec(),
        tape.shape(w_hh).to_vec(),
    );
    let hidden = sh.get(1).copied().unwrap_or(0);
    let ok = sh.len() == 2
        && sc == sh
        && sp.len() == 2
        && sp[0] == sh[0]
        && sp[1] == 4 * hidden
        && sw == [hidden, 4 * hidden];
    if !ok {
        return Err(DiffError::Shape {
            op: "lstm_cell",
            detail: format!("x·W {sp:?}, h {sh:?}, c {sc:?}, W_hh {sw:?}"),
        });
    }
    let rec = tape.matmul(h, w_hh)?;
    let pre = tape.add(x_proj, rec)?;
    let gate = |tape: &mut Tape<T>, k: usize| tape.slice(pre, 1, k * hidden, hidden);
    let i = gate(tape, 0)?;
    let f = gate(tape, 1)?;
    let g = gate(tape, 2)?;
    let o = gate(tape, 3)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

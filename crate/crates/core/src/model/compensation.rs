use super::ModelError;
use crate::diffcore::{Real, Tape, Tensor};

/// Compensation coefficients `Ĥ^{j,i}` for one frame, I and Q planes each
/// laid out `[Nr × Nt × L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompensationTensor<T> {
    pub nr: usize,
    pub nt: usize,
    pub len: usize,
    pub h_i: Vec<T>,
    pub h_q: Vec<T>,
}

impl<T: Real> CompensationTensor<T> {
    pub fn new(
        nr: usize,
        nt: usize,
        len: usize,
        h_i: Vec<T>,
        h_q: Vec<T>,
    ) -> Result<Self, ModelError> {
        let n = nr * nt * len;
        if n == 0 || h_i.len() != n || h_q.len() != n {
            return Err(ModelError::Input(format!(
                "compensation planes of {} and {} values for [{nr}×{nt}×{len}]",
                h_i.len(),
                h_q.len()
            )));
        }
        if !h_i.iter().chain(&h_q).all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Self {
            nr,
            nt,
            len,
            h_i,
            h_q,
        })
    }

    /// Repeats interleaved `[Nr × Nt × 2]` coefficients over `len` slots.
    pub fn broadcast(nr: usize, nt: usize, len: usize, coeffs: &[T]) -> Result<Self, ModelError> {
        if coeffs.len() != nr * nt * 2 {
            return Err(ModelError::Input(format!(
                "{} coefficients for [{nr}×{nt}×2]",
                coeffs.len()
            )));
        }
        let mut h_i = Vec::with_capacity(nr * nt * len);
        let mut h_q = Vec::with_capacity(nr * nt * len);
        for pair in coeffs.chunks_exact(2) {
            h_i.extend(std::iter::repeat_n(pair[0], len));
            h_q.extend(std::iter::repeat_n(pair[1], len));
        }
        Self::new(nr, nt, len, h_i, h_q)
    }

    /// `Ĥ_I = δ_{ji}`, `Ĥ_Q = 0`.
    pub fn identity(n: usize, len: usize) -> Self {
        let mut coeffs = vec![T::zero(); n * n * 2];
        for j in 0..n {
            coeffs[(j * n + j) * 2] = T::one();
        }
        Self::broadcast(n, n, len, &coeffs).expect("identity is well formed")
    }

    pub fn get(&self, j: usize, i: usize, t: usize) -> (T, T) {
        let k = (j * self.nt + i) * self.len + t;
        (self.h_i[k], self.h_q[k])
    }

    /// True when every coefficient is the same in every slot.
    pub fn is_time_constant(&self) -> bool {
        [&self.h_i, &self.h_q].iter().all(|plane| {
            plane
                .chunks_exact(self.len)
                .all(|row| row.iter().all(|&v| v == row[0]))
        })
    }

    /// `[Nr × Nt × L × 2]` with I/Q interleaved.
    pub fn to_interleaved(&self) -> Vec<T> {
        self.h_i
            .iter()
            .zip(&self.h_q)
            .flat_map(|(&i, &q)| [i, q])
            .collect()
    }
}

/// Applies `Ĥ` to one received frame `r [Nr × L × 2]`, giving `r̂ [Nt × L × 2]`.
pub fn cc_apply<T: Real>(h: &CompensationTensor<T>, r: &[T]) -> Result<Vec<T>, ModelError> {
    if r.len() != h.nr * h.len * 2 {
        return Err(ModelError::Input(format!(
            "frame of {} values for Nr={} and L={}",
            r.len(),
            h.nr,
            h.len
        )));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(&Tensor::new(
        &[1, h.nr, h.nt, h.len, 2],
        h.to_interleaved(),
    )?);
    let rv = tape.constant(&Tensor::new(&[1, h.nr, h.len, 2], r.to_vec())?);
    let out = tape.cc_apply(hv, rv)?;
    Ok(tape.value(out).to_vec())
}

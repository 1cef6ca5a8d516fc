//! Flat block-fading MIMO channels and receiver noise.

use super::{SignalRng, SynthError};

/// Complex `Nr×Nt` channel matrix stored as separate I and Q planes
/// (row-major, receive antenna major).
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub nr: usize,
    pub nt: usize,
    pub h_i: Vec<f64>,
    pub h_q: Vec<f64>,
}

/// Per-slot correlation of the optional Gauss–Markov drift.
pub const DRIFT_RHO: f64 = 0.999;

impl ChannelRealization {
    pub fn new(nr: usize, nt: usize, h_i: Vec<f64>, h_q: Vec<f64>) -> Result<Self, SynthError> {
        if h_i.len() != nr * nt || h_q.len() != nr * nt {
            return Err(SynthError::Shape(format!(
                "channel {nr}x{nt} with {} / {} coefficients",
                h_i.len(),
                h_q.len()
            )));
        }
        Ok(Self { nr, nt, h_i, h_q })
    }

    pub fn identity(n: usize) -> Self {
        let mut h_i = vec![0.0; n * n];
        for k in 0..n {
            h_i[k * n + k] = 1.0;
        }
        Self {
            nr: n,
            nt: n,
            h_i,
            h_q: vec![0.0; n * n],
        }
    }

    /// Coefficient between receive antenna `j` and transmit antenna `i`.
    pub fn coeff(&self, j: usize, i: usize) -> (f64, f64) {
        let k = j * self.nt + i;
        (self.h_i[k], self.h_q[k])
    }

    /// One Gauss–Markov step: `ρ·H + √(1−ρ²)·W` with fresh `W ~ CN(0, 1)`.
    pub fn evolve(&self, rho: f64, rng: &mut SignalRng) -> Self {
        let innov = (1.0 - rho * rho).sqrt() * std::f64::consts::FRAC_1_SQRT_2;
        let mut step = |v: &f64| rho * v + innov * rng.normal();
        let h_i = self.h_i.iter().map(&mut step).collect();
        let h_q = self.h_q.iter().map(&mut step).collect();
        Self {
            nr: self.nr,
            nt: self.nt,
            h_i,
            h_q,
        }
    }
}

/// Draws `H` with i.i.d. `CN(0, 1)` entries (variance ½ per plane).
pub fn draw_channel(
    nt: usize,
    nr: usize,
    rng: &mut SignalRng,
) -> Result<ChannelRealization, SynthError> {
    if nt == 0 || nr < nt {
        return Err(SynthError::Antennas { nt, nr });
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut h_i = Vec::with_capacity(nr * nt);
    let mut h_q = Vec::with_capacity(nr * nt);
    for _ in 0..nr * nt {
        h_i.push(s * rng.normal());
        h_q.push(s * rng.normal());
    }
    Ok(ChannelRealization { nr, nt, h_i, h_q })
}

/// `r_j[t] = Σ_i H^{j,i} · s_i[t]` for `s` laid out `[Nt × L × 2]`.
pub fn apply_channel(h: &ChannelRealization, s: &[f64]) -> Result<Vec<f64>, SynthError> {
    if s.is_empty() || !s.len().is_multiple_of(2 * h.nt) {
        return Err(SynthError::Shape(format!(
            "{} values cannot be split over {} transmit antennas",
            s.len(),
            h.nt
        )));
    }
    let len = s.len() / (2 * h.nt);
    let mut r = vec![0.0; h.nr * len * 2];
    for j in 0..h.nr {
        let out = &mut r[j * len * 2..(j + 1) * len * 2];
        for i in 0..h.nt {
            let (hi, hq) = h.coeff(j, i);
            let src = &s[i * len * 2..(i + 1) * len * 2];
            for (o, x) in out.chunks_exact_mut(2).zip(src.chunks_exact(2)) {
                o[0] += hi * x[0] - hq * x[1];
                o[1] += hq * x[0] + hi * x[1];
            }
        }
    }
    Ok(r)
}

/// Time-varying variant: slot `t` uses `hs[t]`.
pub fn apply_channel_per_slot(
    hs: &[ChannelRealization],
    s: &[f64],
) -> Result<Vec<f64>, SynthError> {
    let first = hs
        .first()
        .ok_or_else(|| SynthError::Shape("no channel slots".into()))?;
    let (nr, nt, len) = (first.nr, first.nt, hs.len());
    if s.len() != nt * len * 2 {
        return Err(SynthError::Shape(format!(
            "{} values for {nt} antennas over {len} slots",
            s.len()
        )));
    }
    let mut r = vec![0.0; nr * len * 2];
    for (t, h) in hs.iter().enumerate() {
        for j in 0..nr {
            let (mut acc_i, mut acc_q) = (0.0, 0.0);
            for i in 0..nt {
                let (hi, hq) = h.coeff(j, i);
                let (xi, xq) = (s[(i * len + t) * 2], s[(i * len + t) * 2 + 1]);
                acc_i += hi * xi - hq * xq;
                acc_q += hq * xi + hi * xq;
            }
            r[(j * len + t) * 2] = acc_i;
            r[(j * len + t) * 2 + 1] = acc_q;
        }
    }
    Ok(r)
}

/// Adds complex white Gaussian noise per receive antenna so that each
/// antenna's measured SNR matches `snr_db`. `r` is `[Nr × L × 2]`.
///
/// `snr_db = +∞` leaves the signal untouched.
pub fn add_awgn(
    r: &mut [f64],
    nr: usize,
    snr_db: f64,
    rng: &mut SignalRng,
) -> Result<(), SynthError> {
    if nr == 0 || !r.len().is_multiple_of(2 * nr) {
        return Err(SynthError::Shape(format!(
            "{} values over {nr} receive antennas",
            r.len()
        )));
    }
    if !r.iter().all(|v| v.is_finite()) || snr_db.is_nan() {
        return Err(SynthError::NonFinite);
    }
    if snr_db == f64::INFINITY {
        return Ok(());
    }
    let per_antenna = r.len() / nr;
    let samples = (per_antenna / 2) as f64;
    for antenna in r.chunks_exact_mut(per_antenna) {
        let power = antenna.iter().map(|v| v * v).sum::<f64>() / samples;
        let sigma = (power * 10f64.powf(-snr_db / 10.0) / 2.0).sqrt();
        for v in antenna.iter_mut() {
            *v += sigma * rng.normal();
        }
    }
    Ok(())
}

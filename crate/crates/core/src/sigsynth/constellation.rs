//! Symbol alphabets with Gray bit labels and unit average power.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SynthError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    Psk,
    Qam,
    Pam,
    Apsk16,
}

/// Ratio of outer to inner ring radius for 4+12 APSK.
pub const APSK16_RING_RATIO: f64 = 2.57;

/// A modulation class: scheme plus order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Modulation {
    pub scheme: Scheme,
    pub order: u32,
}

impl Modulation {
    pub const fn new(scheme: Scheme, order: u32) -> Self {
        Self { scheme, order }
    }

    pub fn constellation(&self) -> Result<Constellation, SynthError> {
        make_constellation(self.scheme, self.order)
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.scheme, self.order) {
            (Scheme::Psk, 2) => write!(f, "bpsk"),
            (Scheme::Psk, 4) => write!(f, "qpsk"),
            (Scheme::Psk, m) => write!(f, "psk{m}"),
            (Scheme::Qam, m) => write!(f, "qam{m}"),
            (Scheme::Pam, m) => write!(f, "pam{m}"),
            (Scheme::Apsk16, _) => write!(f, "apsk16"),
        }
    }
}

impl FromStr for Modulation {
    type Err = SynthError;

    /// Accepts `bpsk`, `qpsk`, `pskM`, `qamM`, `pamM` and `apsk16`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let parsed = match lower.as_str() {
            "bpsk" => Some(Modulation::new(Scheme::Psk, 2)),
            "qpsk" => Some(Modulation::new(Scheme::Psk, 4)),
            "apsk16" => Some(Modulation::new(Scheme::Apsk16, 16)),
            other => [
                ("psk", Scheme::Psk),
                ("qam", Scheme::Qam),
                ("pam", Scheme::Pam),
            ]
            .iter()
            .find_map(|(prefix, scheme)| {
                other
                    .strip_prefix(prefix)
                    .and_then(|m| m.parse::<u32>().ok())
                    .map(|m| Modulation::new(*scheme, m))
            }),
        };
        let m = parsed.ok_or_else(|| SynthError::UnknownClass(s.to_string()))?;
        make_constellation(m.scheme, m.order)?;
        Ok(m)
    }
}

/// Points in geometric order with their bit labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Constellation {
    pub scheme: Scheme,
    pub order: u32,
    /// `(I, Q)` per point.
    pub points: Vec<(f64, f64)>,
    /// Bit label of each point, `log₂M` bits wide.
    pub labels: Vec<u32>,
    by_label: Vec<usize>,
}

pub fn gray(k: u32) -> u32 {
    k ^ (k >> 1)
}

fn pam_levels(m: u32) -> Vec<f64> {
    (0..m).map(|k| 2.0 * k as f64 - (m as f64 - 1.0)).collect()
}

pub fn make_constellation(scheme: Scheme, order: u32) -> Result<Constellation, SynthError> {
    let unsupported = || SynthError::UnsupportedConstellation { scheme, order };
    if order < 2 || !order.is_power_of_two() {
        return Err(unsupported());
    }
    let (points, labels): (Vec<(f64, f64)>, Vec<u32>) = match scheme {
        Scheme::Psk => {
            let offset = if order == 2 { 0.0 } else { PI / order as f64 };
            (0..order)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / order as f64 + offset;
                    ((a.cos(), a.sin()), gray(k))
                })
                .unzip()
        }
        Scheme::Pam => pam_levels(order)
            .into_iter()
            .zip(0..order)
            .map(|(a, k)| ((a, 0.0), gray(k)))
            .unzip(),
        Scheme::Qam => {
            let bits = order.trailing_zeros();
            if !bits.is_multiple_of(2) || !(4..=256).contains(&order) {
                return Err(unsupported());
            }
            let side = 1u32 << (bits / 2);
            let levels = pam_levels(side);
            let mut pts = Vec::with_capacity(order as usize);
            let mut labs = Vec::with_capacity(order as usize);
            for ki in 0..side {
                for kq in 0..side {
                    pts.push((levels[ki as usize], levels[kq as usize]));
                    labs.push((gray(ki) << (bits / 2)) | gray(kq));
                }
            }
            (pts, labs)
        }
        Scheme::Apsk16 => {
            if order != 16 {
                return Err(unsupported());
            }
            let inner = (0..4).map(|k| {
                let a = PI / 4.0 + k as f64 * PI / 2.0;
                (a.cos(), a.sin())
            });
            let outer = (0..12).map(|k| {
                let a = PI / 12.0 + k as f64 * PI / 6.0;
                (APSK16_RING_RATIO * a.cos(), APSK16_RING_RATIO * a.sin())
            });
            (inner.chain(outer).collect(), (0..16).collect())
        }
    };
    let power = points.iter().map(|(i, q)| i * i + q * q).sum::<f64>() / points.len() as f64;
    let scale = power.sqrt().recip();
    let points: Vec<(f64, f64)> = points
        .into_iter()
        .map(|(i, q)| (i * scale, q * scale))
        .collect();
    let mut by_label = vec![usize::MAX; order as usize];
    for (k, &l) in labels.iter().enumerate() {
        by_label[l as usize] = k;
    }
    Ok(Constellation {
        scheme,
        order,
        points,
        labels,
        by_label,
    })
}

impl Constellation {
    pub fn bits_per_symbol(&self) -> usize {
        self.order.trailing_zeros() as usize
    }

    pub fn point_for_label(&self, label: u32) -> (f64, f64) {
        self.points[self.by_label[label as usize]]
    }

    /// Maps bits (MSB first within each symbol) to `[L × 2]` I/Q values.
    pub fn modulate(&self, bits: &[u8]) -> Result<Vec<f64>, SynthError> {
        let width = self.bits_per_symbol();
        if !bits.len().is_multiple_of(width) {
            return Err(SynthError::BitCount {
                bits: bits.len(),
                bits_per_symbol: width,
            });
        }
        let mut out = Vec::with_capacity(bits.len() / width * 2);
        for chunk in bits.chunks_exact(width) {
            let label = chunk
                .iter()
                .fold(0u32, |acc, &b| (acc << 1) | (b & 1) as u32);
            let (i, q) = self.point_for_label(label);
            out.push(i);
            out.push(q);
        }
        Ok(out)
    }

    pub fn mean_power(&self) -> f64 {
        self.points.iter().map(|(i, q)| i * i + q * q).sum::<f64>() / self.points.len() as f64
    }

    /// Smallest distance from `(i, q)` to any point.
    pub fn distance_to_nearest(&self, i: f64, q: f64) -> f64 {
        self.points
            .iter()
            .map(|(pi, pq)| ((pi - i).powi(2) + (pq - q).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Free-function form of [`Constellation::modulate`].
pub fn modulate(bits: &[u8], c: &Constellation) -> Result<Vec<f64>, SynthError> {
    c.modulate(bits)
}

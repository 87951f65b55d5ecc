//! Real-valued baseband channel `r = h * s + n` with AWGN or block Rayleigh
//! fading, plus the transmit power constraint on encoder outputs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const POWER_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    /// Signal-to-noise ratio in dB; `+inf` disables noise.
    #[serde(serialize_with = "ser_snr", deserialize_with = "de_snr")]
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            kind: ChannelKind::Awgn,
            snr_db: 10.0,
            seed: 0,
        }
    }
}

// JSON has no infinity; the noiseless channel is written as the string "inf".
fn ser_snr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if *v == f64::INFINITY {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_snr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Snr {
        Num(f64),
        Text(String),
    }
    match Snr::deserialize(d)? {
        Snr::Num(v) => Ok(v),
        Snr::Text(t) if t == "inf" || t == "+inf" => Ok(f64::INFINITY),
        Snr::Text(t) => Err(serde::de::Error::custom(format!("invalid snr_db {t:?}"))),
    }
}

impl ChannelConfig {
    pub fn awgn(snr_db: f64, seed: u64) -> Self {
        ChannelConfig {
            kind: ChannelKind::Awgn,
            snr_db,
            seed,
        }
    }

    pub fn rayleigh(snr_db: f64, seed: u64) -> Self {
        ChannelConfig {
            kind: ChannelKind::Rayleigh,
            snr_db,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::Config(format!("snr_db must be finite or +inf, got {}", self.snr_db)));
        }
        Ok(())
    }

    /// Noise variance for unit signal power: `10^(-snr_db / 10)`.
    pub fn noise_variance(&self) -> f64 {
        if self.snr_db == f64::INFINITY {
            0.0
        } else {
            10f64.powf(-self.snr_db / 10.0)
        }
    }
}

/// Power-normalized encoder output for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBlock {
    pub symbols: Vec<f64>,
    /// Set when the raw block had (numerically) zero energy.
    pub degenerate: bool,
}

impl EncodedBlock {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn mean_square(&self) -> f64 {
        self.symbols.iter().map(|s| s * s).sum::<f64>() / self.symbols.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReceivedBlock {
    pub symbols: Vec<f64>,
    pub round: u8,
}

/// Scales `raw` to unit mean square: `raw * sqrt(L / (sum raw^2 + eps))`.
pub fn normalize_power(raw: &[f64]) -> Result<EncodedBlock> {
    if raw.is_empty() {
        return Err(Error::arg("cannot normalize an empty block"));
    }
    let energy: f64 = raw.iter().map(|v| v * v).sum();
    let scale = (raw.len() as f64 / (energy + POWER_EPSILON)).sqrt();
    Ok(EncodedBlock {
        symbols: raw.iter().map(|v| v * scale).collect(),
        degenerate: energy <= POWER_EPSILON,
    })
}

/// Vector-Jacobian product of [`normalize_power`]:
/// `c * g - c * raw * (raw . g) / (sum raw^2 + eps)` with `c` the scale.
pub fn normalize_power_backward(raw: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let energy: f64 = raw.iter().map(|v| v * v).sum::<f64>() + POWER_EPSILON;
    let scale = (raw.len() as f64 / energy).sqrt();
    let dot: f64 = raw.iter().zip(grad_out).map(|(a, b)| a * b).sum();
    raw.iter()
        .zip(grad_out)
        .map(|(x, g)| scale * g - scale * x * dot / energy)
        .collect()
}

/// One frozen channel instance: a block-fading gain and the noise vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDraw {
    pub gain: f64,
    pub noise: Vec<f64>,
}

impl ChannelDraw {
    pub fn sample<R: Rng>(cfg: &ChannelConfig, len: usize, rng: &mut R) -> Self {
        let gain = match cfg.kind {
            ChannelKind::Awgn => 1.0,
            ChannelKind::Rayleigh => rayleigh_gain(rng),
        };
        let sigma = cfg.noise_variance().sqrt();
        let noise = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            })
            .collect();
        ChannelDraw { gain, noise }
    }

    pub fn apply(&self, symbols: &[f64], round: u8) -> Result<ReceivedBlock> {
        if symbols.len() != self.noise.len() {
            return Err(Error::arg(format!(
                "channel draw covers {} uses, block has {}",
                self.noise.len(),
                symbols.len()
            )));
        }
        Ok(ReceivedBlock {
            symbols: symbols
                .iter()
                .zip(&self.noise)
                .map(|(s, n)| self.gain * s + n)
                .collect(),
            round,
        })
    }

    /// dL/ds from dL/dr: the noise is additive and `h` is a constant.
    pub fn backward(&self, grad_received: &[f64]) -> Vec<f64> {
        grad_received.iter().map(|g| self.gain * g).collect()
    }
}

/// Magnitude of a standard complex Gaussian: Rayleigh with `E[h^2] = 1`.
pub fn rayleigh_gain<R: Rng>(rng: &mut R) -> f64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    ((re * re + im * im) / 2.0).sqrt()
}

/// Sends `block` through a fresh channel instance drawn from `rng`.
pub fn transmit<R: Rng>(block: &EncodedBlock, cfg: &ChannelConfig, round: u8, rng: &mut R) -> ReceivedBlock {
    ChannelDraw::sample(cfg, block.len(), rng)
        .apply(&block.symbols, round)
        .expect("draw sized to block")
}

//! Frequency-domain features: Welch PSD, band splitting, Simpson-rule band
//! power and differential entropy.

use std::cell::RefCell;
use std::f64::consts::{E, PI};
use std::fmt;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{EegSegment, N_CHANNELS};
use crate::error::{Error, Result};

pub const WELCH_WINDOW_S: f64 = 2.0;
pub const WELCH_OVERLAP: f64 = 0.5;
/// Power floor applied before taking logarithms of band power.
pub const POWER_FLOOR: f64 = 1e-12;
pub const N_BANDS: usize = 5;
pub const N_FEATURES: usize = N_CHANNELS * N_BANDS;

const GRID_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrequencyBand {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
}

impl FrequencyBand {
    pub const ALL: [FrequencyBand; N_BANDS] = [
        FrequencyBand::Delta,
        FrequencyBand::Theta,
        FrequencyBand::Alpha,
        FrequencyBand::Beta,
        FrequencyBand::Gamma,
    ];

    pub fn edges(self) -> (f64, f64) {
        match self {
            FrequencyBand::Delta => (1.0, 4.0),
            FrequencyBand::Theta => (4.0, 8.0),
            FrequencyBand::Alpha => (8.0, 12.0),
            FrequencyBand::Beta => (12.0, 31.0),
            FrequencyBand::Gamma => (31.0, 75.0),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            FrequencyBand::Delta => "delta",
            FrequencyBand::Theta => "theta",
            FrequencyBand::Alpha => "alpha",
            FrequencyBand::Beta => "beta",
            FrequencyBand::Gamma => "gamma",
        }
    }

    /// Bin membership: closed on the left, open on the right, except Gamma
    /// which also includes 75 Hz.
    pub fn contains(self, f: f64) -> bool {
        let (lo, hi) = self.edges();
        f >= lo - GRID_TOL && (f < hi - GRID_TOL || (self == FrequencyBand::Gamma && f <= hi + GRID_TOL))
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for FrequencyBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One-sided power spectral density of a single channel on a uniform grid
/// from 0 to fs/2.
#[derive(Clone, Debug, PartialEq)]
pub struct PsdEstimate {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
}

impl PsdEstimate {
    pub fn resolution(&self) -> f64 {
        self.freqs[1] - self.freqs[0]
    }

    pub fn argmax_freq(&self) -> f64 {
        let (i, _) = self
            .power
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        self.freqs[i]
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_in_place(buf: &mut [Complex64]) {
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(buf.len()));
    plan.process(buf);
}

/// Welch's averaged periodogram: periodic Hann windows of `win_s` seconds,
/// fractional `overlap`, per-window mean removal, density scaling so that
/// the integral over frequency approximates the signal variance.
pub fn welch_psd(x: &[f64], fs: f64, win_s: f64, overlap: f64) -> Result<PsdEstimate> {
    if !(fs > 0.0) || !(win_s > 0.0) || !(0.0..1.0).contains(&overlap) {
        return Err(Error::domain("welch parameters out of range"));
    }
    let nper = (win_s * fs).round() as usize;
    if nper < 2 || x.len() < nper {
        return Err(Error::domain(format!(
            "welch needs at least {nper} samples, got {}",
            x.len()
        )));
    }
    let step = nper - (overlap * nper as f64).round() as usize;
    let window: Vec<f64> = (0..nper)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / nper as f64).cos())
        .collect();
    let win_energy: f64 = window.iter().map(|w| w * w).sum();
    let n_bins = nper / 2 + 1;
    let mut acc = vec![0.0; n_bins];
    let mut buf = vec![Complex64::new(0.0, 0.0); nper];
    let mut count = 0usize;
    let mut start = 0;
    while start + nper <= x.len() {
        let chunk = &x[start..start + nper];
        let mean = chunk.iter().sum::<f64>() / nper as f64;
        for ((b, &v), &w) in buf.iter_mut().zip(chunk).zip(&window) {
            *b = Complex64::new((v - mean) * w, 0.0);
        }
        fft_in_place(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        count += 1;
        start += step;
    }
    let scale = 1.0 / (fs * win_energy * count as f64);
    let power = acc
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let one_sided = if k == 0 || (nper % 2 == 0 && k == nper / 2) { 1.0 } else { 2.0 };
            p * scale * one_sided
        })
        .collect();
    let freqs = (0..n_bins).map(|k| k as f64 * fs / nper as f64).collect();
    Ok(PsdEstimate { freqs, power })
}

/// Result of integrating a sampled curve over a sub-interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandIntegral {
    pub value: f64,
    /// Fewer than three grid points fell in the interval; the trapezoid
    /// rule was used instead of Simpson's.
    pub trapezoid_fallback: bool,
}

/// Integrates `values` sampled on the uniform grid `freqs` over the grid
/// points in the closed interval `[lo, hi]`. Composite Simpson on an even
/// interval count; with an odd count the final interval uses the trapezoid
/// rule.
pub fn simpson_integral(freqs: &[f64], values: &[f64], lo: f64, hi: f64) -> Result<BandIntegral> {
    if freqs.len() != values.len() || freqs.len() < 2 {
        return Err(Error::domain("grid and values must match and hold at least 2 points"));
    }
    if lo < freqs[0] - GRID_TOL || hi > freqs[freqs.len() - 1] + GRID_TOL || !(lo < hi) {
        return Err(Error::domain(format!(
            "interval [{lo}, {hi}] outside grid [{}, {}]",
            freqs[0],
            freqs[freqs.len() - 1]
        )));
    }
    let idx: Vec<usize> = (0..freqs.len())
        .filter(|&i| freqs[i] >= lo - GRID_TOL && freqs[i] <= hi + GRID_TOL)
        .collect();
    let h = freqs[1] - freqs[0];
    let pts: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
    if pts.len() < 3 {
        let value = pts.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum();
        return Ok(BandIntegral {
            value,
            trapezoid_fallback: true,
        });
    }
    let intervals = pts.len() - 1;
    let even = intervals - intervals % 2;
    let mut s = 0.0;
    for pair in 0..even / 2 {
        let i = 2 * pair;
        s += h / 3.0 * (pts[i] + 4.0 * pts[i + 1] + pts[i + 2]);
    }
    if even < intervals {
        s += 0.5 * h * (pts[even] + pts[even + 1]);
    }
    Ok(BandIntegral {
        value: s,
        trapezoid_fallback: false,
    })
}

pub fn band_power_simpson(psd: &PsdEstimate, band: FrequencyBand) -> Result<BandIntegral> {
    let (lo, hi) = band.edges();
    simpson_integral(&psd.freqs, &psd.power, lo, hi)
}

/// Per-channel, per-band values (band power in uV^2, or DE in nats).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandPowers {
    /// `values[channel][band]`
    pub values: [[f64; N_BANDS]; N_CHANNELS],
}

impl BandPowers {
    pub fn zeros() -> Self {
        BandPowers {
            values: [[0.0; N_BANDS]; N_CHANNELS],
        }
    }

    /// Flattened channel-major: TP9 delta..gamma, AF7 delta..gamma, ...
    pub fn flatten(&self) -> [f64; N_FEATURES] {
        let mut out = [0.0; N_FEATURES];
        for c in 0..N_CHANNELS {
            for b in 0..N_BANDS {
                out[c * N_BANDS + b] = self.values[c][b];
            }
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != N_FEATURES {
            return Err(Error::domain(format!("expected {N_FEATURES} features, got {}", flat.len())));
        }
        let mut out = Self::zeros();
        for c in 0..N_CHANNELS {
            for b in 0..N_BANDS {
                out.values[c][b] = flat[c * N_BANDS + b];
            }
        }
        Ok(out)
    }

    pub fn band(&self, band: FrequencyBand) -> [f64; N_CHANNELS] {
        let mut out = [0.0; N_CHANNELS];
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.values[c][band.index()];
        }
        out
    }
}

fn channel_f64(segment: &EegSegment, c: usize) -> Vec<f64> {
    segment.channel(c).iter().map(|&v| f64::from(v)).collect()
}

/// Absolute band power for every channel and band of a segment.
pub fn band_powers(segment: &EegSegment) -> Result<BandPowers> {
    let mut out = BandPowers::zeros();
    for c in 0..N_CHANNELS {
        let psd = welch_psd(&channel_f64(segment, c), segment.sample_rate, WELCH_WINDOW_S, WELCH_OVERLAP)?;
        for band in FrequencyBand::ALL {
            out.values[c][band.index()] = band_power_simpson(&psd, band)?.value;
        }
    }
    Ok(out)
}

/// The 20-dimensional absolute PSD feature vector (channel-major), before
/// any normalization.
pub fn psd_feature_vector(segment: &EegSegment) -> Result<[f64; N_FEATURES]> {
    Ok(band_powers(segment)?.flatten())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DifferentialEntropy {
    pub nats: f64,
    /// Band power was at or below [`POWER_FLOOR`] and was clamped.
    pub clamped: bool,
}

/// Gaussian differential entropy `0.5 ln(2 pi e P)` of a band with average
/// power `p`.
pub fn de_from_power(p: f64) -> DifferentialEntropy {
    let clamped = !(p > POWER_FLOOR);
    let p = if clamped { POWER_FLOOR } else { p };
    DifferentialEntropy {
        nats: 0.5 * (2.0 * PI * E * p).ln(),
        clamped,
    }
}

/// Differential entropy from the band-average power of the one-sided FFT
/// periodogram of the whole channel.
pub fn differential_entropy(x: &[f64], fs: f64, band: FrequencyBand) -> Result<DifferentialEntropy> {
    let n = x.len();
    if n < (WELCH_WINDOW_S * fs).round() as usize || !(fs > 0.0) {
        return Err(Error::domain(format!("differential entropy needs a full window, got {n} samples")));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v - mean, 0.0)).collect();
    fft_in_place(&mut buf);
    let (mut sum, mut count) = (0.0, 0usize);
    for (k, b) in buf.iter().enumerate().take(n / 2 + 1) {
        let f = k as f64 * fs / n as f64;
        if band.contains(f) {
            let one_sided = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
            sum += one_sided * b.norm_sqr() / (fs * n as f64);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::domain(format!("no periodogram bins in the {band} band")));
    }
    Ok(de_from_power(sum / count as f64))
}

/// DE for every channel and band of a segment.
pub fn de_features(segment: &EegSegment) -> Result<BandPowers> {
    let mut out = BandPowers::zeros();
    for c in 0..N_CHANNELS {
        let x = channel_f64(segment, c);
        for band in FrequencyBand::ALL {
            out.values[c][band.index()] = differential_entropy(&x, segment.sample_rate, band)?.nats;
        }
    }
    Ok(out)
}

//! Time-domain preprocessing: Butterworth bandpass, power-line notch,
//! z-score normalization and Gaussian noise injection.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;

use crate::data::EegSegment;
use crate::error::{Error, Result};

pub const BANDPASS_LOW_HZ: f64 = 1.0;
pub const BANDPASS_HIGH_HZ: f64 = 75.0;
pub const NOTCH_HZ: f64 = 60.0;
pub const NOTCH_Q: f64 = 30.0;
/// Variance below which a sequence is treated as constant.
pub const ZSCORE_MIN_VARIANCE: f64 = 1e-12;

/// One second-order section, `a0` normalized to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b0 + z_inv * self.b1 + z2 * self.b2) / (1.0 + z_inv * self.a1 + z2 * self.a2)
    }

    /// Magnitudes of the two poles (roots of `z^2 + a1 z + a2`).
    pub fn pole_magnitudes(&self) -> [f64; 2] {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        let p1 = (-self.a1 + disc) / 2.0;
        let p2 = (-self.a1 - disc) / 2.0;
        [p1.norm(), p2.norm()]
    }
}

/// A stable cascade of biquads at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct BiquadCascade {
    sections: Vec<Biquad>,
    sample_rate: f64,
}

impl BiquadCascade {
    /// Validates finiteness and stability of every section.
    pub fn new(sections: Vec<Biquad>, sample_rate: f64) -> Result<Self> {
        for (i, s) in sections.iter().enumerate() {
            let coeffs = [s.b0, s.b1, s.b2, s.a1, s.a2];
            if coeffs.iter().any(|c| !c.is_finite()) {
                return Err(Error::domain(format!("section {i} has non-finite coefficients")));
            }
            if s.pole_magnitudes().iter().any(|&m| m >= 1.0) {
                return Err(Error::domain(format!("section {i} is unstable")));
            }
        }
        Ok(BiquadCascade { sections, sample_rate })
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// Series connection: `self` followed by `next`.
    pub fn then(&self, next: &BiquadCascade) -> Result<BiquadCascade> {
        if self.sample_rate != next.sample_rate {
            return Err(Error::domain("cannot chain cascades with different sample rates"));
        }
        let mut sections = self.sections.clone();
        sections.extend_from_slice(&next.sections);
        Ok(BiquadCascade {
            sections,
            sample_rate: self.sample_rate,
        })
    }

    /// Complex frequency response at `f_hz`, evaluated on the unit circle.
    pub fn response(&self, f_hz: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * f_hz / self.sample_rate);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn magnitude(&self, f_hz: f64) -> f64 {
        self.response(f_hz).norm()
    }

    /// Single causal pass, zero initial state (transposed direct form II).
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in y.iter_mut() {
                let inp = *v;
                let out = s.b0 * inp + z1;
                z1 = s.b1 * inp - s.a1 * out + z2;
                z2 = s.b2 * inp - s.a2 * out;
                *v = out;
            }
        }
        y
    }

    /// Forward pass followed by a time-reversed pass.
    pub fn filter_zero_phase(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.filter(x);
        y.reverse();
        let mut y = self.filter(&y);
        y.reverse();
        y
    }

    pub fn filter_f32(&self, x: &[f32], zero_phase: bool) -> Vec<f32> {
        let xd: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        let y = if zero_phase {
            self.filter_zero_phase(&xd)
        } else {
            self.filter(&xd)
        };
        y.into_iter().map(|v| v as f32).collect()
    }
}

/// Order-2 Butterworth bandpass (4th-degree transfer function, two biquads)
/// via prewarped bilinear transform.
pub fn design_bandpass(low_hz: f64, high_hz: f64, fs: f64) -> Result<BiquadCascade> {
    if !(fs > 0.0 && 0.0 < low_hz && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(Error::domain(format!(
            "bandpass edges {low_hz}..{high_hz} Hz invalid for fs = {fs} Hz"
        )));
    }
    const ORDER: usize = 2;
    let fs2 = 2.0 * fs;
    let warp = |f: f64| fs2 * (PI * f / fs).tan();
    let (w1, w2) = (warp(low_hz), warp(high_hz));
    let bw = w2 - w1;
    let w0 = (w1 * w2).sqrt();

    // Analog lowpass prototype poles on the left half of the unit circle.
    let proto = (0..ORDER).map(|k| {
        let theta = PI * (2 * k + ORDER + 1) as f64 / (2 * ORDER) as f64;
        Complex64::from_polar(1.0, theta)
    });
    let mut analog = Vec::with_capacity(2 * ORDER);
    for p in proto {
        let half = p * (bw / 2.0);
        let root = (half * half - w0 * w0).sqrt();
        analog.push(half + root);
        analog.push(half - root);
    }
    let digital: Vec<Complex64> = analog.iter().map(|&s| (fs2 + s) / (fs2 - s)).collect();
    let denom = analog
        .iter()
        .fold(Complex64::new(1.0, 0.0), |acc, &s| acc * (fs2 - s));
    let gain = (Complex64::new((bw * fs2).powi(ORDER as i32), 0.0) / denom).re;

    let upper: Vec<Complex64> = digital.iter().copied().filter(|z| z.im > 0.0).collect();
    if upper.len() != ORDER {
        return Err(Error::domain("bandpass poles did not form conjugate pairs"));
    }
    let g = gain.abs().sqrt();
    let sections = upper
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let g = if i == 0 { g * gain.signum() } else { g };
            Biquad {
                b0: g,
                b1: 0.0,
                b2: -g,
                a1: -2.0 * z.re,
                a2: z.norm_sqr(),
            }
        })
        .collect();
    BiquadCascade::new(sections, fs)
}

/// Second-order IIR notch with quality factor `q` (bandwidth `f0 / q`).
pub fn design_notch(f0_hz: f64, q: f64, fs: f64) -> Result<BiquadCascade> {
    if !(fs > 0.0 && f0_hz > 0.0 && f0_hz < fs / 2.0 && q > 0.0 && q.is_finite()) {
        return Err(Error::domain(format!("notch at {f0_hz} Hz with Q = {q} invalid for fs = {fs} Hz")));
    }
    let w0 = 2.0 * PI * f0_hz / fs;
    let bw = w0 / q;
    let gain = 1.0 / (1.0 + (bw / 2.0).tan());
    let c = w0.cos();
    let section = Biquad {
        b0: gain,
        b1: -2.0 * gain * c,
        b2: gain,
        a1: -2.0 * gain * c,
        a2: 2.0 * gain - 1.0,
    };
    BiquadCascade::new(vec![section], fs)
}

/// Bandpass 1-75 Hz followed by the 60 Hz, Q = 30 notch.
pub fn preprocessing_cascade(fs: f64) -> Result<BiquadCascade> {
    design_bandpass(BANDPASS_LOW_HZ, BANDPASS_HIGH_HZ, fs)?.then(&design_notch(NOTCH_HZ, NOTCH_Q, fs)?)
}

/// Filters every channel of `segment` independently.
pub fn apply_filter(cascade: &BiquadCascade, segment: &EegSegment, zero_phase: bool) -> Result<EegSegment> {
    if (segment.sample_rate - cascade.sample_rate).abs() > 1e-9 {
        return Err(Error::domain(format!(
            "segment sampled at {} Hz, filter designed for {} Hz",
            segment.sample_rate, cascade.sample_rate
        )));
    }
    Ok(segment.map_channels(|_, x| cascade.filter_f32(x, zero_phase)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZScore {
    pub values: Vec<f64>,
    /// Set when the input variance fell below [`ZSCORE_MIN_VARIANCE`]; the
    /// values are then all zero.
    pub degenerate: bool,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardizes to zero mean and unit population standard deviation.
pub fn zscore(values: &[f64]) -> Result<ZScore> {
    if values.len() < 2 {
        return Err(Error::domain("z-score needs at least two values"));
    }
    let (mean, sd) = mean_std(values);
    if sd * sd < ZSCORE_MIN_VARIANCE {
        return Ok(ZScore {
            values: vec![0.0; values.len()],
            degenerate: true,
        });
    }
    Ok(ZScore {
        values: values.iter().map(|v| (v - mean) / sd).collect(),
        degenerate: false,
    })
}

/// Amount of test-time Gaussian noise, relative to each channel's own
/// standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    fraction: f64,
    seed: u64,
}

impl NoiseSpec {
    pub fn new(fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::domain(format!("noise fraction {fraction} outside [0, 1]")));
        }
        Ok(NoiseSpec { fraction, seed })
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Adds zero-mean Gaussian noise to each channel with standard deviation
/// `fraction * std(channel)`.
pub fn add_noise(segment: &EegSegment, spec: NoiseSpec) -> EegSegment {
    if spec.fraction == 0.0 {
        return segment.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    segment.map_channels(|_, x| {
        let xd: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        let (_, sd) = mean_std(&xd);
        let sigma = spec.fraction * sd;
        if !(sigma > 0.0) {
            return x.to_vec();
        }
        let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
        xd.iter().map(|v| (v + normal.sample(&mut rng)) as f32).collect()
    })
}

//! From recordings to model-ready samples: filtering, segmentation, the
//! raw-stream z-score, band values, fold-level feature normalization,
//! masking and map construction.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{segment_recording, CognitiveLoad, EegRecording, EegSegment, SubjectId, DEFAULT_WINDOW_S, N_CHANNELS};
use crate::dsp::{self, NoiseSpec};
use crate::error::{Error, Result};
use crate::spectral::{self, BandPowers, FrequencyBand, N_BANDS, N_FEATURES};
use crate::topomap::{self, ElectrodeLayout, MapValueOptions, COLOR_PLANES, GRID, MAP_CHANNELS};
use crate::trainer::Sample;

/// `[planes, height, width]` of every map sample.
pub const MAP_SHAPE: [usize; 3] = [MAP_CHANNELS, GRID, GRID];

/// Per-channel band values used to build the maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Absolute Welch band power.
    #[default]
    Psd,
    /// Differential entropy of the FFT periodogram.
    De,
}

impl FeatureKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "psd" => Some(FeatureKind::Psd),
            "de" => Some(FeatureKind::De),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Psd => "psd",
            FeatureKind::De => "de",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub features: FeatureKind,
    pub zero_phase: bool,
    /// log10 band powers before centering (ignored for DE, which is
    /// already logarithmic).
    pub log_power: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            features: FeatureKind::Psd,
            zero_phase: false,
            log_power: true,
        }
    }
}

impl PipelineOptions {
    pub(crate) fn map_values(&self) -> MapValueOptions {
        MapValueOptions {
            log_power: self.log_power && self.features == FeatureKind::Psd,
            center: true,
        }
    }
}

/// Bandpass and notch over the whole recording.
pub fn filter_recording(rec: &EegRecording, zero_phase: bool) -> Result<EegRecording> {
    let cascade = dsp::preprocessing_cascade(rec.sample_rate())?;
    Ok(rec.map_channels(|x| cascade.filter_f32(x, zero_phase)))
}

/// Filtered 10 s segments of every recording, plus the number of windows
/// skipped for lack of a label.
pub fn filtered_segments(recordings: &[EegRecording], zero_phase: bool) -> Result<(Vec<EegSegment>, usize)> {
    let mut out = Vec::new();
    let mut missing = 0;
    for rec in recordings {
        let seg = segment_recording(&filter_recording(rec, zero_phase)?, DEFAULT_WINDOW_S)?;
        out.extend(seg.segments);
        missing += seg.missing_labels;
    }
    Ok((out, missing))
}

/// Which units survive masking; everything else is zeroed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Mask {
    #[default]
    None,
    Channels(BTreeSet<usize>),
    Bands(BTreeSet<FrequencyBand>),
}

impl Mask {
    pub fn channels(keep: impl IntoIterator<Item = usize>) -> Result<Self> {
        let keep: BTreeSet<usize> = keep.into_iter().collect();
        if keep.is_empty() {
            return Err(Error::domain("a mask must keep at least one channel"));
        }
        if let Some(&c) = keep.iter().find(|&&c| c >= N_CHANNELS) {
            return Err(Error::domain(format!("channel {c} out of range")));
        }
        Ok(Mask::Channels(keep))
    }

    pub fn bands(keep: impl IntoIterator<Item = FrequencyBand>) -> Result<Self> {
        let keep: BTreeSet<FrequencyBand> = keep.into_iter().collect();
        if keep.is_empty() {
            return Err(Error::domain("a mask must keep at least one band"));
        }
        Ok(Mask::Bands(keep))
    }
}

/// Fold-independent features of one filtered segment.
#[derive(Clone, Debug)]
pub struct SegmentFeatures {
    pub subject: SubjectId,
    pub window_index: usize,
    pub label: CognitiveLoad,
    /// Per-channel z-scored samples, `[4, L]` row-major, after masking.
    pub raw: Vec<f32>,
    /// Log-scaled (PSD) or DE values, centered per band across channels.
    pub values: BandPowers,
    /// Channels whose z-score was degenerate (constant input).
    pub degenerate_channels: usize,
}

fn band_restrict(segment: &EegSegment, bands: &BTreeSet<FrequencyBand>, zero_phase: bool) -> Result<EegSegment> {
    let filters = bands
        .iter()
        .map(|b| {
            let (lo, hi) = b.edges();
            dsp::design_bandpass(lo, hi, segment.sample_rate)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(segment.map_channels(|_, x| {
        let mut acc = vec![0.0f32; x.len()];
        for f in &filters {
            for (a, y) in acc.iter_mut().zip(f.filter_f32(x, zero_phase)) {
                *a += y;
            }
        }
        acc
    }))
}

/// Features of an already filtered segment. Noise, when given, is added
/// first, so both streams see it.
pub fn segment_features(segment: &EegSegment, opts: &PipelineOptions, mask: &Mask, noise: Option<NoiseSpec>) -> Result<SegmentFeatures> {
    let seg = match noise {
        Some(spec) => dsp::add_noise(segment, spec),
        None => segment.clone(),
    };
    let values = match opts.features {
        FeatureKind::Psd => spectral::band_powers(&seg)?,
        FeatureKind::De => spectral::de_features(&seg)?,
    };
    let values = topomap::condition_values(&values, opts.map_values());
    let raw_src = match mask {
        Mask::Bands(bands) => band_restrict(&seg, bands, opts.zero_phase)?,
        _ => seg.clone(),
    };
    let mut raw = Vec::with_capacity(raw_src.data().len());
    let mut degenerate = 0;
    for c in 0..N_CHANNELS {
        let x: Vec<f64> = raw_src.channel(c).iter().map(|&v| f64::from(v)).collect();
        let z = dsp::zscore(&x)?;
        degenerate += usize::from(z.degenerate);
        let keep = match mask {
            Mask::Channels(keep) => keep.contains(&c),
            _ => true,
        };
        raw.extend(z.values.iter().map(|&v| if keep { v as f32 } else { 0.0 }));
    }
    Ok(SegmentFeatures {
        subject: seg.subject.clone(),
        window_index: seg.window_index,
        label: seg.label,
        raw,
        values,
        degenerate_channels: degenerate,
    })
}

/// Per-feature z-score fitted on one fold's training subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Subjects whose segments produced these statistics.
    pub fitted_on: BTreeSet<SubjectId>,
}

impl FeatureNormalizer {
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a SegmentFeatures>) -> Result<Self> {
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); N_FEATURES];
        let mut fitted_on = BTreeSet::new();
        for f in features {
            for (col, v) in cols.iter_mut().zip(f.values.flatten()) {
                col.push(v);
            }
            fitted_on.insert(f.subject.clone());
        }
        if cols[0].len() < 2 {
            return Err(Error::domain("feature normalization needs at least 2 segments"));
        }
        let (mut mean, mut std) = (Vec::with_capacity(N_FEATURES), Vec::with_capacity(N_FEATURES));
        for col in &cols {
            let (m, s) = dsp::mean_std(col);
            mean.push(m);
            std.push(if s * s < dsp::ZSCORE_MIN_VARIANCE { 1.0 } else { s });
        }
        Ok(FeatureNormalizer { mean, std, fitted_on })
    }

    pub fn transform(&self, values: &BandPowers) -> BandPowers {
        let flat = values.flatten();
        let z: Vec<f64> = (0..N_FEATURES).map(|i| (flat[i] - self.mean[i]) / self.std[i]).collect();
        BandPowers::from_flat(&z).expect("N_FEATURES values")
    }

    /// Errors if `subject` contributed to the statistics.
    pub fn check_excludes(&self, subject: &SubjectId) -> Result<()> {
        if self.fitted_on.contains(subject) {
            return Err(Error::domain(format!("normalization statistics include test subject {subject}")));
        }
        Ok(())
    }
}

/// Normalizes, masks and renders one segment into a model sample.
pub fn build_sample(f: &SegmentFeatures, norm: &FeatureNormalizer, layout: &ElectrodeLayout, mask: &Mask) -> Result<Sample> {
    let mut v = norm.transform(&f.values);
    if let Mask::Channels(keep) = mask {
        for c in (0..N_CHANNELS).filter(|c| !keep.contains(c)) {
            v.values[c] = [0.0; N_BANDS];
        }
    }
    let map = topomap::build_map_from_values(&v, layout)?;
    let mut chw = map.to_chw();
    if let Mask::Bands(keep) = mask {
        for band in FrequencyBand::ALL.into_iter().filter(|b| !keep.contains(b)) {
            let plane = GRID * GRID;
            let start = band.index() * COLOR_PLANES * plane;
            chw[start..start + COLOR_PLANES * plane].fill(0.0);
        }
    }
    Ok(Sample {
        subject: f.subject.clone(),
        window_index: f.window_index,
        label: f.label,
        raw: f.raw.clone(),
        map: chw,
    })
}

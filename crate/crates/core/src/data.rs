//! EEG recordings, labelled segments, LOSO splits, on-disk formats and the
//! synthetic class-conditional generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Muse headband montage, in storage order.
pub const CHANNEL_NAMES: [&str; 4] = ["TP9", "AF7", "AF8", "TP10"];
pub const N_CHANNELS: usize = 4;
pub const DEFAULT_SAMPLE_RATE: f64 = 256.0;
pub const DEFAULT_WINDOW_S: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubjectId(String);

impl SubjectId {
    pub fn new(id: impl Into<String>) -> Self {
        SubjectId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SubjectId {
    fn from(s: &str) -> Self {
        SubjectId(s.to_owned())
    }
}

/// Binary cognitive-load class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CognitiveLoad {
    Low,
    High,
}

impl CognitiveLoad {
    /// Class index used by the classifier head (High is the positive class).
    pub fn index(self) -> usize {
        match self {
            CognitiveLoad::Low => 0,
            CognitiveLoad::High => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            CognitiveLoad::Low
        } else {
            CognitiveLoad::High
        }
    }
}

impl fmt::Display for CognitiveLoad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CognitiveLoad::Low => "low",
            CognitiveLoad::High => "high",
        })
    }
}

/// Maps a 9-point Paas mental-effort score onto the binary label: 1..=5 is
/// Low, 6..=9 is High.
pub fn binarize_paas(score: u8) -> Result<CognitiveLoad> {
    match score {
        1..=5 => Ok(CognitiveLoad::Low),
        6..=9 => Ok(CognitiveLoad::High),
        _ => Err(Error::domain(format!("paas score {score} outside 1..=9"))),
    }
}

/// A continuous multi-channel recording for one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct EegRecording {
    subject: SubjectId,
    sample_rate: f64,
    channels: Vec<String>,
    /// Row-major, one row per channel.
    samples: Vec<f32>,
    n_samples: usize,
    paas_scores: Vec<(usize, u8)>,
}

impl EegRecording {
    pub fn new(
        subject: SubjectId,
        sample_rate: f64,
        channels: Vec<String>,
        rows: Vec<Vec<f32>>,
        paas_scores: Vec<(usize, u8)>,
    ) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::domain(format!("sample rate {sample_rate} must be positive")));
        }
        if channels.len() != N_CHANNELS || rows.len() != N_CHANNELS {
            return Err(Error::domain(format!(
                "expected {N_CHANNELS} channels, got {} names and {} rows",
                channels.len(),
                rows.len()
            )));
        }
        let n_samples = rows[0].len();
        if rows.iter().any(|r| r.len() != n_samples) {
            return Err(Error::domain("channel sequences differ in length"));
        }
        if let Some(&(w, s)) = paas_scores.iter().find(|(_, s)| !(1..=9).contains(s)) {
            return Err(Error::domain(format!("paas score {s} for window {w} outside 1..=9")));
        }
        Ok(EegRecording {
            subject,
            sample_rate,
            channels,
            samples: rows.concat(),
            n_samples,
            paas_scores,
        })
    }

    pub fn subject(&self) -> &SubjectId {
        &self.subject
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples as f64 / self.sample_rate
    }

    pub fn paas_scores(&self) -> &[(usize, u8)] {
        &self.paas_scores
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.samples[c * self.n_samples..(c + 1) * self.n_samples]
    }

    /// Returns a copy with every channel replaced by `f(channel)`.
    pub fn map_channels(&self, mut f: impl FnMut(&[f32]) -> Vec<f32>) -> EegRecording {
        let rows: Vec<Vec<f32>> = (0..N_CHANNELS).map(|c| f(self.channel(c))).collect();
        debug_assert!(rows.iter().all(|r| r.len() == self.n_samples));
        EegRecording {
            samples: rows.concat(),
            ..self.clone()
        }
    }
}

/// One labelled window of 4-channel EEG.
#[derive(Clone, Debug, PartialEq)]
pub struct EegSegment {
    pub subject: SubjectId,
    pub window_index: usize,
    pub sample_rate: f64,
    pub label: CognitiveLoad,
    /// Row-major 4 x `len` microvolt values.
    data: Vec<f32>,
    len: usize,
}

impl EegSegment {
    pub fn new(
        subject: SubjectId,
        window_index: usize,
        sample_rate: f64,
        label: CognitiveLoad,
        rows: Vec<Vec<f32>>,
    ) -> Result<Self> {
        if rows.len() != N_CHANNELS {
            return Err(Error::domain(format!("segment needs {N_CHANNELS} rows, got {}", rows.len())));
        }
        let len = rows[0].len();
        if len == 0 || rows.iter().any(|r| r.len() != len) {
            return Err(Error::domain("segment rows must be non-empty and equal length"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain("segment contains NaN or infinite samples"));
        }
        Ok(EegSegment {
            subject,
            window_index,
            sample_rate,
            label,
            data: rows.concat(),
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Returns a copy with every channel replaced by `f(channel_index, channel)`.
    /// The closure must preserve channel length.
    pub fn map_channels(&self, mut f: impl FnMut(usize, &[f32]) -> Vec<f32>) -> EegSegment {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..N_CHANNELS {
            let row = f(c, self.channel(c));
            assert_eq!(row.len(), self.len, "channel map changed segment length");
            data.extend(row);
        }
        EegSegment {
            data,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Segmentation {
    pub segments: Vec<EegSegment>,
    /// Full windows dropped because no Paas score was recorded for them.
    pub missing_labels: usize,
}

/// Cuts a recording into consecutive non-overlapping windows. The trailing
/// partial window is dropped; windows without a Paas score are skipped and
/// counted.
pub fn segment_recording(rec: &EegRecording, window_s: f64) -> Result<Segmentation> {
    if !(window_s > 0.0) {
        return Err(Error::domain("window length must be positive"));
    }
    let win = (window_s * rec.sample_rate).round() as usize;
    if win == 0 {
        return Err(Error::domain("window shorter than one sample"));
    }
    let scores: BTreeMap<usize, u8> = rec.paas_scores.iter().copied().collect();
    let mut out = Segmentation::default();
    for w in 0..rec.n_samples / win {
        let Some(&score) = scores.get(&w) else {
            out.missing_labels += 1;
            continue;
        };
        let rows = (0..N_CHANNELS)
            .map(|c| rec.channel(c)[w * win..(w + 1) * win].to_vec())
            .collect();
        out.segments.push(EegSegment::new(
            rec.subject.clone(),
            w,
            rec.sample_rate,
            binarize_paas(score)?,
            rows,
        )?);
    }
    Ok(out)
}

/// One leave-one-subject-out fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LosoSplit {
    pub test_subject: SubjectId,
    pub train_subjects: BTreeSet<SubjectId>,
}

pub fn loso_splits(subjects: &BTreeSet<SubjectId>) -> Result<Vec<LosoSplit>> {
    if subjects.len() < 2 {
        return Err(Error::domain(format!(
            "LOSO needs at least 2 subjects, got {}",
            subjects.len()
        )));
    }
    Ok(subjects
        .iter()
        .map(|test| LosoSplit {
            test_subject: test.clone(),
            train_subjects: subjects.iter().filter(|s| *s != test).cloned().collect(),
        })
        .collect())
}

pub fn subjects_of(segments: &[EegSegment]) -> BTreeSet<SubjectId> {
    segments.iter().map(|s| s.subject.clone()).collect()
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// (lo, hi, base amplitude in uV) per band, delta..gamma.
const SYNTH_BANDS: [(f64, f64, f64); 5] = [
    (1.5, 3.5, 12.0),
    (4.5, 7.5, 8.0),
    (8.5, 11.5, 10.0),
    (14.0, 28.0, 4.0),
    (33.0, 70.0, 1.5),
];

/// Spatial amplitude profile per band over TP9, AF7, AF8, TP10. Theta is
/// frontal, alpha temporal.
const SYNTH_SPATIAL: [[f64; 4]; 5] = [
    [1.0, 1.0, 1.0, 1.0],
    [0.5, 1.0, 1.0, 0.5],
    [1.0, 0.5, 0.5, 1.0],
    [1.0, 1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0, 1.0],
];

const SYNTH_COMPONENTS: usize = 3;
const SYNTH_NOISE_STD: f64 = 4.0;
const SYNTH_LINE_AMP: f64 = 3.0;
const THETA_HIGH_GAIN: f64 = 2.0;
const ALPHA_HIGH_GAIN: f64 = 0.5;

struct SubjectProfile {
    channel_gain: [f64; 4],
    band_gain: [f64; 5],
    freqs: [[f64; SYNTH_COMPONENTS]; 5],
    phase: f64,
}

impl SubjectProfile {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut channel_gain = [0.0; 4];
        for g in &mut channel_gain {
            *g = rng.random_range(0.75..1.3);
        }
        let mut band_gain = [0.0; 5];
        for g in &mut band_gain {
            *g = rng.random_range(0.8..1.25);
        }
        let mut freqs = [[0.0; SYNTH_COMPONENTS]; 5];
        for (b, row) in freqs.iter_mut().enumerate() {
            let (lo, hi, _) = SYNTH_BANDS[b];
            for f in row.iter_mut() {
                *f = rng.random_range(lo..hi);
            }
        }
        SubjectProfile {
            channel_gain,
            band_gain,
            freqs,
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }
}

/// Pink (1/f power) Gaussian noise with unit standard deviation.
fn pink_noise(n: usize, fs: f64, rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        let f = (bin as f64 * fs / n as f64).max(1.0);
        *v /= f.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let re: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = re.iter().sum::<f64>() / n as f64;
    let sd = (re.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt();
    re.iter().map(|x| (x - mean) / sd).collect()
}

/// Deterministic class-conditional synthetic EEG at 256 Hz, 10 s windows.
///
/// Each channel is a sum of band-limited sinusoids plus 1/f noise and a
/// weak 60 Hz line component. High-load windows scale the theta components
/// by 2 and the alpha components by 0.5. Subjects differ in channel gain,
/// band gain, component frequencies and phase. Each subject receives
/// `floor(n/2)` High windows in shuffled order.
pub fn synth_generate(n_subjects: usize, segs_per_subject: usize, seed: u64) -> Result<Vec<EegSegment>> {
    if n_subjects == 0 || segs_per_subject == 0 {
        return Err(Error::domain("synthetic generator needs at least one subject and one segment"));
    }
    let fs = DEFAULT_SAMPLE_RATE;
    let n = (DEFAULT_WINDOW_S * fs) as usize;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut planner = FftPlanner::new();
    let mut out = Vec::with_capacity(n_subjects * segs_per_subject);
    for s in 0..n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let subject = SubjectId::new(format!("S{:02}", s + 1));
        let profile = SubjectProfile::draw(&mut rng);
        let mut labels: Vec<CognitiveLoad> = (0..segs_per_subject)
            .map(|i| {
                if i < segs_per_subject / 2 {
                    CognitiveLoad::High
                } else {
                    CognitiveLoad::Low
                }
            })
            .collect();
        labels.shuffle(&mut rng);
        for (w, &label) in labels.iter().enumerate() {
            let rows = (0..N_CHANNELS)
                .map(|c| {
                    let mut x = pink_noise(n, fs, &mut rng, &mut planner);
                    for v in &mut x {
                        *v *= SYNTH_NOISE_STD;
                    }
                    for (b, &(_, _, base)) in SYNTH_BANDS.iter().enumerate() {
                        let class_gain = match (label, b) {
                            (CognitiveLoad::High, 1) => THETA_HIGH_GAIN,
                            (CognitiveLoad::High, 2) => ALPHA_HIGH_GAIN,
                            _ => 1.0,
                        };
                        for &f in &profile.freqs[b] {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            let jitter = 1.0 + 0.1 * z;
                            let amp = base * SYNTH_SPATIAL[b][c] * profile.band_gain[b] * class_gain * jitter
                                / (SYNTH_COMPONENTS as f64).sqrt();
                            let phase = profile.phase + 0.3 * c as f64 + rng.random_range(0.0..std::f64::consts::TAU);
                            let w = std::f64::consts::TAU * f / fs;
                            for (i, v) in x.iter_mut().enumerate() {
                                *v += amp * (w * i as f64 + phase).sin();
                            }
                        }
                    }
                    let line_w = std::f64::consts::TAU * 60.0 / fs;
                    for (i, v) in x.iter_mut().enumerate() {
                        *v += SYNTH_LINE_AMP * (line_w * i as f64).sin();
                    }
                    x.iter().map(|v| (v * profile.channel_gain[c]) as f32).collect()
                })
                .collect();
            out.push(EegSegment::new(subject.clone(), w, fs, label, rows)?);
        }
    }
    Ok(out)
}

/// Groups consecutive segments of each subject into one continuous
/// recording, with a representative Paas score per window (3 for Low,
/// 7 for High).
pub fn recordings_from_segments(segments: &[EegSegment]) -> Result<Vec<EegRecording>> {
    let mut by_subject: BTreeMap<&SubjectId, Vec<&EegSegment>> = BTreeMap::new();
    for s in segments {
        by_subject.entry(&s.subject).or_default().push(s);
    }
    by_subject
        .into_iter()
        .map(|(subject, mut segs)| {
            segs.sort_by_key(|s| s.window_index);
            let rows = (0..N_CHANNELS)
                .map(|c| segs.iter().flat_map(|s| s.channel(c).iter().copied()).collect())
                .collect();
            let scores = segs
                .iter()
                .enumerate()
                .map(|(i, s)| (i, if s.label == CognitiveLoad::High { 7 } else { 3 }))
                .collect();
            EegRecording::new(
                subject.clone(),
                segs[0].sample_rate,
                CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
                rows,
                scores,
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// On-disk format

pub const RECORDING_FILE: &str = "recording.f32le";
pub const META_FILE: &str = "recording.meta";
pub const LABEL_FILE: &str = "labels.tsv";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<subject>/{recording.f32le, recording.meta, labels.tsv}`.
pub fn write_recording(root: &Path, rec: &EegRecording) -> Result<PathBuf> {
    let dir = root.join(rec.subject.as_str());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let bin = dir.join(RECORDING_FILE);
    let mut bytes = Vec::with_capacity(rec.samples.len() * 4);
    for v in &rec.samples {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;

    let meta = dir.join(META_FILE);
    let text = format!(
        "sample_rate={}\nchannels={}\nn_samples={}\n",
        rec.sample_rate,
        rec.channels.join(","),
        rec.n_samples
    );
    fs::write(&meta, text).map_err(|e| Error::io(&meta, e))?;

    let labels = dir.join(LABEL_FILE);
    let mut text = String::new();
    for (w, s) in &rec.paas_scores {
        text.push_str(&format!("{w}\t{s}\n"));
    }
    fs::write(&labels, text).map_err(|e| Error::io(&labels, e))?;
    Ok(dir)
}

pub(crate) fn parse_key_values(text: &str) -> impl Iterator<Item = (usize, &str, &str)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            return None;
        }
        let (k, v) = line.split_once('=').unwrap_or((line, ""));
        Some((i + 1, k.trim(), v.trim()))
    })
}

/// Reads one subject directory written by [`write_recording`]. The
/// subject id is the directory name. A missing label file yields a
/// recording with no scores.
pub fn read_recording(dir: &Path) -> Result<EegRecording> {
    let meta_path = dir.join(META_FILE);
    let meta = read_text(&meta_path)?;
    let (mut fs_hz, mut channels, mut n_samples) = (None, None, None);
    for (line, k, v) in parse_key_values(&meta) {
        let bad = |d: String| Error::format("meta", &meta_path, format!("line {line}: {d}"));
        match k {
            "sample_rate" => fs_hz = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "channels" => channels = Some(v.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>()),
            "n_samples" => n_samples = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
    }
    let missing = |k: &str| Error::format("meta", &meta_path, format!("missing `{k}`"));
    let fs_hz = fs_hz.ok_or_else(|| missing("sample_rate"))?;
    let channels = channels.ok_or_else(|| missing("channels"))?;
    let n_samples = n_samples.ok_or_else(|| missing("n_samples"))?;

    let bin_path = dir.join(RECORDING_FILE);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected = channels.len() * n_samples * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            "recording",
            &bin_path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let flat: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let rows = flat.chunks(n_samples.max(1)).map(|r| r.to_vec()).collect();

    let label_path = dir.join(LABEL_FILE);
    let scores = if label_path.exists() {
        read_labels(&label_path)?
    } else {
        Vec::new()
    };
    let subject = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    EegRecording::new(SubjectId::new(subject), fs_hz, channels, rows, scores)
}

/// Reads every subject directory under `root` that holds a `recording.meta`.
pub fn read_dataset(root: &Path) -> Result<Vec<EegRecording>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format("dataset", root, "no subject directories with recording.meta"));
    }
    dirs.iter().map(|d| read_recording(d)).collect()
}

/// Converts a `t,ch1,ch2,ch3,ch4` CSV into the binary recording format.
/// The sample rate is taken from `sample_rate` when given, otherwise from
/// the median spacing of the `t` column (seconds). Labels are copied from
/// `labels` when given.
pub fn import_csv(
    csv_path: &Path,
    out_root: &Path,
    subject: &SubjectId,
    sample_rate: Option<f64>,
    labels: Option<&Path>,
) -> Result<PathBuf> {
    let file = fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut times = Vec::new();
    let mut rows: Vec<Vec<f32>> = vec![Vec::new(); N_CHANNELS];
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(csv_path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if i == 0 && fields.first().is_some_and(|f| f.parse::<f64>().is_err()) {
            if fields != ["t", "ch1", "ch2", "ch3", "ch4"] {
                return Err(Error::format("csv", csv_path, format!("unexpected header `{line}`")));
            }
            continue;
        }
        if fields.len() != 1 + N_CHANNELS {
            return Err(Error::format(
                "csv",
                csv_path,
                format!("line {}: expected 5 columns, found {}", i + 1, fields.len()),
            ));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::format("csv", csv_path, format!("line {}: {e}", i + 1)))
        };
        times.push(parse(fields[0])?);
        for c in 0..N_CHANNELS {
            rows[c].push(parse(fields[c + 1])? as f32);
        }
    }
    let fs_hz = match sample_rate {
        Some(f) => f,
        None => {
            if times.len() < 2 {
                return Err(Error::format("csv", csv_path, "cannot infer sample rate from fewer than 2 rows"));
            }
            let mut dt: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
            dt.sort_by(f64::total_cmp);
            let med = dt[dt.len() / 2];
            if !(med > 0.0) {
                return Err(Error::format("csv", csv_path, "time column is not increasing"));
            }
            (1.0 / med * 1e6).round() / 1e6
        }
    };
    let scores = match labels {
        Some(p) => read_labels(p)?,
        None => Vec::new(),
    };
    let rec = EegRecording::new(
        subject.clone(),
        fs_hz,
        CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        rows,
        scores,
    )?;
    write_recording(out_root, &rec)
}

/// Parses a `window_index<TAB>paas_score` file.
pub fn read_labels(path: &Path) -> Result<Vec<(usize, u8)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed = line
            .split_once('\t')
            .and_then(|(w, s)| Some((w.trim().parse::<usize>().ok()?, s.trim().parse::<u8>().ok()?)));
        out.push(parsed.ok_or_else(|| {
            Error::format("labels", path, format!("line {}: expected `window<TAB>score`", i + 1))
        })?);
    }
    Ok(out)
}

/// Writes a segment list as per-subject recordings under `root`.
pub fn write_segments_as_dataset(root: &Path, segments: &[EegSegment]) -> Result<Vec<PathBuf>> {
    recordings_from_segments(segments)?
        .iter()
        .map(|r| write_recording(root, r))
        .collect()
}

/// Writes a plain TSV table.
pub(crate) fn write_tsv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join("\t")).map_err(io)?;
    for r in rows {
        writeln!(w, "{}", r.join("\t")).map_err(io)?;
    }
    w.flush().map_err(io)
}

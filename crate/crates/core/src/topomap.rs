//! Scalp topography maps: multiquadric RBF interpolation of the four channel
//! values of each band onto a 32x32 grid, Jet coloring on a symmetric scale,
//! and band-major stacking into a 32x32x15 tensor.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::N_CHANNELS;
use crate::error::{Error, Result};
use crate::spectral::{BandPowers, FrequencyBand, N_BANDS, POWER_FLOOR};

pub const GRID: usize = 32;
pub const COLOR_PLANES: usize = 3;
pub const MAP_CHANNELS: usize = N_BANDS * COLOR_PLANES;
pub const MAP_LEN: usize = GRID * GRID * MAP_CHANNELS;
/// Symmetric color limits at or below this are treated as a flat map.
pub const JET_MIN_VMAX: f64 = 1e-9;

/// 2-D electrode positions on the unit head disk (nose up, left on the
/// left), in channel order TP9, AF7, AF8, TP10.
#[derive(Clone, Debug, PartialEq)]
pub struct ElectrodeLayout {
    positions: [(f64, f64); N_CHANNELS],
}

impl Default for ElectrodeLayout {
    fn default() -> Self {
        ElectrodeLayout {
            positions: [(-0.95, -0.25), (-0.55, 0.78), (0.55, 0.78), (0.95, -0.25)],
        }
    }
}

impl ElectrodeLayout {
    /// Positions must lie inside the unit disk and be left/right mirror
    /// images (TP9 <-> TP10, AF7 <-> AF8).
    pub fn new(positions: [(f64, f64); N_CHANNELS]) -> Result<Self> {
        if positions.iter().any(|&(x, y)| !(x * x + y * y < 1.0)) {
            return Err(Error::domain("electrode outside the unit disk"));
        }
        let mirrored = |a: (f64, f64), b: (f64, f64)| (a.0 + b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12;
        if !mirrored(positions[0], positions[3]) || !mirrored(positions[1], positions[2]) {
            return Err(Error::domain("electrode layout is not left/right symmetric"));
        }
        Ok(ElectrodeLayout { positions })
    }

    pub fn positions(&self) -> &[(f64, f64); N_CHANNELS] {
        &self.positions
    }

    /// Lattice coordinate of column `c` / row `r`: x runs left to right,
    /// y runs from +1 (front) at row 0 to -1 at the last row.
    pub fn grid_point(r: usize, c: usize) -> (f64, f64) {
        let step = 2.0 / (GRID - 1) as f64;
        (-1.0 + c as f64 * step, 1.0 - r as f64 * step)
    }
}

/// Exact multiquadric interpolant through the four electrodes.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfInterpolator {
    nodes: [(f64, f64); N_CHANNELS],
    weights: [f64; N_CHANNELS],
    epsilon: f64,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Solves a small dense system by Gaussian elimination with partial
/// pivoting. Returns `None` when a pivot vanishes.
fn solve_dense<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..N {
        let piv = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            for k in col..N {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let s: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

impl RbfInterpolator {
    fn kernel(&self, r: f64) -> f64 {
        (r * r + self.epsilon * self.epsilon).sqrt()
    }

    pub fn evaluate(&self, x: f64, y: f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&n, w)| w * self.kernel(dist(n, (x, y))))
            .sum()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn nodes(&self) -> &[(f64, f64); N_CHANNELS] {
        &self.nodes
    }
}

/// Fits `phi(r) = sqrt(r^2 + eps^2)` with `eps` the mean pairwise node
/// distance.
pub fn fit_rbf(layout: &ElectrodeLayout, values: [f64; N_CHANNELS]) -> Result<RbfInterpolator> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("interpolation values must be finite"));
    }
    let nodes = layout.positions;
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..N_CHANNELS {
        for j in i + 1..N_CHANNELS {
            total += dist(nodes[i], nodes[j]);
            pairs += 1;
        }
    }
    let epsilon = total / pairs as f64;
    if !(epsilon > 0.0) {
        return Err(Error::domain("all electrodes coincide"));
    }
    let mut interp = RbfInterpolator {
        nodes,
        weights: [0.0; N_CHANNELS],
        epsilon,
    };
    let mut a = [[0.0; N_CHANNELS]; N_CHANNELS];
    for i in 0..N_CHANNELS {
        for j in 0..N_CHANNELS {
            a[i][j] = interp.kernel(dist(nodes[i], nodes[j]));
        }
    }
    interp.weights = solve_dense(a, values).ok_or_else(|| Error::domain("singular RBF system (coincident electrodes)"))?;
    Ok(interp)
}

/// Evaluates the interpolant on the full 32x32 lattice, row-major. No head
/// mask is applied.
pub fn render_band(interp: &RbfInterpolator) -> Vec<f64> {
    let mut out = Vec::with_capacity(GRID * GRID);
    for r in 0..GRID {
        for c in 0..GRID {
            let (x, y) = ElectrodeLayout::grid_point(r, c);
            out.push(interp.evaluate(x, y));
        }
    }
    out
}

/// Jet color of a value already normalized to `[0, 1]`.
pub fn jet(v: f64) -> [f64; 3] {
    let ch = |offset: f64| (1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

#[derive(Clone, Debug, PartialEq)]
pub struct JetImage {
    /// Row-major `GRID x GRID x 3`.
    pub rgb: Vec<f64>,
    /// `vmax` was not positive; every pixel holds the mid-scale color.
    pub degenerate: bool,
}

/// Colors `field` on the symmetric scale `[-vmax, vmax]`.
pub fn jet_colormap(field: &[f64], vmax: f64) -> JetImage {
    let degenerate = !(vmax > JET_MIN_VMAX);
    let mut rgb = Vec::with_capacity(field.len() * 3);
    for &v in field {
        let norm = if degenerate { 0.5 } else { ((v + vmax) / (2.0 * vmax)).clamp(0.0, 1.0) };
        rgb.extend_from_slice(&jet(norm));
    }
    JetImage { rgb, degenerate }
}

pub fn max_abs(field: &[f64]) -> f64 {
    field.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// How raw per-channel band values are conditioned before interpolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapValueOptions {
    /// Take `log10(max(P, floor))` first.
    pub log_power: bool,
    /// Subtract each band's mean over the four channels.
    pub center: bool,
}

impl Default for MapValueOptions {
    fn default() -> Self {
        MapValueOptions {
            log_power: true,
            center: true,
        }
    }
}

pub fn log_transform(powers: &BandPowers) -> BandPowers {
    let mut out = powers.clone();
    for v in out.values.iter_mut().flatten() {
        *v = v.max(POWER_FLOOR).log10();
    }
    out
}

pub fn center_bands(values: &BandPowers) -> BandPowers {
    let mut out = values.clone();
    for b in 0..N_BANDS {
        let col: Vec<f64> = (0..N_CHANNELS).map(|c| values.values[c][b]).collect();
        let mean = col.iter().sum::<f64>() / N_CHANNELS as f64;
        for c in 0..N_CHANNELS {
            out.values[c][b] = values.values[c][b] - mean;
        }
    }
    out
}

pub fn condition_values(powers: &BandPowers, opts: MapValueOptions) -> BandPowers {
    let v = if opts.log_power { log_transform(powers) } else { powers.clone() };
    if opts.center {
        center_bands(&v)
    } else {
        v
    }
}

/// `GRID x GRID x 15` tensor, row-major with the 15 planes innermost and
/// band-major (delta RGB, theta RGB, ...). Entries lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSpectralMap {
    data: Vec<f32>,
}

impl MultiSpectralMap {
    pub fn from_hwc(data: Vec<f32>) -> Result<Self> {
        if data.len() != MAP_LEN {
            return Err(Error::domain(format!("map needs {MAP_LEN} values, got {}", data.len())));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain("map entries must lie in [0, 1]"));
        }
        Ok(MultiSpectralMap { data })
    }

    pub fn hwc(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize, plane: usize) -> f32 {
        self.data[(r * GRID + c) * MAP_CHANNELS + plane]
    }

    pub fn plane(&self, plane: usize) -> Vec<f32> {
        (0..GRID * GRID).map(|i| self.data[i * MAP_CHANNELS + plane]).collect()
    }

    /// Planes-first layout `[15, 32, 32]` for the convolutional encoder.
    pub fn to_chw(&self) -> Vec<f32> {
        let mut out = vec![0.0; MAP_LEN];
        for i in 0..GRID * GRID {
            for p in 0..MAP_CHANNELS {
                out[p * GRID * GRID + i] = self.data[i * MAP_CHANNELS + p];
            }
        }
        out
    }

    /// Sets the three planes of every band except `keep` to zero.
    pub fn keep_only_band(&self, keep: FrequencyBand) -> MultiSpectralMap {
        let mut data = self.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            if (i % MAP_CHANNELS) / COLOR_PLANES != keep.index() {
                *v = 0.0;
            }
        }
        MultiSpectralMap { data }
    }

    pub fn write_f32le(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_f32le(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != MAP_LEN * 4 {
            return Err(Error::format("map", path, format!("expected {} bytes", MAP_LEN * 4)));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        MultiSpectralMap::from_hwc(data).map_err(|e| Error::format("map", path, e.to_string()))
    }

    /// Binary PPM (P6) preview of one band's RGB planes.
    pub fn write_ppm(&self, band: FrequencyBand, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{GRID} {GRID}\n255\n").into_bytes();
        for i in 0..GRID * GRID {
            for k in 0..COLOR_PLANES {
                let v = self.data[i * MAP_CHANNELS + band.index() * COLOR_PLANES + k];
                bytes.push((v * 255.0).round() as u8);
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

/// Builds the tensor from already-conditioned per-channel band values: per
/// band fit, render, and color with that band's own `vmax = max |field|`.
pub fn build_map_from_values(values: &BandPowers, layout: &ElectrodeLayout) -> Result<MultiSpectralMap> {
    let mut data = vec![0.0f32; MAP_LEN];
    for band in FrequencyBand::ALL {
        let interp = fit_rbf(layout, values.band(band))?;
        let field = render_band(&interp);
        let img = jet_colormap(&field, max_abs(&field));
        for i in 0..GRID * GRID {
            for k in 0..COLOR_PLANES {
                data[i * MAP_CHANNELS + band.index() * COLOR_PLANES + k] = img.rgb[i * COLOR_PLANES + k] as f32;
            }
        }
    }
    Ok(MultiSpectralMap { data })
}

/// Band powers to multi-spectral map with the given conditioning.
pub fn build_multispectral_map(
    powers: &BandPowers,
    layout: &ElectrodeLayout,
    opts: MapValueOptions,
) -> Result<MultiSpectralMap> {
    build_map_from_values(&condition_values(powers, opts), layout)
}

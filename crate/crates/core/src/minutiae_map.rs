//! Minutiae-map encoding.
//!
//! A variable-length minutiae set is quantized into a dense `h × w × c`
//! heatmap. Each minutia contributes a spatial Gaussian around its location
//! (in map-cell units, measured to cell centres) multiplied by an orientation
//! kernel evaluated at each channel's centre angle `2kπ/c`.
//!
//! Maps are stored channel-last, row-major, as `f32`. Per-cell sums are
//! accumulated in `f64` in minutia order, so the result does not depend on
//! the evaluation strategy beyond the truncated tail.

use std::f64::consts::{PI, TAU};
use std::io::{BufRead, Read, Write};

use crate::error::{ensure_finite, format_err, validation, Error, Result};

/// A single minutia: position in source-image pixels and direction in radians.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Minutia {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Minutia {
    /// Builds a minutia, reducing `theta` into `[0, 2π)`.
    pub fn new(x: f64, y: f64, theta: f64) -> Result<Self> {
        ensure_finite("minutia x", x)?;
        ensure_finite("minutia y", y)?;
        ensure_finite("minutia theta", theta)?;
        Ok(Minutia {
            x,
            y,
            theta: reduce_angle(theta),
        })
    }
}

/// Reduces an angle into `[0, 2π)`.
pub fn reduce_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// An ordered minutiae set together with the source image dimensions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MinutiaeTemplate {
    minutiae: Vec<Minutia>,
    w_img: u32,
    h_img: u32,
}

impl MinutiaeTemplate {
    pub const DEFAULT_SIDE: u32 = 448;

    pub fn new(minutiae: Vec<Minutia>, w_img: u32, h_img: u32) -> Result<Self> {
        if w_img == 0 || h_img == 0 {
            return Err(validation("template image dimensions must be positive"));
        }
        let mut out = Vec::with_capacity(minutiae.len());
        for (idx, m) in minutiae.into_iter().enumerate() {
            let m = Minutia::new(m.x, m.y, m.theta)?;
            if !(0.0..w_img as f64).contains(&m.x) || !(0.0..h_img as f64).contains(&m.y) {
                return Err(validation(format!(
                    "minutia {idx} at ({}, {}) lies outside the {w_img}x{h_img} image",
                    m.x, m.y
                )));
            }
            out.push(m);
        }
        Ok(MinutiaeTemplate {
            minutiae: out,
            w_img,
            h_img,
        })
    }

    pub fn empty(w_img: u32, h_img: u32) -> Result<Self> {
        Self::new(Vec::new(), w_img, h_img)
    }

    pub fn minutiae(&self) -> &[Minutia] {
        &self.minutiae
    }

    pub fn len(&self) -> usize {
        self.minutiae.len()
    }

    pub fn is_empty(&self) -> bool {
        self.minutiae.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.w_img
    }

    pub fn height(&self) -> u32 {
        self.h_img
    }

    /// Multiset union of two templates over the same image.
    pub fn union(&self, other: &MinutiaeTemplate) -> Result<Self> {
        if self.w_img != other.w_img || self.h_img != other.h_img {
            return Err(validation("cannot merge templates with different image sizes"));
        }
        let mut all = self.minutiae.clone();
        all.extend_from_slice(&other.minutiae);
        Self::new(all, self.w_img, self.h_img)
    }

    /// Parses the `MNT <w> <h> <n>` text format.
    pub fn read_mnt<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader
            .lines()
            .map(|l| l.map_err(Error::from))
            .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()));
        let header = lines
            .next()
            .ok_or_else(|| format_err("empty minutiae file"))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "MNT" {
            return Err(format_err(format!("bad minutiae header: {header:?}")));
        }
        let w: u32 = parse_field(fields[1], "width")?;
        let h: u32 = parse_field(fields[2], "height")?;
        let n: usize = parse_field(fields[3], "count")?;
        let mut minutiae = Vec::with_capacity(n);
        for idx in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| format_err(format!("expected {n} minutiae, found {idx}")))??;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != 3 {
                return Err(format_err(format!("bad minutia line {}: {line:?}", idx + 1)));
            }
            minutiae.push(Minutia {
                x: parse_field(vals[0], "x")?,
                y: parse_field(vals[1], "y")?,
                theta: parse_field(vals[2], "theta")?,
            });
        }
        if let Some(extra) = lines.next() {
            return Err(format_err(format!("trailing data after minutiae: {:?}", extra?)));
        }
        Self::new(minutiae, w, h)
    }

    pub fn write_mnt<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "MNT {} {} {}", self.w_img, self.h_img, self.minutiae.len())?;
        for m in &self.minutiae {
            writeln!(writer, "{} {} {}", m.x, m.y, m.theta)?;
        }
        Ok(())
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| format_err(format!("cannot parse {what} from {s:?}")))
}

/// Encoding parameters. A non-positive `truncation_radius` selects the
/// exhaustive evaluation of every cell.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MapConfig {
    pub h_map: usize,
    pub w_map: usize,
    pub channels: usize,
    /// Spatial bandwidth, in map cells.
    pub sigma_s: f64,
    /// Orientation bandwidth, in radians.
    pub sigma_o: f64,
    /// Cut-off distance in multiples of `sigma_s`.
    pub truncation_radius: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            h_map: 128,
            w_map: 128,
            channels: 6,
            sigma_s: 2.0,
            sigma_o: 2.0,
            truncation_radius: 6.0,
        }
    }
}

impl MapConfig {
    pub fn with_dims(h_map: usize, w_map: usize, channels: usize) -> Self {
        MapConfig {
            h_map,
            w_map,
            channels,
            ..Default::default()
        }
    }

    /// Same configuration with truncation disabled.
    pub fn exhaustive(mut self) -> Self {
        self.truncation_radius = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_map == 0 || self.w_map == 0 || self.channels == 0 {
            return Err(validation("map dimensions must be at least 1"));
        }
        ensure_finite("sigma_s", self.sigma_s)?;
        ensure_finite("sigma_o", self.sigma_o)?;
        ensure_finite("truncation_radius", self.truncation_radius)?;
        if self.sigma_s <= 0.0 || self.sigma_o <= 0.0 {
            return Err(validation("sigma_s and sigma_o must be positive"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.h_map * self.w_map * self.channels
    }

    /// Centre angle of channel `k`.
    pub fn channel_angle(&self, k: usize) -> f64 {
        TAU * k as f64 / self.channels as f64
    }
}

/// Minimal angular distance on the 2π circle, in `[0, π]`.
pub fn orientation_diff(theta1: f64, theta2: f64) -> Result<f64> {
    ensure_finite("theta1", theta1)?;
    ensure_finite("theta2", theta2)?;
    Ok(circular_distance(reduce_angle(theta1), reduce_angle(theta2)))
}

#[inline]
fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d <= PI {
        d
    } else {
        TAU - d
    }
}

/// Spatial kernel between a minutia at `(mx, my)` (map cells) and the centre
/// of cell `(i, j)`, which sits at `(j + 0.5, i + 0.5)`.
#[inline]
pub fn spatial_contribution(mx: f64, my: f64, i: usize, j: usize, sigma_s: f64) -> f64 {
    let dx = mx - (j as f64 + 0.5);
    let dy = my - (i as f64 + 0.5);
    (-(dx * dx + dy * dy) / (2.0 * sigma_s * sigma_s)).exp()
}

/// Orientation kernel for channel `k` of `c`. The angular difference enters
/// the exponent unsquared.
pub fn orientation_contribution(theta: f64, k: usize, c: usize, sigma_o: f64) -> Result<f64> {
    if k >= c {
        return Err(validation(format!("channel {k} out of range for {c} channels")));
    }
    let d = orientation_diff(theta, TAU * k as f64 / c as f64)?;
    Ok((-d / (2.0 * sigma_o * sigma_o)).exp())
}

/// Dense `h × w × c` heatmap, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct MinutiaeMap {
    values: Vec<f32>,
    config: MapConfig,
}

impl MinutiaeMap {
    pub fn zeros(config: MapConfig) -> Result<Self> {
        config.validate()?;
        Ok(MinutiaeMap {
            values: vec![0.0; config.cells()],
            config,
        })
    }

    pub fn from_values(values: Vec<f32>, config: MapConfig) -> Result<Self> {
        config.validate()?;
        if values.len() != config.cells() {
            return Err(validation(format!(
                "map has {} values, expected {}",
                values.len(),
                config.cells()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(validation("map values must be finite and non-negative"));
        }
        Ok(MinutiaeMap { values, config })
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.config.w_map + j) * self.config.channels + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }

    /// Writes the binary dump: a text header line followed by
    /// little-endian `f32` values.
    pub fn write_dump<W: Write>(&self, mut writer: W) -> Result<()> {
        let c = &self.config;
        writeln!(
            writer,
            "MAP {} {} {} {} {}",
            c.h_map, c.w_map, c.channels, c.sigma_s, c.sigma_o
        )?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        writer.write_all(&buf)?;
        Ok(())
    }

    pub fn read_dump<R: Read>(mut reader: R) -> Result<Self> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err("map dump has no header line"))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| format_err("map dump header is not UTF-8"))?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 6 || f[0] != "MAP" {
            return Err(format_err(format!("bad map header: {header:?}")));
        }
        let config = MapConfig {
            h_map: parse_field(f[1], "h")?,
            w_map: parse_field(f[2], "w")?,
            channels: parse_field(f[3], "c")?,
            sigma_s: parse_field(f[4], "sigma_s")?,
            sigma_o: parse_field(f[5], "sigma_o")?,
            ..MapConfig::default()
        };
        config.validate()?;
        let body = &bytes[nl + 1..];
        if body.len() != config.cells() * 4 {
            return Err(format_err(format!(
                "map body has {} bytes, expected {}",
                body.len(),
                config.cells() * 4
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        MinutiaeMap::from_values(values, config).map_err(|e| format_err(e.to_string()))
    }
}

/// Encodes a minutiae template into a heatmap.
pub fn encode_map(template: &MinutiaeTemplate, config: &MapConfig) -> Result<MinutiaeMap> {
    config.validate()?;
    let (h, w, c) = (config.h_map, config.w_map, config.channels);
    let sx = w as f64 / template.width() as f64;
    let sy = h as f64 / template.height() as f64;
    let mut acc = vec![0.0f64; config.cells()];
    let mut orient = vec![0.0f64; c];
    let cutoff = config.truncation_radius * config.sigma_s;
    let truncated = config.truncation_radius > 0.0;

    for m in template.minutiae() {
        let (mx, my) = (m.x * sx, m.y * sy);
        for (k, o) in orient.iter_mut().enumerate() {
            let d = circular_distance(m.theta, config.channel_angle(k));
            *o = (-d / (2.0 * config.sigma_o * config.sigma_o)).exp();
        }
        let (rows, cols) = if truncated {
            (cell_span(my, cutoff, h), cell_span(mx, cutoff, w))
        } else {
            (0..h, 0..w)
        };
        for i in rows {
            for j in cols.clone() {
                if truncated {
                    let dx = mx - (j as f64 + 0.5);
                    let dy = my - (i as f64 + 0.5);
                    if dx * dx + dy * dy > cutoff * cutoff {
                        continue;
                    }
                }
                let s = spatial_contribution(mx, my, i, j, config.sigma_s);
                let base = (i * w + j) * c;
                for (a, o) in acc[base..base + c].iter_mut().zip(&orient) {
                    *a += s * o;
                }
            }
        }
    }

    Ok(MinutiaeMap {
        values: acc.into_iter().map(|v| v as f32).collect(),
        config: *config,
    })
}

/// Cells whose centres may lie within `radius` of `centre` along one axis.
fn cell_span(centre: f64, radius: f64, len: usize) -> std::ops::Range<usize> {
    let lo = (centre - radius - 0.5).floor().max(0.0) as usize;
    let hi = ((centre + radius - 0.5).ceil() + 1.0).clamp(0.0, len as f64) as usize;
    lo.min(len)..hi
}

/// Recovers minutiae as local maxima of the map: the 3×3 spatial
/// neighbourhood crossed with the cyclically adjacent channels. Peaks are
/// reported at cell centres (converted to `w_img × h_img` pixels) with the
/// channel centre angle.
pub fn peak_extract(map: &MinutiaeMap, threshold: f32, w_img: u32, h_img: u32) -> Result<MinutiaeTemplate> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(validation(format!("peak threshold must lie in (0, 1], got {threshold}")));
    }
    let cfg = map.config();
    let (h, w, c) = (cfg.h_map, cfg.w_map, cfg.channels);
    let mut found = Vec::new();
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let v = map.get(i, j, k);
                if v < threshold || !is_peak(map, i, j, k, v) {
                    continue;
                }
                let x = (j as f64 + 0.5) * w_img as f64 / w as f64;
                let y = (i as f64 + 0.5) * h_img as f64 / h as f64;
                found.push(Minutia::new(x, y, cfg.channel_angle(k))?);
            }
        }
    }
    MinutiaeTemplate::new(found, w_img, h_img)
}

fn is_peak(map: &MinutiaeMap, i: usize, j: usize, k: usize, v: f32) -> bool {
    let cfg = map.config();
    let (h, w, c) = (cfg.h_map as isize, cfg.w_map as isize, cfg.channels as isize);
    let here = map.index(i, j, k);
    let mut channels = vec![k as isize];
    if c > 1 {
        channels.push((k as isize + 1) % c);
        channels.push((k as isize - 1).rem_euclid(c));
    }
    channels.dedup();
    for di in -1isize..=1 {
        for dj in -1isize..=1 {
            let (ni, nj) = (i as isize + di, j as isize + dj);
            if ni < 0 || nj < 0 || ni >= h || nj >= w {
                continue;
            }
            for &nk in &channels {
                let idx = map.index(ni as usize, nj as usize, nk as usize);
                if idx == here {
                    continue;
                }
                let nv = map.values()[idx];
                // Plateaus resolve to the first cell in scan order.
                if nv > v || (nv == v && idx < here) {
                    return false;
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orientation_diff_examples() {
        assert_eq!(orientation_diff(1.3, 1.3).unwrap(), 0.0);
        assert!((orientation_diff(0.0, PI).unwrap() - PI).abs() < 1e-15);
        assert!((orientation_diff(0.1, TAU - 0.1).unwrap() - 0.2).abs() < 1e-9);
        assert!(matches!(orientation_diff(f64::NAN, 0.0), Err(Error::Domain(_))));
        assert!(matches!(orientation_diff(0.0, f64::INFINITY), Err(Error::Domain(_))));
    }

    #[test]
    fn spatial_contribution_examples() {
        assert_eq!(spatial_contribution(4.5, 7.5, 7, 4, 2.0), 1.0);
        // distance sigma * sqrt(2)
        let s = 1.5;
        let v = spatial_contribution(0.5 + s * 2f64.sqrt(), 0.5, 0, 0, s);
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
        let v = spatial_contribution(10.5, 3.5, 3, 12, 2.0);
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn orientation_contribution_examples() {
        for k in 0..6 {
            let theta = TAU * k as f64 / 6.0;
            assert_eq!(orientation_contribution(theta, k, 6, 2.0).unwrap(), 1.0);
        }
        let v = orientation_contribution(TAU * 2.0 / 6.0 + PI, 2, 6, 1.0).unwrap();
        assert!((v - (-PI / 2.0).exp()).abs() < 1e-12);
        let v = orientation_contribution(PI / 3.0, 0, 6, 2.0).unwrap();
        assert!((v - (-(PI / 3.0) / 8.0).exp()).abs() < 1e-15);
        assert!(orientation_contribution(0.0, 6, 6, 1.0).is_err());
    }

    #[test]
    fn empty_template_gives_zero_map() {
        let t = MinutiaeTemplate::empty(448, 448).unwrap();
        let m = encode_map(&t, &MapConfig::default()).unwrap();
        assert_eq!(m.values().len(), 128 * 128 * 6);
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_minutia_at_cell_centre() {
        // Cell (i=20, j=30) centre is (30.5, 20.5) map cells = (106.75, 71.75) px.
        let k = 2;
        let theta = TAU * k as f64 / 6.0;
        let t = MinutiaeTemplate::new(vec![Minutia::new(106.75, 71.75, theta).unwrap()], 448, 448)
            .unwrap();
        let cfg = MapConfig::default();
        let fast = encode_map(&t, &cfg).unwrap();
        let full = encode_map(&t, &cfg.exhaustive()).unwrap();
        assert_eq!(fast.get(20, 30, k), 1.0);
        let max_diff = fast
            .values()
            .iter()
            .zip(full.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 1e-6, "max diff {max_diff}");

        let peaks = peak_extract(&fast, 1.0, 448, 448).unwrap();
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks.minutiae()[0].theta, theta);
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(MinutiaeTemplate::new(vec![Minutia { x: 448.0, y: 1.0, theta: 0.0 }], 448, 448).is_err());
        assert!(MinutiaeTemplate::new(vec![Minutia { x: -0.1, y: 1.0, theta: 0.0 }], 448, 448).is_err());
        let mut cfg = MapConfig::default();
        cfg.sigma_s = 0.0;
        let t = MinutiaeTemplate::empty(448, 448).unwrap();
        assert!(matches!(encode_map(&t, &cfg), Err(Error::Validation(_))));
        cfg = MapConfig::default();
        cfg.channels = 0;
        assert!(encode_map(&t, &cfg).is_err());
    }

    #[test]
    fn theta_is_reduced() {
        let m = Minutia::new(1.0, 1.0, -0.5).unwrap();
        assert!((m.theta - (TAU - 0.5)).abs() < 1e-12);
        let m = Minutia::new(1.0, 1.0, 3.0 * TAU + 0.25).unwrap();
        assert!((m.theta - 0.25).abs() < 1e-12);
        assert!(reduce_angle(-1e-300) < TAU);
    }

    #[test]
    fn zero_map_has_no_peaks() {
        let m = MinutiaeMap::zeros(MapConfig::default()).unwrap();
        assert!(peak_extract(&m, 0.5, 448, 448).unwrap().is_empty());
        assert!(peak_extract(&m, 0.0, 448, 448).is_err());
    }

    #[test]
    fn mnt_and_dump_formats() {
        let t = MinutiaeTemplate::new(
            vec![Minutia::new(10.25, 20.5, 1.0).unwrap(), Minutia::new(300.0, 12.0, 6.0).unwrap()],
            448,
            448,
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_mnt(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("MNT 448 448 2\n"));
        let back = MinutiaeTemplate::read_mnt(&buf[..]).unwrap();
        assert_eq!(back, t);

        assert!(MinutiaeTemplate::read_mnt(&b"MNT 448 448 2\n1 2 3\n"[..]).is_err());
        assert!(MinutiaeTemplate::read_mnt(&b"XYZ 448 448 0\n"[..]).is_err());

        let cfg = MapConfig::with_dims(8, 8, 3);
        let map = encode_map(&t, &cfg).unwrap();
        let mut dump = Vec::new();
        map.write_dump(&mut dump).unwrap();
        assert!(dump.starts_with(b"MAP 8 8 3 2 2\n"));
        assert_eq!(dump.len(), "MAP 8 8 3 2 2\n".len() + 8 * 8 * 3 * 4);
        let back = MinutiaeMap::read_dump(&dump[..]).unwrap();
        assert_eq!(back.values(), map.values());
        assert!(MinutiaeMap::read_dump(&dump[..dump.len() - 1]).is_err());
    }
}

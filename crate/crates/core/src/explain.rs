//! Class activation maps: weighted sums of the final feature maps by one
//! class's classifier row, plus normalization, upsampling and overlays.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::image::encode_png;
use crate::dataset::{Modality, RetinalImage};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatRange {
    Raw,
    Normalized,
}

/// Row-major `height × width` map.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    range: HeatRange,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, range: HeatRange) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape("heatmap", format!("{height}x{width} with {} values", values.len())));
        }
        Ok(Self { height, width, values, range })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn range(&self) -> HeatRange {
        self.range
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// One row per line, values separated by single spaces, printed with
    /// round-trip precision.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str, range: HeatRange) -> Result<Self> {
        let mut values = Vec::new();
        let mut width = None;
        let mut height = 0;
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let row = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| Error::Data(format!("heatmap line {}: {e}", i + 1))))
                .collect::<Result<Vec<_>>>()?;
            if *width.get_or_insert(row.len()) != row.len() {
                return Err(Error::Data(format!("heatmap line {}: ragged row", i + 1)));
            }
            values.extend(row);
            height += 1;
        }
        Self::new(height, width.unwrap_or(0), values, range)
    }

    /// 8-bit grayscale PNG; raw maps are normalized first.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let norm = normalize_heatmap(self);
        let pixels: Vec<u8> = norm.values.iter().map(|v| (v * 255.0).round() as u8).collect();
        encode_png(self.width, self.height, 1, &pixels)
    }
}

/// `M_c(y, x) = Σ_k W[c, k] · f_k(y, x)`.
pub fn compute_cam(feature_maps: &Tensor, classifier_weights: &Tensor, class_id: usize) -> Result<Heatmap> {
    let (fs, ws) = (feature_maps.shape(), classifier_weights.shape());
    if fs.len() != 3 || ws.len() != 2 || ws[1] != fs[0] {
        return Err(Error::shape("compute_cam", format!("feature maps {fs:?} vs weights {ws:?}")));
    }
    if class_id >= ws[0] {
        return Err(Error::invalid("compute_cam", format!("class {class_id} out of range 0..{}", ws[0])));
    }
    let (k, h, w) = (fs[0], fs[1], fs[2]);
    let row = &classifier_weights.data()[class_id * k..(class_id + 1) * k];
    let mut values = vec![0.0; h * w];
    for (ch, &wk) in row.iter().enumerate() {
        let plane = &feature_maps.data()[ch * h * w..(ch + 1) * h * w];
        for (v, &f) in values.iter_mut().zip(plane) {
            *v += wk * f;
        }
    }
    Heatmap::new(h, w, values, HeatRange::Raw)
}

/// Min-max scaling to [0, 1]; a constant map becomes all 0.5.
pub fn normalize_heatmap(map: &Heatmap) -> Heatmap {
    let min = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if max > min {
        map.values.iter().map(|v| (v - min) / (max - min)).collect()
    } else {
        vec![0.5; map.values.len()]
    };
    Heatmap { values, range: HeatRange::Normalized, ..*map }
}

/// Align-corners bilinear upsampling; corner values are kept exactly.
pub fn upsample_bilinear(map: &Heatmap, height: usize, width: usize) -> Result<Heatmap> {
    if height < map.height || width < map.width {
        return Err(Error::invalid(
            "upsample_bilinear",
            format!("cannot downscale {}x{} to {height}x{width}", map.height, map.width),
        ));
    }
    let coord = |i: usize, out: usize, src: usize| -> (usize, usize, f64) {
        if out == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let f = i as f64 * (src - 1) as f64 / (out - 1) as f64;
        let i0 = (f.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, f - i0 as f64)
    };
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, ty) = coord(y, height, map.height);
        for x in 0..width {
            let (x0, x1, tx) = coord(x, width, map.width);
            let top = map.at(y0, x0) * (1.0 - tx) + map.at(y0, x1) * tx;
            let bottom = map.at(y1, x0) * (1.0 - tx) + map.at(y1, x1) * tx;
            values.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    Heatmap::new(height, width, values, map.range)
}

/// Blue (0) → green (0.5) → red (1), piecewise linear, channel values in
/// [0, 255]. Inputs are clamped to [0, 1].
pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    if t <= 0.5 {
        let u = t / 0.5;
        [0.0, 255.0 * u, 255.0 * (1.0 - u)]
    } else {
        let u = (t - 0.5) / 0.5;
        [255.0 * u, 255.0 * (1.0 - u), 0.0]
    }
}

/// `(1 − alpha)·gray + alpha·colormap(heat)` per channel, rounded to 8 bits.
pub fn overlay(image: &RetinalImage, heatmap: &Heatmap, alpha: f64) -> Result<RetinalImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("overlay", format!("alpha {alpha} outside [0, 1]")));
    }
    if heatmap.height != image.height() || heatmap.width != image.width() {
        return Err(Error::shape(
            "overlay",
            format!("heatmap {}x{} vs image {}x{}", heatmap.height, heatmap.width, image.height(), image.width()),
        ));
    }
    let mut pixels = Vec::with_capacity(image.width() * image.height() * 3);
    for y in 0..image.height() {
        for x in 0..image.width() {
            let g = image.gray(x, y) as f64;
            for c in colormap(heatmap.at(y, x)) {
                pixels.push(((1.0 - alpha) * g + alpha * c).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RetinalImage::new(image.width(), image.height(), Modality::Cfp, pixels)
}

pub const DEFAULT_ALPHA: f64 = 0.5;

/// Raw CAM for `class_id` and its overlay at the image's own resolution.
pub fn explain_image(encoder: &Encoder, image: &RetinalImage, class_id: usize, alpha: f64) -> Result<(Heatmap, RetinalImage)> {
    let out = encoder.encode(image)?;
    let raw = compute_cam(&out.feature_maps, encoder.classifier_weights()?, class_id)?;
    let norm = normalize_heatmap(&raw);
    let up = upsample_bilinear(&norm, image.height(), image.width())?;
    Ok((raw, overlay(image, &up, alpha)?))
}

pub fn save_heatmap_png(map: &Heatmap, path: &Path) -> Result<()> {
    write_atomic(path, &map.to_png()?)
}

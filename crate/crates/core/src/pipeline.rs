//! Otsu threshold selection and the 8-step classical tissue-detection
//! pipeline, with per-step tracing.
//!
//! Pipeline order: grayscale -> Laplacian stencil convolution -> Otsu
//! binarization (signed response, strictly greater than the threshold) ->
//! closing -> opening -> hole filling -> thin-object removal -> HSV range
//! filter -> border clearing.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::morphology::{
    clear_border, close, fill_holes, open, remove_thin_objects, SeShape, StructuringElement,
};
use crate::raster::{
    convolve2d, pixel_hsv, to_grayscale, BinaryMask, GrayField, Kernel, RasterError, RasterImage,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    /// All field samples are equal; Otsu has no split to find.
    #[error("constant field: no threshold separates foreground from background")]
    ConstantField,
    #[error("image mpp ({got_x}, {got_y}) does not match target {expected} within 1%")]
    MppMismatch { expected: f64, got_x: f64, got_y: f64 },
    #[error("mask is {mask_w}x{mask_h} but image is {img_w}x{img_h}")]
    DimensionMismatch { mask_w: usize, mask_h: usize, img_w: usize, img_h: usize },
    #[error("parameter file: {0}")]
    Params(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Inclusive HSV acceptance ranges, each component in [0, 1]. The hue
/// range may wrap across 0 (lo > hi keeps h >= lo or h <= hi), since red
/// hues straddle zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsvRanges {
    pub h_lo: f64,
    pub h_hi: f64,
    pub s_lo: f64,
    pub s_hi: f64,
    pub v_lo: f64,
    pub v_hi: f64,
}

impl HsvRanges {
    pub fn full() -> Self {
        Self { h_lo: 0.0, h_hi: 1.0, s_lo: 0.0, s_hi: 1.0, v_lo: 0.0, v_hi: 1.0 }
    }

    #[inline]
    pub fn contains(&self, h: f64, s: f64, v: f64) -> bool {
        let hue_ok = if self.h_lo <= self.h_hi {
            h >= self.h_lo && h <= self.h_hi
        } else {
            h >= self.h_lo || h <= self.h_hi
        };
        hue_ok && s >= self.s_lo && s <= self.s_hi && v >= self.v_lo && v <= self.v_hi
    }
}

/// All tunable knobs of the classical pipeline. The values here are
/// cohort-specific in practice; `default()` is the uniform set shipped as
/// `default.params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationParams {
    pub close_se: StructuringElement,
    pub open_se: StructuringElement,
    pub min_minor_axis: f64,
    pub hsv_ranges: HsvRanges,
    pub border_margin: usize,
    pub target_mpp: f64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            close_se: StructuringElement::disk(2),
            open_se: StructuringElement::disk(2),
            min_minor_axis: 4.0,
            hsv_ranges: HsvRanges { h_lo: 0.0, h_hi: 1.0, s_lo: 0.02, s_hi: 1.0, v_lo: 0.0, v_hi: 0.98 },
            border_margin: 0,
            target_mpp: 8.0,
        }
    }
}

fn parse_se(v: &str) -> Result<StructuringElement, PipelineError> {
    let (shape, radius) = v
        .split_once(':')
        .ok_or_else(|| PipelineError::Params(format!("structuring element `{v}` is not shape:radius")))?;
    let radius: usize = radius
        .trim()
        .parse()
        .map_err(|_| PipelineError::Params(format!("bad radius in `{v}`")))?;
    if radius < 1 {
        return Err(PipelineError::Params("radius must be >= 1".into()));
    }
    let shape = match shape.trim() {
        "disk" => SeShape::Disk,
        "square" => SeShape::Square,
        other => return Err(PipelineError::Params(format!("unknown shape `{other}`"))),
    };
    Ok(StructuringElement { shape, radius })
}

impl SegmentationParams {
    /// Parses the flat key-value parameter format. Keys are exactly the
    /// field names; missing keys keep their defaults, unknown keys are
    /// rejected. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut p = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Params(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| PipelineError::Params(format!("line {}: bad {what} `{value}`", lineno + 1));
            match key {
                "close_se" => p.close_se = parse_se(value)?,
                "open_se" => p.open_se = parse_se(value)?,
                "min_minor_axis" => p.min_minor_axis = value.parse().map_err(|_| bad("number"))?,
                "border_margin" => p.border_margin = value.parse().map_err(|_| bad("integer"))?,
                "target_mpp" => p.target_mpp = value.parse().map_err(|_| bad("number"))?,
                "hsv_ranges" => {
                    let parts: Vec<f64> = value
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad("number list"))?;
                    if parts.len() != 6 {
                        return Err(PipelineError::Params(format!(
                            "line {}: hsv_ranges needs 6 values (h_lo,h_hi,s_lo,s_hi,v_lo,v_hi)",
                            lineno + 1
                        )));
                    }
                    p.hsv_ranges = HsvRanges {
                        h_lo: parts[0],
                        h_hi: parts[1],
                        s_lo: parts[2],
                        s_hi: parts[3],
                        v_lo: parts[4],
                        v_hi: parts[5],
                    };
                }
                other => return Err(PipelineError::Params(format!("line {}: unknown key `{other}`", lineno + 1))),
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let r = &self.hsv_ranges;
        for (name, v) in [
            ("h_lo", r.h_lo), ("h_hi", r.h_hi), ("s_lo", r.s_lo),
            ("s_hi", r.s_hi), ("v_lo", r.v_lo), ("v_hi", r.v_hi),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PipelineError::Params(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.target_mpp <= 0.0 {
            return Err(PipelineError::Params("target_mpp must be positive".into()));
        }
        if self.min_minor_axis < 0.0 {
            return Err(PipelineError::Params("min_minor_axis must be >= 0".into()));
        }
        Ok(())
    }

    /// Renders the parameter-file form of these values.
    pub fn to_file_string(&self) -> String {
        let r = &self.hsv_ranges;
        format!(
            "close_se = {}\nopen_se = {}\nmin_minor_axis = {}\nhsv_ranges = {},{},{},{},{},{}\nborder_margin = {}\ntarget_mpp = {}\n",
            self.close_se, self.open_se, self.min_minor_axis,
            r.h_lo, r.h_hi, r.s_lo, r.s_hi, r.v_lo, r.v_hi,
            self.border_margin, self.target_mpp,
        )
    }
}

/// Compare num1^2/den1 vs num2^2/den2 exactly where the cross products fit
/// in u128, falling back to f64 beyond that (only reachable for rasters in
/// the hundreds of megapixels, where exact ties cannot arise from shared
/// class sums anyway).
fn cmp_variance(num1: i128, den1: u128, num2: i128, den2: u128) -> std::cmp::Ordering {
    let (a, b) = (num1.unsigned_abs(), num2.unsigned_abs());
    match (
        a.checked_mul(a).and_then(|x| x.checked_mul(den2)),
        b.checked_mul(b).and_then(|x| x.checked_mul(den1)),
    ) {
        (Some(x), Some(y)) => x.cmp(&y),
        _ => {
            let x = (a as f64).powi(2) / den1 as f64;
            let y = (b as f64).powi(2) / den2 as f64;
            x.partial_cmp(&y).unwrap()
        }
    }
}

/// Index of the last background bin in the split maximizing between-class
/// variance, ties broken toward the smallest index. `None` when fewer than
/// two bins are occupied.
pub fn otsu_split_from_histogram(counts: &[u64]) -> Option<usize> {
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    let weighted_sum: u128 = counts.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let mut best: Option<(usize, i128, u128)> = None;
    let mut w_b: u128 = 0;
    let mut s_b: u128 = 0;
    let splits = counts.len().saturating_sub(1);
    for (k, &count) in counts.iter().enumerate().take(splits) {
        w_b += count as u128;
        s_b += k as u128 * count as u128;
        let w_f = total - w_b;
        if w_b == 0 {
            continue;
        }
        if w_f == 0 {
            break;
        }
        // Between-class variance is proportional to
        // (s_b*w_f - s_f*w_b)^2 / (w_b*w_f); the numerator is exact.
        let s_f = weighted_sum - s_b;
        let num = s_b as i128 * w_f as i128 - s_f as i128 * w_b as i128;
        let den = w_b * w_f;
        let improved = match &best {
            None => true,
            Some((_, bnum, bden)) => cmp_variance(num, den, *bnum, *bden) == std::cmp::Ordering::Greater,
        };
        if improved {
            best = Some((k, num, den));
        }
    }
    best.map(|(k, _, _)| k)
}

/// Otsu's threshold over a histogram of `bins` uniform bins spanning
/// [min, max] of the field. Returns the lower edge of the last background
/// bin; foreground is the set of values strictly greater than the
/// threshold. Ties break toward the smallest threshold.
pub fn otsu_threshold(f: &GrayField, bins: usize) -> Result<f64, PipelineError> {
    assert!(bins >= 2, "need at least 2 bins");
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in &f.data {
        min = min.min(v);
        max = max.max(v);
    }
    if min >= max {
        return Err(PipelineError::ConstantField);
    }
    let width = (max - min) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in &f.data {
        let b = (((v - min) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let k = otsu_split_from_histogram(&counts)
        .expect("min < max guarantees at least two occupied bins");
    Ok(min + k as f64 * width)
}

/// Keeps mask pixels whose HSV triplet lies inside all three ranges.
pub fn hsv_filter(
    m: &BinaryMask,
    img: &RasterImage,
    ranges: &HsvRanges,
) -> Result<BinaryMask, PipelineError> {
    if m.width != img.width || m.height != img.height {
        return Err(PipelineError::DimensionMismatch {
            mask_w: m.width,
            mask_h: m.height,
            img_w: img.width,
            img_h: img.height,
        });
    }
    if img.channels != 3 {
        return Err(RasterError::ChannelCount(img.channels).into());
    }
    let mut out = m.clone();
    for (i, keep) in out.bits.iter_mut().enumerate() {
        if *keep {
            let p = &img.data[i * 3..i * 3 + 3];
            let (h, s, v) = pixel_hsv(p[0], p[1], p[2]);
            *keep = ranges.contains(h, s, v);
        }
    }
    Ok(out)
}

/// One recorded pipeline step: the mask after the step plus wall time.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub name: &'static str,
    pub mask: BinaryMask,
    pub millis: f64,
}

/// Per-step mask snapshots (steps 2-8), the chosen threshold, and timings.
/// Supports visual audits of where a slide's segmentation went wrong.
#[derive(Debug, Clone)]
pub struct PipelineTrace {
    /// `None` when the convolved field was constant.
    pub threshold: Option<f64>,
    /// Set when Otsu found no split; the mask is all background.
    pub empty_segmentation: bool,
    pub steps: Vec<TraceStep>,
}

pub const STEP_NAMES: [&str; 7] = [
    "binarize", "close", "open", "fill_holes", "remove_thin_objects", "hsv_filter", "clear_border",
];

/// Runs the full classical pipeline on an RGB raster already at the
/// parameter set's target resolution (within 1%). A constant convolved
/// field is a flagged empty segmentation, not an error.
pub fn segment_tissue(
    img: &RasterImage,
    p: &SegmentationParams,
) -> Result<(BinaryMask, PipelineTrace), PipelineError> {
    let tol = 0.01 * p.target_mpp;
    if (img.mpp_x - p.target_mpp).abs() > tol || (img.mpp_y - p.target_mpp).abs() > tol {
        return Err(PipelineError::MppMismatch {
            expected: p.target_mpp,
            got_x: img.mpp_x,
            got_y: img.mpp_y,
        });
    }
    let gray = to_grayscale(img)?;
    let response = convolve2d(&gray, &Kernel::mehrstellen())?;

    let mut steps = Vec::with_capacity(7);
    let t0 = Instant::now();
    let (threshold, mut mask, empty_segmentation) = match otsu_threshold(&response, 256) {
        Ok(t) => {
            let bits = response.data.iter().map(|&v| v > t).collect();
            (Some(t), BinaryMask::new(img.width, img.height, bits, img.mpp_x, img.mpp_y), false)
        }
        Err(PipelineError::ConstantField) => {
            (None, BinaryMask::empty(img.width, img.height, img.mpp_x, img.mpp_y), true)
        }
        Err(e) => return Err(e),
    };
    steps.push(TraceStep { name: "binarize", mask: mask.clone(), millis: ms(t0) });

    let t = Instant::now();
    mask = close(&mask, &p.close_se);
    steps.push(TraceStep { name: "close", mask: mask.clone(), millis: ms(t) });

    let t = Instant::now();
    mask = open(&mask, &p.open_se);
    steps.push(TraceStep { name: "open", mask: mask.clone(), millis: ms(t) });

    let t = Instant::now();
    mask = fill_holes(&mask);
    steps.push(TraceStep { name: "fill_holes", mask: mask.clone(), millis: ms(t) });

    let t = Instant::now();
    mask = remove_thin_objects(&mask, p.min_minor_axis);
    steps.push(TraceStep { name: "remove_thin_objects", mask: mask.clone(), millis: ms(t) });

    let t = Instant::now();
    mask = hsv_filter(&mask, img, &p.hsv_ranges)?;
    steps.push(TraceStep { name: "hsv_filter", mask: mask.clone(), millis: ms(t) });

    let t = Instant::now();
    mask = clear_border(&mask, p.border_margin);
    steps.push(TraceStep { name: "clear_border", mask: mask.clone(), millis: ms(t) });

    Ok((mask, PipelineTrace { threshold, empty_segmentation, steps }))
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[derive(Serialize)]
struct TraceMeta<'a> {
    threshold: Option<f64>,
    empty_segmentation: bool,
    steps: Vec<&'a str>,
    mpp_x: f64,
    mpp_y: f64,
}

impl PipelineTrace {
    /// Writes one mask image per step plus a `trace.json` metadata file.
    /// Timings are kept in memory only so exported bytes stay
    /// reproducible across runs.
    pub fn export(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)?;
        for (i, step) in self.steps.iter().enumerate() {
            let gray: Vec<u8> = step.mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
            let img = image::GrayImage::from_raw(step.mask.width as u32, step.mask.height as u32, gray)
                .expect("mask dimensions are consistent");
            img.save(dir.join(format!("step{}_{}.png", i + 2, step.name)))
                .map_err(|e| PipelineError::Params(format!("trace image: {e}")))?;
        }
        let meta = TraceMeta {
            threshold: self.threshold,
            empty_segmentation: self.empty_segmentation,
            steps: self.steps.iter().map(|s| s.name).collect(),
            mpp_x: self.steps.first().map(|s| s.mask.mpp_x).unwrap_or(0.0),
            mpp_y: self.steps.first().map(|s| s.mask.mpp_y).unwrap_or(0.0),
        };
        std::fs::write(dir.join("trace.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        Ok(())
    }
}

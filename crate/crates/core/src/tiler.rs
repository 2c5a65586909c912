//! Patch-grid planning, mirror padding, tissue-fraction gating, record
//! extraction and prediction stitching.
//!
//! Training mode (overlap 0) pads each axis up to a whole number of
//! patches and tiles without overlap. Inference mode strides by
//! `patch_size - 2*overlap` so every patch contributes only its centre
//! when stitched; patches on the grid boundary keep their outer edge up to
//! the unpadded image boundary.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::pyramid::{read_at_mpp, PyramidError, PyramidSlide};
use crate::raster::{reflect_index, BinaryMask, RasterImage};
use crate::tfrecord::{PatchRecord, RecordError, RecordReader, RecordWriter};

#[derive(Debug, Error)]
pub enum TilerError {
    #[error("tile spec: {0}")]
    InvalidSpec(String),
    #[error("grid was planned for a {expected_w}x{expected_h} raster, got {got_w}x{got_h}")]
    GridMismatch { expected_w: usize, expected_h: usize, got_w: usize, got_h: usize },
    #[error("patch footprint falls outside the mask")]
    FootprintOutsideMask,
    #[error("expected {expected} patch masks, got {got}")]
    PatchCountMismatch { expected: usize, got: usize },
    #[error("patch mask {index} is {got_w}x{got_h}, expected {size}x{size}")]
    PatchSizeMismatch { index: usize, got_w: usize, got_h: usize, size: usize },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Patch geometry and the tissue gate threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileSpec {
    pub patch_size: usize,
    /// 0 for training mode; inference discards this many pixels around
    /// each patch edge when stitching.
    pub overlap: usize,
    pub mpp: f64,
    /// Keep patches whose tissue fraction is at least this value.
    pub min_tissue_fraction: f64,
}

impl TileSpec {
    pub fn validate(&self) -> Result<(), TilerError> {
        if self.patch_size < 1 {
            return Err(TilerError::InvalidSpec("patch_size must be >= 1".into()));
        }
        if 2 * self.overlap >= self.patch_size {
            return Err(TilerError::InvalidSpec(format!(
                "overlap {} must be less than patch_size/2 = {}",
                self.overlap,
                self.patch_size as f64 / 2.0
            )));
        }
        if !(0.0..=1.0).contains(&self.min_tissue_fraction) {
            return Err(TilerError::InvalidSpec("min_tissue_fraction must be in [0, 1]".into()));
        }
        if self.mpp <= 0.0 {
            return Err(TilerError::InvalidSpec("mpp must be positive".into()));
        }
        Ok(())
    }
}

/// A planned tiling: padded geometry plus patch origins in padded
/// coordinates, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub padded_w: usize,
    pub padded_h: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub stride: usize,
    pub patch_size: usize,
    pub nx: usize,
    pub ny: usize,
    pub origins: Vec<(usize, usize)>,
}

fn axis_patch_count(dim: usize, patch: usize, stride: usize, overlap: usize) -> usize {
    if overlap == 0 {
        dim.div_ceil(patch)
    } else if dim <= patch {
        1
    } else {
        (dim - patch).div_ceil(stride) + 1
    }
}

/// Plans the tiling of a `w` x `h` raster. Padding splits as evenly as
/// possible with the extra pixel on the trailing edge.
pub fn plan_grid(w: usize, h: usize, spec: &TileSpec) -> Result<PatchGrid, TilerError> {
    spec.validate()?;
    if w < 1 || h < 1 {
        return Err(TilerError::InvalidSpec("raster dimensions must be >= 1".into()));
    }
    let patch = spec.patch_size;
    let stride = patch - 2 * spec.overlap;
    let nx = axis_patch_count(w, patch, stride, spec.overlap);
    let ny = axis_patch_count(h, patch, stride, spec.overlap);
    let padded_w = (nx - 1) * stride + patch;
    let padded_h = (ny - 1) * stride + patch;
    let (extra_x, extra_y) = (padded_w - w, padded_h - h);
    let pad_left = extra_x / 2;
    let pad_top = extra_y / 2;
    let mut origins = Vec::with_capacity(nx * ny);
    for gy in 0..ny {
        for gx in 0..nx {
            origins.push((gx * stride, gy * stride));
        }
    }
    Ok(PatchGrid {
        padded_w,
        padded_h,
        pad_left,
        pad_right: extra_x - pad_left,
        pad_top,
        pad_bottom: extra_y - pad_top,
        stride,
        patch_size: patch,
        nx,
        ny,
        origins,
    })
}

/// Reflect-pads an image to the grid's padded dimensions (edge pixel not
/// duplicated). Cropping the padding back recovers the input bit-exactly.
pub fn mirror_pad(img: &RasterImage, grid: &PatchGrid) -> Result<RasterImage, TilerError> {
    let expected_w = grid.padded_w - grid.pad_left - grid.pad_right;
    let expected_h = grid.padded_h - grid.pad_top - grid.pad_bottom;
    if img.width != expected_w || img.height != expected_h {
        return Err(TilerError::GridMismatch {
            expected_w,
            expected_h,
            got_w: img.width,
            got_h: img.height,
        });
    }
    let c = img.channels;
    let mut data = Vec::with_capacity(grid.padded_w * grid.padded_h * c);
    for py in 0..grid.padded_h {
        let sy = reflect_index(py as isize - grid.pad_top as isize, img.height);
        for px in 0..grid.padded_w {
            let sx = reflect_index(px as isize - grid.pad_left as isize, img.width);
            let i = (sy * img.width + sx) * c;
            data.extend_from_slice(&img.data[i..i + c]);
        }
    }
    Ok(RasterImage::new(grid.padded_w, grid.padded_h, c, data, img.mpp_x, img.mpp_y))
}

#[inline]
fn map_to_mask(coord: i64, patch_mpp: f64, mask_mpp: f64) -> i64 {
    ((coord as f64 + 0.5) * patch_mpp / mask_mpp).floor() as i64
}

/// Fraction of patch pixels whose scaled centre lands on a foreground mask
/// pixel (nearest-neighbour lookup across the mpp ratio). Errors if any
/// pixel of the footprint maps outside the mask.
pub fn tissue_fraction(
    mask: &BinaryMask,
    x: i64,
    y: i64,
    size: usize,
    patch_mpp_x: f64,
    patch_mpp_y: f64,
) -> Result<f64, TilerError> {
    for (corner_x, corner_y) in [(x, y), (x + size as i64 - 1, y + size as i64 - 1)] {
        let mx = map_to_mask(corner_x, patch_mpp_x, mask.mpp_x);
        let my = map_to_mask(corner_y, patch_mpp_y, mask.mpp_y);
        if mx < 0 || my < 0 || mx >= mask.width as i64 || my >= mask.height as i64 {
            return Err(TilerError::FootprintOutsideMask);
        }
    }
    Ok(fraction_inner(mask, x, y, size, patch_mpp_x, patch_mpp_y))
}

/// Like [`tissue_fraction`] but pixels mapping outside the mask (mirror
/// padding, rounding at the far edge) count as background instead of
/// erroring; the denominator is always the full patch area. This is the
/// rule applied during extraction and by readers re-checking record files.
pub fn tissue_fraction_clamped(
    mask: &BinaryMask,
    x: i64,
    y: i64,
    size: usize,
    patch_mpp_x: f64,
    patch_mpp_y: f64,
) -> f64 {
    fraction_inner(mask, x, y, size, patch_mpp_x, patch_mpp_y)
}

fn fraction_inner(
    mask: &BinaryMask,
    x: i64,
    y: i64,
    size: usize,
    patch_mpp_x: f64,
    patch_mpp_y: f64,
) -> f64 {
    let mut tissue = 0usize;
    for py in 0..size as i64 {
        let my = map_to_mask(y + py, patch_mpp_y, mask.mpp_y);
        if my < 0 || my >= mask.height as i64 {
            continue;
        }
        for px in 0..size as i64 {
            let mx = map_to_mask(x + px, patch_mpp_x, mask.mpp_x);
            if mx >= 0 && mx < mask.width as i64 && mask.get(mx as usize, my as usize) {
                tissue += 1;
            }
        }
    }
    tissue as f64 / (size * size) as f64
}

/// Copies one patch out of a padded raster.
pub fn extract_patch(padded: &RasterImage, grid: &PatchGrid, index: usize) -> Vec<u8> {
    let (ox, oy) = grid.origins[index];
    let (p, c) = (grid.patch_size, padded.channels);
    let mut out = Vec::with_capacity(p * p * c);
    for y in oy..oy + p {
        let i = (y * padded.width + ox) * c;
        out.extend_from_slice(&padded.data[i..i + p * c]);
    }
    out
}

/// Outcome of extracting one slide's patches.
#[derive(Debug, Clone)]
pub struct ExtractionSummary {
    pub path: PathBuf,
    pub slide_id: String,
    pub total_patches: usize,
    pub kept_patches: usize,
    /// No patch passed the tissue gate; a tissue-detection failure for
    /// downstream accounting, not an error.
    pub empty: bool,
}

/// Reads the slide at the requested resolution, mirror-pads it to the planned
/// grid, gates every patch on its tissue fraction against the (possibly
/// coarser) mask and writes kept patches in row-major grid order. Output
/// bytes are a pure function of the inputs.
pub fn extract_records(
    slide: &PyramidSlide,
    mask: &BinaryMask,
    spec: &TileSpec,
    out_path: &Path,
) -> Result<ExtractionSummary, TilerError> {
    let img = read_at_mpp(slide, spec.mpp)?;
    let grid = plan_grid(img.width, img.height, spec)?;
    let padded = mirror_pad(&img, &grid)?;
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut writer = RecordWriter::new(BufWriter::new(File::create(out_path)?));
    let mut kept = 0usize;
    for (i, &(ox, oy)) in grid.origins.iter().enumerate() {
        let x = ox as i64 - grid.pad_left as i64;
        let y = oy as i64 - grid.pad_top as i64;
        let fraction =
            tissue_fraction_clamped(mask, x, y, grid.patch_size, img.mpp_x, img.mpp_y);
        if fraction < spec.min_tissue_fraction {
            continue;
        }
        let record = PatchRecord {
            slide_id: slide.slide_id().to_string(),
            x,
            y,
            patch_size: grid.patch_size as u32,
            mpp_x: img.mpp_x,
            mpp_y: img.mpp_y,
            channels: img.channels as u32,
            pixels: extract_patch(&padded, &grid, i),
        };
        writer.write_record(&record.encode())?;
        kept += 1;
    }
    use std::io::Write;
    writer.into_inner().flush()?;
    Ok(ExtractionSummary {
        path: out_path.to_path_buf(),
        slide_id: slide.slide_id().to_string(),
        total_patches: grid.origins.len(),
        kept_patches: kept,
        empty: kept == 0,
    })
}

/// Reads all patch records from a file, verifying checksums.
pub fn read_patch_records(path: &Path) -> Result<Vec<PatchRecord>, TilerError> {
    let mut reader = RecordReader::new(BufReader::new(File::open(path)?));
    let mut out = Vec::new();
    while let Some(payload) = reader.read_record()? {
        out.push(PatchRecord::decode(&payload)?);
    }
    Ok(out)
}

/// Reassembles per-patch predictions into a mask at the original
/// (unpadded) slide dimensions. Each patch contributes its central
/// `patch_size - 2*overlap` square; patches on the grid boundary keep
/// their outer edge up to the unpadded boundary.
pub fn stitch_predictions(
    grid: &PatchGrid,
    patch_masks: &[BinaryMask],
    overlap: usize,
) -> Result<BinaryMask, TilerError> {
    if patch_masks.len() != grid.origins.len() {
        return Err(TilerError::PatchCountMismatch {
            expected: grid.origins.len(),
            got: patch_masks.len(),
        });
    }
    if grid.stride != grid.patch_size - 2 * overlap {
        return Err(TilerError::InvalidSpec(format!(
            "grid stride {} does not correspond to overlap {overlap}",
            grid.stride
        )));
    }
    for (i, pm) in patch_masks.iter().enumerate() {
        if pm.width != grid.patch_size || pm.height != grid.patch_size {
            return Err(TilerError::PatchSizeMismatch {
                index: i,
                got_w: pm.width,
                got_h: pm.height,
                size: grid.patch_size,
            });
        }
    }
    let out_w = grid.padded_w - grid.pad_left - grid.pad_right;
    let out_h = grid.padded_h - grid.pad_top - grid.pad_bottom;
    let (mpp_x, mpp_y) = patch_masks
        .first()
        .map(|m| (m.mpp_x, m.mpp_y))
        .unwrap_or((1.0, 1.0));
    let mut out = BinaryMask::empty(out_w, out_h, mpp_x, mpp_y);
    for (i, pm) in patch_masks.iter().enumerate() {
        let (gx, gy) = (i % grid.nx, i / grid.nx);
        let (ox, oy) = grid.origins[i];
        let x0 = if gx == 0 { 0 } else { ox + overlap };
        let x1 = if gx == grid.nx - 1 { grid.padded_w } else { ox + grid.patch_size - overlap };
        let y0 = if gy == 0 { 0 } else { oy + overlap };
        let y1 = if gy == grid.ny - 1 { grid.padded_h } else { oy + grid.patch_size - overlap };
        for py in y0..y1 {
            let uy = py as isize - grid.pad_top as isize;
            if uy < 0 || uy >= out_h as isize {
                continue;
            }
            for px in x0..x1 {
                let ux = px as isize - grid.pad_left as isize;
                if ux < 0 || ux >= out_w as isize {
                    continue;
                }
                out.set(ux as usize, uy as usize, pm.get(px - ox, py - oy));
            }
        }
    }
    Ok(out)
}

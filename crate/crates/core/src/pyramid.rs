//! Multi-resolution slide containers and binary-mask files.
//!
//! A slide is a directory holding a `slide.json` manifest plus one ordinary
//! image file per pyramid level, ordered finest first. Rasters are served
//! at any requested resolution coarser than the finest level by picking the
//! closest higher-resolution level and Lanczos-downsampling. Masks are
//! single-channel images (0 = background, 255 = tissue) with a JSON sidecar
//! carrying the slide id and resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{lanczos_resample, BinaryMask, RasterError, RasterImage};

/// Relative mpp slack under which a level is returned verbatim.
const VERBATIM_TOL: f64 = 1e-3;
/// Relative slack allowed between level dimensions and their mpp ratios.
const DIMENSION_TOL: f64 = 0.02;

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("manifest: {0}")]
    Parse(String),
    #[error("missing level image {0}")]
    MissingLevel(PathBuf),
    #[error("inconsistent pyramid: {0}")]
    InconsistentPyramid(String),
    #[error("target mpp {target} is finer than the finest level ({finest})")]
    TargetFinerThanSource { target: f64, finest: f64 },
    #[error("mask image {path}: {reason}")]
    BadMask { path: PathBuf, reason: String },
    #[error("sidecar {0}: missing or invalid mpp")]
    Sidecar(PathBuf),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One pyramid level: an image file plus its geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelInfo {
    pub path: String,
    pub width: usize,
    pub height: usize,
    pub mpp_x: f64,
    pub mpp_y: f64,
}

/// The on-disk manifest, `slide.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slide_id: String,
    pub cohort: String,
    pub scanner: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_grade: Option<u8>,
    pub levels: Vec<LevelInfo>,
}

/// A validated slide: manifest plus the directory its level paths are
/// relative to.
#[derive(Debug, Clone)]
pub struct PyramidSlide {
    pub manifest: SlideManifest,
    pub dir: PathBuf,
}

impl PyramidSlide {
    pub fn slide_id(&self) -> &str {
        &self.manifest.slide_id
    }

    pub fn levels(&self) -> &[LevelInfo] {
        &self.manifest.levels
    }

    fn level_path(&self, level: &LevelInfo) -> PathBuf {
        self.dir.join(&level.path)
    }
}

/// Opens and validates a slide manifest: levels must be nonempty, ordered
/// finest first with strictly increasing mpp, dimensionally consistent
/// with their mpp ratios within 2%, and every referenced image must exist.
pub fn open_slide(manifest_path: &Path) -> Result<PyramidSlide, PyramidError> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: SlideManifest =
        serde_json::from_str(&text).map_err(|e| PyramidError::Parse(e.to_string()))?;
    if manifest.slide_id.is_empty() {
        return Err(PyramidError::Parse("slide_id must be nonempty".into()));
    }
    if manifest.levels.is_empty() {
        return Err(PyramidError::Parse("levels must be nonempty".into()));
    }
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let slide = PyramidSlide { manifest, dir };

    let finest = slide.levels()[0].clone();
    for (i, level) in slide.levels().iter().enumerate() {
        if level.width < 1 || level.height < 1 || level.mpp_x <= 0.0 || level.mpp_y <= 0.0 {
            return Err(PyramidError::InconsistentPyramid(format!(
                "level {i} has invalid geometry"
            )));
        }
        if i > 0 {
            let prev = &slide.levels()[i - 1];
            if level.mpp_x <= prev.mpp_x || level.mpp_y <= prev.mpp_y {
                return Err(PyramidError::InconsistentPyramid(format!(
                    "mpp must strictly increase: level {i} is not coarser than level {}",
                    i - 1
                )));
            }
        }
        for (axis, dim, mpp, f_dim, f_mpp) in [
            ("width", level.width, level.mpp_x, finest.width, finest.mpp_x),
            ("height", level.height, level.mpp_y, finest.height, finest.mpp_y),
        ] {
            let expected = f_dim as f64 * f_mpp / mpp;
            if (dim as f64 - expected).abs() > DIMENSION_TOL * expected {
                return Err(PyramidError::InconsistentPyramid(format!(
                    "level {i} {axis} {dim} contradicts mpp ratio (expected ~{expected:.1})"
                )));
            }
        }
        let path = slide.level_path(level);
        if !path.is_file() {
            return Err(PyramidError::MissingLevel(path));
        }
    }
    Ok(slide)
}

fn load_level(slide: &PyramidSlide, level: &LevelInfo) -> Result<RasterImage, PyramidError> {
    let path = slide.level_path(level);
    let img = image::open(&path)?.into_rgb8();
    if img.width() as usize != level.width || img.height() as usize != level.height {
        return Err(PyramidError::InconsistentPyramid(format!(
            "{} is {}x{} but manifest says {}x{}",
            path.display(),
            img.width(),
            img.height(),
            level.width,
            level.height
        )));
    }
    Ok(RasterImage::new(
        level.width,
        level.height,
        3,
        img.into_raw(),
        level.mpp_x,
        level.mpp_y,
    ))
}

/// Reads the slide at the requested resolution: picks the level with the
/// largest mpp not above the target (the closest higher-resolution level)
/// and Lanczos-downsamples; a level matching within 0.1% is returned
/// verbatim. Never upsamples.
pub fn read_at_mpp(slide: &PyramidSlide, target_mpp: f64) -> Result<RasterImage, PyramidError> {
    let matches = |l: &LevelInfo| {
        (l.mpp_x - target_mpp).abs() <= VERBATIM_TOL * target_mpp
            && (l.mpp_y - target_mpp).abs() <= VERBATIM_TOL * target_mpp
    };
    if let Some(level) = slide.levels().iter().find(|l| matches(l)) {
        return load_level(slide, level);
    }
    let source = slide
        .levels()
        .iter()
        .rfind(|l| l.mpp_x <= target_mpp && l.mpp_y <= target_mpp);
    let Some(level) = source else {
        let finest = &slide.levels()[0];
        return Err(PyramidError::TargetFinerThanSource {
            target: target_mpp,
            finest: finest.mpp_x.max(finest.mpp_y),
        });
    };
    let img = load_level(slide, level)?;
    let tw = ((img.width as f64 * img.mpp_x / target_mpp).round() as usize).max(1);
    let th = ((img.height as f64 * img.mpp_y / target_mpp).round() as usize).max(1);
    let mut out = lanczos_resample(&img, tw, th)?;
    out.mpp_x = target_mpp;
    out.mpp_y = target_mpp;
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskSidecar {
    slide_id: String,
    mpp_x: f64,
    mpp_y: f64,
}

fn sidecar_path(mask_path: &Path) -> PathBuf {
    let mut s = mask_path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes a mask as a single-channel image (0 = background, 255 = tissue)
/// plus a `<mask>.json` sidecar with the slide id and mpp.
pub fn write_mask(m: &BinaryMask, slide_id: &str, path: &Path) -> Result<(), PyramidError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let gray: Vec<u8> = m.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(m.width as u32, m.height as u32, gray)
        .expect("mask dimensions are consistent");
    img.save(path)?;
    let sidecar = MaskSidecar { slide_id: slide_id.to_string(), mpp_x: m.mpp_x, mpp_y: m.mpp_y };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar).unwrap())?;
    Ok(())
}

/// Reads a mask and its sidecar back; `write_mask` then `read_mask` is the
/// identity. Sample values other than 0 and 255 are rejected.
pub fn read_mask(path: &Path) -> Result<(BinaryMask, String), PyramidError> {
    let sc_path = sidecar_path(path);
    let sc_text = std::fs::read_to_string(&sc_path)
        .map_err(|_| PyramidError::Sidecar(sc_path.clone()))?;
    let sidecar: MaskSidecar =
        serde_json::from_str(&sc_text).map_err(|_| PyramidError::Sidecar(sc_path.clone()))?;
    if sidecar.mpp_x <= 0.0 || sidecar.mpp_y <= 0.0 {
        return Err(PyramidError::Sidecar(sc_path));
    }
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut bits = Vec::with_capacity(w * h);
    for &v in img.as_raw() {
        match v {
            0 => bits.push(false),
            255 => bits.push(true),
            other => {
                return Err(PyramidError::BadMask {
                    path: path.to_path_buf(),
                    reason: format!("non-binary sample value {other}"),
                })
            }
        }
    }
    Ok((BinaryMask::new(w, h, bits, sidecar.mpp_x, sidecar.mpp_y), sidecar.slide_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_level_png(dir: &Path, name: &str, w: u32, h: u32, shade: u8) {
        let img = image::RgbImage::from_pixel(w, h, image::Rgb([shade, shade, shade]));
        img.save(dir.join(name)).unwrap();
    }

    fn write_manifest(dir: &Path, manifest: &SlideManifest) -> PathBuf {
        let p = dir.join("slide.json");
        std::fs::write(&p, serde_json::to_string_pretty(manifest).unwrap()).unwrap();
        p
    }

    fn level(path: &str, w: usize, h: usize, mpp: f64) -> LevelInfo {
        LevelInfo { path: path.into(), width: w, height: h, mpp_x: mpp, mpp_y: mpp }
    }

    fn manifest(levels: Vec<LevelInfo>) -> SlideManifest {
        SlideManifest {
            slide_id: "s1".into(),
            cohort: "test".into(),
            scanner: "synthetic".into(),
            reference_grade: None,
            levels,
        }
    }

    #[test]
    fn single_level_manifest_opens() {
        let dir = tempfile::tempdir().unwrap();
        write_level_png(dir.path(), "l0.png", 16, 8, 200);
        let path = write_manifest(dir.path(), &manifest(vec![level("l0.png", 16, 8, 4.0)]));
        let slide = open_slide(&path).unwrap();
        assert_eq!(slide.levels().len(), 1);
        assert_eq!(slide.slide_id(), "s1");
    }

    #[test]
    fn three_level_manifest_orders_finest_first() {
        let dir = tempfile::tempdir().unwrap();
        write_level_png(dir.path(), "l0.png", 64, 64, 10);
        write_level_png(dir.path(), "l1.png", 16, 16, 10);
        write_level_png(dir.path(), "l2.png", 4, 4, 10);
        let m = manifest(vec![
            level("l0.png", 64, 64, 0.5),
            level("l1.png", 16, 16, 2.0),
            level("l2.png", 4, 4, 8.0),
        ]);
        let path = write_manifest(dir.path(), &m);
        let slide = open_slide(&path).unwrap();
        assert_eq!(slide.levels()[0].mpp_x, 0.5);
        assert_eq!(slide.levels()[2].mpp_x, 8.0);
    }

    #[test]
    fn contradictory_dimensions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_level_png(dir.path(), "l0.png", 64, 64, 10);
        write_level_png(dir.path(), "l1.png", 24, 16, 10);
        // 64 * 0.5 / 2.0 = 16 expected; 24 is off by 50%.
        let m = manifest(vec![level("l0.png", 64, 64, 0.5), level("l1.png", 24, 16, 2.0)]);
        let path = write_manifest(dir.path(), &m);
        assert!(matches!(open_slide(&path), Err(PyramidError::InconsistentPyramid(_))));
    }

    #[test]
    fn missing_level_image_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &manifest(vec![level("nope.png", 8, 8, 4.0)]));
        assert!(matches!(open_slide(&path), Err(PyramidError::MissingLevel(_))));
    }

    #[test]
    fn non_increasing_mpp_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_level_png(dir.path(), "l0.png", 16, 16, 10);
        write_level_png(dir.path(), "l1.png", 16, 16, 10);
        let m = manifest(vec![level("l0.png", 16, 16, 4.0), level("l1.png", 16, 16, 4.0)]);
        let path = write_manifest(dir.path(), &m);
        assert!(matches!(open_slide(&path), Err(PyramidError::InconsistentPyramid(_))));
    }

    fn two_level_slide(dir: &Path) -> PyramidSlide {
        write_level_png(dir, "l0.png", 32, 32, 77);
        write_level_png(dir, "l1.png", 8, 8, 77);
        let m = manifest(vec![level("l0.png", 32, 32, 1.0), level("l1.png", 8, 8, 4.0)]);
        let path = write_manifest(dir, &m);
        open_slide(&path).unwrap()
    }

    #[test]
    fn exact_level_is_returned_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let slide = two_level_slide(dir.path());
        let img = read_at_mpp(&slide, 1.0).unwrap();
        assert_eq!((img.width, img.height), (32, 32));
        assert_eq!(img.mpp_x, 1.0);
    }

    #[test]
    fn downsampling_uses_closest_higher_resolution_level() {
        let dir = tempfile::tempdir().unwrap();
        let slide = two_level_slide(dir.path());
        // Levels at 1.0 and 4.0; target 8.0 must come from the 4.0 level,
        // scale factor 0.5 per axis.
        let img = read_at_mpp(&slide, 8.0).unwrap();
        assert_eq!((img.width, img.height), (4, 4));
        assert_eq!(img.mpp_x, 8.0);
        assert!(img.data.iter().all(|&v| (v as i16 - 77).abs() <= 1));
    }

    #[test]
    fn output_dims_follow_round_rule() {
        let dir = tempfile::tempdir().unwrap();
        let slide = two_level_slide(dir.path());
        let img = read_at_mpp(&slide, 3.0).unwrap();
        // round(32 * 1.0 / 3.0) = round(10.67) = 11
        assert_eq!((img.width, img.height), (11, 11));
    }

    #[test]
    fn finer_than_source_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let slide = two_level_slide(dir.path());
        assert!(matches!(
            read_at_mpp(&slide, 0.25),
            Err(PyramidError::TargetFinerThanSource { .. })
        ));
    }

    #[test]
    fn mask_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            state >> 33
        };
        // 100 random masks including 1x1 and 1xN degenerate shapes.
        let mut shapes = vec![(1usize, 1usize), (1, 17), (23, 1)];
        while shapes.len() < 100 {
            shapes.push((1 + (next() % 40) as usize, 1 + (next() % 40) as usize));
        }
        for (i, (w, h)) in shapes.into_iter().enumerate() {
            let bits: Vec<bool> = (0..w * h).map(|_| next() % 2 == 1).collect();
            let m = BinaryMask::new(w, h, bits, 8.0, 8.0);
            let path = dir.path().join(format!("m{i}.png"));
            write_mask(&m, "sX", &path).unwrap();
            let (back, sid) = read_mask(&path).unwrap();
            assert_eq!(back, m);
            assert_eq!(sid, "sX");
        }
    }

    #[test]
    fn anisotropic_levels_resample_each_axis_independently() {
        let dir = tempfile::tempdir().unwrap();
        write_level_png(dir.path(), "l0.png", 40, 20, 50);
        let m = SlideManifest {
            slide_id: "aniso".into(),
            cohort: "test".into(),
            scanner: "synthetic".into(),
            reference_grade: None,
            levels: vec![LevelInfo { path: "l0.png".into(), width: 40, height: 20, mpp_x: 2.0, mpp_y: 4.0 }],
        };
        let path = write_manifest(dir.path(), &m);
        let slide = open_slide(&path).unwrap();
        let img = read_at_mpp(&slide, 8.0).unwrap();
        // round(40 * 2 / 8) x round(20 * 4 / 8), never upsampled.
        assert_eq!((img.width, img.height), (10, 10));
        assert_eq!((img.mpp_x, img.mpp_y), (8.0, 8.0));
    }

    #[test]
    fn empty_mask_writes_all_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::empty(9, 4, 8.0, 8.0);
        let path = dir.path().join("empty.png");
        write_mask(&m, "s0", &path).unwrap();
        let img = image::open(&path).unwrap().into_luma8();
        assert!(img.as_raw().iter().all(|&v| v == 0));
    }

    #[test]
    fn missing_sidecar_mpp_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::empty(4, 4, 8.0, 8.0);
        let path = dir.path().join("m.png");
        write_mask(&m, "s0", &path).unwrap();
        std::fs::write(sidecar_path(&path), r#"{"slide_id":"s0"}"#).unwrap();
        assert!(matches!(read_mask(&path), Err(PyramidError::Sidecar(_))));
    }

    #[test]
    fn non_binary_mask_samples_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        image::GrayImage::from_pixel(3, 3, image::Luma([128])).save(&path).unwrap();
        std::fs::write(
            sidecar_path(&path),
            r#"{"slide_id":"s0","mpp_x":8.0,"mpp_y":8.0}"#,
        )
        .unwrap();
        assert!(matches!(read_mask(&path), Err(PyramidError::BadMask { .. })));
    }
}

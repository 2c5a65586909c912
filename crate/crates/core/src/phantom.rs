//! Synthetic slide corpus generator for end-to-end testing: textured
//! stained blobs on white glass, debris specks, a pale desaturated-tissue
//! variant the color filter cannot hold on to, a border-touching variant,
//! and blank slides. Ground-truth masks and planted ISUP labels ship with
//! every slide; a fixed seed reproduces the corpus byte for byte.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pyramid::{write_mask, LevelInfo, PyramidError, SlideManifest};
use crate::raster::{BinaryMask, RasterImage};
use crate::stats::next_unit_f64;

/// Canonical phantom raster size at 8.0 um/px.
pub const PHANTOM_SIZE: usize = 384;
/// Resolution the ground truth and pipeline operate at.
pub const PHANTOM_MPP: f64 = 8.0;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// What a phantom slide is designed to exercise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    /// Well-stained textured blob; the pipeline should segment it nearly
    /// perfectly.
    Standard,
    /// Pale desaturated tissue with one small stained core; classical
    /// detection recovers only the core.
    Pale,
    /// Blob crossing the raster edge; removed entirely by border clearing.
    Border,
    /// Bare glass; Otsu has nothing to separate.
    Blank,
}

/// One generated slide and where its files live.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSlideInfo {
    pub slide_id: String,
    pub kind: PhantomKind,
    pub cohort: String,
    pub reference_grade: u8,
    pub manifest_path: PathBuf,
    pub truth_mask_path: PathBuf,
}

/// Corpus index, also written as `corpus.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomCorpus {
    pub seed: u64,
    pub n_slides: usize,
    pub slides: Vec<PhantomSlideInfo>,
}

/// Planted counts of the special slide kinds for a corpus of `n` slides.
/// Corpora smaller than 4 slides are all standard.
pub fn kind_counts(n: usize) -> (usize, usize, usize) {
    if n < 4 {
        (0, 0, 0)
    } else {
        let each = (n / 16).max(1);
        (each, each, each)
    }
}

fn kind_for_index(i: usize, n: usize) -> PhantomKind {
    let (pale, border, blank) = kind_counts(n);
    if i < pale {
        PhantomKind::Pale
    } else if i < pale + border {
        PhantomKind::Border
    } else if i < pale + border + blank {
        PhantomKind::Blank
    } else {
        PhantomKind::Standard
    }
}

struct Painter {
    rng: ChaCha8Rng,
}

impl Painter {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn unit(&mut self) -> f64 {
        next_unit_f64(&mut self.rng)
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Symmetric integer noise in [-amp, amp].
    fn jitter(&mut self, amp: i32) -> i32 {
        (self.rng.next_u64() % (2 * amp as u64 + 1)) as i32 - amp
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    r0: f64,
    wobble3: f64,
    wobble5: f64,
    phase3: f64,
    phase5: f64,
}

impl Blob {
    fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 - self.cx, y as f64 - self.cy);
        let dist = (dx * dx + dy * dy).sqrt();
        let theta = dy.atan2(dx);
        let r = self.r0
            * (1.0
                + self.wobble3 * (3.0 * theta + self.phase3).sin()
                + self.wobble5 * (5.0 * theta + self.phase5).sin());
        dist <= r
    }

    fn max_radius(&self) -> f64 {
        self.r0 * (1.0 + self.wobble3 + self.wobble5)
    }
}

/// Renders the canonical 8.0 um/px raster and its ground-truth mask.
pub fn render_slide(kind: PhantomKind, seed: u64, size: usize) -> (RasterImage, BinaryMask) {
    let mut p = Painter::new(seed);
    let mut img = RasterImage::filled(size, size, 3, 255, PHANTOM_MPP);
    let mut truth = BinaryMask::empty(size, size, PHANTOM_MPP, PHANTOM_MPP);
    if kind == PhantomKind::Blank {
        return (img, truth);
    }

    // Slide background: near-white glass with faint independent
    // per-channel grain (saturation stays below the default HSV gate).
    for y in 0..size {
        for x in 0..size {
            let px = img.pixel_mut(x, y);
            for ch in px.iter_mut() {
                *ch = (246 + p.jitter(2)).clamp(0, 255) as u8;
            }
        }
    }

    let s = size as f64;
    let blob = match kind {
        PhantomKind::Border => Blob {
            cx: if p.unit() < 0.5 { 0.0 } else { s - 1.0 },
            cy: p.range(0.3, 0.7) * s,
            r0: p.range(0.20, 0.26) * s,
            wobble3: 0.10,
            wobble5: 0.06,
            phase3: p.range(0.0, std::f64::consts::TAU),
            phase5: p.range(0.0, std::f64::consts::TAU),
        },
        _ => Blob {
            cx: p.range(0.38, 0.62) * s,
            cy: p.range(0.38, 0.62) * s,
            r0: p.range(0.18, 0.24) * s,
            wobble3: 0.12,
            wobble5: 0.07,
            phase3: p.range(0.0, std::f64::consts::TAU),
            phase5: p.range(0.0, std::f64::consts::TAU),
        },
    };

    let stain = [
        p.range(160.0, 185.0) as i32,
        p.range(100.0, 125.0) as i32,
        p.range(140.0, 165.0) as i32,
    ];
    let pale_base = [249i32, 247, 248];
    for y in 0..size {
        for x in 0..size {
            if !blob.contains(x, y) {
                continue;
            }
            truth.set(x, y, true);
            let px = img.pixel_mut(x, y);
            match kind {
                PhantomKind::Pale => {
                    // Shared grain keeps the tissue achromatic, which is
                    // exactly what defeats the saturation gate.
                    let shared = p.jitter(6);
                    for (ch, base) in px.iter_mut().zip(pale_base) {
                        *ch = (base + shared + p.jitter(1)).clamp(0, 255) as u8;
                    }
                }
                _ => {
                    for (ch, base) in px.iter_mut().zip(stain) {
                        *ch = (base + p.jitter(45)).clamp(0, 255) as u8;
                    }
                }
            }
        }
    }

    if kind == PhantomKind::Pale {
        // One small well-stained core inside the blob: enough for the
        // classical pipeline to find something, far too little to matter.
        let core = 12usize;
        let (cx, cy) = (blob.cx as usize - core / 2, blob.cy as usize - core / 2);
        for y in cy..cy + core {
            for x in cx..cx + core {
                if x < size && y < size {
                    truth.set(x, y, true);
                    let px = img.pixel_mut(x, y);
                    px[0] = (150 + p.jitter(20)).clamp(0, 255) as u8;
                    px[1] = (60 + p.jitter(15)).clamp(0, 255) as u8;
                    px[2] = (90 + p.jitter(15)).clamp(0, 255) as u8;
                }
            }
        }
    }

    if kind == PhantomKind::Standard {
        // Dust and debris specks on the glass, kept clear of the tissue.
        let n_specks = 2 + (p.rng.next_u64() % 4) as usize;
        for _ in 0..n_specks {
            for _attempt in 0..50 {
                let x = p.range(4.0, s - 8.0) as usize;
                let y = p.range(4.0, s - 8.0) as usize;
                let (dx, dy) = (x as f64 - blob.cx, y as f64 - blob.cy);
                if (dx * dx + dy * dy).sqrt() < blob.max_radius() + 12.0 {
                    continue;
                }
                for sy in y..y + 3 {
                    for sx in x..x + 2 {
                        let px = img.pixel_mut(sx, sy);
                        px[0] = (120 + p.jitter(10)).clamp(0, 255) as u8;
                        px[1] = (90 + p.jitter(10)).clamp(0, 255) as u8;
                        px[2] = (70 + p.jitter(10)).clamp(0, 255) as u8;
                    }
                }
                break;
            }
        }
    }

    (img, truth)
}

/// Nearest-neighbour 2x upscale used to fabricate the finer pyramid level.
fn upscale2x(img: &RasterImage) -> RasterImage {
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut data = Vec::with_capacity(4 * w * h * c);
    for y in 0..2 * h {
        for x in 0..2 * w {
            let i = ((y / 2) * w + x / 2) * c;
            data.extend_from_slice(&img.data[i..i + c]);
        }
    }
    RasterImage::new(2 * w, 2 * h, c, data, img.mpp_x / 2.0, img.mpp_y / 2.0)
}

fn save_rgb(img: &RasterImage, path: &Path) -> Result<(), PhantomError> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .expect("raster dimensions are consistent");
    buf.save(path)?;
    Ok(())
}

const COHORTS: [&str; 3] = ["cohort_a", "cohort_b", "cohort_c"];

/// Generates `n_slides` phantom slides under `out_dir`:
/// `slides/<id>/slide.json` (+ two pyramid levels at 4 and 8 um/px),
/// `truth_masks/<id>.png` (+ sidecars) and a `corpus.json` index.
pub fn generate_corpus(
    out_dir: &Path,
    n_slides: usize,
    seed: u64,
) -> Result<PhantomCorpus, PhantomError> {
    assert!(n_slides >= 1, "need at least one slide");
    let slides_dir = out_dir.join("slides");
    let masks_dir = out_dir.join("truth_masks");
    std::fs::create_dir_all(&slides_dir)?;
    std::fs::create_dir_all(&masks_dir)?;

    let mut infos = Vec::with_capacity(n_slides);
    for i in 0..n_slides {
        let kind = kind_for_index(i, n_slides);
        let slide_seed = seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let slide_id = format!("phantom_{i:04}");
        let (level1, truth) = render_slide(kind, slide_seed, PHANTOM_SIZE);
        let level0 = upscale2x(&level1);

        let dir = slides_dir.join(&slide_id);
        std::fs::create_dir_all(&dir)?;
        save_rgb(&level0, &dir.join("level0.png"))?;
        save_rgb(&level1, &dir.join("level1.png"))?;

        let mut grade_rng = ChaCha8Rng::seed_from_u64(slide_seed ^ 0xA5A5_A5A5);
        let reference_grade =
            if kind == PhantomKind::Blank { 0 } else { (grade_rng.next_u64() % 6) as u8 };
        let manifest = SlideManifest {
            slide_id: slide_id.clone(),
            cohort: COHORTS[i % COHORTS.len()].to_string(),
            scanner: "phantom".to_string(),
            reference_grade: Some(reference_grade),
            levels: vec![
                LevelInfo {
                    path: "level0.png".into(),
                    width: level0.width,
                    height: level0.height,
                    mpp_x: level0.mpp_x,
                    mpp_y: level0.mpp_y,
                },
                LevelInfo {
                    path: "level1.png".into(),
                    width: level1.width,
                    height: level1.height,
                    mpp_x: level1.mpp_x,
                    mpp_y: level1.mpp_y,
                },
            ],
        };
        let manifest_path = dir.join("slide.json");
        std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;

        let truth_mask_path = masks_dir.join(format!("{slide_id}.png"));
        write_mask(&truth, &slide_id, &truth_mask_path)?;

        infos.push(PhantomSlideInfo {
            slide_id,
            kind,
            cohort: manifest.cohort.clone(),
            reference_grade,
            manifest_path,
            truth_mask_path,
        });
    }
    let corpus = PhantomCorpus { seed, n_slides, slides: infos };
    std::fs::write(out_dir.join("corpus.json"), serde_json::to_string_pretty(&corpus)?)?;
    Ok(corpus)
}

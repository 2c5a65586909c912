//! Raster primitives: 8-bit images, real-valued fields, binary masks and
//! the pixel-level operations the segmentation pipeline is built from.

use thiserror::Error;

/// Luminance weights applied when collapsing RGB to a single channel.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2125, 0.7154, 0.0721];

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("expected a 3-channel image, got {0} channel(s)")]
    ChannelCount(usize),
    #[error("field must be nonempty")]
    EmptyField,
    #[error("target dimensions must be at least 1x1")]
    ZeroTargetDimension,
}

/// 8-bit raster with interleaved samples and physical pixel spacing in
/// micrometers per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Row-major, interleaved.
    pub data: Vec<u8>,
    pub mpp_x: f64,
    pub mpp_y: f64,
}

impl RasterImage {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<u8>,
        mpp_x: f64,
        mpp_y: f64,
    ) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        assert_eq!(data.len(), width * height * channels, "sample count mismatch");
        assert!(mpp_x > 0.0 && mpp_y > 0.0, "mpp must be positive");
        Self { width, height, channels, data, mpp_x, mpp_y }
    }

    /// Constant-valued image, useful for tests and padding.
    pub fn filled(width: usize, height: usize, channels: usize, value: u8, mpp: f64) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels], mpp, mpp)
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }
}

/// Real-valued single-channel field, the intermediate of the convolution
/// and thresholding steps.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayField {
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub data: Vec<f64>,
}

impl GrayField {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "sample count mismatch");
        debug_assert!(data.iter().all(|v| v.is_finite()), "field values must be finite");
        Self { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

/// Tissue/background raster at a declared resolution. The central exchange
/// object of the toolkit.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    /// Row-major, one boolean per pixel, `true` = tissue.
    pub bits: Vec<bool>,
    pub mpp_x: f64,
    pub mpp_y: f64,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>, mpp_x: f64, mpp_y: f64) -> Self {
        assert_eq!(bits.len(), width * height, "bit count mismatch");
        Self { width, height, bits, mpp_x, mpp_y }
    }

    pub fn empty(width: usize, height: usize, mpp_x: f64, mpp_y: f64) -> Self {
        Self { width, height, bits: vec![false; width * height], mpp_x, mpp_y }
    }

    pub fn filled(width: usize, height: usize, mpp_x: f64, mpp_y: f64) -> Self {
        Self { width, height, bits: vec![true; width * height], mpp_x, mpp_y }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count_foreground(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }
}

/// Odd square convolution kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub size: usize,
    /// Row-major `size * size` weights.
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Self {
        assert!(size % 2 == 1, "kernel size must be odd");
        assert_eq!(weights.len(), size * size, "weight count mismatch");
        assert!(weights.iter().all(|w| w.is_finite()), "weights must be finite");
        Self { size, weights }
    }

    /// Isotropic nine-point stencil of the two-dimensional Laplacian,
    /// (1/6) * [[1,4,1],[4,-20,4],[1,4,1]]. Annihilates affine fields at
    /// interior pixels.
    pub fn mehrstellen() -> Self {
        let w = [1.0, 4.0, 1.0, 4.0, -20.0, 4.0, 1.0, 4.0, 1.0];
        Self::new(3, w.iter().map(|v| v / 6.0).collect())
    }
}

/// Index into a length-`n` signal reflected about its end samples without
/// duplicating the edge (`[a,b,c]` extends to `...c,b,[a,b,c],b,a...`).
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Per-pixel luminance reduction of an RGB image, values in [0, 255].
pub fn to_grayscale(img: &RasterImage) -> Result<GrayField, RasterError> {
    if img.channels != 3 {
        return Err(RasterError::ChannelCount(img.channels));
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| {
            LUMA_WEIGHTS[0] * p[0] as f64
                + LUMA_WEIGHTS[1] * p[1] as f64
                + LUMA_WEIGHTS[2] * p[2] as f64
        })
        .collect();
    Ok(GrayField::new(img.width, img.height, data))
}

/// 2-D convolution (kernel flipped; immaterial for symmetric kernels) with
/// reflect padding at the boundary. Output has the same dimensions as the
/// input.
pub fn convolve2d(f: &GrayField, k: &Kernel) -> Result<GrayField, RasterError> {
    if f.width == 0 || f.height == 0 {
        return Err(RasterError::EmptyField);
    }
    let r = (k.size / 2) as isize;
    let mut out = vec![0.0; f.width * f.height];
    for y in 0..f.height {
        for x in 0..f.width {
            let mut acc = 0.0;
            for ky in 0..k.size {
                let sy = reflect_index(y as isize - (ky as isize - r), f.height);
                for kx in 0..k.size {
                    let sx = reflect_index(x as isize - (kx as isize - r), f.width);
                    acc += k.weights[ky * k.size + kx] * f.data[sy * f.width + sx];
                }
            }
            out[y * f.width + x] = acc;
        }
    }
    Ok(GrayField::new(f.width, f.height, out))
}

/// Hexcone HSV for one 8-bit RGB pixel: H in [0,1) (wrapping), S and V in
/// [0,1]. Achromatic pixels get H = 0.
#[inline]
pub fn pixel_hsv(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let (rf, gf, bf) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = rf.max(gf).max(bf);
    let min = rf.min(gf).min(bf);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == rf {
        let mut h = (gf - bf) / delta;
        if h < 0.0 {
            h += 6.0;
        }
        h / 6.0
    } else if max == gf {
        ((bf - rf) / delta + 2.0) / 6.0
    } else {
        ((rf - gf) / delta + 4.0) / 6.0
    };
    // Guard against h == 1.0 from rounding; hue is stored on [0, 1).
    (if h >= 1.0 { 0.0 } else { h }, s, v)
}

/// Split an RGB image into hue, saturation and value fields.
pub fn rgb_to_hsv(img: &RasterImage) -> Result<(GrayField, GrayField, GrayField), RasterError> {
    if img.channels != 3 {
        return Err(RasterError::ChannelCount(img.channels));
    }
    let n = img.width * img.height;
    let (mut h, mut s, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for p in img.data.chunks_exact(3) {
        let (ph, ps, pv) = pixel_hsv(p[0], p[1], p[2]);
        h.push(ph);
        s.push(ps);
        v.push(pv);
    }
    Ok((
        GrayField::new(img.width, img.height, h),
        GrayField::new(img.width, img.height, s),
        GrayField::new(img.width, img.height, v),
    ))
}

const LANCZOS_A: f64 = 3.0;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn lanczos3(x: f64) -> f64 {
    if x.abs() < LANCZOS_A {
        sinc(x) * sinc(x / LANCZOS_A)
    } else {
        0.0
    }
}

/// Per-axis resampling weights. `x` is measured in destination pixels, so
/// the window widens by the scale ratio when downscaling. Weights are
/// normalized per output pixel; source indices reflect at the boundary.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    let sratio = ratio.max(1.0);
    let support = LANCZOS_A * sratio;
    let mut rows = Vec::with_capacity(dst);
    for o in 0..dst {
        let center = (o as f64 + 0.5) * ratio - 0.5;
        let left = (center - support).ceil() as isize;
        let right = (center + support).floor() as isize;
        let mut taps = Vec::with_capacity((right - left + 1).max(1) as usize);
        let mut sum = 0.0;
        for i in left..=right {
            let w = lanczos3((i as f64 - center) / sratio);
            if w != 0.0 {
                taps.push((reflect_index(i, src), w));
                sum += w;
            }
        }
        if taps.is_empty() {
            taps.push((reflect_index(center.round() as isize, src), 1.0));
            sum = 1.0;
        }
        for t in &mut taps {
            t.1 /= sum;
        }
        rows.push(taps);
    }
    rows
}

/// Separable Lanczos-3 resampling to the requested dimensions. Samples are
/// rounded and clamped to [0, 255]; the output mpp scales with the size
/// change on each axis independently.
pub fn lanczos_resample(
    img: &RasterImage,
    target_w: usize,
    target_h: usize,
) -> Result<RasterImage, RasterError> {
    if target_w == 0 || target_h == 0 {
        return Err(RasterError::ZeroTargetDimension);
    }
    let c = img.channels;
    let wx = axis_weights(img.width, target_w);
    let wy = axis_weights(img.height, target_h);

    // Horizontal pass into an f64 buffer, then vertical pass.
    let mut mid = vec![0.0f64; target_w * img.height * c];
    for y in 0..img.height {
        let row = &img.data[y * img.width * c..(y + 1) * img.width * c];
        for (ox, taps) in wx.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(sx, w) in taps {
                    acc += w * row[sx * c + ch] as f64;
                }
                mid[(y * target_w + ox) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0u8; target_w * target_h * c];
    for (oy, taps) in wy.iter().enumerate() {
        for ox in 0..target_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(sy, w) in taps {
                    acc += w * mid[(sy * target_w + ox) * c + ch];
                }
                out[(oy * target_w + ox) * c + ch] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(RasterImage::new(
        target_w,
        target_h,
        c,
        out,
        img.mpp_x * img.width as f64 / target_w as f64,
        img.mpp_y * img.height as f64 / target_h as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid_rgb(w: usize, h: usize, rgb: [u8; 3]) -> RasterImage {
        let mut data = Vec::with_capacity(w * h * 3);
        for _ in 0..w * h {
            data.extend_from_slice(&rgb);
        }
        RasterImage::new(w, h, 3, data, 1.0, 1.0)
    }

    #[test]
    fn grayscale_white_and_black() {
        let white = to_grayscale(&solid_rgb(4, 3, [255, 255, 255])).unwrap();
        assert!(white.data.iter().all(|&v| (v - 255.0).abs() < 1e-9));
        let black = to_grayscale(&solid_rgb(4, 3, [0, 0, 0])).unwrap();
        assert!(black.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grayscale_pure_red() {
        let red = to_grayscale(&solid_rgb(2, 2, [255, 0, 0])).unwrap();
        // 0.2125 * 255 evaluated by hand.
        assert!(red.data.iter().all(|&v| (v - 54.1875).abs() < 1e-12));
    }

    #[test]
    fn grayscale_rejects_single_channel() {
        let img = RasterImage::filled(2, 2, 1, 7, 1.0);
        assert!(matches!(to_grayscale(&img), Err(RasterError::ChannelCount(1))));
    }

    #[test]
    fn mehrstellen_annihilates_constant_field() {
        let f = GrayField::new(6, 5, vec![42.0; 30]);
        let out = convolve2d(&f, &Kernel::mehrstellen()).unwrap();
        assert!(out.data.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn mehrstellen_annihilates_ramp_interior() {
        let mut f = GrayField::zeros(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                f.set(x, y, x as f64);
            }
        }
        let out = convolve2d(&f, &Kernel::mehrstellen()).unwrap();
        for y in 1..7 {
            for x in 1..7 {
                assert!(out.get(x, y).abs() < 1e-9, "nonzero at ({x},{y})");
            }
        }
    }

    #[test]
    fn impulse_reproduces_kernel() {
        let mut f = GrayField::zeros(5, 5);
        f.set(2, 2, 1.0);
        let k = Kernel::mehrstellen();
        let out = convolve2d(&f, &k).unwrap();
        for dy in 0..3 {
            for dx in 0..3 {
                let expect = k.weights[dy * 3 + dx];
                // True convolution flips the kernel; symmetric here.
                assert!((out.get(1 + dx, 1 + dy) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hsv_canonical_colors() {
        let (h, s, v) = pixel_hsv(255, 0, 0);
        assert_eq!((h, s, v), (0.0, 1.0, 1.0));
        let (h, s, v) = pixel_hsv(128, 128, 128);
        assert_eq!(s, 0.0);
        assert!((v - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(h, 0.0);
        let (h, _, _) = pixel_hsv(0, 255, 0);
        assert!((h - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hsv_rejects_single_channel() {
        let img = RasterImage::filled(2, 2, 1, 7, 1.0);
        assert!(rgb_to_hsv(&img).is_err());
    }

    /// Test-only inverse of `pixel_hsv`.
    fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
        let h6 = h * 6.0;
        let i = h6.floor() as i32 % 6;
        let f = h6 - h6.floor();
        let p = v * (1.0 - s);
        let q = v * (1.0 - s * f);
        let t = v * (1.0 - s * (1.0 - f));
        let (r, g, b) = match i {
            0 => (v, t, p),
            1 => (q, v, p),
            2 => (p, v, t),
            3 => (p, q, v),
            4 => (t, p, v),
            _ => (v, p, q),
        };
        (
            (r * 255.0).round() as u8,
            (g * 255.0).round() as u8,
            (b * 255.0).round() as u8,
        )
    }

    #[test]
    fn hsv_round_trip() {
        let mut colors = Vec::new();
        for &r in &[0u8, 128, 255] {
            for &g in &[0u8, 128, 255] {
                for &b in &[0u8, 128, 255] {
                    colors.push((r, g, b));
                }
            }
        }
        // Deterministic pseudo-random colors.
        let mut state = 0x9e3779b97f4a7c15u64;
        for _ in 0..1000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            colors.push(((state >> 16) as u8, (state >> 32) as u8, (state >> 48) as u8));
        }
        for (r, g, b) in colors {
            let (h, s, v) = pixel_hsv(r, g, b);
            assert_eq!(hsv_to_rgb(h, s, v), (r, g, b), "round trip failed for {:?}", (r, g, b));
        }
    }

    #[test]
    fn resample_identity() {
        let mut data = Vec::new();
        for i in 0..5 * 4 * 3 {
            data.push((i * 37 % 256) as u8);
        }
        let img = RasterImage::new(5, 4, 3, data, 2.0, 2.0);
        let out = lanczos_resample(&img, 5, 4).unwrap();
        assert_eq!(out.data, img.data);
        assert_eq!(out.mpp_x, 2.0);
    }

    #[test]
    fn resample_preserves_constants_exhaustively() {
        // Every source size 1-64 on both axes, downscale and identity.
        for w in 1..=64usize {
            for h in 1..=64usize {
                let img = RasterImage::filled(w, h, 1, 133, 1.0);
                for (tw, th) in [(w.div_ceil(2), h.div_ceil(2)), (w, h)] {
                    let out = lanczos_resample(&img, tw, th).unwrap();
                    assert!(
                        out.data.iter().all(|&v| (v as i16 - 133).abs() <= 1),
                        "constant not preserved at {w}x{h} -> {tw}x{th}"
                    );
                }
            }
        }
    }

    #[test]
    fn symmetric_convolution_commutes_with_flips() {
        let mut state = 31u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 40) % 256) as f64
        };
        let (w, h) = (9usize, 7usize);
        let f = GrayField::new(w, h, (0..w * h).map(|_| next()).collect());
        let k = Kernel::mehrstellen();
        let flip_h = |g: &GrayField| {
            let mut out = GrayField::zeros(w, h);
            for y in 0..h {
                for x in 0..w {
                    out.set(w - 1 - x, y, g.get(x, y));
                }
            }
            out
        };
        let flip_v = |g: &GrayField| {
            let mut out = GrayField::zeros(w, h);
            for y in 0..h {
                for x in 0..w {
                    out.set(x, h - 1 - y, g.get(x, y));
                }
            }
            out
        };
        let conv = convolve2d(&f, &k).unwrap();
        for (flip, name) in [(&flip_h as &dyn Fn(&GrayField) -> GrayField, "h"), (&flip_v, "v")] {
            let a = flip(&conv);
            let b = convolve2d(&flip(&f), &k).unwrap();
            for i in 0..w * h {
                assert!((a.data[i] - b.data[i]).abs() < 1e-9, "flip {name} mismatch at {i}");
            }
        }
    }

    #[test]
    fn resample_checkerboard_down_to_half() {
        let mut data = Vec::with_capacity(16);
        for y in 0..4 {
            for x in 0..4 {
                data.push(if (x + y) % 2 == 1 { 255 } else { 0 });
            }
        }
        let img = RasterImage::new(4, 4, 1, data, 1.0, 1.0);
        let out = lanczos_resample(&img, 2, 2).unwrap();
        assert!(
            out.data.iter().all(|&v| v == 127 || v == 128),
            "expected mid-gray, got {:?}",
            out.data
        );
        assert_eq!(out.mpp_x, 2.0);
    }

    #[test]
    fn resample_rejects_zero_target() {
        let img = RasterImage::filled(4, 4, 1, 0, 1.0);
        assert!(lanczos_resample(&img, 0, 2).is_err());
    }

    #[test]
    fn reflect_index_matches_definition() {
        // [a,b,c] padded 2 left -> [c,b,a,b,c]
        assert_eq!(reflect_index(-2, 3), 2);
        assert_eq!(reflect_index(-1, 3), 1);
        assert_eq!(reflect_index(3, 3), 1);
        assert_eq!(reflect_index(4, 3), 0);
        assert_eq!(reflect_index(-5, 1), 0);
    }
}

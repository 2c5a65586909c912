//! Binary-mask morphology and component analysis: erosion, dilation,
//! opening, closing, hole filling, connected-component labeling, region
//! minor-axis statistics, thin-object removal and border clearing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::raster::BinaryMask;

/// Shape of a symmetric structuring element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeShape {
    Disk,
    Square,
}

/// Symmetric structuring element centred on the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    pub shape: SeShape,
    pub radius: usize,
}

impl StructuringElement {
    pub fn disk(radius: usize) -> Self {
        assert!(radius >= 1, "radius must be >= 1");
        Self { shape: SeShape::Disk, radius }
    }

    pub fn square(radius: usize) -> Self {
        assert!(radius >= 1, "radius must be >= 1");
        Self { shape: SeShape::Square, radius }
    }

    /// Offsets of the element relative to its centre. Disk keeps offsets
    /// with dx^2 + dy^2 <= r^2.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let r = self.radius as isize;
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let keep = match self.shape {
                    SeShape::Disk => dx * dx + dy * dy <= r * r,
                    SeShape::Square => true,
                };
                if keep {
                    out.push((dx, dy));
                }
            }
        }
        out
    }
}

impl std::fmt::Display for StructuringElement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self.shape {
            SeShape::Disk => "disk",
            SeShape::Square => "square",
        };
        write!(f, "{}:{}", name, self.radius)
    }
}

/// Per-pixel component labels; 0 is background, components are numbered
/// 1..=count in raster-scan discovery order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledComponents {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

impl LabeledComponents {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

/// Shape statistics of one labeled component.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionStats {
    pub label: u32,
    pub area: usize,
    /// Mean of pixel centre coordinates, (x, y).
    pub centroid: (f64, f64),
    /// 4 * sqrt of the smaller eigenvalue of the pixel-coordinate
    /// covariance matrix (central second moments over area). No
    /// pixel-extent correction is applied.
    pub minor_axis_length: f64,
    pub touches_border: bool,
}

/// Minkowski dilation. Out-of-bounds input is treated as background.
pub fn dilate(m: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let offsets = se.offsets();
    let mut out = BinaryMask::empty(m.width, m.height, m.mpp_x, m.mpp_y);
    let (w, h) = (m.width as isize, m.height as isize);
    for y in 0..h {
        for x in 0..w {
            let hit = offsets.iter().any(|&(dx, dy)| {
                let (sx, sy) = (x + dx, y + dy);
                sx >= 0 && sx < w && sy >= 0 && sy < h && m.get(sx as usize, sy as usize)
            });
            if hit {
                out.set(x as usize, y as usize, true);
            }
        }
    }
    out
}

/// Minkowski erosion. Out-of-bounds input is treated as foreground, the
/// dual of `dilate`'s convention, so that closing is extensive and opening
/// anti-extensive on the clipped domain.
pub fn erode(m: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let offsets = se.offsets();
    let mut out = BinaryMask::empty(m.width, m.height, m.mpp_x, m.mpp_y);
    let (w, h) = (m.width as isize, m.height as isize);
    for y in 0..h {
        for x in 0..w {
            let all = offsets.iter().all(|&(dx, dy)| {
                let (sx, sy) = (x + dx, y + dy);
                sx < 0 || sx >= w || sy < 0 || sy >= h || m.get(sx as usize, sy as usize)
            });
            if all {
                out.set(x as usize, y as usize, true);
            }
        }
    }
    out
}

/// Closing: dilation followed by erosion. Fills gaps narrower than the
/// element; idempotent and extensive.
pub fn close(m: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    erode(&dilate(m, se), se)
}

/// Opening: erosion followed by dilation. Removes specks smaller than the
/// element; idempotent and anti-extensive.
pub fn open(m: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    dilate(&erode(m, se), se)
}

/// Fills background regions that are not 4-connected to the image border.
/// Foreground is unchanged.
pub fn fill_holes(m: &BinaryMask) -> BinaryMask {
    let (w, h) = (m.width, m.height);
    if w == 0 || h == 0 {
        return m.clone();
    }
    let mut reachable = vec![false; w * h];
    let mut queue = VecDeque::new();
    let push = |x: usize, y: usize, reachable: &mut Vec<bool>, queue: &mut VecDeque<(usize, usize)>| {
        let i = y * w + x;
        if !m.bits[i] && !reachable[i] {
            reachable[i] = true;
            queue.push_back((x, y));
        }
    };
    for x in 0..w {
        push(x, 0, &mut reachable, &mut queue);
        push(x, h - 1, &mut reachable, &mut queue);
    }
    for y in 0..h {
        push(0, y, &mut reachable, &mut queue);
        push(w - 1, y, &mut reachable, &mut queue);
    }
    while let Some((x, y)) = queue.pop_front() {
        if x > 0 {
            push(x - 1, y, &mut reachable, &mut queue);
        }
        if x + 1 < w {
            push(x + 1, y, &mut reachable, &mut queue);
        }
        if y > 0 {
            push(x, y - 1, &mut reachable, &mut queue);
        }
        if y + 1 < h {
            push(x, y + 1, &mut reachable, &mut queue);
        }
    }
    let bits = (0..w * h).map(|i| m.bits[i] || !reachable[i]).collect();
    BinaryMask::new(w, h, bits, m.mpp_x, m.mpp_y)
}

/// 8-connected component labeling. Labels are assigned in raster-scan
/// discovery order, which makes the result deterministic.
pub fn label_components(m: &BinaryMask) -> LabeledComponents {
    let (w, h) = (m.width, m.height);
    let mut labels = vec![0u32; w * h];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !m.bits[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if m.bits[j] && labels[j] == 0 {
                        labels[j] = count;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    LabeledComponents { width: w, height: h, labels, count: count as usize }
}

/// Area, centroid, minor-axis length and border contact for every
/// component, ordered by label.
pub fn region_stats(lc: &LabeledComponents) -> Vec<RegionStats> {
    #[derive(Default, Clone)]
    struct Acc {
        n: u64,
        sx: u64,
        sy: u64,
        sxx: u64,
        syy: u64,
        sxy: u64,
        border: bool,
    }
    let mut accs = vec![Acc::default(); lc.count];
    for y in 0..lc.height {
        for x in 0..lc.width {
            let label = lc.get(x, y);
            if label == 0 {
                continue;
            }
            let a = &mut accs[(label - 1) as usize];
            let (xu, yu) = (x as u64, y as u64);
            a.n += 1;
            a.sx += xu;
            a.sy += yu;
            a.sxx += xu * xu;
            a.syy += yu * yu;
            a.sxy += xu * yu;
            if x == 0 || y == 0 || x == lc.width - 1 || y == lc.height - 1 {
                a.border = true;
            }
        }
    }
    accs.iter()
        .enumerate()
        .map(|(i, a)| {
            let n = a.n as f64;
            let (mx, my) = (a.sx as f64 / n, a.sy as f64 / n);
            let var_x = a.sxx as f64 / n - mx * mx;
            let var_y = a.syy as f64 / n - my * my;
            let cov = a.sxy as f64 / n - mx * my;
            let tr = var_x + var_y;
            let det_term = ((var_x - var_y).powi(2) + 4.0 * cov * cov).sqrt();
            let lambda_min = ((tr - det_term) / 2.0).max(0.0);
            RegionStats {
                label: (i + 1) as u32,
                area: a.n as usize,
                centroid: (mx, my),
                minor_axis_length: 4.0 * lambda_min.sqrt(),
                touches_border: a.border,
            }
        })
        .collect()
}

fn retain_labels(m: &BinaryMask, lc: &LabeledComponents, keep: &[bool]) -> BinaryMask {
    let bits = lc
        .labels
        .iter()
        .map(|&l| l != 0 && keep[(l - 1) as usize])
        .collect();
    BinaryMask::new(m.width, m.height, bits, m.mpp_x, m.mpp_y)
}

/// Removes components whose minor-axis length is below the threshold.
pub fn remove_thin_objects(m: &BinaryMask, min_minor_axis: f64) -> BinaryMask {
    let lc = label_components(m);
    let keep: Vec<bool> = region_stats(&lc)
        .iter()
        .map(|s| s.minor_axis_length >= min_minor_axis)
        .collect();
    retain_labels(m, &lc, &keep)
}

/// Removes components that have any pixel within `margin` of the raster
/// edge; margin 0 removes components touching the edge.
pub fn clear_border(m: &BinaryMask, margin: usize) -> BinaryMask {
    let lc = label_components(m);
    let mut keep = vec![true; lc.count];
    for y in 0..m.height {
        for x in 0..m.width {
            let label = lc.get(x, y);
            if label == 0 {
                continue;
            }
            let dist = x.min(y).min(m.width - 1 - x).min(m.height - 1 - y);
            if dist <= margin {
                keep[(label - 1) as usize] = false;
            }
        }
    }
    retain_labels(m, &lc, &keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from_rows(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        let mut bits = Vec::with_capacity(w * h);
        for r in rows {
            assert_eq!(r.len(), w);
            bits.extend(r.chars().map(|c| c == '#'));
        }
        BinaryMask::new(w, h, bits, 8.0, 8.0)
    }

    #[test]
    fn dilate_empty_stays_empty() {
        let m = BinaryMask::empty(8, 8, 8.0, 8.0);
        assert!(dilate(&m, &StructuringElement::disk(2)).is_empty_mask());
    }

    #[test]
    fn dilate_point_disk1_is_plus() {
        let mut m = BinaryMask::empty(5, 5, 8.0, 8.0);
        m.set(2, 2, true);
        let d = dilate(&m, &StructuringElement::disk(1));
        let expect = mask_from_rows(&[".....", "..#..", ".###.", "..#..", "....."]);
        assert_eq!(d.bits, expect.bits);
    }

    #[test]
    fn close_fills_single_pixel_hole() {
        let m = mask_from_rows(&["#####", "#####", "##.##", "#####", "#####"]);
        let c = close(&m, &StructuringElement::disk(1));
        assert!(c.bits.iter().all(|&b| b));
    }

    #[test]
    fn open_removes_isolated_pixel() {
        let mut m = BinaryMask::empty(7, 7, 8.0, 8.0);
        m.set(3, 3, true);
        assert!(open(&m, &StructuringElement::disk(1)).is_empty_mask());
    }

    #[test]
    fn fill_holes_fills_enclosed_ring() {
        let m = mask_from_rows(&["#####", "#...#", "#...#", "#...#", "#####"]);
        let f = fill_holes(&m);
        assert!(f.bits.iter().all(|&b| b));
    }

    #[test]
    fn fill_holes_keeps_border_connected_gap() {
        let m = mask_from_rows(&["##.##", "#...#", "#...#", "#...#", "#####"]);
        let f = fill_holes(&m);
        assert_eq!(f.bits, m.bits);
    }

    #[test]
    fn diagonal_pixels_are_one_component() {
        let m = mask_from_rows(&["#..", ".#.", "..."]);
        assert_eq!(label_components(&m).count, 1);
    }

    #[test]
    fn separated_pixels_are_two_components() {
        let m = mask_from_rows(&["#..", "...", "..#"]);
        let lc = label_components(&m);
        assert_eq!(lc.count, 2);
        // Raster-scan discovery order.
        assert_eq!(lc.get(0, 0), 1);
        assert_eq!(lc.get(2, 2), 2);
    }

    #[test]
    fn stats_single_pixel() {
        let mut m = BinaryMask::empty(5, 5, 8.0, 8.0);
        m.set(2, 3, true);
        let stats = region_stats(&label_components(&m));
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].area, 1);
        assert_eq!(stats[0].minor_axis_length, 0.0);
        assert_eq!(stats[0].centroid, (2.0, 3.0));
        assert!(!stats[0].touches_border);
    }

    #[test]
    fn stats_horizontal_line_minor_axis_zero() {
        let m = mask_from_rows(&[".......", "#######", "......."]);
        let stats = region_stats(&label_components(&m));
        assert_eq!(stats[0].area, 7);
        assert!(stats[0].minor_axis_length.abs() < 1e-12);
    }

    #[test]
    fn stats_square_minor_axis() {
        let m = mask_from_rows(&[
            ".......", ".#####.", ".#####.", ".#####.", ".#####.", ".#####.", ".......",
        ]);
        let stats = region_stats(&label_components(&m));
        // Coordinate variance of a 5-wide uniform block is 2 per axis.
        assert!((stats[0].minor_axis_length - 4.0 * 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn remove_thin_threshold_zero_is_identity() {
        let m = mask_from_rows(&["#..##", "....#", "##..."]);
        assert_eq!(remove_thin_objects(&m, 0.0).bits, m.bits);
    }

    #[test]
    fn remove_thin_drops_line_keeps_square() {
        let m = mask_from_rows(&[
            ".........", ".#######.", ".........", "..#####..", "..#####..", "..#####..",
            "..#####..", "..#####..", ".........",
        ]);
        let out = remove_thin_objects(&m, 1.0);
        // 1x7 line removed, 5x5 square kept.
        assert_eq!(out.count_foreground(), 25);
        let out5 = remove_thin_objects(&m, 5.0);
        assert_eq!(out5.count_foreground(), 25);
        let out6 = remove_thin_objects(&m, 6.0);
        assert_eq!(out6.count_foreground(), 0);
    }

    #[test]
    fn clear_border_removes_touching_component() {
        let m = mask_from_rows(&["..#..", "..#..", ".....", ".##..", ".....","....."]);
        let out = clear_border(&m, 0);
        assert_eq!(out.count_foreground(), 2);
        let mut interior = BinaryMask::empty(5, 6, 8.0, 8.0);
        interior.set(1, 3, true);
        interior.set(2, 3, true);
        assert_eq!(out.bits, interior.bits);
    }

    #[test]
    fn clear_border_margin_widens_band() {
        let mut m = BinaryMask::empty(7, 7, 8.0, 8.0);
        m.set(3, 1, true);
        assert_eq!(clear_border(&m, 0).count_foreground(), 1);
        assert_eq!(clear_border(&m, 1).count_foreground(), 0);
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(any::<bool>(), 16 * 16)
            .prop_map(|bits| BinaryMask::new(16, 16, bits, 8.0, 8.0))
    }

    proptest! {
        #[test]
        fn open_subset_input_subset_close(m in arb_mask()) {
            let se = StructuringElement::disk(1);
            let o = open(&m, &se);
            let c = close(&m, &se);
            for i in 0..m.bits.len() {
                prop_assert!(!o.bits[i] || m.bits[i]);
                prop_assert!(!m.bits[i] || c.bits[i]);
            }
        }

        #[test]
        fn open_close_idempotent(m in arb_mask()) {
            let se = StructuringElement::disk(2);
            let o = open(&m, &se);
            prop_assert_eq!(open(&o, &se).bits, o.bits);
            let c = close(&m, &se);
            prop_assert_eq!(close(&c, &se).bits, c.bits);
        }

        #[test]
        fn fill_holes_idempotent_and_monotone(m in arb_mask()) {
            let f = fill_holes(&m);
            for i in 0..m.bits.len() {
                prop_assert!(!m.bits[i] || f.bits[i]);
            }
            prop_assert_eq!(fill_holes(&f).bits, f.bits);
        }

        #[test]
        fn cleanup_ops_anti_extensive_and_idempotent(m in arb_mask()) {
            let t = remove_thin_objects(&m, 2.0);
            for i in 0..m.bits.len() {
                prop_assert!(!t.bits[i] || m.bits[i]);
            }
            prop_assert_eq!(remove_thin_objects(&t, 2.0).bits, t.bits.clone());
            let b = clear_border(&m, 0);
            for i in 0..m.bits.len() {
                prop_assert!(!b.bits[i] || m.bits[i]);
            }
            prop_assert_eq!(clear_border(&b, 0).bits, b.bits);
        }

        #[test]
        fn dilate_erode_duality_on_padded_domain(m in arb_mask()) {
            // Embed in a padded domain so the boundary conventions do not
            // interfere, then check dilate(m) == !erode(!m).
            let se = StructuringElement::disk(2);
            let pad = 3usize;
            let (w, h) = (m.width + 2 * pad, m.height + 2 * pad);
            let mut inner = BinaryMask::empty(w, h, 8.0, 8.0);
            let mut inverted = BinaryMask::filled(w, h, 8.0, 8.0);
            for y in 0..m.height {
                for x in 0..m.width {
                    if m.get(x, y) {
                        inner.set(x + pad, y + pad, true);
                        inverted.set(x + pad, y + pad, false);
                    }
                }
            }
            let d = dilate(&inner, &se);
            let e = erode(&inverted, &se);
            for y in pad..h - pad {
                for x in pad..w - pad {
                    prop_assert_eq!(d.get(x, y), !e.get(x, y));
                }
            }
        }
    }
}

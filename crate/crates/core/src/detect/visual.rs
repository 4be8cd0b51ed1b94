use super::{is_local_max, DetectorParams, ScoreMap, ScoreModality};
use crate::image::{GrayImage, Image};

const HARRIS_K: f32 = 0.04;
const WINDOW_RADIUS: usize = 3;
const WINDOW_SIGMA: f32 = 1.5;
/// Sobel support plus the structure-tensor window.
pub(crate) const VISUAL_BORDER: usize = WINDOW_RADIUS + 1;

/// Harris corner response of every pixel; zero where the 7x7 window does not
/// fit. Intensities are scaled to `[0, 1]` and the structure tensor is the
/// Gaussian-weighted (sigma 1.5, 7x7) sum of 3x3 Sobel gradient products.
pub fn harris_response(gray: &GrayImage) -> Image<f32> {
    let (w, h) = gray.dims();
    let mut out = Image::new(w, h, 0.0f32);
    if w < 2 * VISUAL_BORDER + 1 || h < 2 * VISUAL_BORDER + 1 {
        return out;
    }
    let px = |x: usize, y: usize| gray.get(x, y) as f32 * (1.0 / 255.0);
    let n = w * h;
    let (mut ixx, mut iyy, mut ixy) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            let gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let sxx = window_sum(&ixx, w, h);
    let syy = window_sum(&iyy, w, h);
    let sxy = window_sum(&ixy, w, h);
    for y in VISUAL_BORDER..h - VISUAL_BORDER {
        for x in VISUAL_BORDER..w - VISUAL_BORDER {
            let i = y * w + x;
            let (a, b, c) = (sxx[i], syy[i], sxy[i]);
            let tr = a + b;
            out.set(x, y, a * b - c * c - HARRIS_K * tr * tr);
        }
    }
    out
}

/// Separable Gaussian smoothing over a (2r+1)^2 window with unit total
/// weight; only meaningful where the window fits. A flat window would leave
/// a plateau of equal responses around ideal corners.
fn window_sum(src: &[f32], w: usize, h: usize) -> Vec<f32> {
    let r = WINDOW_RADIUS;
    let raw: Vec<f32> = (0..=2 * r)
        .map(|i| {
            let d = i as f32 - r as f32;
            (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp()
        })
        .collect();
    let total: f32 = raw.iter().sum();
    let k: Vec<f32> = raw.iter().map(|v| v / total).collect();
    let mut horiz = vec![0.0f32; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in r..w - r {
            horiz[y * w + x] = (0..=2 * r).map(|i| k[i] * row[x + i - r]).sum();
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in r..h - r {
        for x in r..w - r {
            out[y * w + x] = (0..=2 * r).map(|i| k[i] * horiz[(y + i - r) * w + x]).sum();
        }
    }
    out
}

/// Visual score map: Harris local maxima above `harris_threshold`, rescaled
/// so the threshold maps to 0 and the strongest corner to 1. Everything else
/// is 0.
pub fn compute_visual_score_map(gray: &GrayImage, params: &DetectorParams) -> ScoreMap {
    let (w, h) = gray.dims();
    let response = harris_response(gray);
    let mut map = ScoreMap::zeros(w, h, ScoreModality::Visual);
    if w < 2 * VISUAL_BORDER + 1 || h < 2 * VISUAL_BORDER + 1 {
        return map;
    }
    let lambda = params.harris_threshold as f32;
    let r = response.data();
    let mut survivors = Vec::new();
    let mut max = lambda;
    for y in VISUAL_BORDER..h - VISUAL_BORDER {
        for x in VISUAL_BORDER..w - VISUAL_BORDER {
            let v = r[y * w + x];
            if v > lambda && is_local_max(r, w, x, y) {
                survivors.push((x, y, v));
                max = max.max(v);
            }
        }
    }
    let span = max - lambda;
    for (x, y, v) in survivors {
        let s = if span > 0.0 { (v - lambda) / span } else { 1.0 };
        // Survivors are strictly above the threshold; keep them positive
        // even when f32 rounding collapses the difference.
        map.values.set(x, y, s.max(f32::MIN_POSITIVE));
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(size: usize, square: usize) -> GrayImage {
        GrayImage::from_fn(size, size, |x, y| if ((x / square) + (y / square)).is_multiple_of(2) { 230 } else { 20 })
    }

    #[test]
    fn constant_image_has_empty_map() {
        let img = GrayImage::new(64, 48, 117);
        let map = compute_visual_score_map(&img, &DetectorParams::default());
        assert_eq!(map.nonzero_count(), 0);
    }

    #[test]
    fn dark_image_has_empty_map() {
        let img = GrayImage::new(64, 48, 0);
        assert_eq!(compute_visual_score_map(&img, &DetectorParams::default()).nonzero_count(), 0);
    }

    #[test]
    fn checkerboard_corners_are_detected_exactly_once() {
        let square = 16;
        let img = checkerboard(128, square);
        let map = compute_visual_score_map(&img, &DetectorParams::default());
        // Interior X-junctions sit between pixels k*16-1 and k*16, k = 1..7.
        let corners: Vec<(f64, f64)> = (1..8)
            .flat_map(|i| (1..8).map(move |j| ((i * square) as f64 - 0.5, (j * square) as f64 - 0.5)))
            .collect();
        assert_eq!(corners.len(), 49);
        let mut hits = vec![0usize; corners.len()];
        for y in 0..128 {
            for x in 0..128 {
                if map.get(x, y) > 0.0 {
                    let k = corners
                        .iter()
                        .position(|c| (c.0 - x as f64).abs() <= 1.0 && (c.1 - y as f64).abs() <= 1.0)
                        .unwrap_or_else(|| panic!("score at ({x},{y}) is not at a corner"));
                    hits[k] += 1;
                }
            }
        }
        assert!(hits.iter().all(|&n| n == 1), "{hits:?}");
        assert_eq!(map.nonzero_count(), 49);
    }

    #[test]
    fn weak_corner_below_threshold_is_discarded() {
        // Strong corner at (29.5, 19.5), faint corner at (65.5, 19.5); both
        // regions run off the image so each has a single corner.
        let img = GrayImage::from_fn(96, 48, |x, y| {
            if x < 30 && y >= 20 {
                220
            } else if x >= 66 && y >= 20 {
                104
            } else {
                100
            }
        });
        let response = harris_response(&img);
        let peak = |xs: std::ops::Range<usize>| {
            (10..30)
                .flat_map(|y| xs.clone().map(move |x| (x, y)))
                .map(|(x, y)| response.get(x, y))
                .fold(0.0f32, f32::max)
        };
        let params = DetectorParams::default();
        let (strong, weak) = (peak(20..40), peak(56..76));
        assert!(strong > params.harris_threshold as f32, "strong {strong}");
        assert!(weak > 0.0 && weak < params.harris_threshold as f32, "weak {weak}");
        let map = compute_visual_score_map(&img, &params);
        let nonzero: Vec<_> = (0..48)
            .flat_map(|y| (0..96).map(move |x| (x, y)))
            .filter(|&(x, y)| map.get(x, y) > 0.0)
            .collect();
        assert_eq!(nonzero.len(), 1, "{nonzero:?}");
        let (x, y) = nonzero[0];
        assert!((x as f64 - 29.5).abs() <= 1.0 && (y as f64 - 19.5).abs() <= 1.0);
    }

    #[test]
    fn scores_lie_in_unit_interval() {
        let img = checkerboard(96, 12);
        let map = compute_visual_score_map(&img, &DetectorParams::default());
        assert!(map.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(map.max(), 1.0);
    }
}

//! Spatial operators on single bands. All arithmetic is carried out in f64.

use std::collections::VecDeque;

use ndarray::Array2;

/// Reflect-101 border handling (`gfedcb|abcdefgh|gfedcba`).
pub(crate) fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Sigma used for a Gaussian kernel of size `k` when none is given.
pub fn default_gaussian_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

/// Normalized 1-D Gaussian taps; tap `i` sits at offset `i - k/2`.
pub(crate) fn gaussian_taps(k: usize, sigma: f64) -> Vec<f64> {
    let centre = (k as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - centre;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// Separable convolution with the same taps along both axes, anchor `k/2`.
pub(crate) fn separable(src: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = src.dim();
    let anchor = (taps.len() / 2) as isize;
    let mut rows = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * src[[y, reflect101(x as isize + i as isize - anchor, w)]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * rows[[reflect101(y as isize + i as isize - anchor, h), x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

pub(crate) fn gaussian_blur(src: &Array2<f64>, k: usize) -> Array2<f64> {
    separable(src, &gaussian_taps(k, default_gaussian_sigma(k)))
}

/// k×k median with anchor `k/2`; even window counts average the two middle values.
pub(crate) fn median_filter(src: &Array2<f64>, k: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let anchor = (k / 2) as isize;
    let mut window = Vec::with_capacity(k * k);
    Array2::from_shape_fn((h, w), |(y, x)| {
        window.clear();
        for dy in 0..k as isize {
            let sy = reflect101(y as isize + dy - anchor, h);
            for dx in 0..k as isize {
                window.push(src[[sy, reflect101(x as isize + dx - anchor, w)]]);
            }
        }
        let n = window.len();
        let mid = n / 2;
        let (lower, upper, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
        let upper = *upper;
        if n % 2 == 1 {
            upper
        } else {
            let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            0.5 * (below + upper)
        }
    })
}

/// Axis along which a first-order gradient is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GradAxis {
    /// Along the width (column index).
    X,
    /// Along the height (row index).
    Y,
}

/// Central differences inside, one-sided differences on the border.
pub(crate) fn gradient(src: &Array2<f64>, axis: GradAxis) -> Array2<f64> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (pos, len) = match axis {
            GradAxis::X => (x, w),
            GradAxis::Y => (y, h),
        };
        let at = |p: usize| match axis {
            GradAxis::X => src[[y, p]],
            GradAxis::Y => src[[p, x]],
        };
        if len < 2 {
            0.0
        } else if pos == 0 {
            at(1) - at(0)
        } else if pos == len - 1 {
            at(len - 1) - at(len - 2)
        } else {
            0.5 * (at(pos + 1) - at(pos - 1))
        }
    })
}

/// Pre-smoothing sigma applied before edge detection.
pub const CANNY_SIGMA: f64 = 1.4;

/// Binary edge map. Thresholds are absolute gradient magnitudes (unnormalized Sobel).
pub(crate) fn canny(src: &Array2<f64>, low: f64, high: f64) -> Array2<f64> {
    let (h, w) = src.dim();
    let radius = (3.0 * CANNY_SIGMA).ceil() as usize;
    let smooth = separable(src, &gaussian_taps(2 * radius + 1, CANNY_SIGMA));
    let at = |y: isize, x: isize| smooth[[reflect101(y, h), reflect101(x, w)]];

    let mut gx = Array2::<f64>::zeros((h, w));
    let mut gy = Array2::<f64>::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            gx[[y as usize, x as usize]] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[[y as usize, x as usize]] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    let mag = Array2::from_shape_fn((h, w), |(y, x)| gx[[y, x]].hypot(gy[[y, x]]));
    let thin = non_max_suppression(&mag, &gx, &gy);
    hysteresis(&thin, low, high)
}

/// Neighbour offset `(dy, dx)` along the quantized gradient direction.
pub(crate) fn nms_direction(gx: f64, gy: f64) -> (isize, isize) {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (0, 1)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (1, 0)
    } else {
        (1, -1)
    }
}

fn non_max_suppression(mag: &Array2<f64>, gx: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    let (h, w) = mag.dim();
    let get = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[[y as usize, x as usize]]
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let m = mag[[y, x]];
        if m <= 0.0 {
            return 0.0;
        }
        let (dy, dx) = nms_direction(gx[[y, x]], gy[[y, x]]);
        let (yi, xi) = (y as isize, x as isize);
        let behind = get(yi - dy, xi - dx);
        let ahead = get(yi + dy, xi + dx);
        // Strict on one side so a two-pixel plateau keeps exactly one pixel.
        if m > behind && m >= ahead {
            m
        } else {
            0.0
        }
    })
}

fn hysteresis(thin: &Array2<f64>, low: f64, high: f64) -> Array2<f64> {
    let (h, w) = thin.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    let mut queue = VecDeque::new();
    for ((y, x), m) in thin.indexed_iter() {
        if *m > 0.0 && *m >= high {
            out[[y, x]] = 1.0;
            queue.push_back((y, x));
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                let m = thin[[ny, nx]];
                if out[[ny, nx]] == 0.0 && m > 0.0 && m >= low {
                    out[[ny, nx]] = 1.0;
                    queue.push_back((ny, nx));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect101_indices() {
        let n = 5;
        let got: Vec<usize> = (-4..9).map(|i| reflect101(i, n)).collect();
        assert_eq!(got, vec![4, 3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1, 0]);
        assert_eq!(reflect101(-3, 1), 0);
        assert_eq!(reflect101(7, 2), 1);
    }

    #[test]
    fn gaussian_taps_normalized_and_symmetric() {
        let t = gaussian_taps(10, default_gaussian_sigma(10));
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..5 {
            assert!((t[i] - t[9 - i]).abs() < 1e-15);
        }
        assert!((default_gaussian_sigma(10) - 1.85).abs() < 1e-12);
    }

    #[test]
    fn median_of_even_window() {
        let src = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f64);
        let out = median_filter(&src, 2);
        // window at (0,0) with anchor 1: rows {1,0}, cols {1,0} -> {0,1,4,5}
        assert_eq!(out[[0, 0]], 2.5);
        // window at (2,2): rows {1,2}, cols {1,2} -> {5,6,9,10}
        assert_eq!(out[[2, 2]], 7.5);
    }

    #[test]
    fn nms_directions() {
        assert_eq!(nms_direction(1.0, 0.0), (0, 1));
        assert_eq!(nms_direction(-1.0, 0.0), (0, 1));
        assert_eq!(nms_direction(0.0, 1.0), (1, 0));
        assert_eq!(nms_direction(1.0, 1.0), (1, 1));
        assert_eq!(nms_direction(-1.0, 1.0), (1, -1));
    }
}

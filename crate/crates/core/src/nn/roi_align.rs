//! Bilinear region pooling with half-pixel alignment: one sample at the
//! center of every output bin, interpolated from the four surrounding cells.

use super::tensor::FeatureMap;
use crate::annotation::BoundingBox;
use crate::scalar::Scalar;

/// One axis of a sample point: two source indices and their weights.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    w_lo: T,
    w_hi: T,
}

fn tap<T: Scalar>(mut pos: T, size: usize) -> Option<Tap<T>> {
    let limit = T::lit(size as f64);
    if pos < -T::one() || pos > limit {
        return None;
    }
    if pos <= T::zero() {
        pos = T::zero();
    }
    let mut lo = pos.floor().to_usize().unwrap_or(0);
    let hi;
    if lo >= size - 1 {
        lo = size - 1;
        hi = size - 1;
        pos = T::lit(lo as f64);
    } else {
        hi = lo + 1;
    }
    let frac = pos - T::lit(lo as f64);
    Some(Tap {
        lo,
        hi,
        w_lo: T::one() - frac,
        w_hi: frac,
    })
}

/// Bin-center sample taps for `bins` bins spanning `[start, start + len)`.
fn taps<T: Scalar>(start: T, len: T, bins: usize, size: usize) -> Vec<Option<Tap<T>>> {
    let half = T::lit(0.5);
    let bin = len / T::lit(bins as f64);
    (0..bins)
        .map(|i| tap(start + (T::lit(i as f64) + half) * bin - half, size))
        .collect()
}

/// Box extent in map coordinates, widened to at least one cell.
fn footprint<T: Scalar>(roi: &BoundingBox<T>) -> (T, T, T, T) {
    let half = T::lit(0.5);
    let (cx, cy) = roi.center();
    let w = roi.w.max(T::one());
    let h = roi.h.max(T::one());
    (cx - w * half, cy - h * half, w, h)
}

/// Pools `map` over `roi` (already in map coordinates) to `out_h × out_w`.
pub fn roi_align<T: Scalar>(map: &FeatureMap<T>, roi: &BoundingBox<T>, out_h: usize, out_w: usize) -> FeatureMap<T> {
    let (x0, y0, w, h) = footprint(roi);
    let ys = taps(y0, h, out_h, map.height);
    let xs = taps(x0, w, out_w, map.width);
    let mut out = FeatureMap::zeros(map.channels, out_h, out_w);
    for c in 0..map.channels {
        let plane = map.channel(c);
        let row = |y: usize, x: usize| plane[y * map.width + x];
        for (i, ty) in ys.iter().enumerate() {
            let Some(ty) = ty else { continue };
            for (j, tx) in xs.iter().enumerate() {
                let Some(tx) = tx else { continue };
                let v = ty.w_lo * (tx.w_lo * row(ty.lo, tx.lo) + tx.w_hi * row(ty.lo, tx.hi))
                    + ty.w_hi * (tx.w_lo * row(ty.hi, tx.lo) + tx.w_hi * row(ty.hi, tx.hi));
                *out.at_mut(c, i, j) = v;
            }
        }
    }
    out
}

/// Scatters `grad_out` back onto `grad_map` with the forward weights.
pub fn roi_align_backward<T: Scalar>(grad_map: &mut FeatureMap<T>, roi: &BoundingBox<T>, grad_out: &FeatureMap<T>) {
    let (x0, y0, w, h) = footprint(roi);
    let ys = taps(y0, h, grad_out.height, grad_map.height);
    let xs = taps(x0, w, grad_out.width, grad_map.width);
    let width = grad_map.width;
    let plane = grad_map.plane();
    for c in 0..grad_map.channels {
        let dst = &mut grad_map.data[c * plane..(c + 1) * plane];
        for (i, ty) in ys.iter().enumerate() {
            let Some(ty) = ty else { continue };
            for (j, tx) in xs.iter().enumerate() {
                let Some(tx) = tx else { continue };
                let g = grad_out.at(c, i, j);
                for (yy, wy) in [(ty.lo, ty.w_lo), (ty.hi, ty.w_hi)] {
                    for (xx, wx) in [(tx.lo, tx.w_lo), (tx.hi, tx.w_hi)] {
                        let d = &mut dst[yy * width + xx];
                        *d = *d + g * wy * wx;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        let mut m = FeatureMap::zeros(c, h, w);
        for k in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *m.at_mut(k, y, x) = (k + 1) as f64 * (2.0 * x as f64 + 3.0 * y as f64);
                }
            }
        }
        m
    }

    #[test]
    fn linear_maps_are_reproduced_exactly() {
        // bilinear interpolation of an affine function is exact away from borders
        let m = ramp(2, 10, 12);
        let roi = BoundingBox {
            x: 2.0,
            y: 3.0,
            w: 6.0,
            h: 4.0,
        };
        let out = roi_align(&m, &roi, 4, 6);
        for i in 0..4 {
            for j in 0..6 {
                let y = 3.0 + (i as f64 + 0.5) - 0.5;
                let x = 2.0 + (j as f64 + 0.5) - 0.5;
                assert!((out.at(1, i, j) - 2.0 * (2.0 * x + 3.0 * y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let m = FeatureMap::filled(3, 5, 7, 1.5f64);
        let out = roi_align(
            &m,
            &BoundingBox {
                x: -0.5,
                y: 0.2,
                w: 7.3,
                h: 4.6,
            },
            8,
            8,
        );
        assert!(out.data.iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn tiny_rois_are_widened_to_one_cell() {
        let m = ramp(1, 6, 6);
        let a = roi_align(
            &m,
            &BoundingBox {
                x: 2.4,
                y: 2.4,
                w: 0.2,
                h: 0.2,
            },
            2,
            2,
        );
        let b = roi_align(
            &m,
            &BoundingBox {
                x: 2.0,
                y: 2.0,
                w: 1.0,
                h: 1.0,
            },
            2,
            2,
        );
        assert_eq!(a, b);
    }

    #[test]
    fn backward_is_the_adjoint() {
        // <roi_align(m), g> == <m, roi_align_backward(g)> for a linear operator
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (c, h, w) = (2, rng.random_range(3..9), rng.random_range(3..9));
            let m = FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect());
            let roi = BoundingBox {
                x: rng.random_range(-1.0..w as f64 - 1.0),
                y: rng.random_range(-1.0..h as f64 - 1.0),
                w: rng.random_range(0.5..w as f64),
                h: rng.random_range(0.5..h as f64),
            };
            let (oh, ow) = (rng.random_range(2..6), rng.random_range(2..6));
            let g = FeatureMap::from_vec(
                c,
                oh,
                ow,
                (0..c * oh * ow).map(|_| rng.random_range(-1.0..1.0)).collect(),
            );
            let out = roi_align(&m, &roi, oh, ow);
            let lhs: f64 = out.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let mut gm = FeatureMap::zeros(c, h, w);
            roi_align_backward(&mut gm, &roi, &g);
            let rhs: f64 = m.data.iter().zip(&gm.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn samples_far_outside_are_zero() {
        let m = FeatureMap::filled(1, 4, 4, 1.0f64);
        let out = roi_align(
            &m,
            &BoundingBox {
                x: 10.0,
                y: 10.0,
                w: 2.0,
                h: 2.0,
            },
            2,
            2,
        );
        assert!(out.data.iter().all(|&v| v == 0.0));
    }
}

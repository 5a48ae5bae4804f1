//! Forward and backward kernels for the non-convolutional tape operations.

use crate::render::RenderParams;
use crate::tensor::{Float, Tensor};

pub fn max_pool2_forward<T: Float>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut argmax = vec![0u8; n * c * ho * wo];
    let mut idx = 0;
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..ho {
                for xo in 0..wo {
                    let base = 2 * y * w + 2 * xo;
                    let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                    let mut best = 0;
                    for k in 1..4 {
                        if cand[k] > cand[best] {
                            best = k;
                        }
                    }
                    dst[y * wo + xo] = cand[best];
                    argmax[idx] = best as u8;
                    idx += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub fn max_pool2_backward<T: Float>(shape: [usize; 4], argmax: &[u8], g: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, w] = shape;
    let [_, _, ho, wo] = g.shape();
    let mut gx = Tensor::zeros(shape);
    let mut idx = 0;
    for b in 0..n {
        for ch in 0..c {
            let go = g.plane(b, ch).to_vec();
            let dst = gx.plane_mut(b, ch);
            for y in 0..ho {
                for xo in 0..wo {
                    let k = argmax[idx] as usize;
                    idx += 1;
                    let pos = (2 * y + k / 2) * w + 2 * xo + k % 2;
                    dst[pos] += go[y * wo + xo];
                }
            }
        }
    }
    gx
}

/// Source index pair and weight of the upper neighbour for each output
/// coordinate of a half-pixel bilinear resize.
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn resize_forward<T: Float>(x: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let ty = resize_taps(h, height);
    let tx = resize_taps(w, width);
    let mut out = Tensor::zeros([n, c, height, width]);
    let mut rows = vec![T::zero(); h * width];
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            for y in 0..h {
                for (xo, &(i0, i1, f)) in tx.iter().enumerate() {
                    let f = T::of(f);
                    rows[y * width + xo] = src[y * w + i0] * (T::one() - f) + src[y * w + i1] * f;
                }
            }
            let dst = out.plane_mut(b, ch);
            for (yo, &(i0, i1, f)) in ty.iter().enumerate() {
                let f = T::of(f);
                for xo in 0..width {
                    dst[yo * width + xo] = rows[i0 * width + xo] * (T::one() - f) + rows[i1 * width + xo] * f;
                }
            }
        }
    }
    out
}

pub fn resize_backward<T: Float>(shape: [usize; 4], g: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = shape;
    let [_, _, height, width] = g.shape();
    let ty = resize_taps(h, height);
    let tx = resize_taps(w, width);
    let mut gx = Tensor::zeros(shape);
    let mut rows = vec![T::zero(); h * width];
    for b in 0..n {
        for ch in 0..c {
            rows.fill(T::zero());
            let go = g.plane(b, ch);
            for (yo, &(i0, i1, f)) in ty.iter().enumerate() {
                let f = T::of(f);
                for xo in 0..width {
                    let v = go[yo * width + xo];
                    rows[i0 * width + xo] += v * (T::one() - f);
                    rows[i1 * width + xo] += v * f;
                }
            }
            let dst = gx.plane_mut(b, ch);
            for y in 0..h {
                for (xo, &(i0, i1, f)) in tx.iter().enumerate() {
                    let f = T::of(f);
                    let v = rows[y * width + xo];
                    dst[y * w + i0] += v * (T::one() - f);
                    dst[y * w + i1] += v * f;
                }
            }
        }
    }
    gx
}

pub fn concat_channels<T: Float>(xs: &[&Tensor<T>]) -> Tensor<T> {
    let [n, _, h, w] = xs[0].shape();
    let total: usize = xs.iter().map(|t| t.channels()).sum();
    let mut out = Tensor::zeros([n, total, h, w]);
    let p = h * w;
    for b in 0..n {
        let mut off = 0;
        for t in xs {
            assert_eq!([t.batch(), t.height(), t.width()], [n, h, w], "concat shapes");
            let len = t.channels() * p;
            out.item_mut(b)[off..off + len].copy_from_slice(t.item(b));
            off += len;
        }
    }
    out
}

pub fn global_pool_replicate<T: Float>(x: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let inv = T::of(1.0 / (h * w) as f64);
    let mut out = Tensor::zeros([n, c, height, width]);
    for b in 0..n {
        for ch in 0..c {
            let mean = x.plane(b, ch).iter().copied().sum::<T>() * inv;
            out.plane_mut(b, ch).fill(mean);
        }
    }
    out
}

pub fn global_pool_replicate_backward<T: Float>(shape: [usize; 4], g: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = shape;
    let inv = T::of(1.0 / (h * w) as f64);
    let mut gx = Tensor::zeros(shape);
    for b in 0..n {
        for ch in 0..c {
            let s = g.plane(b, ch).iter().copied().sum::<T>() * inv;
            gx.plane_mut(b, ch).fill(s);
        }
    }
    gx
}

pub fn render_forward<T: Float>(x: &Tensor<T>, params: &[RenderParams]) -> Tensor<T> {
    let [n, _, h, w] = x.shape();
    let p = h * w;
    let mut out = Tensor::zeros(x.shape());
    for (b, rp) in params.iter().enumerate().take(n) {
        let m = rp.linear_map();
        let src = x.item(b);
        let dst = out.item_mut(b);
        for i in 0..p {
            let px = [src[i].as_f64(), src[p + i].as_f64(), src[2 * p + i].as_f64()];
            for (r, row) in m.iter().enumerate() {
                let v = row[0] * px[0] + row[1] * px[1] + row[2] * px[2];
                dst[r * p + i] = T::of(rp.gamma.apply(v.clamp(0.0, 1.0)));
            }
        }
    }
    out
}

pub fn render_backward<T: Float>(x: &Tensor<T>, params: &[RenderParams], g: &Tensor<T>) -> Tensor<T> {
    let [n, _, h, w] = x.shape();
    let p = h * w;
    let mut gx = Tensor::zeros(x.shape());
    for (b, rp) in params.iter().enumerate().take(n) {
        let m = rp.linear_map();
        let src = x.item(b);
        let go = g.item(b);
        let dst = gx.item_mut(b);
        for i in 0..p {
            let px = [src[i].as_f64(), src[p + i].as_f64(), src[2 * p + i].as_f64()];
            let mut acc = [0.0f64; 3];
            for (r, row) in m.iter().enumerate() {
                let v = row[0] * px[0] + row[1] * px[1] + row[2] * px[2];
                if v <= 0.0 || v >= 1.0 {
                    continue;
                }
                let gr = go[r * p + i].as_f64() * rp.gamma.derivative(v);
                for c in 0..3 {
                    acc[c] += gr * row[c];
                }
            }
            for c in 0..3 {
                dst[c * p + i] = T::of(acc[c]);
            }
        }
    }
    gx
}

/// Loss between two rendered batches; see [`crate::training::compute_loss`].
pub fn rendered_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, eta: f64) -> T {
    assert_eq!(pred.shape(), target.shape(), "loss operands");
    let [n, c, h, w] = pred.shape();
    let diff: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| a.as_f64() - b.as_f64())
        .collect();
    let l2 = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
    if eta == 0.0 {
        return T::of(l2);
    }
    let (mut gx, mut gy) = (0.0, 0.0);
    for plane in diff.chunks(h * w) {
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                if x + 1 < w {
                    gx += (plane[y * w + x + 1] - v).abs();
                }
                if y + 1 < h {
                    gy += (plane[(y + 1) * w + x] - v).abs();
                }
            }
        }
    }
    let planes = (n * c) as f64;
    let mx = if w > 1 { gx / (planes * (h * (w - 1)) as f64) } else { 0.0 };
    let my = if h > 1 { gy / (planes * ((h - 1) * w) as f64) } else { 0.0 };
    T::of(l2 + eta * (mx + my))
}

pub fn rendered_loss_backward<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, eta: f64) -> Tensor<T> {
    let [n, c, h, w] = pred.shape();
    let len = pred.len() as f64;
    let diff: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| a.as_f64() - b.as_f64())
        .collect();
    let mut g: Vec<f64> = diff.iter().map(|d| 2.0 * d / len).collect();
    if eta != 0.0 {
        let planes = (n * c) as f64;
        let sx = if w > 1 { eta / (planes * (h * (w - 1)) as f64) } else { 0.0 };
        let sy = if h > 1 { eta / (planes * ((h - 1) * w) as f64) } else { 0.0 };
        for (plane, gp) in diff.chunks(h * w).zip(g.chunks_mut(h * w)) {
            for y in 0..h {
                for x in 0..w {
                    let v = plane[y * w + x];
                    if x + 1 < w {
                        let s = sign(plane[y * w + x + 1] - v) * sx;
                        gp[y * w + x + 1] += s;
                        gp[y * w + x] -= s;
                    }
                    if y + 1 < h {
                        let s = sign(plane[(y + 1) * w + x] - v) * sy;
                        gp[(y + 1) * w + x] += s;
                        gp[y * w + x] -= s;
                    }
                }
            }
        }
    }
    Tensor::from_vec(pred.shape(), g.into_iter().map(T::of).collect())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
    }

    #[test]
    fn resize_backward_is_adjoint() {
        for (h, w, oh, ow) in [(1, 1, 2, 2), (2, 3, 4, 6), (5, 5, 3, 7), (4, 4, 8, 8)] {
            let x = random([2, 3, h, w], 1);
            let g = random([2, 3, oh, ow], 2);
            let y = resize_forward(&x, oh, ow);
            let gx = resize_backward(x.shape(), &g);
            assert!((dot(&y, &g) - dot(&x, &gx)).abs() < 1e-10);
        }
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let x = Tensor::full([1, 2, 3, 5], 0.7f64);
        let y = resize_forward(&x, 6, 10);
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn global_pool_backward_is_adjoint() {
        let x = random([2, 4, 3, 5], 3);
        let g = random([2, 4, 6, 6], 4);
        let y = global_pool_replicate(&x, 6, 6);
        let gx = global_pool_replicate_backward(x.shape(), &g);
        assert!((dot(&y, &g) - dot(&x, &gx)).abs() < 1e-10);
    }

    #[test]
    fn max_pool_picks_maxima() {
        let x = Tensor::from_vec([1, 1, 2, 4], vec![1.0, 5.0, -1.0, -2.0, 3.0, 2.0, -3.0, -0.5]);
        let (y, arg) = max_pool2_forward(&x);
        assert_eq!(y.data(), &[5.0, -0.5]);
        let g = max_pool2_backward(x.shape(), &arg, &Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]));
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let p = random([1, 3, 5, 6], 5);
        let t = random([1, 3, 5, 6], 6);
        let g = rendered_loss_backward(&p, &t, 0.7);
        for i in [0, 7, 33, 89] {
            let eps = 1e-6;
            let mut hi = p.clone();
            hi.data_mut()[i] += eps;
            let mut lo = p.clone();
            lo.data_mut()[i] -= eps;
            let fd = (rendered_loss(&hi, &t, 0.7) - rendered_loss(&lo, &t, 0.7)) / (2.0 * eps);
            assert!((fd - g.data()[i]).abs() < 1e-6, "{fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn render_gradient_matches_finite_differences() {
        let x = random([1, 3, 3, 3], 7).map(|v| 0.2 + 0.15 * v);
        let rp = RenderParams {
            gain: 1.5,
            color_matrix: [[1.1, -0.1, 0.05], [0.0, 0.95, 0.1], [-0.2, 0.1, 1.2]],
            gamma: crate::render::Gamma::Srgb,
        };
        let g = random([1, 3, 3, 3], 8);
        let gx = render_backward(&x, std::slice::from_ref(&rp), &g);
        for i in [0, 4, 13, 26] {
            let eps = 1e-7;
            let mut hi = x.clone();
            hi.data_mut()[i] += eps;
            let mut lo = x.clone();
            lo.data_mut()[i] -= eps;
            let fd = (dot(&render_forward(&hi, std::slice::from_ref(&rp)), &g)
                - dot(&render_forward(&lo, std::slice::from_ref(&rp)), &g))
                / (2.0 * eps);
            assert!((fd - gx.data()[i]).abs() < 1e-6);
        }
    }
}

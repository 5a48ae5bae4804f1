//! Stride-1 2D convolution (cross-correlation) through im2col and GEMM.

use crate::tensor::{Float, Tensor};

fn out_size(size: usize, k: usize, pad: usize) -> usize {
    size + 2 * pad + 1 - k
}

/// `col[(ci * kh + u) * kw + v][yo * wo + xo] = x[ci][yo + u - pad][xo + v - pad]`.
fn im2col<T: Float>(x: &[T], cin: usize, h: usize, w: usize, kh: usize, kw: usize, pad: usize, col: &mut [T]) {
    let ho = out_size(h, kh, pad);
    let wo = out_size(w, kw, pad);
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let row = &mut col[((ci * kh + u) * kw + v) * p..((ci * kh + u) * kw + v + 1) * p];
                let dx = v as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).clamp(0, wo as isize) as usize;
                for yo in 0..ho {
                    let yi = yo as isize + u as isize - pad as isize;
                    let dst = &mut row[yo * wo..(yo + 1) * wo];
                    if yi < 0 || yi >= h as isize || x0 >= x1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[yi as usize * w..(yi as usize + 1) * w];
                    dst[..x0].fill(T::zero());
                    dst[x1..].fill(T::zero());
                    dst[x0..x1].copy_from_slice(&src[(x0 as isize + dx) as usize..(x1 as isize + dx) as usize]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image, accumulating.
fn col2im<T: Float>(col: &[T], cin: usize, h: usize, w: usize, kh: usize, kw: usize, pad: usize, x: &mut [T]) {
    let ho = out_size(h, kh, pad);
    let wo = out_size(w, kw, pad);
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let row = &col[((ci * kh + u) * kw + v) * p..((ci * kh + u) * kw + v + 1) * p];
                let dx = v as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).clamp(0, wo as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for yo in 0..ho {
                    let yi = yo as isize + u as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[yi as usize * w + (x0 as isize + dx) as usize..yi as usize * w + (x1 as isize + dx) as usize];
                    for (a, &b) in dst.iter_mut().zip(&row[yo * wo + x0..yo * wo + x1]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// `x: [N, Cin, H, W]`, `weight: [Cout, Cin, kh, kw]`, `bias: [1, Cout, 1, 1]`.
pub fn conv2d_forward<T: Float>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, pad: usize) -> Tensor<T> {
    let [n, cin, h, w] = x.shape();
    let [cout, wcin, kh, kw] = weight.shape();
    assert_eq!(cin, wcin, "conv input channels");
    let ho = out_size(h, kh, pad);
    let wo = out_size(w, kw, pad);
    let p = ho * wo;
    let kdim = cin * kh * kw;
    let pointwise = kh == 1 && kw == 1 && pad == 0;
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kdim * p] };
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    for b in 0..n {
        let o = out.item_mut(b);
        for (co, chunk) in o.chunks_mut(p).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        let src: &[T] = if pointwise {
            x.item(b)
        } else {
            im2col(x.item(b), cin, h, w, kh, kw, pad, &mut col);
            &col
        };
        T::gemm(
            cout,
            kdim,
            p,
            T::one(),
            weight.data(),
            kdim as isize,
            1,
            src,
            p as isize,
            1,
            T::one(),
            o,
            p as isize,
            1,
        );
    }
    out
}

/// Gradients `(d x, d weight, d bias)`; `d x` is skipped when not needed.
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    pad: usize,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, cin, h, w] = x.shape();
    let [cout, _, kh, kw] = weight.shape();
    let [_, _, ho, wo] = grad_out.shape();
    let p = ho * wo;
    let kdim = cin * kh * kw;
    let pointwise = kh == 1 && kw == 1 && pad == 0;
    let mut col = vec![T::zero(); kdim * p];
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros([1, cout, 1, 1]);
    let mut gx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    for b in 0..n {
        let go = grad_out.item(b);
        for (co, chunk) in go.chunks(p).enumerate() {
            gb.data_mut()[co] += chunk.iter().copied().sum::<T>();
        }
        let src: &[T] = if pointwise {
            x.item(b)
        } else {
            im2col(x.item(b), cin, h, w, kh, kw, pad, &mut col);
            &col
        };
        // gW += gOut (cout x p) * col^T (p x kdim)
        T::gemm(
            cout,
            p,
            kdim,
            T::one(),
            go,
            p as isize,
            1,
            src,
            1,
            p as isize,
            T::one(),
            gw.data_mut(),
            kdim as isize,
            1,
        );
        if let Some(gx) = gx.as_mut() {
            // gCol = W^T (kdim x cout) * gOut (cout x p)
            if pointwise {
                T::gemm(
                    kdim,
                    cout,
                    p,
                    T::one(),
                    weight.data(),
                    1,
                    kdim as isize,
                    go,
                    p as isize,
                    1,
                    T::one(),
                    gx.item_mut(b),
                    p as isize,
                    1,
                );
            } else {
                T::gemm(
                    kdim,
                    cout,
                    p,
                    T::one(),
                    weight.data(),
                    1,
                    kdim as isize,
                    go,
                    p as isize,
                    1,
                    T::zero(),
                    &mut col,
                    p as isize,
                    1,
                );
                col2im(&col, cin, h, w, kh, kw, pad, gx.item_mut(b));
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, kh, kw] = w.shape();
        let (ho, wo) = (h + 2 * pad + 1 - kh, wd + 2 * pad + 1 - kw);
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        for bi in 0..n {
            for co in 0..cout {
                for y in 0..ho {
                    for xo in 0..wo {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let yi = y as isize + u as isize - pad as isize;
                                    let xi = xo as isize + v as isize - pad as isize;
                                    if yi >= 0 && xi >= 0 && (yi as usize) < h && (xi as usize) < wd {
                                        acc += w.at(co, ci, u, v) * x.at(bi, ci, yi as usize, xi as usize);
                                    }
                                }
                            }
                        }
                        *out.at_mut(bi, co, y, xo) = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, pad) in [(3, 1), (2, 0), (1, 0), (3, 0)] {
            let x = random([2, 3, 7, 6], &mut rng);
            let w = random([4, 3, k, k], &mut rng);
            let b = random([1, 4, 1, 1], &mut rng);
            let fast = conv2d_forward(&x, &w, &b, pad);
            let slow = naive(&x, &w, &b, pad);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} pad={pad}");
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        // <conv(x), g> must equal <x, dx> + <w, dw> + <b, db> by linearity.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, pad) in [(3, 1), (2, 0), (1, 0)] {
            let x = random([2, 3, 6, 5], &mut rng);
            let w = random([4, 3, k, k], &mut rng);
            let b = random([1, 4, 1, 1], &mut rng);
            let y = conv2d_forward(&x, &w, &b, pad);
            let g = random(y.shape(), &mut rng);
            let (gx, gw, gb) = conv2d_backward(&x, &w, pad, &g, true);
            let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
                a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
            };
            let lhs = dot(&y, &g);
            // conv is bilinear in (x, w), so <y, g> = <w, dw> + <b, db> and
            // <y - b, g> = <x, dx>.
            let bias_part = dot(&b, &gb);
            assert!((lhs - dot(&w, &gw) - bias_part).abs() < 1e-9);
            assert!((lhs - dot(&x, gx.as_ref().unwrap()) - bias_part).abs() < 1e-9);
        }
    }
}

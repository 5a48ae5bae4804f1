//! Per-pixel filtering with a predicted two-scale kernel basis.
//!
//! Each basis element pairs a fine `K x K x 3` kernel `A_j` with a coarse
//! kernel `B_j` that is bilinearly upsampled by `d` (align-corners) to a
//! `(K-1)d+1` footprint. A pixel's filter is `sum_j c_j[n] (A_j + up_d(B_j))`.
//!
//! Two evaluation routes are provided and must agree:
//!
//! * [`filter_direct`] builds every effective kernel and correlates with it.
//! * [`filter_fast`] prefilters the image once with a `(2d-1)^2` tent, then
//!   runs a dense `K x K` correlation for `A_j` and a `d`-dilated one for
//!   `B_j`. Tent interpolation of a dilated kernel reaches `d-1` pixels past
//!   the align-corners footprint; that outer ring is subtracted with
//!   one-sided prefilters along the four edges. Prefilters are evaluated on
//!   a canvas extended by `d-1` pixels, so both routes agree at the borders.
//!
//! All correlations use zero padding and "same" output size; kernels are not
//! flipped.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::LinearImage;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct KernelBasis<T = f32> {
    j: usize,
    k: usize,
    d: usize,
    use_b: bool,
    /// `[A_0..A_J | B_0..B_J]`, each kernel stored as three `K x K` planes.
    data: Vec<T>,
}

impl<T: Float> KernelBasis<T> {
    pub fn new(j: usize, k: usize, d: usize, a: Vec<T>, b: Vec<T>, use_b: bool) -> Result<Self> {
        check_geometry(k, d)?;
        let n = j * 3 * k * k;
        if j == 0 || a.len() != n || b.len() != n {
            return Err(Error::mismatch(format!(
                "basis with J={j}, K={k} needs {n} values per term, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        let mut data = a;
        data.extend(b);
        Ok(Self {
            j,
            k,
            d,
            use_b,
            data,
        })
    }

    pub fn zeros(j: usize, k: usize, d: usize) -> Result<Self> {
        let n = j * 3 * k * k;
        Self::new(j, k, d, vec![T::zero(); n], vec![T::zero(); n], true)
    }

    /// Reads batch item `n` of a basis head shaped `[N, 6J, K, K]`.
    pub fn from_head(head: &Tensor<T>, n: usize, d: usize, use_b: bool) -> Result<Self> {
        let [_, ch, kh, kw] = head.shape();
        if ch % 6 != 0 || kh != kw {
            return Err(Error::mismatch(format!(
                "basis head must be [N, 6J, K, K], got {:?}",
                head.shape()
            )));
        }
        check_geometry(kh, d)?;
        Ok(Self {
            j: ch / 6,
            k: kh,
            d,
            use_b,
            data: head.item(n).to_vec(),
        })
    }

    /// The basis as a `[1, 6J, K, K]` head tensor.
    pub fn to_head(&self) -> Tensor<T> {
        Tensor::from_vec([1, 6 * self.j, self.k, self.k], self.data.clone())
    }

    pub fn size(&self) -> usize {
        self.j
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn upsampling(&self) -> usize {
        self.d
    }

    pub fn uses_b(&self) -> bool {
        self.use_b
    }

    pub fn set_use_b(&mut self, use_b: bool) {
        self.use_b = use_b;
    }

    /// Side of the effective kernel, `(K - 1) d + 1`.
    pub fn footprint(&self) -> usize {
        footprint(self.k, self.d)
    }

    fn kernel_len(&self) -> usize {
        3 * self.k * self.k
    }

    /// `A_j` as three `K x K` planes.
    pub fn a(&self, j: usize) -> &[T] {
        let n = self.kernel_len();
        &self.data[j * n..(j + 1) * n]
    }

    pub fn a_mut(&mut self, j: usize) -> &mut [T] {
        let n = self.kernel_len();
        &mut self.data[j * n..(j + 1) * n]
    }

    pub fn b(&self, j: usize) -> &[T] {
        let n = self.kernel_len();
        let off = self.j * n;
        &self.data[off + j * n..off + (j + 1) * n]
    }

    pub fn b_mut(&mut self, j: usize) -> &mut [T] {
        let n = self.kernel_len();
        let off = self.j * n;
        &mut self.data[off + j * n..off + (j + 1) * n]
    }

    pub fn cast<U: Float>(&self) -> KernelBasis<U> {
        KernelBasis {
            j: self.j,
            k: self.k,
            d: self.d,
            use_b: self.use_b,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Per-pixel mixing coefficients `[1, J, H, W]` and scale map `[1, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionFields<T = f32> {
    pub coeffs: Tensor<T>,
    pub scale_map: Tensor<T>,
}

impl<T: Float> PredictionFields<T> {
    pub fn new(coeffs: Tensor<T>, scale_map: Tensor<T>) -> Result<Self> {
        let [cn, _, ch, cw] = coeffs.shape();
        let [sn, sc, sh, sw] = scale_map.shape();
        if cn != 1 || sn != 1 || sc != 3 || (ch, cw) != (sh, sw) {
            return Err(Error::mismatch(format!(
                "coeffs {:?} and scale map {:?}",
                coeffs.shape(),
                scale_map.shape()
            )));
        }
        Ok(Self { coeffs, scale_map })
    }
}

pub fn footprint(k: usize, d: usize) -> usize {
    (k - 1) * d + 1
}

fn check_geometry(k: usize, d: usize) -> Result<()> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::InvalidDimensions(format!(
            "kernel size {k} must be odd"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidDimensions("upsampling factor must be >= 1".into()));
    }
    Ok(())
}

/// Bilinear, align-corners upsampling of a three-channel `K x K` kernel by
/// `d`. Original taps land on every `d`-th output position unchanged.
pub fn upsample_kernel<T: Float>(kernel: &[T], k: usize, d: usize) -> Vec<T> {
    assert_eq!(kernel.len(), 3 * k * k);
    let e = footprint(k, d);
    // 1D interpolation weights: output index -> (source index, fraction).
    let taps: Vec<(usize, T)> = (0..e)
        .map(|i| (i / d, T::of((i % d) as f64 / d as f64)))
        .collect();
    let mut out = vec![T::zero(); 3 * e * e];
    for c in 0..3 {
        let src = &kernel[c * k * k..(c + 1) * k * k];
        // Rows first: K x E.
        let mut rows = vec![T::zero(); k * e];
        for r in 0..k {
            for (x, &(i, f)) in taps.iter().enumerate() {
                let a = src[r * k + i];
                rows[r * e + x] = if f == T::zero() {
                    a
                } else {
                    a + (src[r * k + i + 1] - a) * f
                };
            }
        }
        let dst = &mut out[c * e * e..(c + 1) * e * e];
        for (y, &(i, f)) in taps.iter().enumerate() {
            for x in 0..e {
                let a = rows[i * e + x];
                dst[y * e + x] = if f == T::zero() {
                    a
                } else {
                    a + (rows[(i + 1) * e + x] - a) * f
                };
            }
        }
    }
    out
}

/// `A_j` zero-padded to the centre of the footprint plus `up_d(B_j)`; just
/// the padded `A_j` when the basis has its coarse term switched off.
pub fn effective_kernel<T: Float>(basis: &KernelBasis<T>, j: usize) -> Vec<T> {
    let (k, d) = (basis.k, basis.d);
    let e = footprint(k, d);
    let mut out = if basis.use_b {
        upsample_kernel(basis.b(j), k, d)
    } else {
        vec![T::zero(); 3 * e * e]
    };
    let off = (e - k) / 2;
    let a = basis.a(j);
    for c in 0..3 {
        for y in 0..k {
            for x in 0..k {
                out[c * e * e + (y + off) * e + x + off] += a[c * k * k + y * k + x];
            }
        }
    }
    out
}

/// 1D taps of the tent prefilter: `(d - |i|) / d` for `|i| < d`.
pub fn tent_taps<T: Float>(d: usize) -> Vec<T> {
    let r = d as isize - 1;
    (-r..=r)
        .map(|i| T::of((d as isize - i.abs()) as f64 / d as f64))
        .collect()
}

/// Tap offsets and weights of the one-dimensional tent `(d - |i|) / d`.
fn tent_offsets<T: Float>(d: usize) -> Vec<(isize, T)> {
    let r = d as isize - 1;
    (-r..=r).zip(tent_taps::<T>(d)).collect()
}

/// The outer half of the tent on one side: offsets `sign * s` for
/// `s = 1..d`, weights `(d - s) / d`.
fn half_tent_offsets<T: Float>(d: usize, sign: isize) -> Vec<(isize, T)> {
    (1..d)
        .map(|s| (sign * s as isize, T::of((d - s) as f64 / d as f64)))
        .collect()
}

/// `out[y][x] = sum w * src[y + off][x]` (or along x), zero outside.
fn filter_axis<T: Float>(src: &[T], h: usize, w: usize, taps: &[(isize, T)], vertical: bool) -> Vec<T> {
    let mut out = vec![T::zero(); h * w];
    for &(off, wt) in taps {
        if vertical {
            for y in 0..h {
                let sy = y as isize + off;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                for (a, &b) in out[y * w..(y + 1) * w].iter_mut().zip(srow) {
                    *a += wt * b;
                }
            }
        } else {
            let x0 = (-off).max(0) as usize;
            let x1 = (w as isize - off).clamp(0, w as isize) as usize;
            if x0 >= x1 {
                continue;
            }
            for y in 0..h {
                let row = y * w;
                let s0 = (row as isize + x0 as isize + off) as usize;
                for (i, a) in out[row + x0..row + x1].iter_mut().enumerate() {
                    *a += wt * src[s0 + i];
                }
            }
        }
    }
    out
}

/// Accumulates the correlation of `src` (`sh x sw`) with a `kh x kw` kernel
/// whose taps are `dil` apart: output `(y, x)` reads
/// `src[y + oy + dil u][x + ox + dil v]`, zero outside.
#[allow(clippy::too_many_arguments)]
fn correlate_acc<T: Float>(
    out: &mut [T],
    oh: usize,
    ow: usize,
    src: &[T],
    sh: usize,
    sw: usize,
    oy: isize,
    ox: isize,
    ker: &[T],
    kh: usize,
    kw: usize,
    dil: usize,
) {
    for u in 0..kh {
        let dy = oy + (dil * u) as isize;
        let y0 = (-dy).max(0) as usize;
        let y1 = (sh as isize - dy).clamp(0, oh as isize) as usize;
        for v in 0..kw {
            let kv = ker[u * kw + v];
            if kv == T::zero() {
                continue;
            }
            let dx = ox + (dil * v) as isize;
            let x0 = (-dx).max(0) as usize;
            let x1 = (sw as isize - dx).clamp(0, ow as isize) as usize;
            if x0 >= x1 {
                continue;
            }
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let srow = &src[sy * sw + (x0 as isize + dx) as usize..sy * sw + (x1 as isize + dx) as usize];
                let orow = &mut out[y * ow + x0..y * ow + x1];
                for (a, &b) in orow.iter_mut().zip(srow) {
                    *a += kv * b;
                }
            }
        }
    }
}

/// Kernel gradient of [`correlate_acc`] for output gradient `g`, same
/// geometry; accumulated into `out` (`kh x kw`).
#[allow(clippy::too_many_arguments)]
fn tap_dots<T: Float>(
    g: &[T],
    oh: usize,
    ow: usize,
    src: &[T],
    sh: usize,
    sw: usize,
    oy: isize,
    ox: isize,
    kh: usize,
    kw: usize,
    dil: usize,
    out: &mut [T],
) {
    for u in 0..kh {
        let dy = oy + (dil * u) as isize;
        let y0 = (-dy).max(0) as usize;
        let y1 = (sh as isize - dy).clamp(0, oh as isize) as usize;
        for v in 0..kw {
            let dx = ox + (dil * v) as isize;
            let x0 = (-dx).max(0) as usize;
            let x1 = (sw as isize - dx).clamp(0, ow as isize) as usize;
            let mut acc = T::zero();
            if x0 < x1 {
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let srow = &src[sy * sw + (x0 as isize + dx) as usize..sy * sw + (x1 as isize + dx) as usize];
                    let grow = &g[y * ow + x0..y * ow + x1];
                    acc += grow.iter().zip(srow).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
            out[u * kw + v] += acc;
        }
    }
}

/// One term of the coarse response: a sub-kernel of `B_j` (given by tap
/// indices into the `K x K` plane, laid out `kh x kw`) correlated at
/// dilation `d` with one of the prefiltered canvases.
struct CoarseTerm {
    source: usize,
    negate: bool,
    taps: Vec<usize>,
    kh: usize,
    kw: usize,
    oy: isize,
    ox: isize,
}

/// The dilated correlation of the tent-prefiltered image realises `B_j`
/// upsampled by zero insertion and tent interpolation, whose support spills
/// `d - 1` pixels past the align-corners footprint. The spill is removed
/// with four edge strips and the four doubly removed corners added back.
fn coarse_terms(k: usize, d: usize) -> Vec<CoarseTerm> {
    let m = d as isize - 1;
    let rd = (k / 2 * d) as isize;
    let (lo, hi) = (m - rd, m + rd);
    let row = |r: usize| (0..k).map(|v| r * k + v).collect::<Vec<_>>();
    let col = |c: usize| (0..k).map(|u| u * k + c).collect::<Vec<_>>();
    let term = |source, negate, taps: Vec<usize>, kh, kw, oy, ox| CoarseTerm {
        source,
        negate,
        taps,
        kh,
        kw,
        oy,
        ox,
    };
    let mut terms = vec![term(0, false, (0..k * k).collect(), k, k, lo, lo)];
    if d > 1 {
        terms.extend([
            term(1, true, row(0), 1, k, lo, lo),
            term(2, true, row(k - 1), 1, k, hi, lo),
            term(3, true, col(0), k, 1, lo, lo),
            term(4, true, col(k - 1), k, 1, lo, hi),
            term(5, false, vec![0], 1, 1, lo, lo),
            term(6, false, vec![k - 1], 1, 1, lo, hi),
            term(7, false, vec![(k - 1) * k], 1, 1, hi, lo),
            term(8, false, vec![k * k - 1], 1, 1, hi, hi),
        ]);
    }
    terms
}

/// Prefiltered canvases of one plane, grown by `d - 1` pixels per side:
/// the full tent, the outer half-tent strips above, below, left and right
/// of a tent in the other axis, and the four outer corners.
struct CoarseSources<T> {
    canvases: Vec<Vec<T>>,
    height: usize,
    width: usize,
}

impl<T: Float> CoarseSources<T> {
    fn new(src: &[T], h: usize, w: usize, d: usize) -> Self {
        let m = d - 1;
        let (eh, ew) = (h + 2 * m, w + 2 * m);
        let mut base = vec![T::zero(); eh * ew];
        for y in 0..h {
            base[(y + m) * ew + m..(y + m) * ew + m + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
        if m == 0 {
            return Self {
                canvases: vec![base],
                height: eh,
                width: ew,
            };
        }
        let tent = tent_offsets::<T>(d);
        let (before, after) = (half_tent_offsets::<T>(d, -1), half_tent_offsets::<T>(d, 1));
        let xh = filter_axis(&base, eh, ew, &tent, false);
        let xv = filter_axis(&base, eh, ew, &tent, true);
        let left = filter_axis(&base, eh, ew, &before, false);
        let right = filter_axis(&base, eh, ew, &after, false);
        let canvases = vec![
            filter_axis(&xh, eh, ew, &tent, true),
            filter_axis(&xh, eh, ew, &before, true),
            filter_axis(&xh, eh, ew, &after, true),
            filter_axis(&xv, eh, ew, &before, false),
            filter_axis(&xv, eh, ew, &after, false),
            filter_axis(&left, eh, ew, &before, true),
            filter_axis(&right, eh, ew, &before, true),
            filter_axis(&left, eh, ew, &after, true),
            filter_axis(&right, eh, ew, &after, true),
        ];
        Self {
            canvases,
            height: eh,
            width: ew,
        }
    }
}

fn check_inputs<T: Float>(x: &Tensor<T>, basis: &KernelBasis<T>, coeffs: &Tensor<T>) -> Result<()> {
    let [n, c, h, w] = x.shape();
    if n != 1 || c != 3 {
        return Err(Error::mismatch(format!(
            "expected a [1, 3, H, W] image, got {:?}",
            x.shape()
        )));
    }
    if coeffs.shape() != [1, basis.j, h, w] {
        return Err(Error::mismatch(format!(
            "coefficients {:?} do not match image {h}x{w} with J={}",
            coeffs.shape(),
            basis.j
        )));
    }
    Ok(())
}

/// Reference route: correlate with each full effective kernel.
pub fn filter_direct<T: Float>(
    x: &Tensor<T>,
    basis: &KernelBasis<T>,
    coeffs: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_inputs(x, basis, coeffs)?;
    let (h, w) = (x.height(), x.width());
    let e = basis.footprint();
    let o = -((e / 2) as isize);
    let mut out = Tensor::zeros([1, 3, h, w]);
    let mut resp = vec![T::zero(); h * w];
    for j in 0..basis.j {
        let kern = effective_kernel(basis, j);
        let cj = coeffs.plane(0, j);
        for c in 0..3 {
            resp.fill(T::zero());
            correlate_acc(&mut resp, h, w, x.plane(0, c), h, w, o, o, &kern[c * e * e..(c + 1) * e * e], e, e, 1);
            for ((o, &v), &cv) in out.plane_mut(0, c).iter_mut().zip(&resp).zip(cj) {
                *o += cv * v;
            }
        }
    }
    Ok(out)
}

/// Production route: tent prefilter plus dense and dilated `K x K`
/// correlations. Equal to [`filter_direct`] up to rounding.
pub fn filter_fast<T: Float>(
    x: &Tensor<T>,
    basis: &KernelBasis<T>,
    coeffs: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_inputs(x, basis, coeffs)?;
    let head = basis.to_head();
    Ok(basis_filter_forward(x, &head, coeffs, basis.d, basis.use_b))
}

struct FastGeometry {
    h: usize,
    w: usize,
    k: usize,
    d: usize,
    use_b: bool,
    terms: Vec<CoarseTerm>,
}

impl FastGeometry {
    fn response<T: Float>(&self, resp: &mut [T], x: &[T], src: &CoarseSources<T>, a: &[T], b: &[T]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let r = -((k / 2) as isize);
        resp.fill(T::zero());
        correlate_acc(resp, h, w, x, h, w, r, r, a, k, k, 1);
        if !self.use_b {
            return;
        }
        let mut sub = Vec::with_capacity(k * k);
        for t in &self.terms {
            sub.clear();
            sub.extend(t.taps.iter().map(|&i| if t.negate { -b[i] } else { b[i] }));
            correlate_acc(
                resp,
                h,
                w,
                &src.canvases[t.source],
                src.height,
                src.width,
                t.oy,
                t.ox,
                &sub,
                t.kh,
                t.kw,
                self.d,
            );
        }
    }

    fn tap_grads<T: Float>(&self, g: &[T], x: &[T], src: &CoarseSources<T>, ga: &mut [T], gb: &mut [T]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let r = -((k / 2) as isize);
        tap_dots(g, h, w, x, h, w, r, r, k, k, 1, ga);
        if !self.use_b {
            return;
        }
        let mut sub = vec![T::zero(); k * k];
        for t in &self.terms {
            let sub = &mut sub[..t.taps.len()];
            sub.fill(T::zero());
            tap_dots(
                g,
                h,
                w,
                &src.canvases[t.source],
                src.height,
                src.width,
                t.oy,
                t.ox,
                t.kh,
                t.kw,
                self.d,
                sub,
            );
            for (&i, &v) in t.taps.iter().zip(sub.iter()) {
                gb[i] += if t.negate { -v } else { v };
            }
        }
    }
}

fn prefilter_item<T: Float>(xi: &[T], h: usize, w: usize, d: usize, use_b: bool) -> Vec<CoarseSources<T>> {
    if !use_b {
        return Vec::new();
    }
    let p = h * w;
    (0..3).map(|c| CoarseSources::new(&xi[c * p..(c + 1) * p], h, w, d)).collect()
}

/// Batched fast filtering. `x` is `[N, 3, H, W]`, `head` is `[N, 6J, K, K]`
/// (`A` kernels first), `coeffs` is `[N, J, H, W]`.
pub fn basis_filter_forward<T: Float>(
    x: &Tensor<T>,
    head: &Tensor<T>,
    coeffs: &Tensor<T>,
    d: usize,
    use_b: bool,
) -> Tensor<T> {
    let [n, _, h, w] = x.shape();
    let [_, ch, k, _] = head.shape();
    let jn = ch / 6;
    let kl = 3 * k * k;
    let kk = k * k;
    let p = h * w;
    let geo = FastGeometry {
        h,
        w,
        k,
        d,
        use_b,
        terms: coarse_terms(k, d),
    };
    let empty = CoarseSources {
        canvases: Vec::new(),
        height: 0,
        width: 0,
    };
    let mut out = Tensor::zeros([n, 3, h, w]);
    let mut resp = vec![T::zero(); p];
    for b in 0..n {
        let xi = x.item(b);
        let pre = prefilter_item(xi, h, w, d, use_b);
        let hb = head.item(b);
        for j in 0..jn {
            let cj = coeffs.plane(b, j).to_vec();
            for c in 0..3 {
                let a = &hb[j * kl + c * kk..j * kl + (c + 1) * kk];
                let bk = &hb[(jn + j) * kl + c * kk..(jn + j) * kl + (c + 1) * kk];
                geo.response(&mut resp, &xi[c * p..(c + 1) * p], pre.get(c).unwrap_or(&empty), a, bk);
                for ((o, &v), &cv) in out.plane_mut(b, c).iter_mut().zip(&resp).zip(&cj) {
                    *o += cv * v;
                }
            }
        }
    }
    out
}

/// Gradients of [`basis_filter_forward`] with respect to the basis head and
/// the coefficients. The image is treated as data.
pub fn basis_filter_backward<T: Float>(
    x: &Tensor<T>,
    head: &Tensor<T>,
    coeffs: &Tensor<T>,
    d: usize,
    use_b: bool,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, _, h, w] = x.shape();
    let [_, ch, k, _] = head.shape();
    let jn = ch / 6;
    let kl = 3 * k * k;
    let kk = k * k;
    let p = h * w;
    let geo = FastGeometry {
        h,
        w,
        k,
        d,
        use_b,
        terms: coarse_terms(k, d),
    };
    let empty = CoarseSources {
        canvases: Vec::new(),
        height: 0,
        width: 0,
    };
    let mut g_head = Tensor::zeros(head.shape());
    let mut g_coeffs = Tensor::zeros(coeffs.shape());
    let mut resp = vec![T::zero(); p];
    let mut weighted = vec![T::zero(); p];
    for b in 0..n {
        let xi = x.item(b);
        let pre = prefilter_item(xi, h, w, d, use_b);
        let hb = head.item(b).to_vec();
        for j in 0..jn {
            let cj = coeffs.plane(b, j).to_vec();
            let mut gc = vec![T::zero(); p];
            for c in 0..3 {
                let src = pre.get(c).unwrap_or(&empty);
                let xc = &xi[c * p..(c + 1) * p];
                let a = &hb[j * kl + c * kk..j * kl + (c + 1) * kk];
                let bk = &hb[(jn + j) * kl + c * kk..(jn + j) * kl + (c + 1) * kk];
                let g = grad_out.plane(b, c);
                geo.response(&mut resp, xc, src, a, bk);
                for ((acc, &gv), &rv) in gc.iter_mut().zip(g).zip(&resp) {
                    *acc += gv * rv;
                }
                for ((wv, &gv), &cv) in weighted.iter_mut().zip(g).zip(&cj) {
                    *wv = gv * cv;
                }
                let gh = g_head.item_mut(b);
                let (ga_all, gb_all) = gh.split_at_mut(jn * kl);
                geo.tap_grads(
                    &weighted,
                    xc,
                    src,
                    &mut ga_all[j * kl + c * kk..j * kl + (c + 1) * kk],
                    &mut gb_all[j * kl + c * kk..j * kl + (c + 1) * kk],
                );
            }
            g_coeffs.plane_mut(b, j).copy_from_slice(&gc);
        }
    }
    (g_head, g_coeffs)
}

/// Elementwise product of a filtered image and a three-channel scale map.
pub fn apply_scale_map<T: Float>(f: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    if f.shape() != g.shape() {
        return Err(Error::mismatch(format!(
            "filtered image {:?} vs scale map {:?}",
            f.shape(),
            g.shape()
        )));
    }
    let data = f.data().iter().zip(g.data()).map(|(&a, &b)| a * b).collect();
    Ok(Tensor::from_vec(f.shape(), data))
}

/// Per-pixel kernels applied to two images and summed, one `s x s` kernel
/// per pixel, channel and image. `kernels` is `[N, 6 s^2, H, W]`: the first
/// `3 s^2` channels act on `x_nf` (channel-major, then row-major taps), the
/// rest on `x_f`.
pub fn pixel_kernel_forward<T: Float>(
    x_nf: &Tensor<T>,
    x_f: &Tensor<T>,
    kernels: &Tensor<T>,
    s: usize,
) -> Tensor<T> {
    let [n, _, h, w] = x_nf.shape();
    let mut out = Tensor::zeros([n, 3, h, w]);
    let taps = s * s;
    let r = (s / 2) as isize;
    for b in 0..n {
        for (img_idx, img) in [x_nf, x_f].into_iter().enumerate() {
            for c in 0..3 {
                let src = img.plane(b, c).to_vec();
                for t in 0..taps {
                    let dy = (t / s) as isize - r;
                    let dx = (t % s) as isize - r;
                    let kmap = kernels.plane(b, (img_idx * 3 + c) * taps + t).to_vec();
                    let o = out.plane_mut(b, c);
                    shifted_product_acc(o, &kmap, &src, h, w, dy, dx);
                }
            }
        }
    }
    out
}

/// `out[y][x] += kmap[y][x] * src[y + dy][x + dx]`, zero outside.
fn shifted_product_acc<T: Float>(
    out: &mut [T],
    kmap: &[T],
    src: &[T],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy).clamp(0, h as isize) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let srow = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
        let base = y * w;
        for ((o, &kv), &sv) in out[base + x0..base + x1]
            .iter_mut()
            .zip(&kmap[base + x0..base + x1])
            .zip(srow)
        {
            *o += kv * sv;
        }
    }
}

/// Gradient of [`pixel_kernel_forward`] with respect to the kernels.
pub fn pixel_kernel_backward<T: Float>(
    x_nf: &Tensor<T>,
    x_f: &Tensor<T>,
    s: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let [n, _, h, w] = x_nf.shape();
    let taps = s * s;
    let r = (s / 2) as isize;
    let mut g = Tensor::zeros([n, 6 * taps, h, w]);
    for b in 0..n {
        for (img_idx, img) in [x_nf, x_f].into_iter().enumerate() {
            for c in 0..3 {
                let src = img.plane(b, c).to_vec();
                let go = grad_out.plane(b, c).to_vec();
                for t in 0..taps {
                    let dy = (t / s) as isize - r;
                    let dx = (t % s) as isize - r;
                    let gk = g.plane_mut(b, (img_idx * 3 + c) * taps + t);
                    shifted_product_acc(gk, &go, &src, h, w, dy, dx);
                }
            }
        }
    }
    g
}

/// The full kernel applied at pixel `(y, x)`: `sum_j c_j[n] K_j`, as three
/// `E x E` planes.
pub fn pixel_kernel<T: Float>(
    basis: &KernelBasis<T>,
    coeffs: &Tensor<T>,
    y: usize,
    x: usize,
) -> Vec<T> {
    let e = basis.footprint();
    let mut out = vec![T::zero(); 3 * e * e];
    for j in 0..basis.j {
        let cj = coeffs.at(0, j, y, x);
        for (o, v) in out.iter_mut().zip(effective_kernel(basis, j)) {
            *o += cj * v;
        }
    }
    out
}

/// Signed kernel rendered for viewing: zero maps to mid-grey, the largest
/// magnitude to black or white; each tap becomes a `zoom x zoom` block.
pub fn kernel_visualization<T: Float>(kernel: &[T], e: usize, zoom: usize) -> LinearImage {
    let peak = kernel
        .iter()
        .map(|v| v.as_f64().abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let side = e * zoom;
    LinearImage::from_fn(side, side, |c, y, x| {
        let v = kernel[c * e * e + (y / zoom) * e + x / zoom].as_f64();
        (0.5 + 0.5 * v / peak) as f32
    })
}

const DUMP_MAGIC: &[u8; 4] = b"FNFK";
const DUMP_VERSION: u32 = 1;

/// Writes a kernel-field dump.
///
/// Layout, all little-endian: magic `FNFK`, `u32` version, `u32` J, K, d,
/// H, W, `u32` flags (bit 0: coarse term enabled), then f32 data: `A`
/// (`J x 3 x K x K`), `B` (same), coefficients (`J x H x W`), scale map
/// (`3 x H x W`).
pub fn write_kernel_dump(
    path: impl AsRef<Path>,
    basis: &KernelBasis<f32>,
    fields: &PredictionFields<f32>,
) -> Result<()> {
    let [_, j, h, w] = fields.coeffs.shape();
    if j != basis.j {
        return Err(Error::mismatch("coefficient count differs from basis size"));
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(DUMP_MAGIC)?;
    for v in [
        DUMP_VERSION,
        basis.j as u32,
        basis.k as u32,
        basis.d as u32,
        h as u32,
        w as u32,
        basis.use_b as u32,
    ] {
        f.write_all(&v.to_le_bytes())?;
    }
    for v in basis
        .data
        .iter()
        .chain(fields.coeffs.data())
        .chain(fields.scale_map.data())
    {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_kernel_dump(path: impl AsRef<Path>) -> Result<(KernelBasis<f32>, PredictionFields<f32>)> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Format("not a kernel dump".into()));
    }
    let mut header = [0u32; 7];
    for v in &mut header {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)?;
        *v = u32::from_le_bytes(b);
    }
    let [version, j, k, d, h, w, flags] = header.map(|v| v as usize);
    if version as u32 != DUMP_VERSION {
        return Err(Error::Format(format!("unsupported dump version {version}")));
    }
    let mut read_f32s = |count: usize| -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; count * 4];
        f.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };
    let a = read_f32s(j * 3 * k * k)?;
    let b = read_f32s(j * 3 * k * k)?;
    let coeffs = read_f32s(j * h * w)?;
    let scale = read_f32s(3 * h * w)?;
    let basis = KernelBasis::new(j, k, d, a, b, flags & 1 == 1)?;
    let fields = PredictionFields::new(
        Tensor::from_vec([1, j, h, w], coeffs),
        Tensor::from_vec([1, 3, h, w], scale),
    )?;
    Ok((basis, fields))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(shape, rand_vec(shape.iter().product(), rng))
    }

    fn rand_basis(j: usize, k: usize, d: usize, rng: &mut ChaCha8Rng) -> KernelBasis<f64> {
        let n = j * 3 * k * k;
        KernelBasis::new(j, k, d, rand_vec(n, rng), rand_vec(n, rng), true).unwrap()
    }

    /// Pixel-by-pixel application of the full per-pixel kernel.
    fn brute_force(x: &Tensor<f64>, basis: &KernelBasis<f64>, coeffs: &Tensor<f64>) -> Tensor<f64> {
        let (h, w) = (x.height(), x.width());
        let e = basis.footprint();
        let r = (e / 2) as isize;
        let mut out = Tensor::zeros([1, 3, h, w]);
        for y in 0..h {
            for xx in 0..w {
                let kern = pixel_kernel(basis, coeffs, y, xx);
                for c in 0..3 {
                    let mut acc = 0.0;
                    for u in 0..e {
                        for v in 0..e {
                            let sy = y as isize + u as isize - r;
                            let sx = xx as isize + v as isize - r;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc += kern[c * e * e + u * e + v] * x.at(0, c, sy as usize, sx as usize);
                            }
                        }
                    }
                    *out.at_mut(0, c, y, xx) = acc;
                }
            }
        }
        out
    }

    fn delta(k: usize) -> Vec<f64> {
        let mut v = vec![0.0; 3 * k * k];
        for c in 0..3 {
            v[c * k * k + (k / 2) * k + k / 2] = 1.0;
        }
        v
    }

    #[test]
    fn upsampling_by_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = rand_vec(3 * 25, &mut rng);
        assert_eq!(upsample_kernel(&k, 5, 1), k);
    }

    #[test]
    fn upsampled_delta_is_a_tent() {
        let up = upsample_kernel(&delta(3), 3, 4);
        assert_eq!(up.len(), 3 * 81);
        for c in 0..3 {
            for i in -4i32..=4 {
                for j in -4i32..=4 {
                    let expect = (1.0 - i.abs() as f64 / 4.0) * (1.0 - j.abs() as f64 / 4.0);
                    let got = up[c * 81 + ((i + 4) * 9 + j + 4) as usize];
                    assert!((got - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn full_size_footprint() {
        assert_eq!(footprint(15, 4), 57);
        let basis = KernelBasis::<f64>::zeros(2, 15, 4).unwrap();
        assert_eq!(effective_kernel(&basis, 1).len(), 3 * 57 * 57);
    }

    #[test]
    fn effective_kernel_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (k, d) = (5, 3);
        let e = footprint(k, d);
        let a = rand_vec(3 * k * k, &mut rng);
        let b = rand_vec(3 * k * k, &mut rng);

        let only_b = KernelBasis::new(1, k, d, vec![0.0; a.len()], b.clone(), true).unwrap();
        assert_eq!(effective_kernel(&only_b, 0), upsample_kernel(&b, k, d));

        let only_a = KernelBasis::new(1, k, d, a.clone(), vec![0.0; b.len()], true).unwrap();
        let ea = effective_kernel(&only_a, 0);
        let off = (e - k) / 2;
        for c in 0..3 {
            for y in 0..e {
                for x in 0..e {
                    let inside = (off..off + k).contains(&y) && (off..off + k).contains(&x);
                    let expect = if inside { a[c * k * k + (y - off) * k + x - off] } else { 0.0 };
                    assert_eq!(ea[c * e * e + y * e + x], expect);
                }
            }
        }

        let both = KernelBasis::new(1, k, d, a.clone(), b.clone(), true).unwrap();
        let eb = effective_kernel(&both, 0);
        let mid = e / 2;
        for c in 0..3 {
            let centre = c * k * k + (k / 2) * k + k / 2;
            assert!((eb[c * e * e + mid * e + mid] - (a[centre] + b[centre])).abs() < 1e-15);
        }

        let mut no_b = both.clone();
        no_b.set_use_b(false);
        assert_eq!(effective_kernel(&no_b, 0), ea);
    }

    #[test]
    fn identity_and_linearity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor([1, 3, 9, 11], &mut rng);
        let id = KernelBasis::new(1, 3, 2, delta(3), vec![0.0; 27], true).unwrap();
        let ones = Tensor::full([1, 1, 9, 11], 1.0);
        for f in [filter_direct, filter_fast] {
            assert!(f(&x, &id, &ones).unwrap().max_abs_diff(&x) < 1e-15);
            assert_eq!(f(&x, &id, &Tensor::zeros([1, 1, 9, 11])).unwrap().max_abs(), 0.0);
        }
        let mut a = delta(3);
        a.extend(delta(3).iter().map(|v| 2.0 * v));
        let two = KernelBasis::new(2, 3, 2, a, vec![0.0; 54], true).unwrap();
        let (alpha, beta) = (0.3, -1.7);
        let mut c = Tensor::zeros([1, 2, 9, 11]);
        c.plane_mut(0, 0).fill(alpha);
        c.plane_mut(0, 1).fill(beta);
        let expect = x.map(|v| (alpha + 2.0 * beta) * v);
        assert!(filter_fast(&x, &two, &c).unwrap().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn direct_route_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (j, k, d) in [(1, 3, 1), (2, 3, 2), (3, 5, 3)] {
            let x = rand_tensor([1, 3, 10, 13], &mut rng);
            let basis = rand_basis(j, k, d, &mut rng);
            let coeffs = rand_tensor([1, j, 10, 13], &mut rng);
            let direct = filter_direct(&x, &basis, &coeffs).unwrap();
            assert!(direct.max_abs_diff(&brute_force(&x, &basis, &coeffs)) < 1e-12);
        }
    }

    #[test]
    fn fast_route_matches_direct_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (j, k, d) in [(1, 3, 1), (4, 5, 2), (2, 3, 4), (3, 5, 3)] {
            let x = rand_tensor([1, 3, 24, 20], &mut rng);
            let basis = rand_basis(j, k, d, &mut rng);
            let coeffs = rand_tensor([1, j, 24, 20], &mut rng);
            let direct = filter_direct(&x, &basis, &coeffs).unwrap();
            let fast = filter_fast(&x, &basis, &coeffs).unwrap();
            assert!(fast.max_abs_diff(&direct) <= 1e-10 * direct.max_abs());

            let (x32, b32, c32) = (x.cast::<f32>(), basis.cast::<f32>(), coeffs.cast::<f32>());
            let direct32 = filter_direct(&x32, &b32, &c32).unwrap();
            let fast32 = filter_fast(&x32, &b32, &c32).unwrap();
            assert!(fast32.max_abs_diff(&direct32) <= 1e-4 * direct32.max_abs());
        }
    }

    #[test]
    fn zero_coarse_term_gives_identical_routes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor([1, 3, 16, 16], &mut rng);
        let a = rand_vec(2 * 3 * 9, &mut rng);
        let basis = KernelBasis::new(2, 3, 2, a, vec![0.0; 54], true).unwrap();
        let coeffs = rand_tensor([1, 2, 16, 16], &mut rng);
        let direct = filter_direct(&x, &basis, &coeffs).unwrap();
        let fast = filter_fast(&x, &basis, &coeffs).unwrap();
        assert!(fast.max_abs_diff(&direct) < 1e-14);
    }

    #[test]
    fn mismatched_coefficients_are_rejected() {
        let basis = KernelBasis::<f64>::zeros(2, 3, 2).unwrap();
        let x = Tensor::zeros([1, 3, 8, 8]);
        assert!(filter_fast(&x, &basis, &Tensor::zeros([1, 2, 8, 7])).is_err());
        assert!(filter_direct(&x, &basis, &Tensor::zeros([1, 3, 8, 8])).is_err());
        assert!(KernelBasis::<f64>::zeros(1, 4, 2).is_err());
    }

    #[test]
    fn basis_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (j, k, d) = (2, 3, 2);
        let x = rand_tensor([2, 3, 9, 8], &mut rng);
        let head = rand_tensor([2, 6 * j, k, k], &mut rng);
        let coeffs = rand_tensor([2, j, 9, 8], &mut rng);
        let g = rand_tensor([2, 3, 9, 8], &mut rng);
        let objective = |hd: &Tensor<f64>, cf: &Tensor<f64>| -> f64 {
            let y = basis_filter_forward(&x, hd, cf, d, true);
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let (gh, gc) = basis_filter_backward(&x, &head, &coeffs, d, true, &g);
        let eps = 1e-6;
        for i in (0..head.len()).step_by(7) {
            let (mut hi, mut lo) = (head.clone(), head.clone());
            hi.data_mut()[i] += eps;
            lo.data_mut()[i] -= eps;
            let fd = (objective(&hi, &coeffs) - objective(&lo, &coeffs)) / (2.0 * eps);
            assert!((fd - gh.data()[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        for i in (0..coeffs.len()).step_by(11) {
            let (mut hi, mut lo) = (coeffs.clone(), coeffs.clone());
            hi.data_mut()[i] += eps;
            lo.data_mut()[i] -= eps;
            let fd = (objective(&head, &hi) - objective(&head, &lo)) / (2.0 * eps);
            assert!((fd - gc.data()[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn pixel_kernel_gradient_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_tensor([1, 3, 7, 6], &mut rng);
        let b = rand_tensor([1, 3, 7, 6], &mut rng);
        let kern = rand_tensor([1, 6 * 9, 7, 6], &mut rng);
        let g = rand_tensor([1, 3, 7, 6], &mut rng);
        let y = pixel_kernel_forward(&a, &b, &kern, 3);
        let gk = pixel_kernel_backward(&a, &b, 3, &g);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(p, q)| p * q).sum();
        let rhs: f64 = kern.data().iter().zip(gk.data()).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pixel_kernel_delta_passes_no_flash_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_tensor([1, 3, 6, 6], &mut rng);
        let b = rand_tensor([1, 3, 6, 6], &mut rng);
        let mut kern = Tensor::zeros([1, 150, 6, 6]);
        for c in 0..3 {
            kern.plane_mut(0, c * 25 + 12).fill(1.0);
        }
        assert!(pixel_kernel_forward(&a, &b, &kern, 5).max_abs_diff(&a) < 1e-15);
    }

    #[test]
    fn scale_map_examples() {
        let f = Tensor::full([1, 3, 4, 4], 0.2);
        let mut g = Tensor::zeros([1, 3, 4, 4]);
        for c in 0..3 {
            g.plane_mut(0, c).fill((c + 1) as f64);
        }
        let y = apply_scale_map(&f, &g).unwrap();
        for c in 0..3 {
            assert!(y.plane(0, c).iter().all(|&v| (v - 0.2 * (c + 1) as f64).abs() < 1e-15));
        }
        assert_eq!(apply_scale_map(&f, &Tensor::full([1, 3, 4, 4], 1.0)).unwrap(), f);
        assert!(apply_scale_map(&f, &Tensor::zeros([1, 3, 4, 3])).is_err());
    }

    #[test]
    fn dump_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let basis = rand_basis(3, 5, 2, &mut rng).cast::<f32>();
        let fields = PredictionFields::new(
            rand_tensor([1, 3, 8, 4], &mut rng).cast::<f32>(),
            rand_tensor([1, 3, 8, 4], &mut rng).cast::<f32>(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.bin");
        write_kernel_dump(&path, &basis, &fields).unwrap();
        let (b2, f2) = read_kernel_dump(&path).unwrap();
        assert_eq!(b2, basis);
        assert_eq!(f2, fields);
    }
}

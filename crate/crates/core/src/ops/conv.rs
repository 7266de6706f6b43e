use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_mismatch, Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Output extent of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// Unfold one image `[H, W, Cin]` into `[Ho*Wo, k*k*Cin]`.
    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let patch = self.patch();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * patch..][..patch];
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let dst = &mut row[(ky * self.k + kx) * self.cin..][..self.cin];
                        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                            dst.fill(T::zero());
                        } else {
                            let src = (iy as usize * self.w + ix as usize) * self.cin;
                            dst.copy_from_slice(&img[src..src + self.cin]);
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`], accumulating into `img`.
    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let patch = self.patch();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * patch..][..patch];
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = &row[(ky * self.k + kx) * self.cin..][..self.cin];
                        let dst = (iy as usize * self.w + ix as usize) * self.cin;
                        for (d, &s) in img[dst..dst + self.cin].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn column_sums<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

impl<T: Real> Graph<T> {
    /// Fully connected layer over the last axis: `x: [.., Cin]`, `w: [Cin, Cout]`, `b: [Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let cin = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != cin {
            return Err(shape_mismatch("linear", &xs, &ws));
        }
        let cout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_mismatch("linear bias", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / cin.max(1);
        let mut out = vec![T::zero(); rows * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            rows,
            cin,
            cout,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            beta,
            &mut out,
        );
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() = cout;
        let out = Tensor::from_vec(&oshape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        Ok(self.push_op(out, &parents, move |g, p, _| {
            let gx = need_x.then(|| {
                let mut gx = vec![T::zero(); rows * cin];
                T::gemm(
                    rows,
                    cout,
                    cin,
                    T::one(),
                    g.data(),
                    false,
                    p[1].data(),
                    true,
                    T::zero(),
                    &mut gx,
                );
                Tensor::from_vec(p[0].shape(), gx).unwrap()
            });
            let gw = need_w.then(|| {
                let mut gw = vec![T::zero(); cin * cout];
                T::gemm(
                    cin,
                    rows,
                    cout,
                    T::one(),
                    p[0].data(),
                    true,
                    g.data(),
                    false,
                    T::zero(),
                    &mut gw,
                );
                Tensor::from_vec(&[cin, cout], gw).unwrap()
            });
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(Some(
                    Tensor::from_vec(&[cout], column_sums(g.data(), cout)).unwrap(),
                ));
            }
            res
        }))
    }

    /// Dense 2-D convolution on channels-last input.
    ///
    /// `x: [B, H, W, Cin]`, `w: [k, k, Cin, Cout]`, `b: [Cout]`; symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] || ws[2] != xs[3] {
            return Err(shape_mismatch("conv2d", &xs, &ws));
        }
        let (bsz, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, cout) = (ws[0], ws[3]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_mismatch("conv2d bias", &ws, self.shape(b)));
            }
        }
        let (Some(ho), Some(wo)) = (
            conv_out_size(h, k, stride, pad),
            conv_out_size(wd, k, stride, pad),
        ) else {
            return Err(Error::Config(alloc::format!(
                "conv2d: kernel {} does not fit input {}x{} with pad {}",
                k,
                h,
                wd,
                pad
            )));
        };
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let patch = geom.patch();
        let npix = ho * wo;
        let mut out = vec![T::zero(); bsz * npix * cout];
        let mut cols = vec![T::zero(); npix * patch];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = b.map(|b| self.value(b).data().to_vec());
        for bi in 0..bsz {
            geom.im2col(&xv[bi * h * wd * cin..(bi + 1) * h * wd * cin], &mut cols);
            let o = &mut out[bi * npix * cout..(bi + 1) * npix * cout];
            let beta = if let Some(bias) = &bias {
                for row in o.chunks_exact_mut(cout) {
                    row.copy_from_slice(bias);
                }
                T::one()
            } else {
                T::zero()
            };
            T::gemm(
                npix,
                patch,
                cout,
                T::one(),
                &cols,
                false,
                wv,
                false,
                beta,
                o,
            );
        }
        let out = Tensor::from_vec(&[bsz, ho, wo, cout], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        Ok(self.push_op(out, &parents, move |g, p, _| {
            let xv = p[0].data();
            let wv = p[1].data();
            let mut gx = need_x.then(|| vec![T::zero(); xv.len()]);
            let mut gw = need_w.then(|| vec![T::zero(); wv.len()]);
            let mut cols = vec![T::zero(); npix * patch];
            for bi in 0..bsz {
                let gb = &g.data()[bi * npix * cout..(bi + 1) * npix * cout];
                if let Some(gw) = gw.as_mut() {
                    geom.im2col(&xv[bi * h * wd * cin..(bi + 1) * h * wd * cin], &mut cols);
                    T::gemm(
                        patch,
                        npix,
                        cout,
                        T::one(),
                        &cols,
                        true,
                        gb,
                        false,
                        T::one(),
                        gw,
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    T::gemm(
                        npix,
                        cout,
                        patch,
                        T::one(),
                        gb,
                        false,
                        wv,
                        true,
                        T::zero(),
                        &mut cols,
                    );
                    geom.col2im(&cols, &mut gx[bi * h * wd * cin..(bi + 1) * h * wd * cin]);
                }
            }
            let mut res = vec![
                gx.map(|d| Tensor::from_vec(p[0].shape(), d).unwrap()),
                gw.map(|d| Tensor::from_vec(p[1].shape(), d).unwrap()),
            ];
            if has_bias {
                res.push(Some(
                    Tensor::from_vec(&[cout], column_sums(g.data(), cout)).unwrap(),
                ));
            }
            res
        }))
    }

    /// Depth-wise `k x k` convolution, stride 1, "same" zero padding.
    ///
    /// `x: [B, H, W, C]`, `w: [k, k, C]`, `b: [C]`.
    pub fn dwconv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4
            || ws.len() != 3
            || ws[0] != ws[1]
            || ws[2] != xs[3]
            || ws[0].is_multiple_of(2)
        {
            return Err(shape_mismatch("dwconv2d", &xs, &ws));
        }
        let (bsz, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
        let k = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(shape_mismatch("dwconv2d bias", &ws, self.shape(b)));
            }
        }
        let pad = (k / 2) as isize;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); xv.len()];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(c) {
                row.copy_from_slice(bv);
            }
        }
        // Visit every (output pixel, tap) pair with an in-bounds source pixel.
        let taps = move |f: &mut dyn FnMut(usize, usize, usize)| {
            for bi in 0..bsz {
                for oy in 0..h {
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wd {
                            for kx in 0..k {
                                let ix = ox as isize + kx as isize - pad;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let o = ((bi * h + oy) * wd + ox) * c;
                                let i = ((bi * h + iy as usize) * wd + ix as usize) * c;
                                f(o, i, (ky * k + kx) * c);
                            }
                        }
                    }
                }
            }
        };
        taps(&mut |o, i, t| {
            for j in 0..c {
                out[o + j] += xv[i + j] * wv[t + j];
            }
        });
        let out = Tensor::from_vec(&xs, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        Ok(self.push_op(out, &parents, move |g, p, _| {
            let xv = p[0].data();
            let wv = p[1].data();
            let gv = g.data();
            let mut gx = vec![T::zero(); xv.len()];
            let mut gw = vec![T::zero(); wv.len()];
            taps(&mut |o, i, t| {
                for j in 0..c {
                    gx[i + j] += gv[o + j] * wv[t + j];
                    gw[t + j] += gv[o + j] * xv[i + j];
                }
            });
            let mut res = vec![
                Some(Tensor::from_vec(p[0].shape(), gx).unwrap()),
                Some(Tensor::from_vec(p[1].shape(), gw).unwrap()),
            ];
            if has_bias {
                res.push(Some(Tensor::from_vec(&[c], column_sums(gv, c)).unwrap()));
            }
            res
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_size_arithmetic() {
        assert_eq!(conv_out_size(256, 4, 2, 1), Some(128));
        assert_eq!(conv_out_size(32, 4, 1, 1), Some(31));
        assert_eq!(conv_out_size(31, 4, 1, 1), Some(30));
        assert_eq!(conv_out_size(40, 5, 4, 2), Some(10));
        assert_eq!(conv_out_size(2, 5, 1, 0), None);
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::from_fn(&[2, 5, 4, 3], |i| ((i * 37 % 11) as f64 - 5.0) * 0.1);
        let w = Tensor::from_fn(&[3, 3, 3, 2], |i| ((i * 13 % 7) as f64 - 3.0) * 0.2);
        let b = Tensor::from_vec(&[2], vec![0.5, -0.25]).unwrap();
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
        let yv = g.value(y);
        assert_eq!(yv.shape(), &[2, 3, 2, 2]);
        for bi in 0..2 {
            for oy in 0..3 {
                for ox in 0..2 {
                    for co in 0..2 {
                        let mut acc = b.data()[co];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                    continue;
                                }
                                for ci in 0..3 {
                                    acc += x.data()
                                        [((bi * 5 + iy as usize) * 4 + ix as usize) * 3 + ci]
                                        * w.data()[((ky * 3 + kx) * 3 + ci) * 2 + co];
                                }
                            }
                        }
                        let got = yv.data()[((bi * 3 + oy) * 2 + ox) * 2 + co];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

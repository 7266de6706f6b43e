use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_mismatch, Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Permute `[B, A1, A2, A3]` by moving axis 1 to the end (`to_last`) or the
/// last axis to position 1.
fn permute4<T: Real>(t: &Tensor<T>, to_last: bool) -> Tensor<T> {
    let s = t.shape();
    let (b, d1, d2, d3) = (s[0], s[1], s[2], s[3]);
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    if to_last {
        // [B, C, H, W] -> [B, H, W, C]
        for bi in 0..b {
            for c in 0..d1 {
                for y in 0..d2 {
                    for x in 0..d3 {
                        out[((bi * d2 + y) * d3 + x) * d1 + c] =
                            src[((bi * d1 + c) * d2 + y) * d3 + x];
                    }
                }
            }
        }
        Tensor::from_vec(&[b, d2, d3, d1], out).unwrap()
    } else {
        // [B, H, W, C] -> [B, C, H, W]
        for bi in 0..b {
            for y in 0..d1 {
                for x in 0..d2 {
                    for c in 0..d3 {
                        out[((bi * d3 + c) * d1 + y) * d2 + x] =
                            src[((bi * d1 + y) * d2 + x) * d3 + c];
                    }
                }
            }
        }
        Tensor::from_vec(&[b, d3, d1, d2], out).unwrap()
    }
}

/// `[B, C, H, W]` to `[B, H, W, C]`.
pub fn nchw_to_nhwc<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    permute4(t, true)
}

/// `[B, H, W, C]` to `[B, C, H, W]`.
pub fn nhwc_to_nchw<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    permute4(t, false)
}

impl<T: Real> Graph<T> {
    pub fn to_nhwc(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 4 {
            return Err(shape_mismatch("to_nhwc", self.shape(x), &[0, 0, 0, 0]));
        }
        let out = nchw_to_nhwc(self.value(x));
        Ok(self.push_op(out, &[x], |g, _, _| vec![Some(nhwc_to_nchw(g))]))
    }

    pub fn to_nchw(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 4 {
            return Err(shape_mismatch("to_nchw", self.shape(x), &[0, 0, 0, 0]));
        }
        let out = nhwc_to_nchw(self.value(x));
        Ok(self.push_op(out, &[x], |g, _, _| vec![Some(nchw_to_nhwc(g))]))
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Precondition("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_mismatch("concat_last", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push_op(out, parts, move |g, p, _| {
            let mut grads: Vec<Vec<T>> = widths
                .iter()
                .map(|&w| Vec::with_capacity(rows * w))
                .collect();
            for row in g.data().chunks_exact(total) {
                let mut off = 0;
                for (gi, &w) in grads.iter_mut().zip(&widths) {
                    gi.extend_from_slice(&row[off..off + w]);
                    off += w;
                }
            }
            grads
                .into_iter()
                .zip(p)
                .map(|(d, pv)| Some(Tensor::from_vec(pv.shape(), d).unwrap()))
                .collect()
        }))
    }

    /// Channels `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        if start + len > c {
            return Err(Error::Precondition(alloc::format!(
                "slice {}..{} beyond {} channels",
                start,
                start + len,
                c
            )));
        }
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push_op(out, &[x], move |g, p, _| {
            let mut gx = vec![T::zero(); p[0].len()];
            for (dst, src) in gx.chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                dst[start..start + len].copy_from_slice(src);
            }
            vec![Some(Tensor::from_vec(p[0].shape(), gx).unwrap())]
        }))
    }

    /// Mean over the last axis, keeping it with size 1.
    pub fn mean_last_keep(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        let inv = T::one() / T::from_f64(c as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(c)
            .map(|row| row.iter().copied().sum::<T>() * inv)
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = 1;
        let out = Tensor::from_vec(&shape, data).unwrap();
        self.push_op(out, &[x], move |g, p, _| {
            let mut gx = Vec::with_capacity(p[0].len());
            for &gv in g.data() {
                gx.extend(core::iter::repeat_n(gv * inv, c));
            }
            vec![Some(Tensor::from_vec(p[0].shape(), gx).unwrap())]
        })
    }

    /// Spatial mean of `[B, H, W, C]`, giving `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_mismatch("global_avg_pool", &s, &[0, 0, 0, 0]));
        }
        let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
        let inv = T::one() / T::from_f64(hw as f64);
        let mut out = vec![T::zero(); b * c];
        for (bi, chunk) in self.value(x).data().chunks_exact(hw * c).enumerate() {
            for row in chunk.chunks_exact(c) {
                for (o, &v) in out[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let out = Tensor::from_vec(&[b, c], out)?;
        Ok(self.push_op(out, &[x], move |g, p, _| {
            let mut gx = Vec::with_capacity(p[0].len());
            for bi in 0..b {
                let grow = &g.data()[bi * c..(bi + 1) * c];
                for _ in 0..hw {
                    gx.extend(grow.iter().map(|&v| v * inv));
                }
            }
            vec![Some(Tensor::from_vec(p[0].shape(), gx).unwrap())]
        }))
    }
}

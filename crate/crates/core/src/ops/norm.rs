use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_mismatch, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-group mean and reciprocal standard deviation, where group `j` of the
/// `[rows, c]` buffer is either a row (`per_row`) or a column.
fn moments<T: Real>(x: &[T], rows: usize, c: usize, per_row: bool, eps: T) -> (Vec<T>, Vec<T>) {
    let groups = if per_row { rows } else { c };
    let n = T::from_f64(if per_row { c } else { rows } as f64);
    let mut mean = vec![T::zero(); groups];
    let mut var = vec![T::zero(); groups];
    for r in 0..rows {
        for j in 0..c {
            let gidx = if per_row { r } else { j };
            mean[gidx] += x[r * c + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    for r in 0..rows {
        for j in 0..c {
            let gidx = if per_row { r } else { j };
            let d = x[r * c + j] - mean[gidx];
            var[gidx] += d * d;
        }
    }
    let rstd = var
        .iter()
        .map(|&v| T::one() / (v / n + eps).sqrt())
        .collect();
    (mean, rstd)
}

/// Backward of plain normalization (`xhat`) given `dxhat`, for one block of
/// `[rows, c]` grouped as in [`moments`].
fn normalize_backward<T: Real>(
    x: &[T],
    dxhat: &[T],
    rows: usize,
    c: usize,
    per_row: bool,
    eps: T,
    dx: &mut [T],
) {
    let (mean, rstd) = moments(x, rows, c, per_row, eps);
    let groups = mean.len();
    let n = T::from_f64(if per_row { c } else { rows } as f64);
    let mut sum_d = vec![T::zero(); groups];
    let mut sum_dx = vec![T::zero(); groups];
    for r in 0..rows {
        for j in 0..c {
            let gi = if per_row { r } else { j };
            let i = r * c + j;
            let xhat = (x[i] - mean[gi]) * rstd[gi];
            sum_d[gi] += dxhat[i];
            sum_dx[gi] += dxhat[i] * xhat;
        }
    }
    for r in 0..rows {
        for j in 0..c {
            let gi = if per_row { r } else { j };
            let i = r * c + j;
            let xhat = (x[i] - mean[gi]) * rstd[gi];
            dx[i] = rstd[gi] / n * (n * dxhat[i] - sum_d[gi] - xhat * sum_dx[gi]);
        }
    }
}

impl<T: Real> Graph<T> {
    /// Layer normalization over the last axis with affine `gamma`, `beta: [C]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_mismatch("layer_norm", &s, self.shape(gamma)));
        }
        let rows = self.value(x).len() / c;
        let xv = self.value(x).data();
        let (mean, rstd) = moments(xv, rows, c, true, eps);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            for j in 0..c {
                let i = r * c + j;
                out[i] = (xv[i] - mean[r]) * rstd[r] * gv[j] + bv[j];
            }
        }
        let out = Tensor::from_vec(&s, out)?;
        Ok(self.push_op(out, &[x, gamma, beta], move |g, p, _| {
            let xv = p[0].data();
            let gam = p[1].data();
            let gd = g.data();
            let (mean, rstd) = moments(xv, rows, c, true, eps);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dxhat = vec![T::zero(); xv.len()];
            for r in 0..rows {
                for j in 0..c {
                    let i = r * c + j;
                    let xhat = (xv[i] - mean[r]) * rstd[r];
                    dgamma[j] += gd[i] * xhat;
                    dbeta[j] += gd[i];
                    dxhat[i] = gd[i] * gam[j];
                }
            }
            let mut dx = vec![T::zero(); xv.len()];
            normalize_backward(xv, &dxhat, rows, c, true, eps, &mut dx);
            vec![
                Some(Tensor::from_vec(p[0].shape(), dx).unwrap()),
                Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                Some(Tensor::from_vec(&[c], dbeta).unwrap()),
            ]
        }))
    }

    /// Instance normalization of `[B, H, W, C]`: each (sample, channel) plane
    /// is normalized over its spatial extent. No affine terms.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_mismatch("instance_norm", &s, &[0, 0, 0, 0]));
        }
        let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            let blk = &xv[bi * hw * c..(bi + 1) * hw * c];
            let (mean, rstd) = moments(blk, hw, c, false, eps);
            for r in 0..hw {
                for j in 0..c {
                    let i = r * c + j;
                    out[bi * hw * c + i] = (blk[i] - mean[j]) * rstd[j];
                }
            }
        }
        let out = Tensor::from_vec(&s, out)?;
        Ok(self.push_op(out, &[x], move |g, p, _| {
            let xv = p[0].data();
            let mut dx = vec![T::zero(); xv.len()];
            for bi in 0..b {
                let r = bi * hw * c..(bi + 1) * hw * c;
                normalize_backward(
                    &xv[r.clone()],
                    &g.data()[r.clone()],
                    hw,
                    c,
                    false,
                    eps,
                    &mut dx[r],
                );
            }
            vec![Some(Tensor::from_vec(p[0].shape(), dx).unwrap())]
        }))
    }
}

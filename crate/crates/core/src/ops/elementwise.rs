use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_mismatch, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Stable logistic function over a buffer, built on the vectorized `exp`.
pub(crate) fn sigmoid_slice<T: Real>(x: &[T]) -> Vec<T> {
    let mut e: Vec<T> = x.iter().map(|v| -v.abs()).collect();
    T::exp_slice(&mut e);
    x.iter().zip(e.iter_mut()).for_each(|(&xv, ev)| {
        let r = T::one() / (T::one() + *ev);
        *ev = if xv >= T::zero() { r } else { *ev * r };
    });
    e
}

impl<T: Real> Graph<T> {
    /// Elementwise map with derivative `df(x, y)`.
    pub(crate) fn unary<F, D>(&mut self, a: Var, f: F, df: D) -> Var
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let out = self.value(a).map(f);
        self.push_op(out, &[a], move |g, p, y| {
            let x = p[0].data();
            let data: Vec<T> = g
                .data()
                .iter()
                .zip(x.iter().zip(y.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), data).unwrap())]
        })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sig = sigmoid_slice(x.data());
        let data = x.data().iter().zip(&sig).map(|(&x, &s)| x * s).collect();
        let out = Tensor::from_vec(x.shape(), data).unwrap();
        self.push_op(out, &[a], |g, p, _| {
            let x = p[0].data();
            let sig = sigmoid_slice(x);
            let data = g
                .data()
                .iter()
                .zip(x.iter().zip(&sig))
                .map(|(&g, (&x, &s))| g * s * (T::one() + x * (T::one() - s)))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), data).unwrap())]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push_op(out, &[a], |g, p, _| {
            let sig = sigmoid_slice(p[0].data());
            let data = g.data().iter().zip(&sig).map(|(&g, &s)| g * s).collect();
            vec![Some(Tensor::from_vec(g.shape(), data).unwrap())]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            move |x| if x > T::zero() { x } else { slope * x },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| x + x)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.unary(a, move |x| x * k, move |_, _| k)
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        self.unary(a, move |x| x + k, |_, _| T::one())
    }

    fn binary_same<F>(&mut self, op: &'static str, a: Var, b: Var, f: F) -> Result<Tensor<T>>
    where
        F: Fn(T, T) -> T,
    {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_mismatch(op, va.shape(), vb.shape()));
        }
        va.zip_map(vb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(out, &[a, b], |g, _, _| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push_op(out, &[a, b], |g, _, _| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push_op(out, &[a, b], |g, p, _| {
            let ga = g.zip_map(p[1], |g, y| g * y).unwrap();
            let gb = g.zip_map(p[0], |g, x| g * x).unwrap();
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("div", a, b, |x, y| x / y)?;
        Ok(self.push_op(out, &[a, b], |g, p, _| {
            let ga = g.zip_map(p[1], |g, y| g / y).unwrap();
            let num = g.zip_map(p[0], |g, x| g * x).unwrap();
            let gb = num.zip_map(p[1], |gx, y| -gx / (y * y)).unwrap();
            vec![Some(ga), Some(gb)]
        }))
    }

    /// `x + bias` with `bias: [C]` broadcast over the leading axes of `x: [.., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(bias) != [c] {
            return Err(shape_mismatch("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (v, &bb) in row.iter_mut().zip(b.iter()) {
                *v += bb;
            }
        }
        Ok(self.push_op(out, &[x, bias], move |g, _, _| {
            let mut gb = vec![T::zero(); c];
            for row in g.data().chunks_exact(c) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![Some(g.clone()), Some(Tensor::from_vec(&[c], gb).unwrap())]
        }))
    }

    /// `x * s` with per-channel `s: [C]` broadcast over `x: [.., C]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(s) != [c] {
            return Err(shape_mismatch("mul_channel", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (v, &k) in row.iter_mut().zip(sv.iter()) {
                *v *= k;
            }
        }
        Ok(self.push_op(out, &[x, s], move |g, p, _| {
            let sv = p[1].data();
            let mut gx = g.clone();
            let mut gs = vec![T::zero(); c];
            for (grow, xrow) in gx
                .data_mut()
                .chunks_exact_mut(c)
                .zip(p[0].data().chunks_exact(c))
            {
                for j in 0..c {
                    gs[j] += grow[j] * xrow[j];
                    grow[j] *= sv[j];
                }
            }
            vec![Some(gx), Some(Tensor::from_vec(&[c], gs).unwrap())]
        }))
    }

    /// `x[b, .., c] * s[b, c]`: per-sample channel gating.
    pub fn mul_batch_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (b, c) = (xs[0], *xs.last().unwrap());
        if self.shape(s) != [b, c] {
            return Err(shape_mismatch("mul_batch_channel", &xs, self.shape(s)));
        }
        let per = self.value(x).len() / b;
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (bi, chunk) in out.data_mut().chunks_exact_mut(per).enumerate() {
            let srow = &sv[bi * c..(bi + 1) * c];
            for row in chunk.chunks_exact_mut(c) {
                for (v, &k) in row.iter_mut().zip(srow) {
                    *v *= k;
                }
            }
        }
        Ok(self.push_op(out, &[x, s], move |g, p, _| {
            let sv = p[1].data();
            let mut gx = g.clone();
            let mut gs = vec![T::zero(); b * c];
            for bi in 0..b {
                let srow = &sv[bi * c..(bi + 1) * c];
                let gsrow = &mut gs[bi * c..(bi + 1) * c];
                let xs = &p[0].data()[bi * per..(bi + 1) * per];
                let gchunk = &mut gx.data_mut()[bi * per..(bi + 1) * per];
                for (grow, xrow) in gchunk.chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
                    for j in 0..c {
                        gsrow[j] += grow[j] * xrow[j];
                        grow[j] *= srow[j];
                    }
                }
            }
            vec![Some(gx), Some(Tensor::from_vec(&[b, c], gs).unwrap())]
        }))
    }

    /// Mean binary cross-entropy between `logits` and a constant `target`.
    pub fn bce_with_logits_mean(&mut self, logits: Var, target: T) -> Var {
        let v = self.value(logits);
        let n = T::from_f64(v.len() as f64);
        let total: T = v
            .data()
            .iter()
            .map(|&x| x.max(T::zero()) - x * target + (-x.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / n);
        self.push_op(out, &[logits], move |g, p, _| {
            let k = g.item() / n;
            vec![Some(p[0].map(|x| (sigmoid(x) - target) * k))]
        })
    }
}

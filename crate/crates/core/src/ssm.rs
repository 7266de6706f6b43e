//! Selective state-space scan and its four-direction 2-D extension.
//!
//! Parameterization: `A = -exp(a_log)`, `delta = softplus(x W_down W_up + delta_bias)`,
//! `B = x W_b`, `C = x W_c`, zero-order-hold simplified discretization
//! `a_bar = exp(delta * A)`, `b_bar = delta * B`. Every sequence starts from a
//! zero state and direction outputs are summed.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{shape_mismatch, Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

/// Above this many `(position, channel, state)` entries the discretized
/// decay is recomputed on the fly instead of cached for the whole image.
const DECAY_CACHE_LIMIT: usize = 1 << 24;

/// A `[L, C]` feature sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch<T>(Tensor<T>);

impl<T: Real> SequenceBatch<T> {
    pub fn new(x: Tensor<T>) -> Result<Self> {
        let s = x.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::Precondition(alloc::format!(
                "sequence must be [L >= 1, C >= 1], got {:?}",
                s
            )));
        }
        if !x.is_finite() {
            return Err(Error::Precondition(
                "sequence has non-finite entries".into(),
            ));
        }
        Ok(Self(x))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Low rank of the delta projection for `channels` channels.
pub fn delta_rank(channels: usize) -> usize {
    channels.div_ceil(16).max(1)
}

/// Parameters of one selective scan layer over `C` channels with `N` states.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T> {
    /// `[C, N]`, effective state matrix is `-exp(a_log)`.
    pub a_log: Tensor<T>,
    /// `[C]`
    pub d_skip: Tensor<T>,
    /// `[C, R]`
    pub w_delta_down: Tensor<T>,
    /// `[R, C]`
    pub w_delta_up: Tensor<T>,
    /// `[C]`
    pub delta_bias: Tensor<T>,
    /// `[C, N]`
    pub w_b: Tensor<T>,
    /// `[C, N]`
    pub w_c: Tensor<T>,
}

/// Canonical names of the parameter tensors, in [`SsmParams::tensors`] order.
pub const SSM_PARAM_NAMES: [&str; 7] = [
    "a_log",
    "d_skip",
    "w_delta_down",
    "w_delta_up",
    "delta_bias",
    "w_b",
    "w_c",
];

impl<T: Real> SsmParams<T> {
    /// Shapes of the parameter tensors for `channels` and `n_state`.
    pub fn shapes(channels: usize, n_state: usize) -> [Vec<usize>; 7] {
        let r = delta_rank(channels);
        [
            vec![channels, n_state],
            vec![channels],
            vec![channels, r],
            vec![r, channels],
            vec![channels],
            vec![channels, n_state],
            vec![channels, n_state],
        ]
    }

    /// Standard initialization: `A = -(1..=N)` per channel, unit skip,
    /// projections uniform in `±1/sqrt(fan_in)`, and a delta bias placing
    /// `softplus(bias)` log-uniformly in `[1e-3, 1e-1]`.
    pub fn init<R: Rng + ?Sized>(channels: usize, n_state: usize, rng: &mut R) -> Self {
        let r = delta_rank(channels);
        let a_log = Tensor::from_fn(&[channels, n_state], |i| {
            T::from_f64(((i % n_state) + 1) as f64).ln()
        });
        let uni = |fan_in: usize, shape: &[usize], rng: &mut R| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).unwrap();
            Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
        };
        let w_delta_down = uni(channels, &[channels, r], rng);
        let w_delta_up = uni(r, &[r, channels], rng);
        let w_b = uni(channels, &[channels, n_state], rng);
        let w_c = uni(channels, &[channels, n_state], rng);
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let dt = Uniform::new_inclusive(lo, hi).unwrap();
        let delta_bias = Tensor::from_fn(&[channels], |_| {
            let d = dt.sample(rng).exp();
            // inverse softplus
            T::from_f64(d + (-(-d).exp_m1()).ln())
        });
        Self {
            a_log,
            d_skip: Tensor::full(&[channels], T::one()),
            w_delta_down,
            w_delta_up,
            delta_bias,
            w_b,
            w_c,
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn n_state(&self) -> usize {
        self.a_log.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor<T>; 7] {
        [
            &self.a_log,
            &self.d_skip,
            &self.w_delta_down,
            &self.w_delta_up,
            &self.delta_bias,
            &self.w_b,
            &self.w_c,
        ]
    }

    pub fn from_tensors(t: [Tensor<T>; 7]) -> Result<Self> {
        let [a_log, d_skip, w_delta_down, w_delta_up, delta_bias, w_b, w_c] = t;
        let p = Self {
            a_log,
            d_skip,
            w_delta_down,
            w_delta_up,
            delta_bias,
            w_b,
            w_c,
        };
        p.validate()?;
        Ok(p)
    }

    /// Shape congruence and strict negativity of the effective state matrix.
    pub fn validate(&self) -> Result<()> {
        if self.a_log.rank() != 2 {
            return Err(Error::Config("a_log must be [C, N]".into()));
        }
        let (c, n) = (self.channels(), self.n_state());
        if c == 0 || n == 0 {
            return Err(Error::Config("SSM needs C >= 1 and N >= 1".into()));
        }
        let r = self.w_delta_down.shape().get(1).copied().unwrap_or(0);
        let want = [
            vec![c, n],
            vec![c],
            vec![c, r],
            vec![r, c],
            vec![c],
            vec![c, n],
            vec![c, n],
        ];
        for ((t, w), name) in self.tensors().iter().zip(want.iter()).zip(SSM_PARAM_NAMES) {
            if t.shape() != &w[..] {
                return Err(Error::Config(alloc::format!(
                    "SSM parameter {} has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    w
                )));
            }
        }
        if r == 0 {
            return Err(Error::Config("delta projection rank must be >= 1".into()));
        }
        if !self.state_matrix().data().iter().all(|&a| a < T::zero()) {
            return Err(Error::Precondition(
                "effective A must be strictly negative".into(),
            ));
        }
        Ok(())
    }

    /// Effective state matrix `A = -exp(a_log)`.
    pub fn state_matrix(&self) -> Tensor<T> {
        self.a_log.map(|v| -v.exp())
    }
}

/// Scan orders applied to a `[H, W]` grid flattened row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirections {
    /// Row-major forward only; a 1-D sequence is the `H = 1` case.
    Forward,
    /// Row-major forward and reverse, column-major forward and reverse.
    Four,
}

/// Position permutations for every direction of a `h x w` grid.
pub fn scan_orders(h: usize, w: usize, dirs: ScanDirections) -> Vec<Vec<usize>> {
    let row: Vec<usize> = (0..h * w).collect();
    match dirs {
        ScanDirections::Forward => vec![row],
        ScanDirections::Four => {
            let col: Vec<usize> = (0..w)
                .flat_map(|x| (0..h).map(move |y| y * w + x))
                .collect();
            let row_rev: Vec<usize> = row.iter().rev().copied().collect();
            let col_rev: Vec<usize> = col.iter().rev().copied().collect();
            vec![row, row_rev, col, col_rev]
        }
    }
}

/// Discretize: `a_bar[l, c, n] = exp(delta[l, c] * a[c, n])`,
/// `b_bar[l, c, n] = delta[l, c] * b[l, n]`.
pub fn discretize<T: Real>(
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (l, c) = dims2(delta, "discretize delta")?;
    let (ca, n) = dims2(a, "discretize a")?;
    let (lb, nb) = dims2(b, "discretize b")?;
    if ca != c || lb != l || nb != n {
        return Err(shape_mismatch("discretize", delta.shape(), b.shape()));
    }
    if !delta.data().iter().all(|&d| d > T::zero()) {
        return Err(Error::Precondition(
            "delta must be strictly positive".into(),
        ));
    }
    if !a.data().iter().all(|&v| v < T::zero()) {
        return Err(Error::Precondition(
            "state matrix must be strictly negative".into(),
        ));
    }
    let mut a_bar = vec![T::zero(); l * c * n];
    let mut b_bar = vec![T::zero(); l * c * n];
    for li in 0..l {
        for ci in 0..c {
            let dl = delta.data()[li * c + ci];
            for ni in 0..n {
                let o = (li * c + ci) * n + ni;
                a_bar[o] = (dl * a.data()[ci * n + ni]).exp();
                b_bar[o] = dl * b.data()[li * n + ni];
            }
        }
    }
    Ok((
        Tensor::from_vec(&[l, c, n], a_bar)?,
        Tensor::from_vec(&[l, c, n], b_bar)?,
    ))
}

fn dims2<T: Real>(t: &Tensor<T>, what: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[a, b] => Ok((a, b)),
        s => Err(shape_mismatch(what, s, &[0, 0])),
    }
}

/// Evaluates `$body` with the const `$v` set to the state size for common
/// sizes, or to 0 (dynamic) otherwise.
macro_rules! with_state_size {
    ($n:expr, |$v:ident| $body:expr) => {
        match $n {
            4 => {
                const $v: usize = 4;
                $body
            }
            8 => {
                const $v: usize = 8;
                $body
            }
            16 => {
                const $v: usize = 16;
                $body
            }
            32 => {
                const $v: usize = 32;
                $body
            }
            _ => {
                const $v: usize = 0;
                $body
            }
        }
    };
}

/// Borrowed inputs of the scan kernel for a single image.
struct ScanInputs<'a, T> {
    x: &'a [T],
    delta: &'a [T],
    a: &'a [T],
    b: &'a [T],
    c: &'a [T],
    d_skip: &'a [T],
    dim: usize,
    n: usize,
}

impl<T: Real> ScanInputs<'_, T> {
    fn positions(&self) -> usize {
        self.x.len() / self.dim
    }

    fn decay_row(&self, p: usize, out: &mut [T]) {
        let n = self.n;
        let drow = &self.delta[p * self.dim..(p + 1) * self.dim];
        for (d, &dl) in drow.iter().enumerate() {
            for (o, &a) in out[d * n..(d + 1) * n]
                .iter_mut()
                .zip(&self.a[d * n..(d + 1) * n])
            {
                *o = dl * a;
            }
        }
        T::exp_slice(&mut out[..self.dim * n]);
    }

    fn decay_cache(&self) -> Option<Vec<T>> {
        let dn = self.dim * self.n;
        let total = self.positions() * dn;
        if total > DECAY_CACHE_LIMIT {
            return None;
        }
        let mut cache = vec![T::zero(); total];
        for p in 0..self.positions() {
            self.decay_row(p, &mut cache[p * dn..(p + 1) * dn]);
        }
        Some(cache)
    }

    /// One recurrence step at position `p`: `h <- a_bar * h + delta * x * B`.
    fn step(&self, p: usize, ab: &[T], h: &mut [T]) {
        let (dim, n) = (self.dim, self.n);
        let r = p * dim..(p + 1) * dim;
        with_state_size!(n, |N| step_row::<T, N>(
            &self.delta[r.clone()],
            &self.x[r.clone()],
            &self.b[p * n..(p + 1) * n],
            ab,
            h
        ))
    }

    /// Sum over `orders` of the scan output, accumulated into `y: [P, D]`.
    /// With `ckpt`, hidden states at every backward segment start are saved
    /// per order.
    fn forward(
        &self,
        orders: &[Vec<usize>],
        cache: Option<&[T]>,
        y: &mut [T],
        mut ckpt: Option<&mut Vec<T>>,
    ) {
        let (dim, n) = (self.dim, self.n);
        let dn = dim * n;
        let mut row = vec![T::zero(); dn];
        for order in orders {
            let seg = segment_len(order.len());
            let mut h = vec![T::zero(); dn];
            for (i, &p) in order.iter().enumerate() {
                if i % seg == 0 {
                    if let Some(c) = ckpt.as_deref_mut() {
                        c.extend_from_slice(&h);
                    }
                }
                let ab: &[T] = match cache {
                    Some(c) => &c[p * dn..(p + 1) * dn],
                    None => {
                        self.decay_row(p, &mut row);
                        &row
                    }
                };
                self.step(p, ab, &mut h);
                let r = p * dim..(p + 1) * dim;
                with_state_size!(n, |N| output_row::<T, N>(
                    &h,
                    &self.c[p * n..(p + 1) * n],
                    &self.x[r.clone()],
                    self.d_skip,
                    &mut y[r.clone()]
                ));
            }
        }
    }

    /// Reverse-mode pass. Hidden states are rebuilt segment by segment from
    /// checkpoints taken every ~sqrt(L) steps.
    fn backward(
        &self,
        orders: &[Vec<usize>],
        cache: Option<&[T]>,
        saved: &[T],
        gy: &[T],
        grads: &mut ScanGrads<'_, T>,
    ) {
        let (dim, n) = (self.dim, self.n);
        let dn = dim * n;
        let decay = |p: usize, buf: &mut [T]| match cache {
            Some(c) => buf.copy_from_slice(&c[p * dn..(p + 1) * dn]),
            None => self.decay_row(p, buf),
        };
        let mut scratch = vec![T::zero(); 2 * n];
        let mut offset = 0;
        for order in orders {
            let len = order.len();
            let seg = segment_len(len);
            let nseg = len.div_ceil(seg);
            let ckpt = &saved[offset..offset + nseg * dn];
            offset += nseg * dn;
            let mut hbuf = vec![T::zero(); (seg + 1) * dn];
            let mut abuf = vec![T::zero(); seg * dn];
            let mut dh = vec![T::zero(); dn];
            for s in (0..nseg).rev() {
                let span = &order[s * seg..((s + 1) * seg).min(len)];
                hbuf[..dn].copy_from_slice(&ckpt[s * dn..(s + 1) * dn]);
                for (i, &p) in span.iter().enumerate() {
                    let (done, rest) = hbuf.split_at_mut((i + 1) * dn);
                    let next = &mut rest[..dn];
                    next.copy_from_slice(&done[i * dn..]);
                    let abi = &mut abuf[i * dn..(i + 1) * dn];
                    decay(p, abi);
                    self.step(p, abi, next);
                }
                for (i, &p) in span.iter().enumerate().rev() {
                    let r = p * dim..(p + 1) * dim;
                    let row = BackRow {
                        h_prev: &hbuf[i * dn..(i + 1) * dn],
                        h_cur: &hbuf[(i + 1) * dn..(i + 2) * dn],
                        ab: &abuf[i * dn..(i + 1) * dn],
                        a: self.a,
                        gy: &gy[r.clone()],
                        x: &self.x[r.clone()],
                        delta: &self.delta[r.clone()],
                        d_skip: self.d_skip,
                        b: &self.b[p * n..(p + 1) * n],
                        c: &self.c[p * n..(p + 1) * n],
                    };
                    let (td, tx) = scratch.split_at_mut(n);
                    with_state_size!(n, |N| back_row::<T, N>(
                        &row,
                        RowGrads {
                            a: grads.a,
                            b: &mut grads.b[p * n..(p + 1) * n],
                            c: &mut grads.c[p * n..(p + 1) * n],
                            x: &mut grads.x[r.clone()],
                            delta: &mut grads.delta[r.clone()],
                            d_skip: grads.d_skip,
                        },
                        &mut dh,
                        td,
                        tx
                    ));
                }
            }
        }
    }
}

/// Checkpoint spacing of the backward pass, about `sqrt(len)`.
fn segment_len(len: usize) -> usize {
    len.isqrt() + 1
}

/// State size of a kernel call: the constant `N`, or `fallback` when `N == 0`.
#[inline(always)]
fn state_size<const N: usize>(fallback: usize) -> usize {
    if N == 0 {
        fallback
    } else {
        N
    }
}

/// `h[d] <- a_bar[d] * h[d] + delta[d] * x[d] * B` for every channel `d`.
#[inline(never)]
fn step_row<T: Real, const N: usize>(delta: &[T], x: &[T], b: &[T], ab: &[T], h: &mut [T]) {
    let n = state_size::<N>(b.len());
    let b = &b[..n];
    for ((hr, ar), (&dl, &xv)) in h
        .chunks_exact_mut(n)
        .zip(ab.chunks_exact(n))
        .zip(delta.iter().zip(x))
    {
        let u = dl * xv;
        for k in 0..n {
            hr[k] = ar[k] * hr[k] + u * b[k];
        }
    }
}

/// `y[d] += <h[d], C> + d_skip[d] * x[d]`.
#[inline(never)]
fn output_row<T: Real, const N: usize>(h: &[T], c: &[T], x: &[T], d_skip: &[T], y: &mut [T]) {
    let n = state_size::<N>(c.len());
    for (((hr, yv), &xv), &ds) in h.chunks_exact(n).zip(y.iter_mut()).zip(x).zip(d_skip) {
        *yv += dot(&hr[..n], &c[..n]) + ds * xv;
    }
}

/// Read-only operands of one position's backward step, all channels.
struct BackRow<'a, T> {
    h_prev: &'a [T],
    h_cur: &'a [T],
    ab: &'a [T],
    a: &'a [T],
    gy: &'a [T],
    x: &'a [T],
    delta: &'a [T],
    d_skip: &'a [T],
    b: &'a [T],
    c: &'a [T],
}

/// Gradient accumulators touched by one position.
struct RowGrads<'a, T> {
    a: &'a mut [T],
    b: &'a mut [T],
    c: &'a mut [T],
    x: &'a mut [T],
    delta: &'a mut [T],
    d_skip: &'a mut [T],
}

/// Backward step of one position. `dh` carries the hidden-state gradient
/// between positions; `td` and `tx` are per-channel scratch of length `N`.
#[inline(never)]
fn back_row<T: Real, const N: usize>(
    r: &BackRow<'_, T>,
    g: RowGrads<'_, T>,
    dh: &mut [T],
    td: &mut [T],
    tx: &mut [T],
) {
    let n = state_size::<N>(r.b.len());
    let (bp, cp) = (&r.b[..n], &r.c[..n]);
    let (gb, gc, td, tx) = (&mut g.b[..n], &mut g.c[..n], &mut td[..n], &mut tx[..n]);
    let rows = r
        .h_prev
        .chunks_exact(n)
        .zip(r.h_cur.chunks_exact(n))
        .zip(r.ab.chunks_exact(n).zip(r.a.chunks_exact(n)))
        .zip(g.a.chunks_exact_mut(n).zip(dh.chunks_exact_mut(n)));
    for (d, (((hp, hc), (ab, ar)), (ga, dhr))) in rows.enumerate() {
        let (gy, xv, dl) = (r.gy[d], r.x[d], r.delta[d]);
        g.d_skip[d] += gy * xv;
        let dlx = dl * xv;
        for k in 0..n {
            gc[k] += gy * hc[k];
            let gh = dhr[k] + gy * cp[k];
            let t = gh * hp[k] * ab[k];
            td[k] = t * ar[k] + gh * bp[k] * xv;
            ga[k] += t * dl;
            gb[k] += gh * dlx;
            tx[k] = gh * bp[k];
            dhr[k] = gh * ab[k];
        }
        g.x[d] += gy * r.d_skip[d] + dl * sum(tx);
        g.delta[d] += sum(td);
    }
}

/// Sum with independent partial accumulators so the loop pipelines.
#[inline]
fn sum<T: Real>(v: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = v.chunks_exact(4);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a += x;
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for &x in tail {
        s += x;
    }
    s
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&x, &y) in ta.iter().zip(tb) {
        s += x * y;
    }
    s
}

struct ScanGrads<'a, T> {
    x: &'a mut [T],
    delta: &'a mut [T],
    a: &'a mut [T],
    b: &'a mut [T],
    c: &'a mut [T],
    d_skip: &'a mut [T],
}

/// Scan with explicitly supplied coefficients (no input-dependent projections).
///
/// `x, delta: [L, C]`, `a: [C, N]` (strictly negative), `b, c: [L, N]`, `d_skip: [C]`.
pub fn scan_with_coefficients<T: Real>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (l, dim) = dims2(x, "scan x")?;
    let (_, n) = dims2(a, "scan a")?;
    if delta.shape() != x.shape()
        || a.shape() != [dim, n]
        || b.shape() != [l, n]
        || c.shape() != [l, n]
        || d_skip.shape() != [dim]
    {
        return Err(Error::Config(
            "scan coefficient shapes are inconsistent".into(),
        ));
    }
    if !delta.data().iter().all(|&d| d > T::zero()) {
        return Err(Error::Precondition(
            "delta must be strictly positive".into(),
        ));
    }
    if !a.data().iter().all(|&v| v < T::zero()) {
        return Err(Error::Precondition(
            "state matrix must be strictly negative".into(),
        ));
    }
    let inputs = ScanInputs {
        x: x.data(),
        delta: delta.data(),
        a: a.data(),
        b: b.data(),
        c: c.data(),
        d_skip: d_skip.data(),
        dim,
        n,
    };
    let mut y = vec![T::zero(); l * dim];
    let cache = inputs.decay_cache();
    inputs.forward(
        &scan_orders(1, l, ScanDirections::Forward),
        cache.as_deref(),
        &mut y,
        None,
    );
    Tensor::from_vec(&[l, dim], y)
}

/// Graph handles of one SSM layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub d_skip: Var,
    pub w_delta_down: Var,
    pub w_delta_up: Var,
    pub delta_bias: Var,
    pub w_b: Var,
    pub w_c: Var,
}

impl SsmVars {
    pub fn constants<T: Real>(g: &mut Graph<T>, p: &SsmParams<T>) -> Self {
        let [a, d, dd, du, db, wb, wc] = p.tensors().map(|t| g.constant(t.clone()));
        Self {
            a_log: a,
            d_skip: d,
            w_delta_down: dd,
            w_delta_up: du,
            delta_bias: db,
            w_b: wb,
            w_c: wc,
        }
    }

    pub fn leaves<T: Real>(g: &mut Graph<T>, p: &SsmParams<T>) -> Self {
        let [a, d, dd, du, db, wb, wc] = p.tensors().map(|t| g.leaf(t.clone()));
        Self {
            a_log: a,
            d_skip: d,
            w_delta_down: dd,
            w_delta_up: du,
            delta_bias: db,
            w_b: wb,
            w_c: wc,
        }
    }

    pub fn as_array(&self) -> [Var; 7] {
        [
            self.a_log,
            self.d_skip,
            self.w_delta_down,
            self.w_delta_up,
            self.delta_bias,
            self.w_b,
            self.w_c,
        ]
    }
}

impl<T: Real> Graph<T> {
    /// Fused scan over `[B, H, W, D]` features with per-position coefficients.
    ///
    /// `delta: [B, H, W, D]` (positive), `a_log: [D, N]`, `b, c: [B, H, W, N]`,
    /// `d_skip: [D]`. Returns the direction-summed output `[B, H, W, D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn ssm_scan(
        &mut self,
        x: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d_skip: Var,
        dirs: ScanDirections,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_mismatch("ssm_scan", &xs, &[0, 0, 0, 0]));
        }
        let (bsz, h, w, dim) = (xs[0], xs[1], xs[2], xs[3]);
        let n = match self.shape(a_log) {
            &[d, n] if d == dim => n,
            s => {
                return Err(Error::Config(alloc::format!(
                    "a_log shape {:?} vs {} channels",
                    s,
                    dim
                )))
            }
        };
        if self.shape(delta) != &xs[..]
            || self.shape(b) != [bsz, h, w, n]
            || self.shape(c) != [bsz, h, w, n]
            || self.shape(d_skip) != [dim]
        {
            return Err(Error::Config(
                "ssm_scan coefficient shapes are inconsistent".into(),
            ));
        }
        let orders = scan_orders(h, w, dirs);
        let pd = h * w * dim;
        let pn = h * w * n;
        let a = self.value(a_log).map(|v| -v.exp());
        let mut y = vec![T::zero(); bsz * pd];
        let keep = self.any_requires_grad(&[x, delta, a_log, b, c, d_skip]);
        let mut caches: Vec<Option<Vec<T>>> = Vec::with_capacity(bsz);
        let mut saved: Vec<Vec<T>> = Vec::with_capacity(bsz);
        for bi in 0..bsz {
            let inputs = ScanInputs {
                x: &self.value(x).data()[bi * pd..(bi + 1) * pd],
                delta: &self.value(delta).data()[bi * pd..(bi + 1) * pd],
                a: a.data(),
                b: &self.value(b).data()[bi * pn..(bi + 1) * pn],
                c: &self.value(c).data()[bi * pn..(bi + 1) * pn],
                d_skip: self.value(d_skip).data(),
                dim,
                n,
            };
            let cache = inputs.decay_cache();
            let mut ckpt = Vec::new();
            let slot = if keep { Some(&mut ckpt) } else { None };
            inputs.forward(
                &orders,
                cache.as_deref(),
                &mut y[bi * pd..(bi + 1) * pd],
                slot,
            );
            saved.push(ckpt);
            // retain for the backward pass only while the whole batch fits the budget
            caches.push(cache.filter(|c| keep && bsz * c.len() <= DECAY_CACHE_LIMIT));
        }
        let y = Tensor::from_vec(&xs, y)?;
        Ok(
            self.push_op(y, &[x, delta, a_log, b, c, d_skip], move |g, p, _| {
                let a = p[2].map(|v| -v.exp());
                let mut gx = vec![T::zero(); bsz * pd];
                let mut gdelta = vec![T::zero(); bsz * pd];
                let mut ga = vec![T::zero(); dim * n];
                let mut gb = vec![T::zero(); bsz * pn];
                let mut gc = vec![T::zero(); bsz * pn];
                let mut gd = vec![T::zero(); dim];
                for bi in 0..bsz {
                    let inputs = ScanInputs {
                        x: &p[0].data()[bi * pd..(bi + 1) * pd],
                        delta: &p[1].data()[bi * pd..(bi + 1) * pd],
                        a: a.data(),
                        b: &p[3].data()[bi * pn..(bi + 1) * pn],
                        c: &p[4].data()[bi * pn..(bi + 1) * pn],
                        d_skip: p[5].data(),
                        dim,
                        n,
                    };
                    let mut grads = ScanGrads {
                        x: &mut gx[bi * pd..(bi + 1) * pd],
                        delta: &mut gdelta[bi * pd..(bi + 1) * pd],
                        a: &mut ga,
                        b: &mut gb[bi * pn..(bi + 1) * pn],
                        c: &mut gc[bi * pn..(bi + 1) * pn],
                        d_skip: &mut gd,
                    };
                    let cache = caches[bi].as_deref();
                    inputs.backward(
                        &orders,
                        cache,
                        &saved[bi],
                        &g.data()[bi * pd..(bi + 1) * pd],
                        &mut grads,
                    );
                }
                // d a_log = dA * dA/da_log = dA * A
                for (gv, &av) in ga.iter_mut().zip(a.data()) {
                    *gv *= av;
                }
                vec![
                    Some(Tensor::from_vec(p[0].shape(), gx).unwrap()),
                    Some(Tensor::from_vec(p[1].shape(), gdelta).unwrap()),
                    Some(Tensor::from_vec(p[2].shape(), ga).unwrap()),
                    Some(Tensor::from_vec(p[3].shape(), gb).unwrap()),
                    Some(Tensor::from_vec(p[4].shape(), gc).unwrap()),
                    Some(Tensor::from_vec(p[5].shape(), gd).unwrap()),
                ]
            }),
        )
    }

    /// Full SSM layer: input-dependent projections followed by the scan.
    pub fn ssm_layer(&mut self, x: Var, p: &SsmVars, dirs: ScanDirections) -> Result<Var> {
        let low = self.linear(x, p.w_delta_down, None)?;
        let pre = self.linear(low, p.w_delta_up, Some(p.delta_bias))?;
        let delta = self.softplus(pre);
        let b = self.linear(x, p.w_b, None)?;
        let c = self.linear(x, p.w_c, None)?;
        self.ssm_scan(x, delta, p.a_log, b, c, p.d_skip, dirs)
    }
}

fn check_channels<T: Real>(params: &SsmParams<T>, channels: usize) -> Result<()> {
    params.validate()?;
    if params.channels() != channels {
        return Err(Error::Config(alloc::format!(
            "features have {} channels, SSM parameters expect {}",
            channels,
            params.channels()
        )));
    }
    Ok(())
}

/// Selective scan of a `[L, C]` sequence with input-dependent coefficients.
pub fn selective_scan<T: Real>(seq: &SequenceBatch<T>, params: &SsmParams<T>) -> Result<Tensor<T>> {
    check_channels(params, seq.channels())?;
    let (l, c) = (seq.len(), seq.channels());
    let mut g = Graph::new();
    let x = g.constant(seq.tensor().clone().reshape(&[1, 1, l, c])?);
    let vars = SsmVars::constants(&mut g, params);
    let y = g.ssm_layer(x, &vars, ScanDirections::Forward)?;
    g.value(y).clone().reshape(&[l, c])
}

/// Four-direction scan of a `[H, W, C]` feature map with shared parameters.
pub fn scan_2d<T: Real>(feat: &Tensor<T>, params: &SsmParams<T>) -> Result<Tensor<T>> {
    let &[h, w, c] = feat.shape() else {
        return Err(shape_mismatch("scan_2d", feat.shape(), &[0, 0, 0]));
    };
    if h == 0 || w == 0 {
        return Err(Error::Precondition("scan_2d needs H, W >= 1".into()));
    }
    check_channels(params, c)?;
    let mut g = Graph::new();
    let x = g.constant(feat.clone().reshape(&[1, h, w, c])?);
    let vars = SsmVars::constants(&mut g, params);
    let y = g.ssm_layer(x, &vars, ScanDirections::Four)?;
    g.value(y).clone().reshape(&[h, w, c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn discretize_unit_case() {
        let d = Tensor::full(&[1, 1], 1.0f64);
        let a = Tensor::full(&[1, 1], -1.0f64);
        let b = Tensor::full(&[1, 1], 1.0f64);
        let (ab, bb) = discretize(&d, &a, &b).unwrap();
        assert!((ab.item() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((ab.item() - 0.367879).abs() < 1e-6);
        assert_eq!(bb.item(), 1.0);
    }

    #[test]
    fn discretize_small_delta_limit() {
        let d = Tensor::full(&[2, 2], 1e-12f64);
        let a = Tensor::from_vec(&[2, 3], vec![-1.0, -2.0, -5.0, -0.5, -3.0, -9.0]).unwrap();
        let b = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 7.0, -1.0]).unwrap();
        let (ab, bb) = discretize(&d, &a, &b).unwrap();
        assert!(ab
            .data()
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-10 && v < 1.0));
        assert!(bb.data().iter().all(|&v| v.abs() < 1e-10));
    }

    #[test]
    fn discretize_rejects_non_positive_delta() {
        let d = Tensor::from_vec(&[1, 2], vec![0.1, 0.0]).unwrap();
        let a = Tensor::full(&[2, 1], -1.0f64);
        let b = Tensor::full(&[1, 1], 1.0f64);
        assert!(matches!(
            discretize(&d, &a, &b),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn scan_orders_are_permutations() {
        for (h, w) in [(1, 1), (2, 3), (4, 1)] {
            for o in scan_orders(h, w, ScanDirections::Four) {
                let mut s = o.clone();
                s.sort_unstable();
                assert_eq!(s, (0..h * w).collect::<Vec<_>>());
            }
        }
        assert_eq!(scan_orders(2, 2, ScanDirections::Four)[2], vec![0, 2, 1, 3]);
    }

    #[test]
    fn selective_scan_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SsmParams::<f64>::init(3, 4, &mut rng);
        let seq = SequenceBatch::new(Tensor::zeros(&[5, 2])).unwrap();
        assert!(matches!(selective_scan(&seq, &p), Err(Error::Config(_))));
    }

    #[test]
    fn init_gives_small_positive_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = SsmParams::<f64>::init(8, 4, &mut rng);
        for &b in p.delta_bias.data() {
            let d = crate::ops::softplus(b);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&d));
        }
        p.validate().unwrap();
    }
}

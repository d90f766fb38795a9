//! Forward constructors and backward rules for every recorded op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{BinaryKind, Graph, Node, Op, UnaryKind, Var};
use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::real::Real;

fn broadcast_shape(a: &DenseArray<impl Real>, b: &DenseArray<impl Real>) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.is_scalar_like() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar_like() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(format!(
            "cannot broadcast {:?} with {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

/// `alpha * x + (1 - alpha) * s`, rounded so the result never leaves
/// `[min(x, s), max(x, s)]`.
#[inline]
fn blend<F: Real>(alpha: F, x: F, s: F) -> F {
    let out = s + alpha * (x - s);
    if x < s {
        out.max(x).min(s)
    } else {
        out.max(s).min(x)
    }
}

/// Per-channel coefficient lookup for a length-1 or length-C array.
#[inline]
fn per_channel<F: Real>(coef: &[F], c: usize) -> F {
    if coef.len() == 1 {
        coef[0]
    } else {
        coef[c]
    }
}

fn check_channel_coef<F: Real>(coef: &DenseArray<F>, channels: usize, what: &str) -> Result<()> {
    if coef.len() == 1 || coef.len() == channels {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{what} must have 1 or {channels} entries, got {:?}",
            coef.shape()
        )))
    }
}

impl<F: Real> Graph<F> {
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape(av, bv)?;
        let n: usize = shape.iter().product();
        let ga = |i: usize| if av.len() == 1 { av.data()[0] } else { av.data()[i] };
        let gb = |i: usize| if bv.len() == 1 { bv.data()[0] } else { bv.data()[i] };
        let data = (0..n)
            .map(|i| match kind {
                BinaryKind::Add => ga(i) + gb(i),
                BinaryKind::Sub => ga(i) - gb(i),
                BinaryKind::Mul => ga(i) * gb(i),
            })
            .collect();
        let value = DenseArray::new(shape, data)?;
        self.push_checked(value, Op::Binary { kind, a, b }, "binary op")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let f = |v: F| match kind {
            UnaryKind::Sigmoid => v.sigmoid(),
            UnaryKind::Softplus => v.softplus(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Neg => -v,
            UnaryKind::Relu => v.max(F::zero()),
        };
        let value = self.value(x).map(f);
        self.push_checked(value, Op::Unary { kind, x }, "unary op")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: F, shift: F) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push_checked(value, Op::Affine { x, scale }, "affine")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = DenseArray::scalar(self.value(x).sum());
        self.push_checked(value, Op::Sum { x }, "sum")
    }

    /// Per-row normalization over the channel axis followed by `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        if eps <= F::zero() {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let xv = self.value(x);
        let (t, c) = xv.dims2()?;
        if c == 0 {
            return Err(Error::shape("layer_norm over zero channels"));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape(format!(
                "layer_norm affine needs {c} entries, got {} / {}",
                gv.len(),
                bv.len()
            )));
        }
        let cf = F::of(c as f64);
        let mut out = vec![F::zero(); t * c];
        let mut xhat = vec![F::zero(); if self.grad_enabled { t * c } else { 0 }];
        let mut inv_std = vec![F::zero(); t];
        for r in 0..t {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                if self.grad_enabled {
                    xhat[r * c + j] = h;
                }
                out[r * c + j] = gv[j] * h + bv[j];
            }
        }
        let value = DenseArray::new(vec![t, c], out)?;
        self.push_checked(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Depthwise 1-D convolution over time with symmetric zero "same" padding.
    /// `kernel` is `K × C`, tap `k` reads input row `t + k - K/2`.
    pub fn conv1d_depthwise(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let (t, c) = xv.dims2()?;
        let (k, kc) = kv.dims2()?;
        if kc != c {
            return Err(Error::shape(format!("kernel has {kc} channels, input has {c}")));
        }
        if k % 2 == 0 {
            return Err(Error::invalid(format!("depthwise kernel size {k} must be odd")));
        }
        if t == 0 || k > 2 * t - 1 {
            return Err(Error::invalid(format!(
                "kernel size {k} exceeds 2T-1 for T = {t}"
            )));
        }
        let half = k / 2;
        let (xd, kd) = (xv.data(), kv.data());
        let mut out = vec![F::zero(); t * c];
        for r in 0..t {
            let orow = &mut out[r * c..(r + 1) * c];
            for tap in 0..k {
                let src = r as isize + tap as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xrow = &xd[src as usize * c..(src as usize + 1) * c];
                let krow = &kd[tap * c..(tap + 1) * c];
                for j in 0..c {
                    orow[j] = orow[j] + krow[j] * xrow[j];
                }
            }
        }
        let value = DenseArray::new(vec![t, c], out)?;
        self.push_checked(value, Op::DepthwiseConv { x, kernel }, "conv1d_depthwise")
    }

    /// `x W + b` applied independently at every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (t, cin) = xv.dims2()?;
        let (win, cout) = wv.dims2()?;
        if win != cin {
            return Err(Error::shape(format!(
                "linear: input has {cin} features, weight expects {win}"
            )));
        }
        if bv.len() != cout {
            return Err(Error::shape(format!(
                "linear: bias has {} entries, expected {cout}",
                bv.len()
            )));
        }
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = Vec::with_capacity(t * cout);
        for _ in 0..t {
            out.extend_from_slice(bd);
        }
        for r in 0..t {
            let orow = &mut out[r * cout..(r + 1) * cout];
            let xrow = &xd[r * cin..(r + 1) * cin];
            for (i, &a) in xrow.iter().enumerate() {
                let wrow = &wd[i * cout..(i + 1) * cout];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o = *o + a * wv;
                }
            }
        }
        let value = DenseArray::new(vec![t, cout], out)?;
        self.push_checked(value, Op::Linear { x, w, b }, "linear")
    }

    /// Inverted dropout. Identity when `training` is false or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep_scale = F::of(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<F> = (0..xv.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    F::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = DenseArray::new(xv.shape().to_vec(), data)?;
        self.push_checked(value, Op::Dropout { x, mask }, "dropout")
    }

    /// Non-overlapping max-pool over time with `window == stride`.
    pub fn max_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let xv = self.value(x);
        let (t, c) = xv.dims2()?;
        if window == 0 || t % window != 0 {
            return Err(Error::shape(format!(
                "max_pool window {window} does not divide length {t}"
            )));
        }
        let to = t / window;
        let xd = xv.data();
        let mut out = vec![F::zero(); to * c];
        let mut argmax = vec![0usize; if self.grad_enabled { to * c } else { 0 }];
        for r in 0..to {
            for j in 0..c {
                let mut best = r * window * c + j;
                for w in 1..window {
                    let idx = (r * window + w) * c + j;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out[r * c + j] = xd[best];
                if self.grad_enabled {
                    argmax[r * c + j] = best;
                }
            }
        }
        let value = DenseArray::new(vec![to, c], out)?;
        self.push_checked(value, Op::MaxPool { x, argmax }, "max_pool")
    }

    /// `alpha * x + (1 - alpha) * s`, `alpha` scalar or per channel, strictly in (0, 1).
    pub fn relax(&mut self, x: Var, s: Var, alpha: Var) -> Result<Var> {
        let (xv, sv, av) = (self.value(x), self.value(s), self.value(alpha));
        if xv.shape() != sv.shape() {
            return Err(Error::shape(format!(
                "relax: state {:?} vs stimulus {:?}",
                xv.shape(),
                sv.shape()
            )));
        }
        let (_, c) = xv.dims2()?;
        check_alpha(av, c)?;
        let ad = av.data();
        let data = xv
            .data()
            .iter()
            .zip(sv.data())
            .enumerate()
            .map(|(i, (&xi, &si))| blend(per_channel(ad, i % c), xi, si))
            .collect();
        let value = DenseArray::new(xv.shape().to_vec(), data)?;
        self.push_checked(value, Op::Relax { x, s, alpha }, "relax")
    }

    /// Sequential closed-form relaxation: the hidden state starts at row 0 of
    /// `x` and each step computes `state = alpha * state + (1 - alpha) * s_t`,
    /// emitting the updated state as row `t`.
    pub fn cfc_scan(&mut self, x: Var, s: Var, alpha: Var) -> Result<Var> {
        let (xv, sv, av) = (self.value(x), self.value(s), self.value(alpha));
        if xv.shape() != sv.shape() {
            return Err(Error::shape("cfc_scan: state/stimulus shape mismatch"));
        }
        let (t, c) = xv.dims2()?;
        if t == 0 {
            return Err(Error::shape("cfc_scan over an empty sequence"));
        }
        check_alpha(av, c)?;
        let ad = av.data();
        let sd = sv.data();
        let mut state = xv.row(0).to_vec();
        let mut out = Vec::with_capacity(t * c);
        for r in 0..t {
            let srow = &sd[r * c..(r + 1) * c];
            for j in 0..c {
                let a = per_channel(ad, j);
                state[j] = a * state[j] + (F::one() - a) * srow[j];
            }
            out.extend_from_slice(&state);
        }
        let value = DenseArray::new(vec![t, c], out)?;
        self.push_checked(value, Op::CfcScan { x, s, alpha }, "cfc_scan")
    }

    /// Explicit Euler integration of `dx/dt = -lambda (x - s_t)` with
    /// `substeps` equal steps across each token interval `dt`.
    pub fn euler_scan(&mut self, x: Var, s: Var, lambda: Var, dt: F, substeps: usize) -> Result<Var> {
        if substeps == 0 {
            return Err(Error::invalid("euler_scan needs at least one substep"));
        }
        if dt <= F::zero() {
            return Err(Error::invalid("euler_scan needs dt > 0"));
        }
        let (xv, sv, lv) = (self.value(x), self.value(s), self.value(lambda));
        if xv.shape() != sv.shape() {
            return Err(Error::shape("euler_scan: state/stimulus shape mismatch"));
        }
        let (t, c) = xv.dims2()?;
        if t == 0 {
            return Err(Error::shape("euler_scan over an empty sequence"));
        }
        check_channel_coef(lv, c, "lambda")?;
        let h = dt / F::of(substeps as f64);
        let ld = lv.data();
        let sd = sv.data();
        let mut state = xv.row(0).to_vec();
        let mut out = Vec::with_capacity(t * c);
        for r in 0..t {
            let srow = &sd[r * c..(r + 1) * c];
            for _ in 0..substeps {
                for j in 0..c {
                    let l = per_channel(ld, j);
                    state[j] = state[j] - h * l * (state[j] - srow[j]);
                }
            }
            out.extend_from_slice(&state);
        }
        let value = DenseArray::new(vec![t, c], out)?;
        self.push_checked(
            value,
            Op::EulerScan {
                x,
                s,
                lambda,
                dt,
                substeps,
            },
            "euler_scan",
        )
    }

    /// Sigmoid focal loss summed over rows weighted by `weights` (length T)
    /// and over all classes. `targets` is a `T × K` 0/1 array.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: &DenseArray<F>,
        weights: &[F],
        alpha: F,
        gamma: F,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (t, k) = lv.dims2()?;
        if targets.shape() != lv.shape() || weights.len() != t {
            return Err(Error::shape(format!(
                "focal_loss: logits {:?}, targets {:?}, {} weights",
                lv.shape(),
                targets.shape(),
                weights.len()
            )));
        }
        let mut total = F::zero();
        for r in 0..t {
            if weights[r] == F::zero() {
                continue;
            }
            for j in 0..k {
                let i = r * k + j;
                let (fl, _) = focal_term(lv.data()[i], targets.data()[i], alpha, gamma);
                total = total + weights[r] * fl;
            }
        }
        self.push_checked(
            DenseArray::scalar(total),
            Op::FocalLoss {
                logits,
                targets: targets.data().to_vec(),
                weights: weights.to_vec(),
                alpha,
                gamma,
            },
            "focal_loss",
        )
    }

    /// `sum_t w_t (1 - IoU)` between predicted and target `(left, right)`
    /// distances measured from a shared anchor point.
    pub fn iou_loss(&mut self, offsets: Var, targets: &DenseArray<F>, weights: &[F]) -> Result<Var> {
        let ov = self.value(offsets);
        let (t, two) = ov.dims2()?;
        if two != 2 || targets.shape() != ov.shape() || weights.len() != t {
            return Err(Error::shape(format!(
                "iou_loss: offsets {:?}, targets {:?}, {} weights",
                ov.shape(),
                targets.shape(),
                weights.len()
            )));
        }
        let mut total = F::zero();
        for r in 0..t {
            if weights[r] == F::zero() {
                continue;
            }
            let p = ov.row(r);
            let g = targets.row(r);
            let (iou, _, _) = interval_iou_grad(p[0], p[1], g[0], g[1]);
            total = total + weights[r] * (F::one() - iou);
        }
        self.push_checked(
            DenseArray::scalar(total),
            Op::IouLoss {
                offsets,
                targets: targets.data().to_vec(),
                weights: weights.to_vec(),
            },
            "iou_loss",
        )
    }
}

fn check_alpha<F: Real>(alpha: &DenseArray<F>, channels: usize) -> Result<()> {
    check_channel_coef(alpha, channels, "alpha")?;
    for &a in alpha.data() {
        if !(a > F::zero() && a < F::one()) {
            return Err(Error::AlphaOutOfRange(a.to_f64_lossy()));
        }
    }
    Ok(())
}

/// Focal loss value and its derivative with respect to the logit.
pub(crate) fn focal_term<F: Real>(z: F, y: F, alpha: F, gamma: F) -> (F, F) {
    let one = F::one();
    let p = z.sigmoid();
    if y > F::of(0.5) {
        let log_p = -(-z).softplus();
        let q = one - p;
        let qg = q.powf(gamma);
        let value = -alpha * qg * log_p;
        let grad = alpha * (gamma * qg * p * log_p - qg * q);
        (value, grad)
    } else {
        let log_q = -z.softplus();
        let pg = p.powf(gamma);
        let value = -(one - alpha) * pg * log_q;
        let grad = (one - alpha) * (pg * p - gamma * pg * (one - p) * log_q);
        (value, grad)
    }
}

/// IoU of two intervals sharing an anchor, `(left, right)` each, plus the
/// derivative of the IoU with respect to the first interval's extents.
pub(crate) fn interval_iou_grad<F: Real>(l: F, r: F, tl: F, tr: F) -> (F, F, F) {
    let (one, zero) = (F::one(), F::zero());
    let inter = l.min(tl) + r.min(tr);
    let union = l + r + tl + tr - inter;
    if union <= zero {
        return (zero, zero, zero);
    }
    let iou = inter / union;
    let di_dl = if l < tl { one } else { zero };
    let di_dr = if r < tr { one } else { zero };
    let d = |di: F| (di * union - inter * (one - di)) / (union * union);
    (iou, d(di_dl), d(di_dr))
}

/// Input-gradient contributions of node `idx` given its output gradient.
pub(crate) fn backward_rule<F: Real>(
    nodes: &[Node<F>],
    idx: usize,
    grad: &DenseArray<F>,
) -> Result<Vec<(Var, DenseArray<F>)>> {
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[idx].value;
    let g = grad.data();
    let one = F::one();
    let zero = F::zero();
    let res = match &nodes[idx].op {
        Op::Leaf | Op::Param(_) => Vec::new(),
        Op::Binary { kind, a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let n = g.len();
            let at = |i: usize| if av.len() == 1 { av.data()[0] } else { av.data()[i] };
            let bt = |i: usize| if bv.len() == 1 { bv.data()[0] } else { bv.data()[i] };
            let (da, db): (Vec<F>, Vec<F>) = (0..n)
                .map(|i| match kind {
                    BinaryKind::Add => (g[i], g[i]),
                    BinaryKind::Sub => (g[i], -g[i]),
                    BinaryKind::Mul => (g[i] * bt(i), g[i] * at(i)),
                })
                .unzip();
            let reduce = |full: Vec<F>, like: &DenseArray<F>| -> Result<DenseArray<F>> {
                if like.len() == full.len() && like.shape() == out.shape() {
                    DenseArray::new(like.shape().to_vec(), full)
                } else {
                    DenseArray::new(like.shape().to_vec(), vec![full.into_iter().sum()])
                }
            };
            vec![(*a, reduce(da, av)?), (*b, reduce(db, bv)?)]
        }
        Op::Unary { kind, x } => {
            let xv = val(*x);
            let data = xv
                .data()
                .iter()
                .zip(out.data())
                .zip(g)
                .map(|((&xi, &yi), &gi)| match kind {
                    UnaryKind::Sigmoid => gi * yi * (one - yi),
                    UnaryKind::Softplus => gi * xi.sigmoid(),
                    UnaryKind::Exp => gi * yi,
                    UnaryKind::Neg => -gi,
                    UnaryKind::Relu => {
                        if xi > zero {
                            gi
                        } else {
                            zero
                        }
                    }
                })
                .collect();
            vec![(*x, DenseArray::new(xv.shape().to_vec(), data)?)]
        }
        Op::Affine { x, scale } => {
            vec![(*x, grad.map(|v| v * *scale))]
        }
        Op::Sum { x } => {
            let xv = val(*x);
            vec![(*x, DenseArray::full(xv.shape(), g[0]))]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (t, c) = out.dims2()?;
            let gam = val(*gamma).data();
            let cf = F::of(c as f64);
            let mut dx = vec![zero; t * c];
            let mut dgamma = vec![zero; c];
            let mut dbeta = vec![zero; c];
            let mut dxhat = vec![zero; c];
            for r in 0..t {
                let gr = &g[r * c..(r + 1) * c];
                let hr = &xhat[r * c..(r + 1) * c];
                let mut sum_d = zero;
                let mut sum_dh = zero;
                for j in 0..c {
                    dgamma[j] = dgamma[j] + gr[j] * hr[j];
                    dbeta[j] = dbeta[j] + gr[j];
                    dxhat[j] = gr[j] * gam[j];
                    sum_d = sum_d + dxhat[j];
                    sum_dh = sum_dh + dxhat[j] * hr[j];
                }
                let k = inv_std[r] / cf;
                for j in 0..c {
                    dx[r * c + j] = k * (cf * dxhat[j] - sum_d - hr[j] * sum_dh);
                }
            }
            vec![
                (*x, DenseArray::new(vec![t, c], dx)?),
                (*gamma, DenseArray::new(val(*gamma).shape().to_vec(), dgamma)?),
                (*beta, DenseArray::new(val(*beta).shape().to_vec(), dbeta)?),
            ]
        }
        Op::DepthwiseConv { x, kernel } => {
            let xv = val(*x);
            let kv = val(*kernel);
            let (t, c) = xv.dims2()?;
            let (k, _) = kv.dims2()?;
            let half = k / 2;
            let (xd, kd) = (xv.data(), kv.data());
            let mut dx = vec![zero; t * c];
            let mut dk = vec![zero; k * c];
            for r in 0..t {
                let grow = &g[r * c..(r + 1) * c];
                for tap in 0..k {
                    let src = r as isize + tap as isize - half as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let s = src as usize;
                    for j in 0..c {
                        dx[s * c + j] = dx[s * c + j] + kd[tap * c + j] * grow[j];
                        dk[tap * c + j] = dk[tap * c + j] + xd[s * c + j] * grow[j];
                    }
                }
            }
            vec![
                (*x, DenseArray::new(vec![t, c], dx)?),
                (*kernel, DenseArray::new(vec![k, c], dk)?),
            ]
        }
        Op::Linear { x, w, b } => {
            let xv = val(*x);
            let wv = val(*w);
            let (t, cin) = xv.dims2()?;
            let (_, cout) = wv.dims2()?;
            let (xd, wd) = (xv.data(), wv.data());
            let mut dx = vec![zero; t * cin];
            let mut dw = vec![zero; cin * cout];
            let mut db = vec![zero; cout];
            for r in 0..t {
                let grow = &g[r * cout..(r + 1) * cout];
                for (o, &gv) in db.iter_mut().zip(grow) {
                    *o = *o + gv;
                }
                for i in 0..cin {
                    let wrow = &wd[i * cout..(i + 1) * cout];
                    let mut acc = zero;
                    for (&wv, &gv) in wrow.iter().zip(grow) {
                        acc = acc + wv * gv;
                    }
                    dx[r * cin + i] = acc;
                    let a = xd[r * cin + i];
                    let dwrow = &mut dw[i * cout..(i + 1) * cout];
                    for (d, &gv) in dwrow.iter_mut().zip(grow) {
                        *d = *d + a * gv;
                    }
                }
            }
            vec![
                (*x, DenseArray::new(vec![t, cin], dx)?),
                (*w, DenseArray::new(vec![cin, cout], dw)?),
                (*b, DenseArray::new(val(*b).shape().to_vec(), db)?),
            ]
        }
        Op::Dropout { x, mask } => {
            let data = g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
            vec![(*x, DenseArray::new(out.shape().to_vec(), data)?)]
        }
        Op::MaxPool { x, argmax } => {
            let xv = val(*x);
            let mut dx = vec![zero; xv.len()];
            for (&src, &gi) in argmax.iter().zip(g) {
                dx[src] = dx[src] + gi;
            }
            vec![(*x, DenseArray::new(xv.shape().to_vec(), dx)?)]
        }
        Op::Relax { x, s, alpha } => {
            let (xv, sv, av) = (val(*x), val(*s), val(*alpha));
            let (_, c) = xv.dims2()?;
            let ad = av.data();
            let mut dx = vec![zero; xv.len()];
            let mut ds = vec![zero; xv.len()];
            let mut dalpha = vec![zero; ad.len()];
            for i in 0..xv.len() {
                let j = i % c;
                let a = per_channel(ad, j);
                dx[i] = a * g[i];
                ds[i] = (one - a) * g[i];
                let slot = if ad.len() == 1 { 0 } else { j };
                dalpha[slot] = dalpha[slot] + g[i] * (xv.data()[i] - sv.data()[i]);
            }
            vec![
                (*x, DenseArray::new(xv.shape().to_vec(), dx)?),
                (*s, DenseArray::new(xv.shape().to_vec(), ds)?),
                (*alpha, DenseArray::new(av.shape().to_vec(), dalpha)?),
            ]
        }
        Op::CfcScan { x, s, alpha } => {
            let (xv, sv, av) = (val(*x), val(*s), val(*alpha));
            let (t, c) = xv.dims2()?;
            let (ad, sd, od) = (av.data(), sv.data(), out.data());
            let mut dx = vec![zero; xv.len()];
            let mut ds = vec![zero; xv.len()];
            let mut dalpha = vec![zero; ad.len()];
            let mut carry = vec![zero; c];
            for r in (0..t).rev() {
                let prev = if r == 0 { xv.row(0) } else { &od[(r - 1) * c..r * c] };
                for j in 0..c {
                    let a = per_channel(ad, j);
                    let total = g[r * c + j] + carry[j];
                    ds[r * c + j] = (one - a) * total;
                    let slot = if ad.len() == 1 { 0 } else { j };
                    dalpha[slot] = dalpha[slot] + total * (prev[j] - sd[r * c + j]);
                    carry[j] = a * total;
                }
            }
            dx[..c].copy_from_slice(&carry);
            vec![
                (*x, DenseArray::new(xv.shape().to_vec(), dx)?),
                (*s, DenseArray::new(xv.shape().to_vec(), ds)?),
                (*alpha, DenseArray::new(av.shape().to_vec(), dalpha)?),
            ]
        }
        Op::EulerScan {
            x,
            s,
            lambda,
            dt,
            substeps,
        } => {
            let (xv, sv, lv) = (val(*x), val(*s), val(*lambda));
            let (t, c) = xv.dims2()?;
            let n = *substeps;
            let h = *dt / F::of(n as f64);
            let (ld, sd, od) = (lv.data(), sv.data(), out.data());
            let mut dx = vec![zero; xv.len()];
            let mut ds = vec![zero; xv.len()];
            let mut dlambda = vec![zero; ld.len()];
            let mut carry = vec![zero; c];
            // substates[k] holds the state entering substep k of the current token.
            let mut substates = vec![zero; n];
            for r in (0..t).rev() {
                let prev = if r == 0 { xv.row(0) } else { &od[(r - 1) * c..r * c] };
                for j in 0..c {
                    let l = per_channel(ld, j);
                    let target = sd[r * c + j];
                    let mut y = prev[j];
                    for sub in substates.iter_mut() {
                        *sub = y;
                        y = y - h * l * (y - target);
                    }
                    let beta = one - h * l;
                    let mut dy = g[r * c + j] + carry[j];
                    let mut dbeta = zero;
                    let mut dtarget = zero;
                    for &y_in in substates.iter().rev() {
                        dbeta = dbeta + dy * (y_in - target);
                        dtarget = dtarget + dy * (one - beta);
                        dy = beta * dy;
                    }
                    ds[r * c + j] = dtarget;
                    let slot = if ld.len() == 1 { 0 } else { j };
                    dlambda[slot] = dlambda[slot] - h * dbeta;
                    carry[j] = dy;
                }
            }
            dx[..c].copy_from_slice(&carry);
            vec![
                (*x, DenseArray::new(xv.shape().to_vec(), dx)?),
                (*s, DenseArray::new(xv.shape().to_vec(), ds)?),
                (*lambda, DenseArray::new(lv.shape().to_vec(), dlambda)?),
            ]
        }
        Op::FocalLoss {
            logits,
            targets,
            weights,
            alpha,
            gamma,
        } => {
            let lv = val(*logits);
            let (t, k) = lv.dims2()?;
            let mut d = vec![zero; t * k];
            for r in 0..t {
                if weights[r] == zero {
                    continue;
                }
                for j in 0..k {
                    let i = r * k + j;
                    let (_, dz) = focal_term(lv.data()[i], targets[i], *alpha, *gamma);
                    d[i] = g[0] * weights[r] * dz;
                }
            }
            vec![(*logits, DenseArray::new(vec![t, k], d)?)]
        }
        Op::IouLoss {
            offsets,
            targets,
            weights,
        } => {
            let ov = val(*offsets);
            let (t, _) = ov.dims2()?;
            let mut d = vec![zero; t * 2];
            for r in 0..t {
                if weights[r] == zero {
                    continue;
                }
                let p = ov.row(r);
                let (_, dl, dr) = interval_iou_grad(p[0], p[1], targets[2 * r], targets[2 * r + 1]);
                d[2 * r] = -g[0] * weights[r] * dl;
                d[2 * r + 1] = -g[0] * weights[r] * dr;
            }
            vec![(*offsets, DenseArray::new(vec![t, 2], d)?)]
        }
    };
    Ok(res)
}

//! Reverse-mode automatic differentiation over dynamically shaped f64 tensors.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] replays it
//! in reverse and accumulates gradients for every recorded node. Scalars are
//! represented as 1-element rank-1 tensors so the whole graph stays in one
//! tensor type. All arithmetic is f64 so analytic gradients can be verified
//! against central finite differences at tight tolerances.

use ndarray::{ArrayD, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<(usize, ArrayD<f64>)>>;

struct Node {
    value: ArrayD<f64>,
    back: Option<BackFn>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    by_id: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.by_id.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn scalar(x: f64) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[1]), vec![x]).unwrap()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_external(&mut self, value: ArrayD<f64>, back: BackFn) -> Var {
        self.push(value, Some(back))
    }

    /// Record a leaf tensor. Gradients w.r.t. leaves are available after
    /// `backward`; whether anyone reads them is up to the caller.
    pub fn value(&mut self, v: ArrayD<f64>) -> Var {
        self.push(v, None)
    }

    pub fn scalar_value(&mut self, x: f64) -> Var {
        self.value(scalar(x))
    }

    pub fn get(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn get_scalar(&self, v: Var) -> f64 {
        let a = self.get(v);
        debug_assert_eq!(a.len(), 1, "expected scalar node");
        *a.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Reverse sweep from `loss` (must be a 1-element tensor). Returns the
    /// gradient of `loss` w.r.t. every node reachable backwards from it.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward seed must be scalar"
        );
        let mut by_id: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(loss.0 + 1);
        by_id.resize_with(loss.0 + 1, || None);
        by_id[loss.0] = Some(scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = by_id[id].take() else { continue };
            if let Some(back) = &self.nodes[id].back {
                for (pid, contrib) in back(&g) {
                    debug_assert_eq!(
                        contrib.shape(),
                        self.nodes[pid].value.shape(),
                        "gradient shape mismatch for parent {pid}"
                    );
                    // later backward closures index gradients as flat slices
                    let contrib = if contrib.is_standard_layout() {
                        contrib
                    } else {
                        contrib.as_standard_layout().to_owned()
                    };
                    match &mut by_id[pid] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
            by_id[id] = Some(g);
        }
        Grads { by_id }
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.get(a) + self.get(b);
        self.push(
            v,
            Some(Box::new(move |g| {
                vec![(a.0, g.clone()), (b.0, g.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.get(a) - self.get(b);
        self.push(
            v,
            Some(Box::new(move |g| {
                vec![(a.0, g.clone()), (b.0, g.mapv(|x| -x))]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let av = self.get(a).clone();
        let bv = self.get(b).clone();
        let v = &av * &bv;
        self.push(
            v,
            Some(Box::new(move |g| {
                vec![(a.0, g * &bv), (b.0, g * &av)]
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let av = self.get(a).clone();
        let bv = self.get(b).clone();
        let v = &av / &bv;
        self.push(
            v,
            Some(Box::new(move |g| {
                let da = g / &bv;
                let db = -(g * &av) / (&bv * &bv);
                vec![(a.0, da), (b.0, db)]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.get(a).mapv(|x| x * c);
        self.push(
            v,
            Some(Box::new(move |g| vec![(a.0, g.mapv(|x| x * c))])),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.get(a).mapv(|x| x + c);
        self.push(v, Some(Box::new(move |g| vec![(a.0, g.clone())])))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.get(a).clone();
        let v = av.mapv(|x| x.max(0.0));
        // subgradient at exactly 0 is defined as 0
        self.push(
            v,
            Some(Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&av, |gi, &xi| {
                    if xi <= 0.0 {
                        *gi = 0.0;
                    }
                });
                vec![(a.0, d)]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.get(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let y = v.clone();
        self.push(
            v,
            Some(Box::new(move |g| {
                let d = g * &y.mapv(|s| s * (1.0 - s));
                vec![(a.0, d)]
            })),
        )
    }

    /// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))).
    pub fn gelu(&mut self, a: Var) -> Var {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C: f64 = 0.044715;
        let av = self.get(a).clone();
        let v = av.mapv(|x| 0.5 * x * (1.0 + (K * (x + C * x * x * x)).tanh()));
        self.push(
            v,
            Some(Box::new(move |g| {
                let d = av.mapv(|x| {
                    let u = K * (x + C * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * C * x * x)
                });
                vec![(a.0, g * &d)]
            })),
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.get(a).mapv(f64::sqrt);
        let y = v.clone();
        self.push(
            v,
            Some(Box::new(move |g| {
                let d = g / &y.mapv(|s| 2.0 * s);
                vec![(a.0, d)]
            })),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let av = self.get(a).clone();
        let v = av.mapv(f64::ln);
        self.push(v, Some(Box::new(move |g| vec![(a.0, g / &av)])))
    }

    /// Clamp from below; gradient is zero wherever the clamp is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let av = self.get(a).clone();
        let v = av.mapv(|x| x.max(lo));
        self.push(
            v,
            Some(Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&av, |gi, &xi| {
                    if xi <= lo {
                        *gi = 0.0;
                    }
                });
                vec![(a.0, d)]
            })),
        )
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let av = self.get(a).clone();
        let v = av.mapv(|x| x.clamp(lo, hi));
        self.push(
            v,
            Some(Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&av, |gi, &xi| {
                    if xi <= lo || xi >= hi {
                        *gi = 0.0;
                    }
                });
                vec![(a.0, d)]
            })),
        )
    }

    // ---- matrix ops ---------------------------------------------------

    fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
        v.view().into_dimensionality::<ndarray::Ix2>().unwrap()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.get(a).clone();
        let bv = self.get(b).clone();
        let prod = Self::as2(&av).dot(&Self::as2(&bv));
        self.push(
            prod.into_dyn(),
            Some(Box::new(move |g| {
                let g2 = Self::as2(g);
                let da = g2.dot(&Self::as2(&bv).t()).into_dyn();
                let db = Self::as2(&av).t().dot(&g2).into_dyn();
                vec![(a.0, da), (b.0, db)]
            })),
        )
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = Self::as2(self.get(a))
            .t()
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        self.push(
            v,
            Some(Box::new(move |g| {
                let gt = Self::as2(g)
                    .t()
                    .as_standard_layout()
                    .to_owned()
                    .into_dyn();
                vec![(a.0, gt)]
            })),
        )
    }

    /// `x[R x C] + b[C]`, broadcasting b over rows.
    pub fn add_row_vec(&mut self, x: Var, b: Var) -> Var {
        let xv = self.get(x).clone();
        let bv = self.get(b).clone();
        let (r, c) = {
            let s = xv.shape();
            (s[0], s[1])
        };
        assert_eq!(bv.len(), c, "bias width mismatch");
        let mut out = xv.clone();
        {
            let bs = bv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for i in 0..r {
                for j in 0..c {
                    os[i * c + j] += bs[j];
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += gs[i * c + j];
                    }
                }
                vec![
                    (x.0, g.clone()),
                    (b.0, ArrayD::from_shape_vec(IxDyn(&[c]), db).unwrap()),
                ]
            })),
        )
    }

    // ---- reductions and reshapes ---------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape: Vec<usize> = self.shape(a).to_vec();
        let v = scalar(self.get(a).sum());
        self.push(
            v,
            Some(Box::new(move |g| {
                let gv = g[[0]];
                vec![(a.0, ArrayD::from_elem(IxDyn(&shape), gv))]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.get(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum each row of `x[R x C]`, producing `[R]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.get(x);
        let s = xv.shape();
        let (r, c) = (s[0], s[1]);
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; r];
        for i in 0..r {
            for j in 0..c {
                out[i] += xs[i * c + j];
            }
        }
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[r]), out).unwrap(),
            Some(Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = gs[i];
                    }
                }
                vec![(x.0, ArrayD::from_shape_vec(IxDyn(&[r, c]), dx).unwrap())]
            })),
        )
    }

    /// Stack scalar nodes into a rank-1 tensor.
    pub fn stack1d(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<f64> = parts.iter().map(|&p| self.get_scalar(p)).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals).unwrap(),
            Some(Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                ids.iter()
                    .enumerate()
                    .map(|(i, &id)| (id, scalar(gs[i])))
                    .collect()
            })),
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.get(a).clone();
        let bv = self.get(b).clone();
        let (r, ca) = (av.shape()[0], av.shape()[1]);
        let cb = bv.shape()[1];
        assert_eq!(bv.shape()[0], r, "concat_cols row mismatch");
        let mut out = vec![0.0; r * (ca + cb)];
        let asl = av.as_slice().unwrap();
        let bsl = bv.as_slice().unwrap();
        for i in 0..r {
            out[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(&asl[i * ca..(i + 1) * ca]);
            out[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(&bsl[i * cb..(i + 1) * cb]);
        }
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[r, ca + cb]), out).unwrap(),
            Some(Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let mut da = vec![0.0; r * ca];
                let mut db = vec![0.0; r * cb];
                for i in 0..r {
                    da[i * ca..(i + 1) * ca]
                        .copy_from_slice(&gs[i * (ca + cb)..i * (ca + cb) + ca]);
                    db[i * cb..(i + 1) * cb]
                        .copy_from_slice(&gs[i * (ca + cb) + ca..(i + 1) * (ca + cb)]);
                }
                vec![
                    (a.0, ArrayD::from_shape_vec(IxDyn(&[r, ca]), da).unwrap()),
                    (b.0, ArrayD::from_shape_vec(IxDyn(&[r, cb]), db).unwrap()),
                ]
            })),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.get(x);
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        assert!(start + len <= c, "slice_cols out of range");
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[r, len]), out).unwrap(),
            Some(Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&gs[i * len..(i + 1) * len]);
                }
                vec![(x.0, ArrayD::from_shape_vec(IxDyn(&[r, c]), dx).unwrap())]
            })),
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.get(x);
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        assert!(start + len <= r, "slice_rows out of range");
        let xs = xv.as_slice().unwrap();
        let out = xs[start * c..(start + len) * c].to_vec();
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[len, c]), out).unwrap(),
            Some(Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; r * c];
                dx[start * c..(start + len) * c].copy_from_slice(gs);
                vec![(x.0, ArrayD::from_shape_vec(IxDyn(&[r, c]), dx).unwrap())]
            })),
        )
    }

    /// Interleave rows of equal-shaped `a` and `b`: [a0, b0, a1, b1, ...].
    pub fn interleave_rows(&mut self, a: Var, b: Var) -> Var {
        let av = self.get(a).clone();
        let bv = self.get(b).clone();
        assert_eq!(av.shape(), bv.shape(), "interleave shape mismatch");
        let (t, d) = (av.shape()[0], av.shape()[1]);
        let asl = av.as_slice().unwrap();
        let bsl = bv.as_slice().unwrap();
        let mut out = vec![0.0; 2 * t * d];
        for i in 0..t {
            out[(2 * i) * d..(2 * i + 1) * d].copy_from_slice(&asl[i * d..(i + 1) * d]);
            out[(2 * i + 1) * d..(2 * i + 2) * d].copy_from_slice(&bsl[i * d..(i + 1) * d]);
        }
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[2 * t, d]), out).unwrap(),
            Some(Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let mut da = vec![0.0; t * d];
                let mut db = vec![0.0; t * d];
                for i in 0..t {
                    da[i * d..(i + 1) * d].copy_from_slice(&gs[(2 * i) * d..(2 * i + 1) * d]);
                    db[i * d..(i + 1) * d].copy_from_slice(&gs[(2 * i + 1) * d..(2 * i + 2) * d]);
                }
                vec![
                    (a.0, ArrayD::from_shape_vec(IxDyn(&[t, d]), da).unwrap()),
                    (b.0, ArrayD::from_shape_vec(IxDyn(&[t, d]), db).unwrap()),
                ]
            })),
        )
    }

    // ---- normalization and softmax --------------------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.get(x);
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let y = ArrayD::from_shape_vec(IxDyn(&[r, c]), out).unwrap();
        let ysave = y.clone();
        self.push(
            y,
            Some(Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let ys = ysave.as_slice().unwrap();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += gs[i * c + j] * ys[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = ys[i * c + j] * (gs[i * c + j] - dot);
                    }
                }
                vec![(x.0, ArrayD::from_shape_vec(IxDyn(&[r, c]), dx).unwrap())]
            })),
        )
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.get(x);
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let lz = m + z.ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lz;
            }
        }
        let y = ArrayD::from_shape_vec(IxDyn(&[r, c]), out).unwrap();
        let ysave = y.clone();
        self.push(
            y,
            Some(Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let ys = ysave.as_slice().unwrap();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let gsum: f64 = gs[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        dx[i * c + j] = gs[i * c + j] - ys[i * c + j].exp() * gsum;
                    }
                }
                vec![(x.0, ArrayD::from_shape_vec(IxDyn(&[r, c]), dx).unwrap())]
            })),
        )
    }

    /// Row-wise layer normalization of `x[R x C]` with affine (gamma, beta).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.get(x).clone();
        let gv = self.get(gamma).clone();
        let bv = self.get(beta).clone();
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let xs = xv.as_slice().unwrap();
        let gs0 = gv.as_slice().unwrap();
        let bs0 = bv.as_slice().unwrap();
        let mut xhat = vec![0.0; r * c];
        let mut inv_sigma = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_sigma[i] = is;
            for j in 0..c {
                let xh = (row[j] - mu) * is;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * gs0[j] + bs0[j];
            }
        }
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[r, c]), out).unwrap(),
            Some(Box::new(move |g| {
                let gsl = g.as_slice().unwrap();
                let gam = gv.as_slice().unwrap();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut m1 = 0.0; // mean of dy*gamma
                    let mut m2 = 0.0; // mean of dy*gamma*xhat
                    for j in 0..c {
                        let gy = gsl[i * c + j];
                        let xh = xhat[i * c + j];
                        dgamma[j] += gy * xh;
                        dbeta[j] += gy;
                        let dxh = gy * gam[j];
                        m1 += dxh;
                        m2 += dxh * xh;
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        let dxh = gsl[i * c + j] * gam[j];
                        dx[i * c + j] = inv_sigma[i] * (dxh - m1 - xhat[i * c + j] * m2);
                    }
                }
                vec![
                    (x.0, ArrayD::from_shape_vec(IxDyn(&[r, c]), dx).unwrap()),
                    (gamma.0, ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap()),
                    (beta.0, ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap()),
                ]
            })),
        )
    }

    // ---- lookup / gather -------------------------------------------------

    /// Row lookup: `table[V x D]`, `ids[L]` -> `[L x D]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.get(table).clone();
        let (vsize, d) = (tv.shape()[0], tv.shape()[1]);
        let ts = tv.as_slice().unwrap();
        let l = ids.len();
        let mut out = vec![0.0; l * d];
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < vsize, "embed id out of range");
            out[i * d..(i + 1) * d].copy_from_slice(&ts[id * d..(id + 1) * d]);
        }
        let ids_owned = ids.to_vec();
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[l, d]), out).unwrap(),
            Some(Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let mut dt = vec![0.0; vsize * d];
                for (i, &id) in ids_owned.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gs[i * d + j];
                    }
                }
                vec![(
                    table.0,
                    ArrayD::from_shape_vec(IxDyn(&[vsize, d]), dt).unwrap(),
                )]
            })),
        )
    }

    /// Pick one column per row: `x[R x C]`, `cols[R]` -> `[R]`.
    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> Var {
        let xv = self.get(x);
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(cols.len(), r, "gather_cols length mismatch");
        let xs = xv.as_slice().unwrap();
        let out: Vec<f64> = cols.iter().enumerate().map(|(i, &j)| xs[i * c + j]).collect();
        let cols_owned = cols.to_vec();
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[r]), out).unwrap(),
            Some(Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; r * c];
                for (i, &j) in cols_owned.iter().enumerate() {
                    dx[i * c + j] = gs[i];
                }
                vec![(x.0, ArrayD::from_shape_vec(IxDyn(&[r, c]), dx).unwrap())]
            })),
        )
    }
}

//! Convolution and pooling nodes for the autodiff tape.
//!
//! Direct-loop implementations over contiguous row-major buffers; sizes in
//! this codebase are small enough that im2col or SIMD paths are not worth
//! their complexity.

use crate::tensor::{Tape, Var};
use ndarray::{ArrayD, IxDyn};

fn conv2d_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

impl Tape {
    /// 2D convolution. `x[N, Cin, H, W]`, `w[Cout, Cin, kh, kw]`, `b[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var {
        let xv = self.get(x).clone();
        let wv = self.get(w).clone();
        let bv = self.get(b).clone();
        let (n, cin, h, wd) = {
            let s = xv.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (cout, cin_w, kh, kw) = {
            let s = wv.shape();
            (s[0], s[1], s[2], s[3])
        };
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert_eq!(bv.len(), cout, "conv2d bias mismatch");
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        let ho = conv2d_out_len(h, kh, sh, ph);
        let wo = conv2d_out_len(wd, kw, sw, pw);

        let xs = xv.as_slice().unwrap();
        let ws = wv.as_slice().unwrap();
        let bs = bv.as_slice().unwrap();
        let mut out = vec![0.0; n * cout * ho * wo];
        for ni in 0..n {
            for oc in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bs[oc];
                        for ic in 0..cin {
                            for ki in 0..kh {
                                let ih = (oh * sh + ki) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let xrow = ((ni * cin + ic) * h + ih as usize) * wd;
                                let wrow = ((oc * cin + ic) * kh + ki) * kw;
                                for kj in 0..kw {
                                    let iw = (ow * sw + kj) as isize - pw as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += xs[xrow + iw as usize] * ws[wrow + kj];
                                }
                            }
                        }
                        out[((ni * cout + oc) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }

        self.push_external(
            ArrayD::from_shape_vec(IxDyn(&[n, cout, ho, wo]), out).unwrap(),
            Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let xs = xv.as_slice().unwrap();
                let ws = wv.as_slice().unwrap();
                let mut dx = vec![0.0; n * cin * h * wd];
                let mut dw = vec![0.0; cout * cin * kh * kw];
                let mut db = vec![0.0; cout];
                for ni in 0..n {
                    for oc in 0..cout {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let gv = gs[((ni * cout + oc) * ho + oh) * wo + ow];
                                if gv == 0.0 {
                                    continue;
                                }
                                db[oc] += gv;
                                for ic in 0..cin {
                                    for ki in 0..kh {
                                        let ih = (oh * sh + ki) as isize - ph as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        let xrow = ((ni * cin + ic) * h + ih as usize) * wd;
                                        let wrow = ((oc * cin + ic) * kh + ki) * kw;
                                        for kj in 0..kw {
                                            let iw = (ow * sw + kj) as isize - pw as isize;
                                            if iw < 0 || iw >= wd as isize {
                                                continue;
                                            }
                                            dx[xrow + iw as usize] += gv * ws[wrow + kj];
                                            dw[wrow + kj] += gv * xs[xrow + iw as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    (x.0, ArrayD::from_shape_vec(IxDyn(&[n, cin, h, wd]), dx).unwrap()),
                    (
                        w.0,
                        ArrayD::from_shape_vec(IxDyn(&[cout, cin, kh, kw]), dw).unwrap(),
                    ),
                    (b.0, ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap()),
                ]
            }),
        )
    }

    /// 3D convolution with stride 1 and same-padding on all axes.
    /// `x[Cin, T, H, W]`, `w[Cout, Cin, kt, kh, kw]`, `b[Cout]` -> `[Cout, T, H, W]`.
    pub fn conv3d_same(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.get(x).clone();
        let wv = self.get(w).clone();
        let bv = self.get(b).clone();
        let (cin, t, h, wd) = {
            let s = xv.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (cout, cin_w, kt, kh, kw) = {
            let s = wv.shape();
            (s[0], s[1], s[2], s[3], s[4])
        };
        assert_eq!(cin, cin_w, "conv3d channel mismatch");
        let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);

        let xs = xv.as_slice().unwrap();
        let ws = wv.as_slice().unwrap();
        let bs = bv.as_slice().unwrap();
        let mut out = vec![0.0; cout * t * h * wd];
        for oc in 0..cout {
            for ot in 0..t {
                for oh in 0..h {
                    for ow in 0..wd {
                        let mut acc = bs[oc];
                        for ic in 0..cin {
                            for kti in 0..kt {
                                let it = (ot + kti) as isize - pt as isize;
                                if it < 0 || it >= t as isize {
                                    continue;
                                }
                                for ki in 0..kh {
                                    let ih = (oh + ki) as isize - ph as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let xrow =
                                        (((ic * t) + it as usize) * h + ih as usize) * wd;
                                    let wrow =
                                        (((oc * cin + ic) * kt + kti) * kh + ki) * kw;
                                    for kj in 0..kw {
                                        let iw = (ow + kj) as isize - pw as isize;
                                        if iw < 0 || iw >= wd as isize {
                                            continue;
                                        }
                                        acc += xs[xrow + iw as usize] * ws[wrow + kj];
                                    }
                                }
                            }
                        }
                        out[((oc * t + ot) * h + oh) * wd + ow] = acc;
                    }
                }
            }
        }

        self.push_external(
            ArrayD::from_shape_vec(IxDyn(&[cout, t, h, wd]), out).unwrap(),
            Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let xs = xv.as_slice().unwrap();
                let ws = wv.as_slice().unwrap();
                let mut dx = vec![0.0; cin * t * h * wd];
                let mut dw = vec![0.0; cout * cin * kt * kh * kw];
                let mut db = vec![0.0; cout];
                for oc in 0..cout {
                    for ot in 0..t {
                        for oh in 0..h {
                            for ow in 0..wd {
                                let gv = gs[((oc * t + ot) * h + oh) * wd + ow];
                                if gv == 0.0 {
                                    continue;
                                }
                                db[oc] += gv;
                                for ic in 0..cin {
                                    for kti in 0..kt {
                                        let it = (ot + kti) as isize - pt as isize;
                                        if it < 0 || it >= t as isize {
                                            continue;
                                        }
                                        for ki in 0..kh {
                                            let ih = (oh + ki) as isize - ph as isize;
                                            if ih < 0 || ih >= h as isize {
                                                continue;
                                            }
                                            let xrow = (((ic * t) + it as usize) * h
                                                + ih as usize)
                                                * wd;
                                            let wrow = (((oc * cin + ic) * kt + kti) * kh
                                                + ki)
                                                * kw;
                                            for kj in 0..kw {
                                                let iw = (ow + kj) as isize - pw as isize;
                                                if iw < 0 || iw >= wd as isize {
                                                    continue;
                                                }
                                                dx[xrow + iw as usize] += gv * ws[wrow + kj];
                                                dw[wrow + kj] += gv * xs[xrow + iw as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    (
                        x.0,
                        ArrayD::from_shape_vec(IxDyn(&[cin, t, h, wd]), dx).unwrap(),
                    ),
                    (
                        w.0,
                        ArrayD::from_shape_vec(IxDyn(&[cout, cin, kt, kh, kw]), dw).unwrap(),
                    ),
                    (b.0, ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap()),
                ]
            }),
        )
    }

    /// Global average pool over the two trailing spatial axes:
    /// `x[N, C, H, W]` -> `[N, C]`.
    pub fn gap_hw(&mut self, x: Var) -> Var {
        let xv = self.get(x);
        let (n, c, h, w) = {
            let s = xv.shape();
            (s[0], s[1], s[2], s[3])
        };
        let xs = xv.as_slice().unwrap();
        let area = (h * w) as f64;
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                out[ni * c + ci] = xs[base..base + h * w].iter().sum::<f64>() / area;
            }
        }
        self.push_external(
            ArrayD::from_shape_vec(IxDyn(&[n, c]), out).unwrap(),
            Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; n * c * h * w];
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = gs[ni * c + ci] / area;
                        let base = (ni * c + ci) * h * w;
                        for k in 0..h * w {
                            dx[base + k] = gv;
                        }
                    }
                }
                vec![(x.0, ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
            }),
        )
    }

    /// Swap the first two axes of a rank-4 tensor: `[A, B, H, W]` -> `[B, A, H, W]`.
    pub fn swap_axes01_4d(&mut self, x: Var) -> Var {
        let xv = self.get(x);
        let (a, b, h, w) = {
            let s = xv.shape();
            (s[0], s[1], s[2], s[3])
        };
        let xs = xv.as_slice().unwrap();
        let plane = h * w;
        let mut out = vec![0.0; a * b * plane];
        for ai in 0..a {
            for bi in 0..b {
                let src = (ai * b + bi) * plane;
                let dst = (bi * a + ai) * plane;
                out[dst..dst + plane].copy_from_slice(&xs[src..src + plane]);
            }
        }
        self.push_external(
            ArrayD::from_shape_vec(IxDyn(&[b, a, h, w]), out).unwrap(),
            Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; a * b * plane];
                for ai in 0..a {
                    for bi in 0..b {
                        let src = (bi * a + ai) * plane;
                        let dst = (ai * b + bi) * plane;
                        dx[dst..dst + plane].copy_from_slice(&gs[src..src + plane]);
                    }
                }
                vec![(x.0, ArrayD::from_shape_vec(IxDyn(&[a, b, h, w]), dx).unwrap())]
            }),
        )
    }

    /// Flatten a single-batch conv output per time step:
    /// `x[1, C, T, W]` -> `[T, C*W]` with `out[t, c*W + w] = x[0, c, t, w]`.
    pub fn flatten_time(&mut self, x: Var) -> Var {
        let xv = self.get(x);
        let (n, c, t, w) = {
            let s = xv.shape();
            (s[0], s[1], s[2], s[3])
        };
        assert_eq!(n, 1, "flatten_time expects a single batch item");
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; t * c * w];
        for ci in 0..c {
            for ti in 0..t {
                for wi in 0..w {
                    out[ti * (c * w) + ci * w + wi] = xs[(ci * t + ti) * w + wi];
                }
            }
        }
        self.push_external(
            ArrayD::from_shape_vec(IxDyn(&[t, c * w]), out).unwrap(),
            Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; c * t * w];
                for ci in 0..c {
                    for ti in 0..t {
                        for wi in 0..w {
                            dx[(ci * t + ti) * w + wi] = gs[ti * (c * w) + ci * w + wi];
                        }
                    }
                }
                vec![(x.0, ArrayD::from_shape_vec(IxDyn(&[1, c, t, w]), dx).unwrap())]
            }),
        )
    }

    /// Depthwise temporal convolution with kernel 3 and zero padding:
    /// `x[T x D]`, `w[3 x D]` -> `[T x D]` where
    /// `y[t,d] = sum_j w[j,d] * x[t+j-1,d]`.
    pub fn depthwise_tconv3(&mut self, x: Var, w: Var) -> Var {
        let xv = self.get(x).clone();
        let wv = self.get(w).clone();
        let (t, d) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(wv.shape(), &[3, d], "depthwise kernel must be [3 x D]");
        let xs = xv.as_slice().unwrap();
        let ws = wv.as_slice().unwrap();
        let mut out = vec![0.0; t * d];
        for ti in 0..t {
            for j in 0..3usize {
                let src = ti as isize + j as isize - 1;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let srow = src as usize * d;
                for di in 0..d {
                    out[ti * d + di] += ws[j * d + di] * xs[srow + di];
                }
            }
        }
        self.push_external(
            ArrayD::from_shape_vec(IxDyn(&[t, d]), out).unwrap(),
            Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let xs = xv.as_slice().unwrap();
                let ws = wv.as_slice().unwrap();
                let mut dx = vec![0.0; t * d];
                let mut dw = vec![0.0; 3 * d];
                for ti in 0..t {
                    for j in 0..3usize {
                        let src = ti as isize + j as isize - 1;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let srow = src as usize * d;
                        for di in 0..d {
                            let gv = gs[ti * d + di];
                            dx[srow + di] += gv * ws[j * d + di];
                            dw[j * d + di] += gv * xs[srow + di];
                        }
                    }
                }
                vec![
                    (x.0, ArrayD::from_shape_vec(IxDyn(&[t, d]), dx).unwrap()),
                    (w.0, ArrayD::from_shape_vec(IxDyn(&[3, d]), dw).unwrap()),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::gradcheck::check_grads;
    use ndarray::{ArrayD, IxDyn};

    fn seq(shape: &[usize], scale: f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|i| ((i as f64 * 0.7).sin()) * scale).collect();
        ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
    }

    #[test]
    fn conv2d_shapes_and_gradients() {
        let x = seq(&[2, 2, 5, 6], 1.0);
        let w = seq(&[3, 2, 3, 3], 0.5);
        let b = seq(&[3], 0.1);
        check_grads(
            &[x, w, b],
            |t, vars| {
                let y = t.conv2d(vars[0], vars[1], vars[2], (2, 2), (1, 1));
                assert_eq!(t.shape(y), &[2, 3, 3, 3]);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn conv3d_preserves_shape_and_gradients() {
        let x = seq(&[1, 4, 3, 3], 1.0);
        let w = seq(&[2, 1, 5, 3, 3], 0.3);
        let b = seq(&[2], 0.1);
        check_grads(
            &[x, w, b],
            |t, vars| {
                let y = t.conv3d_same(vars[0], vars[1], vars[2]);
                assert_eq!(t.shape(y), &[2, 4, 3, 3]);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn gap_and_depthwise_gradients() {
        let x = seq(&[2, 3, 4, 4], 1.0);
        check_grads(
            &[x],
            |t, vars| {
                let y = t.gap_hw(vars[0]);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            1e-6,
        );
        let f = seq(&[5, 3], 1.0);
        let k = seq(&[3, 3], 0.4);
        check_grads(
            &[f, k],
            |t, vars| {
                let y = t.depthwise_tconv3(vars[0], vars[1]);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            1e-6,
        );
    }
}

//! Minimal reverse-mode automatic differentiation over flat row-major tensors.
//!
//! A [`Tape`] records every value produced during a forward pass together with
//! the op that produced it. [`Tape::backward`] walks the record in reverse and
//! accumulates vector-Jacobian products. Ops are coarse (fused linear, fused
//! multi-head attention, chunk normalization, 3×3 convolution) so that the tape
//! stays short and the heavy lifting goes through GEMM.

use crate::scalar::Scalar;

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    /// `x[r, in] · w[in, out] (+ b[out])`
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    /// `y[j] = x[j] + p[j % len(p)]`
    AddTiled {
        x: Var,
        p: Var,
    },
    /// `y[j] = x[j] * g[c] + b[c]`, `c = (j / inner) % channels`
    ChannelAffine {
        x: Var,
        g: Var,
        b: Var,
        channels: usize,
        inner: usize,
    },
    /// zero-mean unit-variance over contiguous chunks
    Normalize {
        x: Var,
        chunk: usize,
        rstd: Vec<F>,
    },
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Abs(Var),
    Sum(Var),
    SumSq(Var),
    GatherRows {
        x: Var,
        width: usize,
        idx: Vec<usize>,
    },
    Stitch {
        parts: Vec<(Var, Vec<usize>)>,
        width: usize,
    },
    ConcatCols {
        a: Var,
        b: Var,
        rows: usize,
        wa: usize,
        wb: usize,
    },
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<F>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    AvgPool2 {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    Upsample2 {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
}

/// Geometry of a same-padded 3×3 convolution over `[batch, cin, h, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug)]
struct Node<F> {
    value: Vec<F>,
    shape: Vec<usize>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradient record produced by [`Tape::backward`].
pub struct Grads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` if it received none.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<F> {
        self.get(v)
            .map(<[F]>::to_vec)
            .unwrap_or_else(|| vec![F::zero(); len])
    }
}

#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<F>, shape: Vec<usize>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert_eq!(
            value.len(),
            numel(&shape),
            "value/shape mismatch for {op:?}"
        );
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Vec<F>, shape: Vec<usize>) -> Var {
        self.push(value, shape, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Vec<F>, shape: Vec<usize>) -> Var {
        self.push(value, shape, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    /// `x[rows, din] · w[din, dout] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (din, dout) = match self.shape(w) {
            [a, b] => (*a, *b),
            s => panic!("linear weight must be 2-D, got {s:?}"),
        };
        let xs = self.value(x);
        assert_eq!(xs.len() % din, 0, "linear input width mismatch");
        let rows = xs.len() / din;
        let mut out = vec![F::zero(); rows * dout];
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.len(), dout);
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        F::gemm(
            rows,
            din,
            dout,
            F::one(),
            xs,
            din,
            1,
            self.value(w),
            dout,
            1,
            beta,
            &mut out,
            dout,
            1,
        );
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            out,
            vec![rows, dout],
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
            needs,
        )
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Vec<F> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise operands differ in size");
        av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, self.shape(a).to_vec(), Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, self.shape(a).to_vec(), Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, self.shape(a).to_vec(), Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).iter().map(|&x| x * c).collect();
        self.push(v, self.shape(a).to_vec(), Op::Scale(a, c), self.ng(a))
    }

    pub fn add_tiled(&mut self, x: Var, p: Var) -> Var {
        let pv = self.value(p);
        let n = pv.len();
        assert!(
            n > 0 && self.value(x).len() % n == 0,
            "tiled add period mismatch"
        );
        let v = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(j, &a)| a + pv[j % n])
            .collect();
        let needs = self.ng(x) || self.ng(p);
        self.push(v, self.shape(x).to_vec(), Op::AddTiled { x, p }, needs)
    }

    pub fn channel_affine(&mut self, x: Var, g: Var, b: Var, inner: usize) -> Var {
        let channels = self.value(g).len();
        assert_eq!(self.value(b).len(), channels);
        let (gv, bv) = (self.value(g), self.value(b));
        let v = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(j, &a)| {
                let c = (j / inner) % channels;
                a * gv[c] + bv[c]
            })
            .collect();
        let needs = self.ng(x) || self.ng(g) || self.ng(b);
        self.push(
            v,
            self.shape(x).to_vec(),
            Op::ChannelAffine {
                x,
                g,
                b,
                channels,
                inner,
            },
            needs,
        )
    }

    pub fn normalize(&mut self, x: Var, chunk: usize, eps: F) -> Var {
        let xv = self.value(x);
        assert!(
            chunk > 0 && xv.len() % chunk == 0,
            "normalize chunk mismatch"
        );
        let n = F::of_usize(chunk);
        let mut out = Vec::with_capacity(xv.len());
        let mut rstds = Vec::with_capacity(xv.len() / chunk);
        for c in xv.chunks_exact(chunk) {
            let mean = c.iter().copied().sum::<F>() / n;
            let var = c.iter().map(|&a| (a - mean) * (a - mean)).sum::<F>() / n;
            let rstd = (var + eps).sqrt().recip();
            out.extend(c.iter().map(|&a| (a - mean) * rstd));
            rstds.push(rstd);
        }
        self.push(
            out,
            self.shape(x).to_vec(),
            Op::Normalize {
                x,
                chunk,
                rstd: rstds,
            },
            self.ng(x),
        )
    }

    /// Layer norm over the trailing `width` features.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let width = self.value(g).len();
        let n = self.normalize(x, width, F::of(1e-6));
        self.channel_affine(n, g, b, 1)
    }

    /// Group norm over `[batch, channels, plane]` images.
    pub fn group_norm(&mut self, x: Var, g: Var, b: Var, groups: usize, plane: usize) -> Var {
        let channels = self.value(g).len();
        assert_eq!(channels % groups, 0, "channels not divisible by groups");
        let n = self.normalize(x, channels / groups * plane, F::of(1e-6));
        self.channel_affine(n, g, b, plane)
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let v = self.value(x).iter().map(|&a| f(a)).collect();
        self.push(v, self.shape(x).to_vec(), op, self.ng(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |a| gelu(a).0)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |a| a * sigmoid(a))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), F::exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), F::abs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![s], vec![1], Op::Sum(x), self.ng(x))
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&a| a * a).sum();
        self.push(vec![s], vec![1], Op::SumSq(x), self.ng(x))
    }

    pub fn gather_rows(&mut self, x: Var, width: usize, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &r in &idx {
            out.extend_from_slice(&xv[r * width..(r + 1) * width]);
        }
        let rows = idx.len();
        self.push(
            out,
            vec![rows, width],
            Op::GatherRows { x, width, idx },
            self.ng(x),
        )
    }

    /// Builds a `[rows, width]` tensor whose row `idx[j]` is row `j` of a part.
    /// Every output row must be covered exactly once.
    pub fn stitch(&mut self, parts: Vec<(Var, Vec<usize>)>, rows: usize, width: usize) -> Var {
        let mut out = vec![F::zero(); rows * width];
        let mut seen = vec![false; rows];
        let mut needs = false;
        for (v, idx) in &parts {
            let pv = self.value(*v);
            assert_eq!(pv.len(), idx.len() * width, "stitch part size mismatch");
            for (j, &r) in idx.iter().enumerate() {
                assert!(!seen[r], "stitch row {r} covered twice");
                seen[r] = true;
                out[r * width..(r + 1) * width].copy_from_slice(&pv[j * width..(j + 1) * width]);
            }
            needs |= self.ng(*v);
        }
        assert!(seen.iter().all(|&s| s), "stitch leaves rows uncovered");
        self.push(out, vec![rows, width], Op::Stitch { parts, width }, needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var, wa: usize, wb: usize) -> Var {
        let rows = self.value(a).len() / wa;
        assert_eq!(self.value(b).len(), rows * wb, "concat row mismatch");
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            out.extend_from_slice(&av[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&bv[r * wb..(r + 1) * wb]);
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(
            out,
            vec![rows, wa + wb],
            Op::ConcatCols { a, b, rows, wa, wb },
            needs,
        )
    }

    /// Exact multi-head self-attention over packed `qkv[batch*seq, 3*d]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let qv = self.value(qkv);
        let d3 = qv.len() / (batch * seq);
        assert_eq!(d3 * batch * seq, qv.len());
        assert_eq!(d3 % 3, 0);
        let d = d3 / 3;
        assert_eq!(d % heads, 0, "dim not divisible by heads");
        let dh = d / heads;
        let scale = F::of_usize(dh).sqrt().recip();
        let mut out = vec![F::zero(); batch * seq * d];
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        for b in 0..batch {
            let base = b * seq * d3;
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // scores = q kᵀ
                F::gemm(
                    seq,
                    dh,
                    seq,
                    scale,
                    &qv[base + h * dh..],
                    d3,
                    1,
                    &qv[base + d + h * dh..],
                    1,
                    d3,
                    F::zero(),
                    p,
                    seq,
                    1,
                );
                for row in p.chunks_exact_mut(seq) {
                    softmax_in_place(row);
                }
                F::gemm(
                    seq,
                    seq,
                    dh,
                    F::one(),
                    p,
                    seq,
                    1,
                    &qv[base + 2 * d + h * dh..],
                    d3,
                    1,
                    F::zero(),
                    &mut out[b * seq * d + h * dh..],
                    d,
                    1,
                );
            }
        }
        self.push(
            out,
            vec![batch * seq, d],
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            self.ng(qkv),
        )
    }

    /// Same-padded 3×3 convolution, `w[cout, cin*9]`, `b[cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let ConvGeom {
            batch,
            cin,
            cout,
            h,
            w: wd,
        } = geom;
        let hw = h * wd;
        assert_eq!(self.value(x).len(), batch * cin * hw, "conv input size");
        assert_eq!(self.value(w).len(), cout * cin * 9, "conv weight size");
        let mut out = vec![F::zero(); batch * cout * hw];
        let mut col = vec![F::zero(); cin * 9 * hw];
        let bias = self.value(b);
        for bi in 0..batch {
            im2col(
                &self.value(x)[bi * cin * hw..(bi + 1) * cin * hw],
                cin,
                h,
                wd,
                &mut col,
            );
            let o = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
            for (c, plane) in o.chunks_exact_mut(hw).enumerate() {
                plane.fill(bias[c]);
            }
            F::gemm(
                cout,
                cin * 9,
                hw,
                F::one(),
                self.value(w),
                cin * 9,
                1,
                &col,
                hw,
                1,
                F::one(),
                o,
                hw,
                1,
            );
        }
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            out,
            vec![batch, cout, h, wd],
            Op::Conv3x3 { x, w, b, geom },
            needs,
        )
    }

    /// 2×2 average pooling over `planes` images of `h×w`.
    pub fn avg_pool2(&mut self, x: Var, planes: usize, h: usize, w: usize) -> Var {
        assert!(h % 2 == 0 && w % 2 == 0, "pool needs even extents");
        let xv = self.value(x);
        let (ho, wo) = (h / 2, w / 2);
        let q = F::of(0.25);
        let mut out = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    out.push(s * q);
                }
            }
        }
        let shape = vec![planes, ho, wo];
        self.push(out, shape, Op::AvgPool2 { x, planes, h, w }, self.ng(x))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var, planes: usize, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    out.push(src[(i / 2) * w + j / 2]);
                }
            }
        }
        self.push(
            out,
            vec![planes, ho, wo],
            Op::Upsample2 { x, planes, h, w },
            self.ng(x),
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop(node, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.ng(v) {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.len()]);
        f(g);
    }

    fn backprop(&self, node: &Node<F>, gy: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                let (xv, wv) = (self.value(x), self.value(w));
                self.acc(grads, x, |g| {
                    F::gemm(
                        rows,
                        dout,
                        din,
                        F::one(),
                        gy,
                        dout,
                        1,
                        wv,
                        1,
                        dout,
                        F::one(),
                        g,
                        din,
                        1,
                    )
                });
                self.acc(grads, w, |g| {
                    F::gemm(
                        din,
                        rows,
                        dout,
                        F::one(),
                        xv,
                        1,
                        din,
                        gy,
                        dout,
                        1,
                        F::one(),
                        g,
                        dout,
                        1,
                    )
                });
                if let Some(b) = b {
                    self.acc(grads, b, |g| {
                        for row in gy.chunks_exact(dout) {
                            g.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |g| axpy(g, F::one(), gy));
                self.acc(grads, b, |g| axpy(g, F::one(), gy));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |g| axpy(g, F::one(), gy));
                self.acc(grads, b, |g| axpy(g, -F::one(), gy));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.acc(grads, a, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(bv) {
                        *g += d * o;
                    }
                });
                self.acc(grads, b, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(av) {
                        *g += d * o;
                    }
                });
            }
            &Op::Scale(a, c) => self.acc(grads, a, |g| axpy(g, c, gy)),
            &Op::AddTiled { x, p } => {
                self.acc(grads, x, |g| axpy(g, F::one(), gy));
                let n = self.value(p).len();
                self.acc(grads, p, |g| {
                    for chunk in gy.chunks_exact(n) {
                        axpy(g, F::one(), chunk);
                    }
                });
            }
            &Op::ChannelAffine {
                x,
                g: gam,
                b,
                channels,
                inner,
            } => {
                let (xv, gv) = (self.value(x), self.value(gam));
                self.acc(grads, x, |g| {
                    for (j, (g, &d)) in g.iter_mut().zip(gy).enumerate() {
                        *g += d * gv[(j / inner) % channels];
                    }
                });
                self.acc(grads, gam, |g| {
                    for (j, (&d, &a)) in gy.iter().zip(xv).enumerate() {
                        g[(j / inner) % channels] += d * a;
                    }
                });
                self.acc(grads, b, |g| {
                    for (j, &d) in gy.iter().enumerate() {
                        g[(j / inner) % channels] += d;
                    }
                });
            }
            Op::Normalize { x, chunk, rstd } => {
                let y = &node.value;
                let n = F::of_usize(*chunk);
                self.acc(grads, *x, |g| {
                    for (k, ((gc, yc), dc)) in g
                        .chunks_exact_mut(*chunk)
                        .zip(y.chunks_exact(*chunk))
                        .zip(gy.chunks_exact(*chunk))
                        .enumerate()
                    {
                        let mean_d = dc.iter().copied().sum::<F>() / n;
                        let mean_dy = dc.iter().zip(yc).map(|(&d, &yy)| d * yy).sum::<F>() / n;
                        for ((g, &d), &yy) in gc.iter_mut().zip(dc).zip(yc) {
                            *g += rstd[k] * (d - mean_d - yy * mean_dy);
                        }
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                self.acc(grads, x, |g| {
                    for ((g, &d), &a) in g.iter_mut().zip(gy).zip(xv) {
                        *g += d * gelu(a).1;
                    }
                });
            }
            &Op::Silu(x) => {
                let xv = self.value(x);
                self.acc(grads, x, |g| {
                    for ((g, &d), &a) in g.iter_mut().zip(gy).zip(xv) {
                        let s = sigmoid(a);
                        *g += d * (s + a * s * (F::one() - s));
                    }
                });
            }
            &Op::Exp(x) => {
                let y = &node.value;
                self.acc(grads, x, |g| {
                    for ((g, &d), &e) in g.iter_mut().zip(gy).zip(y) {
                        *g += d * e;
                    }
                });
            }
            &Op::Abs(x) => {
                let xv = self.value(x);
                self.acc(grads, x, |g| {
                    for ((g, &d), &a) in g.iter_mut().zip(gy).zip(xv) {
                        if a > F::zero() {
                            *g += d;
                        } else if a < F::zero() {
                            *g -= d;
                        }
                    }
                });
            }
            &Op::Sum(x) => self.acc(grads, x, |g| g.iter_mut().for_each(|a| *a += gy[0])),
            &Op::SumSq(x) => {
                let xv = self.value(x);
                let two = F::of(2.0) * gy[0];
                self.acc(grads, x, |g| axpy(g, two, xv));
            }
            Op::GatherRows { x, width, idx } => {
                self.acc(grads, *x, |g| {
                    for (j, &r) in idx.iter().enumerate() {
                        axpy(
                            &mut g[r * width..(r + 1) * width],
                            F::one(),
                            &gy[j * width..(j + 1) * width],
                        );
                    }
                });
            }
            Op::Stitch { parts, width } => {
                for (v, idx) in parts {
                    self.acc(grads, *v, |g| {
                        for (j, &r) in idx.iter().enumerate() {
                            axpy(
                                &mut g[j * width..(j + 1) * width],
                                F::one(),
                                &gy[r * width..(r + 1) * width],
                            );
                        }
                    });
                }
            }
            &Op::ConcatCols { a, b, rows, wa, wb } => {
                let w = wa + wb;
                self.acc(grads, a, |g| {
                    for r in 0..rows {
                        axpy(
                            &mut g[r * wa..(r + 1) * wa],
                            F::one(),
                            &gy[r * w..r * w + wa],
                        );
                    }
                });
                self.acc(grads, b, |g| {
                    for r in 0..rows {
                        axpy(
                            &mut g[r * wb..(r + 1) * wb],
                            F::one(),
                            &gy[r * w + wa..(r + 1) * w],
                        );
                    }
                });
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let qv = self.value(*qkv);
                let (batch, seq, heads) = (*batch, *seq, *heads);
                self.acc(grads, *qkv, |g| {
                    attention_backward(qv, probs, gy, g, batch, seq, heads)
                });
            }
            &Op::Conv3x3 { x, w, b, geom } => {
                let ConvGeom {
                    batch,
                    cin,
                    cout,
                    h,
                    w: wd,
                } = geom;
                let hw = h * wd;
                let (xv, wv) = (self.value(x), self.value(w));
                let mut col = vec![F::zero(); cin * 9 * hw];
                let mut dcol = vec![F::zero(); cin * 9 * hw];
                let need_w = self.ng(w);
                let need_x = self.ng(x);
                for bi in 0..batch {
                    let dy = &gy[bi * cout * hw..(bi + 1) * cout * hw];
                    if need_w {
                        im2col(
                            &xv[bi * cin * hw..(bi + 1) * cin * hw],
                            cin,
                            h,
                            wd,
                            &mut col,
                        );
                        self.acc(grads, w, |g| {
                            F::gemm(
                                cout,
                                hw,
                                cin * 9,
                                F::one(),
                                dy,
                                hw,
                                1,
                                &col,
                                1,
                                hw,
                                F::one(),
                                g,
                                cin * 9,
                                1,
                            )
                        });
                    }
                    if need_x {
                        F::gemm(
                            cin * 9,
                            cout,
                            hw,
                            F::one(),
                            wv,
                            1,
                            cin * 9,
                            dy,
                            hw,
                            1,
                            F::zero(),
                            &mut dcol,
                            hw,
                            1,
                        );
                        self.acc(grads, x, |g| {
                            col2im_add(
                                &dcol,
                                cin,
                                h,
                                wd,
                                &mut g[bi * cin * hw..(bi + 1) * cin * hw],
                            )
                        });
                    }
                }
                self.acc(grads, b, |g| {
                    for bi in 0..batch {
                        for c in 0..cout {
                            let o = (bi * cout + c) * hw;
                            g[c] += gy[o..o + hw].iter().copied().sum::<F>();
                        }
                    }
                });
            }
            &Op::AvgPool2 { x, planes, h, w } => {
                let (ho, wo) = (h / 2, w / 2);
                let q = F::of(0.25);
                self.acc(grads, x, |g| {
                    for p in 0..planes {
                        for i in 0..h {
                            for j in 0..w {
                                g[p * h * w + i * w + j] +=
                                    q * gy[p * ho * wo + (i / 2) * wo + j / 2];
                            }
                        }
                    }
                });
            }
            &Op::Upsample2 { x, planes, h, w } => {
                let (ho, wo) = (2 * h, 2 * w);
                self.acc(grads, x, |g| {
                    for p in 0..planes {
                        for i in 0..ho {
                            for j in 0..wo {
                                g[p * h * w + (i / 2) * w + j / 2] += gy[p * ho * wo + i * wo + j];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn axpy<F: Scalar>(y: &mut [F], a: F, x: &[F]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

fn sigmoid<F: Scalar>(a: F) -> F {
    (F::one() + (-a).exp()).recip()
}

/// tanh-approximated GELU and its derivative.
fn gelu<F: Scalar>(x: F) -> (F, F) {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let half = F::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (F::one() + t);
    let dinner = c * (F::one() + F::of(3.0) * k * x * x);
    let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * dinner;
    (y, dy)
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = s.recip();
    row.iter_mut().for_each(|v| *v *= inv);
}

fn attention_backward<F: Scalar>(
    qkv: &[F],
    probs: &[F],
    gy: &[F],
    g: &mut [F],
    batch: usize,
    seq: usize,
    heads: usize,
) {
    let d3 = qkv.len() / (batch * seq);
    let d = d3 / 3;
    let dh = d / heads;
    let scale = F::of_usize(dh).sqrt().recip();
    let mut dp = vec![F::zero(); seq * seq];
    for b in 0..batch {
        let base = b * seq * d3;
        let gbase = b * seq * d;
        for h in 0..heads {
            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            // dP = dO Vᵀ
            F::gemm(
                seq,
                dh,
                seq,
                F::one(),
                &gy[gbase + h * dh..],
                d,
                1,
                &qkv[base + 2 * d + h * dh..],
                1,
                d3,
                F::zero(),
                &mut dp,
                seq,
                1,
            );
            // dV = Pᵀ dO
            F::gemm(
                seq,
                seq,
                dh,
                F::one(),
                p,
                1,
                seq,
                &gy[gbase + h * dh..],
                d,
                1,
                F::one(),
                &mut g[base + 2 * d + h * dh..],
                d3,
                1,
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for (drow, prow) in dp.chunks_exact_mut(seq).zip(p.chunks_exact(seq)) {
                let dot: F = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (dv, &pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot);
                }
            }
            // dQ = dS K · scale ; dK = dSᵀ Q · scale
            F::gemm(
                seq,
                seq,
                dh,
                scale,
                &dp,
                seq,
                1,
                &qkv[base + d + h * dh..],
                d3,
                1,
                F::one(),
                &mut g[base + h * dh..],
                d3,
                1,
            );
            F::gemm(
                seq,
                seq,
                dh,
                scale,
                &dp,
                1,
                seq,
                &qkv[base + h * dh..],
                d3,
                1,
                F::one(),
                &mut g[base + d + h * dh..],
                d3,
                1,
            );
        }
    }
}

/// `[cin, h, w]` → `[cin*9, h*w]` with zero padding 1.
fn im2col<F: Scalar>(x: &[F], cin: usize, h: usize, w: usize, col: &mut [F]) {
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    for j in 0..w {
                        let sj = j as isize + kx as isize - 1;
                        row[i * w + j] = if si >= 0 && si < h as isize && sj >= 0 && sj < w as isize
                        {
                            x[c * hw + si as usize * w + sj as usize]
                        } else {
                            F::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Scalar>(col: &[F], cin: usize, h: usize, w: usize, g: &mut [F]) {
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + kx as isize - 1;
                        if sj >= 0 && sj < w as isize {
                            g[c * hw + si as usize * w + sj as usize] += row[i * w + j];
                        }
                    }
                }
            }
        }
    }
}

//! Dense `f64` tensors and a recording tape for reverse-mode differentiation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::metrics::{norm_cdf, norm_pdf};

const INV_SQRT_PI: f64 = 0.564_189_583_547_756_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("{shape:?}"), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [m, n] => (*m, *n),
            [n] => (1, *n),
            _ => panic!("expected a matrix, got shape {:?}", self.shape),
        }
    }

    fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `softplus` for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Smallest predicted spread; keeps the loss finite if softplus underflows.
pub const SIGMA_FLOOR: f64 = 1e-12;

pub fn sigma_from_raw(raw: f64) -> f64 {
    softplus(raw).max(SIGMA_FLOOR)
}

/// Geometry of a 3x3-style convolution on NHWC tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    /// Visit `(column row, patch offset, input offset)` for in-bounds taps.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let cin = self.in_channels;
        for b in 0..self.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src = ((b * self.height + iy as usize) * self.width + ix as usize) * cin;
                            let dst = (ky * self.kernel + kx) * cin;
                            f(row, dst, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let p = self.patch();
        let cin = self.in_channels;
        let mut cols = vec![0.0; self.batch * self.out_height() * self.out_width() * p];
        self.for_each_tap(|row, dst, src| {
            cols[row * p + dst..row * p + dst + cin].copy_from_slice(&input[src..src + cin]);
        });
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let p = self.patch();
        let cin = self.in_channels;
        let mut out = vec![0.0; self.batch * self.height * self.width * cin];
        self.for_each_tap(|row, dst, src| {
            for c in 0..cin {
                out[src + c] += cols[row * p + dst + c];
            }
        });
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Reshape(Var),
    Mean(Var),
    MulConst(Var, Vec<f64>),
    Column(Var, usize),
    Crps {
        mu: Var,
        raw_sigma: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients indexed by tape variable.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    /// Gradient, or zeros of the variable's shape if it did not receive any.
    pub fn take_or_zero(&mut self, v: Var, tape: &Tape) -> Tensor {
        self.0[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&tape.value(v).shape))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(&mut t.data);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul: inner dimensions differ");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            &self.value(a).data,
            false,
            &self.value(b).data,
            false,
            0.0,
            &mut out,
        );
        self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
        )
    }

    /// `x + b` with `b` broadcast along the last dimension.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let n = self.value(b).len();
        assert_eq!(self.value(x).last_dim(), n, "add_bias: width mismatch");
        let mut v = self.value(x).clone();
        for row in v.data.chunks_exact_mut(n) {
            for (r, bb) in row.iter_mut().zip(&self.value(b).data) {
                *r += bb;
            }
        }
        self.push(v, Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "add: length mismatch");
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(&self.value(b).data) {
            *x += y;
        }
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x += s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = softplus(*x));
        self.push(v, Op::Softplus(a))
    }

    /// NHWC convolution; `weight` has shape `(k*k*cin, cout)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, kernel: usize, stride: usize, padding: usize) -> Var {
        let shape = self.value(input).shape.clone();
        let [batch, height, width, in_channels] = shape[..] else {
            panic!("conv2d: expected NHWC input, got {shape:?}");
        };
        let (p, out_channels) = self.value(weight).dims2();
        assert_eq!(p, kernel * kernel * in_channels, "conv2d: weight shape");
        let geom = ConvGeom {
            batch,
            height,
            width,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        };
        let cols = geom.im2col(&self.value(input).data);
        let rows = batch * geom.out_height() * geom.out_width();
        let mut out = vec![0.0; rows * out_channels];
        gemm(
            rows,
            p,
            out_channels,
            1.0,
            &cols,
            false,
            &self.value(weight).data,
            false,
            0.0,
            &mut out,
        );
        let value = Tensor {
            shape: vec![batch, geom.out_height(), geom.out_width(), out_channels],
            data: out,
        };
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape: size mismatch");
        let t = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        self.push(t, Op::Reshape(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Elementwise product with a constant vector repeated over leading dims.
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.len() % factors.len(), 0, "mul_const: length mismatch");
        for chunk in v.data.chunks_exact_mut(factors.len()) {
            for (x, f) in chunk.iter_mut().zip(&factors) {
                *x *= f;
            }
        }
        self.push(v, Op::MulConst(a, factors))
    }

    /// Column `c` of an `(m, n)` matrix as a vector of length `m`.
    pub fn column(&mut self, a: Var, c: usize) -> Var {
        let (m, n) = self.value(a).dims2();
        assert!(c < n, "column index out of range");
        let data = (0..m).map(|i| self.value(a).data[i * n + c]).collect();
        self.push(Tensor { shape: vec![m], data }, Op::Column(a, c))
    }

    /// Mean closed-form CRPS of `N(mu, softplus(raw_sigma)^2)` against targets.
    pub fn crps_loss(&mut self, mu: Var, raw_sigma: Var, targets: &[f64]) -> Var {
        let (m, s) = (self.value(mu), self.value(raw_sigma));
        assert_eq!(m.len(), targets.len(), "crps_loss: batch mismatch");
        assert_eq!(s.len(), targets.len(), "crps_loss: batch mismatch");
        let total: f64 = m
            .data
            .iter()
            .zip(&s.data)
            .zip(targets)
            .map(|((&mu, &r), &y)| {
                let sigma = sigma_from_raw(r);
                let z = (y - mu) / sigma;
                sigma * (z * (2.0 * norm_cdf(z) - 1.0) + 2.0 * norm_pdf(z) - INV_SQRT_PI)
            })
            .sum();
        let value = Tensor::scalar(total / targets.len() as f64);
        self.push(
            value,
            Op::Crps {
                mu,
                raw_sigma,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn backward(&self, output: Var) -> Gradients {
        let seed = Tensor {
            shape: self.value(output).shape.clone(),
            data: vec![1.0; self.value(output).len()],
        };
        self.backward_seeded(&[(output, seed)])
    }

    /// Reverse pass from several outputs, each with its own cotangent.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, s) in seeds {
            assert_eq!(s.len(), self.value(*v).len(), "seed shape mismatch");
            let shape = self.value(*v).shape.clone();
            accumulate(&mut grads[v.0], &shape, |g| {
                g.iter_mut().zip(&s.data).for_each(|(a, b)| *a += b)
            });
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients(grads)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let shape_of = |v: Var| self.value(v).shape.clone();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let (_, n) = self.value(*b).dims2();
                let bv = &self.value(*b).data;
                let av = &self.value(*a).data;
                accumulate(&mut grads[a.0], &shape_of(*a), |ga| {
                    gemm(m, n, k, 1.0, &g.data, false, bv, true, 1.0, ga)
                });
                accumulate(&mut grads[b.0], &shape_of(*b), |gb| {
                    gemm(k, m, n, 1.0, av, true, &g.data, false, 1.0, gb)
                });
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).len();
                accumulate(&mut grads[x.0], &shape_of(*x), |gx| {
                    gx.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b)
                });
                accumulate(&mut grads[b.0], &shape_of(*b), |gb| {
                    for row in g.data.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    accumulate(&mut grads[v.0], &shape_of(*v), |gv| {
                        gv.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y)
                    });
                }
            }
            Op::Scale(a, s) => accumulate(&mut grads[a.0], &shape_of(*a), |ga| {
                ga.iter_mut().zip(&g.data).for_each(|(x, y)| *x += s * y)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut grads[a.0], &shape_of(*a), |ga| {
                ga.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y)
            }),
            Op::Relu(a) => {
                let input = &self.value(*a).data;
                accumulate(&mut grads[a.0], &shape_of(*a), |ga| {
                    for ((x, y), i) in ga.iter_mut().zip(&g.data).zip(input) {
                        if *i > 0.0 {
                            *x += y;
                        }
                    }
                })
            }
            Op::Softplus(a) => {
                let input = &self.value(*a).data;
                accumulate(&mut grads[a.0], &shape_of(*a), |ga| {
                    for ((x, y), i) in ga.iter_mut().zip(&g.data).zip(input) {
                        *x += y * sigmoid(*i);
                    }
                })
            }
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            } => {
                let rows = geom.batch * geom.out_height() * geom.out_width();
                let p = geom.patch();
                let cout = geom.out_channels;
                accumulate(&mut grads[weight.0], &shape_of(*weight), |gw| {
                    gemm(p, rows, cout, 1.0, cols, true, &g.data, false, 1.0, gw)
                });
                let mut dcols = vec![0.0; rows * p];
                gemm(
                    rows,
                    cout,
                    p,
                    1.0,
                    &g.data,
                    false,
                    &self.value(*weight).data,
                    true,
                    0.0,
                    &mut dcols,
                );
                let dx = geom.col2im(&dcols);
                accumulate(&mut grads[input.0], &shape_of(*input), |gi| {
                    gi.iter_mut().zip(&dx).for_each(|(a, b)| *a += b)
                });
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let s = g.data[0] / n;
                accumulate(&mut grads[a.0], &shape_of(*a), |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::MulConst(a, factors) => accumulate(&mut grads[a.0], &shape_of(*a), |ga| {
                for (chunk, gchunk) in ga
                    .chunks_exact_mut(factors.len())
                    .zip(g.data.chunks_exact(factors.len()))
                {
                    for ((x, y), f) in chunk.iter_mut().zip(gchunk).zip(factors) {
                        *x += y * f;
                    }
                }
            }),
            Op::Column(a, c) => {
                let (_, n) = self.value(*a).dims2();
                accumulate(&mut grads[a.0], &shape_of(*a), |ga| {
                    for (i, y) in g.data.iter().enumerate() {
                        ga[i * n + c] += y;
                    }
                })
            }
            Op::Crps { mu, raw_sigma, targets } => {
                let scale = g.data[0] / targets.len() as f64;
                let mus = &self.value(*mu).data;
                let raws = &self.value(*raw_sigma).data;
                let mut gm = vec![0.0; targets.len()];
                let mut gs = vec![0.0; targets.len()];
                for i in 0..targets.len() {
                    let sigma = sigma_from_raw(raws[i]);
                    let z = (targets[i] - mus[i]) / sigma;
                    gm[i] = -(2.0 * norm_cdf(z) - 1.0) * scale;
                    gs[i] = (2.0 * norm_pdf(z) - INV_SQRT_PI) * sigmoid(raws[i]) * scale;
                }
                accumulate(&mut grads[mu.0], &shape_of(*mu), |x| {
                    x.iter_mut().zip(&gm).for_each(|(a, b)| *a += b)
                });
                accumulate(&mut grads[raw_sigma.0], &shape_of(*raw_sigma), |x| {
                    x.iter_mut().zip(&gs).for_each(|(a, b)| *a += b)
                });
            }
        }
    }
}

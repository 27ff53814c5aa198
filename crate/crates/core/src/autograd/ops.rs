use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::gemm::{gemm, MatRef};
use crate::tensor::Tensor;

/// Logit bound that keeps sigmoid outputs strictly inside (0, 1) in `f64`.
const SIGMOID_LOGIT_LIMIT: f64 = 30.0;

impl Graph {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                "operands",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(value, op, &[a, b])
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.zip_map(a, b, Op::Div(a, b), |x, y| x / y))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    /// Divide every element of `x` by the scalar node `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("div_scalar", "divisor", format!("{:?} is not a scalar", self.shape(s))));
        }
        let sv = self.value(s).item();
        Ok(self.unary(x, Op::DivScalar(x, s), |v| v / sv))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| {
            let v = v.clamp(-SIGMOID_LOGIT_LIMIT, SIGMOID_LOGIT_LIMIT);
            1.0 / (1.0 + (-v).exp())
        })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", "rank", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if sb[0] != k {
            return Err(Error::shape("matmul", "inner", format!("{sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::row_major(self.value(a).data(), k),
            MatRef::row_major(self.value(b).data(), n),
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", "rank", format!("{s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![cols, rows], out), Op::Transpose { x, rows, cols }, &[x]))
    }

    /// Scale each row (trailing axis) to unit length: `x / max(‖x‖, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let value = self.value(x);
        let c = *value.shape().last().expect("normalize_rows on scalar");
        let mut out = value.data().to_vec();
        for row in out.chunks_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let value = Tensor::from_parts(value.shape().to_vec(), out);
        self.push(value, Op::NormalizeRows { x, eps }, &[x])
    }

    /// Cosine similarity along the trailing axis:
    /// `a·b / (max(‖a‖, eps) · max(‖b‖, eps))`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let shape = self.shape(a).to_vec();
        let Some((&c, lead)) = shape.split_last() else {
            return Err(Error::shape("cosine_similarity", "rank", "scalar operands"));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out = av
            .chunks(c)
            .zip(bv.chunks(c))
            .map(|(x, y)| {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                dot / (norm(x).max(eps) * norm(y).max(eps))
            })
            .collect();
        Ok(self.push(Tensor::from_parts(lead.to_vec(), out), Op::Cosine { a, b, eps }, &[a, b]))
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_matmul(
    graph: &Graph,
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let av = graph.value(a).data();
    let bv = graph.value(b).data();
    // dA = dC · Bᵀ
    sink.add(a, |ga| gemm(m, n, k, MatRef::row_major(g, n), MatRef::transposed(bv, n), 1.0, ga));
    // dB = Aᵀ · dC
    sink.add(b, |gb| gemm(k, m, n, MatRef::transposed(av, k), MatRef::row_major(g, n), 1.0, gb));
}

pub(super) fn backward_normalize_rows(graph: &Graph, x: Var, eps: f64, out: &[f64], g: &[f64], sink: &mut GradSink<'_>) {
    let xv = graph.value(x);
    let c = *xv.shape().last().unwrap();
    let xd = xv.data();
    sink.add(x, |gx| {
        for ((gx_row, x_row), (y_row, g_row)) in gx.chunks_mut(c).zip(xd.chunks(c)).zip(out.chunks(c).zip(g.chunks(c))) {
            let nrm = norm(x_row);
            if nrm > eps {
                let proj: f64 = y_row.iter().zip(g_row).map(|(y, g)| y * g).sum();
                for ((d, &gi), &yi) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                    *d += (gi - yi * proj) / nrm;
                }
            } else {
                for (d, &gi) in gx_row.iter_mut().zip(g_row) {
                    *d += gi / eps;
                }
            }
        }
    });
}

pub(super) fn backward_cosine(graph: &Graph, a: Var, b: Var, eps: f64, g: &[f64], sink: &mut GradSink<'_>) {
    let c = *graph.shape(a).last().unwrap();
    let av = graph.value(a).data();
    let bv = graph.value(b).data();
    // d/dx [x·y / (nx ny)] = y/(nx ny) - (x·y) x / (nx³ ny) when ‖x‖ > eps.
    let partial = |x: &[f64], y: &[f64], gi: f64, dst: &mut [f64]| {
        let nx_raw = norm(x);
        let nx = nx_raw.max(eps);
        let ny = norm(y).max(eps);
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let radial = if nx_raw > eps { dot / (nx * nx * nx * ny) } else { 0.0 };
        for ((d, &xi), &yi) in dst.iter_mut().zip(x).zip(y) {
            *d += gi * (yi / (nx * ny) - radial * xi);
        }
    };
    sink.add(a, |ga| {
        for (((dst, x), y), &gi) in ga.chunks_mut(c).zip(av.chunks(c)).zip(bv.chunks(c)).zip(g) {
            partial(x, y, gi, dst);
        }
    });
    sink.add(b, |gb| {
        for (((dst, y), x), &gi) in gb.chunks_mut(c).zip(bv.chunks(c)).zip(av.chunks(c)).zip(g) {
            partial(y, x, gi, dst);
        }
    });
}

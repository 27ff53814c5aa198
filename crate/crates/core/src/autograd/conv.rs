//! 2-D cross-correlation via im2col + GEMM.

use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::gemm::{gemm, MatRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// `floor((size + 2·padding − kernel) / stride) + 1`, or `None` when the
    /// padded input is smaller than the kernel.
    pub fn output_size(&self, size: usize, kernel: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        (padded >= kernel && self.stride > 0).then(|| (padded - kernel) / self.stride + 1)
    }
}

#[derive(Debug)]
pub(crate) struct ConvNode {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: Geometry,
    /// im2col buffer per batch item, `[N, C·kh·kw, oh·ow]`.
    cols: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }
}

impl Graph {
    /// `input [N,C,H,W]`, `weight [O,C,kh,kw]`, `bias [O]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", "input rank", format!("expected [N,C,H,W], got {xs:?}")));
        }
        if ws.len() != 4 {
            return Err(Error::shape("conv2d", "kernel rank", format!("expected [O,C,kh,kw], got {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                "channels",
                format!("input has {} channels, kernel expects {}", xs[1], ws[1]),
            ));
        }
        if spec.stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    "bias",
                    format!("expected [{}], got {:?}", ws[0], self.shape(b)),
                ));
            }
        }
        let oh = spec
            .output_size(xs[2], ws[2])
            .ok_or_else(|| Error::shape("conv2d", "height", format!("input {} < kernel {}", xs[2] + 2 * spec.padding, ws[2])))?;
        let ow = spec
            .output_size(xs[3], ws[3])
            .ok_or_else(|| Error::shape("conv2d", "width", format!("input {} < kernel {}", xs[3] + 2 * spec.padding, ws[3])))?;
        let geom = Geometry {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            oh,
            ow,
            spec,
        };

        let (patch, l) = (geom.patch(), geom.out_len());
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut cols = Vec::with_capacity(geom.n * patch * l);
        let mut out = vec![0.0; geom.n * geom.o * l];
        let in_stride = geom.c * geom.h * geom.w;
        for b in 0..geom.n {
            im2col(&x[b * in_stride..(b + 1) * in_stride], &geom, &mut cols);
            let col = &cols[b * patch * l..];
            let dst = &mut out[b * geom.o * l..(b + 1) * geom.o * l];
            if let Some(bias) = bias {
                for (row, &bv) in dst.chunks_mut(l).zip(self.value(bias).data()) {
                    row.fill(bv);
                }
            }
            gemm(
                geom.o,
                patch,
                l,
                MatRef::row_major(wt, patch),
                MatRef::row_major(col, l),
                1.0,
                dst,
            );
        }
        let value = Tensor::from_parts(vec![geom.n, geom.o, oh, ow], out);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let node = ConvNode {
            input,
            weight,
            bias,
            geom,
            cols,
        };
        Ok(self.push(value, Op::Conv2d(node), &inputs))
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + k − pad` lies
/// inside `0..w`.
fn valid_range(k: usize, g: &Geometry) -> (usize, usize) {
    let (s, pad) = (g.spec.stride, g.spec.padding);
    let lo = if pad > k { (pad - k).div_ceil(s) } else { 0 };
    let hi = if g.w + pad > k { ((g.w + pad - k - 1) / s + 1).min(g.ow) } else { 0 };
    (lo.min(hi), hi)
}

/// Appends the `[C·kh·kw, oh·ow]` column matrix of one image to `cols`.
fn im2col(x: &[f64], g: &Geometry, cols: &mut Vec<f64>) {
    let (stride, pad) = (g.spec.stride, g.spec.padding as isize);
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_range(kj, g);
                for oy in 0..g.oh {
                    let iy = (oy * stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        cols.resize(cols.len() + g.ow, 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    cols.resize(cols.len() + lo, 0.0);
                    let base = lo * stride + kj - g.spec.padding;
                    if stride == 1 {
                        cols.extend_from_slice(&src[base..base + hi - lo]);
                    } else {
                        cols.extend((0..hi - lo).map(|i| src[base + i * stride]));
                    }
                    cols.resize(cols.len() + g.ow - hi, 0.0);
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, dx: &mut [f64]) {
    let l = g.out_len();
    let (stride, pad) = (g.spec.stride, g.spec.padding as isize);
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                let (lo, hi) = valid_range(kj, g);
                for oy in 0..g.oh {
                    let iy = (oy * stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let base = lo * stride + kj - g.spec.padding;
                    if stride == 1 {
                        for (d, &v) in line[base..base + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in s.iter().enumerate() {
                            line[base + i * stride] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn backward(graph: &Graph, node: &ConvNode, g: &[f64], sink: &mut GradSink<'_>) {
    let geom = node.geom;
    let (patch, l) = (geom.patch(), geom.out_len());
    let per_out = geom.o * l;

    if let Some(bias) = node.bias {
        sink.add(bias, |gb| {
            for b in 0..geom.n {
                for (o, row) in g[b * per_out..(b + 1) * per_out].chunks(l).enumerate() {
                    gb[o] += row.iter().sum::<f64>();
                }
            }
        });
    }

    sink.add(node.weight, |gw| {
        for b in 0..geom.n {
            let col = &node.cols[b * patch * l..(b + 1) * patch * l];
            gemm(
                geom.o,
                l,
                patch,
                MatRef::row_major(&g[b * per_out..(b + 1) * per_out], l),
                MatRef::transposed(col, l),
                1.0,
                gw,
            );
        }
    });

    let wt = graph.value(node.weight).data();
    let in_stride = geom.c * geom.h * geom.w;
    sink.add(node.input, |gx| {
        SCRATCH.with_borrow_mut(|dcols| {
            if dcols.len() < patch * l {
                dcols.resize(patch * l, 0.0);
            }
            let dcols = &mut dcols[..patch * l];
            for b in 0..geom.n {
                // beta = 0 overwrites the scratch without reading it.
                gemm(
                    patch,
                    geom.o,
                    l,
                    MatRef::transposed(wt, patch),
                    MatRef::row_major(&g[b * per_out..(b + 1) * per_out], l),
                    0.0,
                    dcols,
                );
                col2im(dcols, &geom, &mut gx[b * in_stride..(b + 1) * in_stride]);
            }
        });
    });
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

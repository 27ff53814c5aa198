use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source taps for one output coordinate of an align-corners-false bilinear resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            Tap {
                i0,
                i1,
                frac: src - i0 as f64,
            }
        })
        .collect()
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, "rank", format!("expected [N,C,H,W], got {shape:?}"))),
    }
}

/// Bilinear resampling of a `[N,C,H,W]` tensor without graph tracking.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = dims4("resize_bilinear", input.shape())?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_bilinear", format!("zero target extent {out_h}x{out_w}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("resize_bilinear", "empty input"));
    }
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in src.chunks(h * w) {
        for y in &ty {
            let (r0, r1) = (&plane[y.i0 * w..(y.i0 + 1) * w], &plane[y.i1 * w..(y.i1 + 1) * w]);
            for x in &tx {
                let top = r0[x.i0] * (1.0 - x.frac) + r0[x.i1] * x.frac;
                let bottom = r1[x.i0] * (1.0 - x.frac) + r1[x.i1] * x.frac;
                out.push(top * (1.0 - y.frac) + bottom * y.frac);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, out_h, out_w], out))
}

/// Non-overlapping `k×k` mean pooling without graph tracking.
pub fn avg_pool(input: &Tensor, k: usize) -> Result<Tensor> {
    let [n, c, h, w] = dims4("avg_pool", input.shape())?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape("avg_pool", "spatial", format!("{h}x{w} not divisible by {k}")));
    }
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for (plane, dst) in input.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..h {
            for x in 0..w {
                dst[(y / k) * ow + x / k] += plane[y * w + x] * norm;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

impl Graph {
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = resize_bilinear(self.value(x), out_h, out_w)?;
        Ok(self.push(value, Op::Resize { x }, &[x]))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let value = avg_pool(self.value(x), k)?;
        Ok(self.push(value, Op::AvgPool { x, k }, &[x]))
    }

    /// Concatenate `[N,Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::invalid("concat_channels", "no inputs"));
        };
        let [n, _, h, w] = dims4("concat_channels", self.shape(first))?;
        let mut total_c = 0;
        for &v in inputs {
            let [vn, vc, vh, vw] = dims4("concat_channels", self.shape(v))?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    "batch/spatial",
                    format!("{:?} vs {:?}", self.shape(first), self.shape(v)),
                ));
            }
            total_c += vc;
        }
        let mut out = Vec::with_capacity(n * total_c * h * w);
        for b in 0..n {
            for &v in inputs {
                let c = self.shape(v)[1];
                let per = c * h * w;
                out.extend_from_slice(&self.value(v).data()[b * per..(b + 1) * per]);
            }
        }
        let value = Tensor::from_parts(vec![n, total_c, h, w], out);
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec() }, inputs))
    }

    /// Channels `start..end` of a `[N,C,H,W]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let [n, c, h, w] = dims4("slice_channels", self.shape(x))?;
        if start >= end || end > c {
            return Err(Error::shape("slice_channels", "channels", format!("{start}..{end} of {c}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * (end - start) * h * w);
        for b in 0..n {
            out.extend_from_slice(&src[(b * c + start) * h * w..(b * c + end) * h * w]);
        }
        let value = Tensor::from_parts(vec![n, end - start, h, w], out);
        Ok(self.push(value, Op::SliceChannels { x, start }, &[x]))
    }
}

pub(super) fn backward_concat(graph: &Graph, inputs: &[Var], g: &[f64], sink: &mut GradSink<'_>) {
    let shape = graph.shape(inputs[0]);
    let (n, hw) = (shape[0], shape[2] * shape[3]);
    let total_c: usize = inputs.iter().map(|&v| graph.shape(v)[1]).sum();
    let mut offset = 0;
    for &v in inputs {
        let c = graph.shape(v)[1];
        sink.add(v, |gv| {
            for b in 0..n {
                let src = &g[(b * total_c + offset) * hw..(b * total_c + offset + c) * hw];
                for (d, s) in gv[b * c * hw..(b + 1) * c * hw].iter_mut().zip(src) {
                    *d += s;
                }
            }
        });
        offset += c;
    }
}

pub(super) fn backward_slice(graph: &Graph, x: Var, start: usize, out_shape: &[usize], g: &[f64], sink: &mut GradSink<'_>) {
    let c = graph.shape(x)[1];
    let (n, sc, hw) = (out_shape[0], out_shape[1], out_shape[2] * out_shape[3]);
    sink.add(x, |gx| {
        for b in 0..n {
            let dst = &mut gx[(b * c + start) * hw..(b * c + start + sc) * hw];
            for (d, s) in dst.iter_mut().zip(&g[b * sc * hw..(b + 1) * sc * hw]) {
                *d += s;
            }
        }
    });
}

pub(super) fn backward_resize(graph: &Graph, x: Var, out_shape: &[usize], g: &[f64], sink: &mut GradSink<'_>) {
    let xs = graph.shape(x);
    let (h, w) = (xs[2], xs[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    sink.add(x, |gx| {
        for (plane, gp) in gx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
            for (oy, y) in ty.iter().enumerate() {
                for (ox, t) in tx.iter().enumerate() {
                    let v = gp[oy * ow + ox];
                    let (wy0, wy1) = ((1.0 - y.frac) * v, y.frac * v);
                    plane[y.i0 * w + t.i0] += wy0 * (1.0 - t.frac);
                    plane[y.i0 * w + t.i1] += wy0 * t.frac;
                    plane[y.i1 * w + t.i0] += wy1 * (1.0 - t.frac);
                    plane[y.i1 * w + t.i1] += wy1 * t.frac;
                }
            }
        }
    });
}

pub(super) fn backward_avg_pool(graph: &Graph, x: Var, k: usize, g: &[f64], sink: &mut GradSink<'_>) {
    let xs = graph.shape(x);
    let (h, w) = (xs[2], xs[3]);
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    sink.add(x, |gx| {
        for (plane, gp) in gx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
            for y in 0..h {
                for xx in 0..w {
                    plane[y * w + xx] += gp[(y / k) * ow + xx / k] * norm;
                }
            }
        }
    });
}

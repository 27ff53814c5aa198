//! Style encoder and the region-discrimination (style) loss.
//!
//! With ground-truth mask `M` at feature resolution, `s_inter` is the mean
//! cosine similarity over ordered pixel pairs lying in different regions and
//! `s_intra` the mean over ordered pairs in the same region (self-pairs
//! excluded). The loss is `max(s_inter − s_intra + margin, 0)`.
//!
//! Both means are evaluated through the identity
//! `Σ_{p∈R1, q∈R2} cos(F_p, F_q) = (Σ_{R1} f̂) · (Σ_{R2} f̂)` with `f̂ = F/‖F‖`,
//! which is linear in the number of pixels.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::colorspace::{ColorSpace, ImagePlane};
use crate::error::{Error, Result};
use crate::mask::RegionMask;
use crate::nn::{Bound, ConvLayer, Init, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN: f64 = 0.5;
pub const COSINE_EPS: f64 = 1e-8;
/// Spatial reduction between the input image and the style feature map.
pub const FEATURE_STRIDE: usize = 8;

/// Widths of the four encoder blocks before the final block.
pub const ENCODER_WIDTHS: [usize; 3] = [16, 32, 64];

/// Four 3×3 conv blocks with strides 1, 2, 2, 2.
#[derive(Clone, Debug)]
pub struct TinyEncoder {
    pub blocks: [ConvLayer; 4],
    /// ReLU after the last block. The style encoder keeps its output linear so
    /// cosine similarities can go negative.
    pub final_relu: bool,
}

/// Per-scale encoder outputs at strides 1, 2, 4 and 8, each `[1,C,H/s,W/s]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures {
    pub scales: [Var; 4],
}

impl EncoderFeatures {
    pub fn last(&self) -> Var {
        self.scales[3]
    }
}

impl TinyEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, out_channels: usize, final_relu: bool, rng: &mut R) -> Self {
        let [w0, w1, w2] = ENCODER_WIDTHS;
        let mut block = |i: usize, cin: usize, cout: usize, stride: usize, init: Init| {
            ConvLayer::same(store, &format!("{name}.block{i}"), cin, cout, 3, stride, init, rng)
        };
        let blocks = [
            block(0, 3, w0, 1, Init::Relu),
            block(1, w0, w1, 2, Init::Relu),
            block(2, w1, w2, 2, Init::Relu),
            block(3, w2, out_channels, 2, Init::Relu),
        ];
        Self { blocks, final_relu }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks[3].out_channels
    }

    pub fn forward(&self, graph: &mut Graph, params: &Bound, x: Var) -> Result<EncoderFeatures> {
        let shape = graph.shape(x);
        let (h, w) = (shape[2], shape[3]);
        if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
            return Err(Error::invalid(
                "encode",
                format!("input {h}x{w} is not divisible by {FEATURE_STRIDE}"),
            ));
        }
        let mut cur = x;
        let mut scales = [x; 4];
        for (i, block) in self.blocks.iter().enumerate() {
            cur = block.forward(graph, params, cur)?;
            if i < 3 || self.final_relu {
                cur = graph.relu(cur);
            }
            scales[i] = cur;
        }
        Ok(EncoderFeatures { scales })
    }
}

/// `[C, h, w]` per-pixel style embedding at 1/8 resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleFeatureMap {
    features: Tensor,
}

impl StyleFeatureMap {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.shape().len() != 3 {
            return Err(Error::shape("StyleFeatureMap::new", "rank", format!("expected [C,h,w], got {:?}", features.shape())));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[2]
    }

    /// Feature vector at flat pixel index `p`.
    pub fn vector(&self, p: usize) -> Vec<f64> {
        let hw = self.height() * self.width();
        (0..self.channels()).map(|c| self.features.data()[c * hw + p]).collect()
    }
}

/// Run the style encoder on a color-mapped image outside any training graph.
pub fn encode_style(img: &ImagePlane, encoder: &TinyEncoder, store: &ParamStore) -> Result<StyleFeatureMap> {
    if img.space() != ColorSpace::Mapped {
        return Err(Error::invalid("encode_style", format!("input is {:?}, expected Mapped", img.space())));
    }
    let (h, w) = (img.height(), img.width());
    let mut g = Graph::new();
    let params = store.bind_frozen(&mut g);
    let x = g.constant(img.pixels().clone().reshape([1, 3, h, w])?);
    let feats = encoder.forward(&mut g, &params, x)?;
    let out = g.value(feats.last());
    let s = out.shape().to_vec();
    StyleFeatureMap::new(out.clone().reshape([s[1], s[2], s[3]])?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleLossReport {
    /// `None` when one region is empty.
    pub s_inter: Option<f64>,
    /// `None` when no region holds two pixels.
    pub s_intra: Option<f64>,
    pub loss: f64,
    pub margin: f64,
}

impl StyleLossReport {
    /// Style loss carries no signal for this sample.
    pub fn degenerate(&self) -> bool {
        self.s_inter.is_none() || self.s_intra.is_none()
    }
}

/// Graph nodes produced by [`style_loss_var`].
#[derive(Clone, Copy, Debug)]
pub struct StyleLossTerms {
    pub loss: Var,
    pub report: StyleLossReport,
}

fn check_mask(op: &'static str, h: usize, w: usize, mask: &RegionMask) -> Result<()> {
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::shape(
            op,
            "mask",
            format!("features are {h}x{w}, mask is {}x{}", mask.height(), mask.width()),
        ));
    }
    if !mask.is_binary() {
        return Err(Error::invalid(op, "mask must be binary"));
    }
    Ok(())
}

/// `[1,C,h,w]` feature node → row-normalized `[n,C]` node.
pub fn normalized_pixels(graph: &mut Graph, features: Var) -> Result<Var> {
    let s = graph.shape(features).to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::shape("normalized_pixels", "rank", format!("expected [1,C,h,w], got {s:?}")));
    }
    let flat = graph.reshape(features, &[s[1], s[2] * s[3]])?;
    let rows = graph.transpose(flat)?;
    Ok(graph.normalize_rows(rows, COSINE_EPS))
}

/// Differentiable style loss on a `[1,C,h,w]` feature node.
pub fn style_loss_var(graph: &mut Graph, features: Var, mask: &RegionMask, margin: f64) -> Result<StyleLossTerms> {
    if !(margin > 0.0 && margin <= 2.0) {
        return Err(Error::invalid("style_loss", format!("margin {margin} outside (0, 2]")));
    }
    let s = graph.shape(features).to_vec();
    check_mask("style_loss", s[2], s[3], mask)?;
    let n = s[2] * s[3];
    let n1 = mask.data().iter().filter(|&&v| v == 1.0).count();
    let n0 = n - n1;
    let intra_pairs = n1 * n1.saturating_sub(1) + n0 * n0.saturating_sub(1);

    let fhat = normalized_pixels(graph, features)?;
    let inside = graph.constant(Tensor::new([1, n], mask.data().to_vec())?);
    let outside = graph.constant(Tensor::new([1, n], mask.data().iter().map(|v| 1.0 - v).collect())?);
    let u1 = graph.matmul(inside, fhat)?;
    let u0 = graph.matmul(outside, fhat)?;

    let s_inter = if n1 > 0 && n0 > 0 {
        let cross = graph.mul(u1, u0)?;
        let cross = graph.sum(cross);
        Some(graph.scale(cross, 1.0 / (n1 * n0) as f64))
    } else {
        None
    };
    let s_intra = if intra_pairs > 0 {
        let c = s[1];
        let sq = graph.mul(fhat, fhat)?;
        let ones = graph.constant(Tensor::full([c, 1], 1.0));
        let row_sq = graph.matmul(sq, ones)?;
        let all = graph.constant(Tensor::full([1, n], 1.0));
        let self_pairs = graph.matmul(all, row_sq)?;
        let self_pairs = graph.sum(self_pairs);
        let in_sq = graph.mul(u1, u1)?;
        let in_sq = graph.sum(in_sq);
        let out_sq = graph.mul(u0, u0)?;
        let out_sq = graph.sum(out_sq);
        let both = graph.add(in_sq, out_sq)?;
        let pairs = graph.sub(both, self_pairs)?;
        Some(graph.scale(pairs, 1.0 / intra_pairs as f64))
    } else {
        None
    };

    let report_of = |g: &Graph, v: Option<Var>| v.map(|v| g.value(v).item());
    let (inter_v, intra_v) = (report_of(graph, s_inter), report_of(graph, s_intra));
    let loss = match (s_inter, s_intra) {
        (Some(inter), Some(intra)) => {
            let gap = graph.sub(inter, intra)?;
            let shifted = graph.affine(gap, 1.0, margin);
            graph.relu(shifted)
        }
        _ => graph.constant(Tensor::scalar(0.0)),
    };
    let report = StyleLossReport {
        s_inter: inter_v,
        s_intra: intra_v,
        loss: graph.value(loss).item(),
        margin,
    };
    Ok(StyleLossTerms { loss, report })
}

/// `(s_inter, s_intra)` for a feature map and a binary mask at its resolution.
pub fn style_pair_similarities(features: &StyleFeatureMap, mask: &RegionMask) -> Result<(Option<f64>, Option<f64>)> {
    let r = style_loss(features, mask, DEFAULT_MARGIN)?;
    Ok((r.s_inter, r.s_intra))
}

pub fn style_loss(features: &StyleFeatureMap, mask: &RegionMask, margin: f64) -> Result<StyleLossReport> {
    let mut g = Graph::new();
    let s = features.features().shape().to_vec();
    let f = g.constant(features.features().clone().reshape([1, s[0], s[1], s[2]])?);
    Ok(style_loss_var(&mut g, f, mask, margin)?.report)
}

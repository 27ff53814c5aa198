//! Mask losses and the total training objective.
//!
//! Every mask prediction (the final one and each auxiliary stage) is scored
//! with BCE + SSIM + soft IoU against the ground truth average-pooled to its
//! resolution. The total adds the style loss and all mask terms with unit
//! weights.

use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::mask::RegionMask;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[BCE_EPS, 1 − BCE_EPS]` before the logs.
pub const BCE_EPS: f64 = 1e-7;
/// Union below which soft IoU treats both masks as empty.
pub const IOU_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl SsimParams {
    /// Normalized 2-D Gaussian window, row-major `window×window`.
    pub fn gaussian_window(&self) -> Vec<f64> {
        let k = self.window;
        let c = (k as f64 - 1.0) / 2.0;
        let g1: Vec<f64> = (0..k)
            .map(|i| (-(i as f64 - c).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g1.iter().sum();
        let g1: Vec<f64> = g1.iter().map(|v| v / s).collect();
        let mut out = Vec::with_capacity(k * k);
        for a in &g1 {
            for b in &g1 {
                out.push(a * b);
            }
        }
        out
    }
}

fn check_pair(graph: &Graph, op: &'static str, pred: Var, gt: Var) -> Result<[usize; 2]> {
    let (ps, gs) = (graph.shape(pred), graph.shape(gt));
    if ps.len() != 4 || ps[0] != 1 || ps[1] != 1 {
        return Err(Error::shape(op, "pred", format!("expected [1,1,H,W], got {ps:?}")));
    }
    if ps != gs {
        return Err(Error::shape(op, "gt", format!("pred is {ps:?}, gt is {gs:?}")));
    }
    Ok([ps[2], ps[3]])
}

/// Mean binary cross-entropy.
pub fn bce_loss(graph: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    check_pair(graph, "bce_loss", pred, gt)?;
    let p = graph.clamp(pred, BCE_EPS, 1.0 - BCE_EPS);
    let lp = graph.ln(p);
    let q = graph.one_minus(p);
    let lq = graph.ln(q);
    let not_gt = graph.one_minus(gt);
    let a = graph.mul(gt, lp)?;
    let b = graph.mul(not_gt, lq)?;
    let ll = graph.add(a, b)?;
    let m = graph.mean(ll);
    Ok(graph.scale(m, -1.0))
}

/// `1 − mean SSIM`. Images smaller than the window use one global window
/// with uniform weights.
pub fn ssim_loss(graph: &mut Graph, pred: Var, gt: Var, params: &SsimParams) -> Result<Var> {
    let [h, w] = check_pair(graph, "ssim_loss", pred, gt)?;
    let (kh, kw, weights) = if h >= params.window && w >= params.window {
        (params.window, params.window, params.gaussian_window())
    } else {
        (h, w, vec![1.0 / (h * w) as f64; h * w])
    };
    let window = graph.constant(Tensor::new([1, 1, kh, kw], weights)?);
    let spec = Conv2dSpec::new(1, 0);
    let blur = |g: &mut Graph, x: Var| g.conv2d(x, window, None, spec);

    let mx = blur(graph, pred)?;
    let my = blur(graph, gt)?;
    let xx = graph.mul(pred, pred)?;
    let yy = graph.mul(gt, gt)?;
    let xy = graph.mul(pred, gt)?;
    let exx = blur(graph, xx)?;
    let eyy = blur(graph, yy)?;
    let exy = blur(graph, xy)?;

    let mx2 = graph.mul(mx, mx)?;
    let my2 = graph.mul(my, my)?;
    let mxy = graph.mul(mx, my)?;
    let vx = graph.sub(exx, mx2)?;
    let vy = graph.sub(eyy, my2)?;
    let cxy = graph.sub(exy, mxy)?;

    let l_num = graph.affine(mxy, 2.0, params.c1);
    let c_num = graph.affine(cxy, 2.0, params.c2);
    let num = graph.mul(l_num, c_num)?;
    let l_den = graph.add(mx2, my2)?;
    let l_den = graph.affine(l_den, 1.0, params.c1);
    let c_den = graph.add(vx, vy)?;
    let c_den = graph.affine(c_den, 1.0, params.c2);
    let den = graph.mul(l_den, c_den)?;
    let map = graph.div(num, den)?;
    let m = graph.mean(map);
    Ok(graph.one_minus(m))
}

/// `1 − Σpg / (Σp + Σg − Σpg)`; zero when both masks are empty.
pub fn iou_loss(graph: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    check_pair(graph, "iou_loss", pred, gt)?;
    let pg = graph.mul(pred, gt)?;
    let inter = graph.sum(pg);
    let sp = graph.sum(pred);
    let sg = graph.sum(gt);
    let both = graph.add(sp, sg)?;
    let union = graph.sub(both, inter)?;
    if graph.value(union).item() <= IOU_EPS {
        return Ok(graph.constant(Tensor::scalar(0.0)));
    }
    let ratio = graph.div(inter, union)?;
    Ok(graph.one_minus(ratio))
}

/// BCE, SSIM and IoU loss values of one mask prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaskTerms {
    pub bce: f64,
    pub ssim: f64,
    pub iou: f64,
}

impl MaskTerms {
    pub fn sum(&self) -> f64 {
        self.bce + self.ssim + self.iou
    }
}

/// BCE + SSIM + IoU of `pred` against `gt`.
pub fn mask_loss(graph: &mut Graph, pred: Var, gt: Var, params: &SsimParams) -> Result<(Var, MaskTerms)> {
    let b = bce_loss(graph, pred, gt)?;
    let s = ssim_loss(graph, pred, gt, params)?;
    let i = iou_loss(graph, pred, gt)?;
    let terms = MaskTerms {
        bce: graph.value(b).item(),
        ssim: graph.value(s).item(),
        iou: graph.value(i).item(),
    };
    let bs = graph.add(b, s)?;
    Ok((graph.add(bs, i)?, terms))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub style: f64,
    pub final_mask: MaskTerms,
    /// Auxiliary stages, coarsest first.
    pub stages: Vec<MaskTerms>,
    pub total: f64,
}

impl LossBreakdown {
    /// Sum of every recorded term; equals `total` up to rounding.
    pub fn sum_of_terms(&self) -> f64 {
        self.style + self.final_mask.sum() + self.stages.iter().map(MaskTerms::sum).sum::<f64>()
    }
}

/// Assemble the total objective. `aux` holds one `[1,1,h,w]` prediction per
/// decoder stage; `gt` is full resolution and is average-pooled to each
/// stage's size.
pub fn total_loss(
    graph: &mut Graph,
    style: Option<Var>,
    final_mask: Var,
    aux: &[Var],
    gt: &RegionMask,
    params: &SsimParams,
) -> Result<(Var, LossBreakdown)> {
    let gt_full = graph.constant(gt.to_tensor());
    let (mut total, final_terms) = mask_loss(graph, final_mask, gt_full, params)?;
    let mut stages = Vec::with_capacity(aux.len());
    for &a in aux {
        let s = graph.shape(a).to_vec();
        if s.len() != 4 || s[2] == 0 || !gt.height().is_multiple_of(s[2]) || gt.height() / s[2] != gt.width() / s[3] || !gt.width().is_multiple_of(s[3]) {
            return Err(Error::shape(
                "total_loss",
                "aux mask",
                format!("{s:?} is not an integer downscale of {}x{}", gt.height(), gt.width()),
            ));
        }
        let pooled = gt.pooled(gt.height() / s[2])?;
        let g = graph.constant(pooled.to_tensor());
        let (l, terms) = mask_loss(graph, a, g, params)?;
        total = graph.add(total, l)?;
        stages.push(terms);
    }
    let style_value = match style {
        Some(s) => {
            total = graph.add(total, s)?;
            graph.value(s).item()
        }
        None => 0.0,
    };
    let breakdown = LossBreakdown {
        style: style_value,
        final_mask: final_terms,
        stages,
        total: graph.value(total).item(),
    };
    Ok((total, breakdown))
}

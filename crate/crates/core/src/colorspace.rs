//! RGB ↔ YUV conversion and the learned per-pixel affine color mapping.
//!
//! The color mapping predicts six channels `P = [A, B]` from the YUV image
//! with a small conv block (3×3 then 7×7) and maps every channel at every
//! position independently: `Î[c,p] = A[c,p] · I[c,p] + B[c,p]`.

use rand::Rng;

use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ConvLayer, Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Yuv,
    Mapped,
}

/// Rows produce (Y, U, V) from (R, G, B).
pub type ColorMatrix = [[f64; 3]; 3];

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

/// BT.601 full range: `Y = Kr·R + Kg·G + Kb·B`, `U = ½(B − Y)/(1 − Kb)`,
/// `V = ½(R − Y)/(1 − Kr)`.
pub const BT601_FULL: ColorMatrix = [
    [KR, KG, KB],
    [-0.5 * KR / (1.0 - KB), -0.5 * KG / (1.0 - KB), 0.5],
    [0.5, -0.5 * KG / (1.0 - KR), -0.5 * KB / (1.0 - KR)],
];

/// Inverse of a 3×3 matrix via cofactors.
pub fn invert3(m: &ColorMatrix) -> Option<ColorMatrix> {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let det = m[0][0] * c(1, 2, 1, 2) - m[0][1] * c(1, 2, 0, 2) + m[0][2] * c(1, 2, 0, 1);
    if det.abs() < 1e-14 {
        return None;
    }
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    Some(adj.map(|row| row.map(|v| v / det)))
}

/// A `[3, H, W]` image tagged with its color space.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    space: ColorSpace,
    pixels: Tensor,
}

impl ImagePlane {
    pub fn new(space: ColorSpace, pixels: Tensor) -> Result<Self> {
        if pixels.shape().len() != 3 || pixels.shape()[0] != 3 {
            return Err(Error::shape(
                "ImagePlane::new",
                "channels",
                format!("expected [3,H,W], got {:?}", pixels.shape()),
            ));
        }
        if space == ColorSpace::Rgb && pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("ImagePlane::new", "RGB values must lie in [0, 1]"));
        }
        Ok(Self { space, pixels })
    }

    pub fn rgb(pixels: Tensor) -> Result<Self> {
        Self::new(ColorSpace::Rgb, pixels)
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Channel values at `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let (h, w) = (self.height(), self.width());
        let d = self.pixels.data();
        [0, 1, 2].map(|c| d[(c * h + y) * w + x])
    }
}

fn apply_matrix(m: &ColorMatrix, pixels: &Tensor) -> Tensor {
    let hw = pixels.shape()[1] * pixels.shape()[2];
    let src = pixels.data();
    let mut out = vec![0.0; src.len()];
    for p in 0..hw {
        let v = [src[p], src[hw + p], src[2 * hw + p]];
        for (r, row) in m.iter().enumerate() {
            out[r * hw + p] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
        }
    }
    Tensor::from_parts(pixels.shape().to_vec(), out)
}

pub fn rgb_to_yuv(img: &ImagePlane) -> Result<ImagePlane> {
    if img.space != ColorSpace::Rgb {
        return Err(Error::invalid("rgb_to_yuv", format!("input is {:?}, expected Rgb", img.space)));
    }
    Ok(ImagePlane {
        space: ColorSpace::Yuv,
        pixels: apply_matrix(&BT601_FULL, &img.pixels),
    })
}

pub fn yuv_to_rgb(img: &ImagePlane) -> Result<ImagePlane> {
    if img.space != ColorSpace::Yuv {
        return Err(Error::invalid("yuv_to_rgb", format!("input is {:?}, expected Yuv", img.space)));
    }
    let inv = invert3(&BT601_FULL).expect("BT.601 matrix is invertible");
    Ok(ImagePlane {
        space: ColorSpace::Rgb,
        pixels: apply_matrix(&inv, &img.pixels),
    })
}

/// Differentiable RGB → YUV on a `[N,3,H,W]` node (a fixed 1×1 convolution).
pub fn rgb_to_yuv_var(graph: &mut Graph, rgb: Var) -> Result<Var> {
    let kernel: Vec<f64> = BT601_FULL.iter().flatten().copied().collect();
    let kernel = graph.constant(Tensor::new([3, 3, 1, 1], kernel)?);
    graph.conv2d(rgb, kernel, None, Conv2dSpec::new(1, 0))
}

/// `Î = A ⊙ I + B` on `[N,3,H,W]` nodes.
pub fn apply_color_map(graph: &mut Graph, yuv: Var, a: Var, b: Var) -> Result<Var> {
    let scaled = graph.mul(a, yuv)?;
    graph.add(scaled, b)
}

pub const COLOR_MAP_HIDDEN: usize = 16;

/// The conv block producing `P = [A, B]`: 3 → 16 (3×3) → ReLU → 6 (7×7).
#[derive(Clone, Debug)]
pub struct ColorMapParams {
    pub conv3: ConvLayer,
    pub conv7: ConvLayer,
}

/// Output of the color mapping, all `[N,3,H,W]`.
#[derive(Clone, Copy, Debug)]
pub struct ColorMapOutput {
    pub mapped: Var,
    pub scale: Var,
    pub shift: Var,
}

impl ColorMapParams {
    /// Bias of the A channels starts at 1 and of the B channels at 0, so the
    /// initial mapping is close to the identity.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        let conv3 = ConvLayer::same(store, &format!("{name}.conv3"), 3, COLOR_MAP_HIDDEN, 3, 1, Init::Relu, rng);
        let conv7 = ConvLayer::same(store, &format!("{name}.conv7"), COLOR_MAP_HIDDEN, 6, 7, 1, Init::Scaled(0.1), rng);
        store.get_mut(conv7.bias).data_mut()[..3].fill(1.0);
        Self { conv3, conv7 }
    }

    pub fn forward(&self, graph: &mut Graph, params: &Bound, yuv: Var) -> Result<ColorMapOutput> {
        let hidden = self.conv3.forward(graph, params, yuv)?;
        let hidden = graph.relu(hidden);
        let p = self.conv7.forward(graph, params, hidden)?;
        let scale = graph.slice_channels(p, 0, 3)?;
        let shift = graph.slice_channels(p, 3, 6)?;
        let mapped = apply_color_map(graph, yuv, scale, shift)?;
        Ok(ColorMapOutput { mapped, scale, shift })
    }
}

/// Map a single YUV image outside any training graph.
pub fn color_map(img: &ImagePlane, cm: &ColorMapParams, store: &ParamStore) -> Result<ImagePlane> {
    if img.space != ColorSpace::Yuv {
        return Err(Error::invalid("color_map", format!("input is {:?}, expected Yuv", img.space)));
    }
    let (h, w) = (img.height(), img.width());
    let mut g = Graph::new();
    let params = store.bind_frozen(&mut g);
    let x = g.constant(img.pixels.clone().reshape([1, 3, h, w])?);
    let out = cm.forward(&mut g, &params, x)?;
    let pixels = g.value(out.mapped).clone().reshape([3, h, w])?;
    Ok(ImagePlane {
        space: ColorSpace::Mapped,
        pixels,
    })
}

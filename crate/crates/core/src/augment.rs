//! Label-preserving training augmentation.
//!
//! A dihedral transform (flips and, for square inputs, transposition) plus a
//! permutation of the RGB channels. Both leave the relation between a shifted
//! region and its surroundings intact: the color shift is per channel, and
//! the scene has no preferred orientation.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::colorspace::ImagePlane;
use crate::error::{Error, Result};
use crate::mask::RegionMask;
use crate::style::FEATURE_STRIDE;
use crate::tensor::Tensor;
use crate::train::TrainSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub flip_y: bool,
    pub flip_x: bool,
    /// Swap rows and columns; square inputs only.
    pub transpose: bool,
    /// Output channel `c` reads input channel `channels[c]`.
    pub channels: [usize; 3],
}

impl Augment {
    pub const IDENTITY: Augment = Augment {
        flip_y: false,
        flip_x: false,
        transpose: false,
        channels: [0, 1, 2],
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, square: bool) -> Self {
        let mut channels = [0, 1, 2];
        channels.shuffle(rng);
        Self {
            flip_y: rng.gen(),
            flip_x: rng.gen(),
            transpose: square && rng.gen(),
            channels,
        }
    }

    /// Source index of every output position of an `h×w` grid.
    fn gather(&self, h: usize, w: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let y1 = if self.flip_y { h - 1 - y } else { y };
                let x1 = if self.flip_x { w - 1 - x } else { x };
                let (sy, sx) = if self.transpose { (x1, y1) } else { (y1, x1) };
                idx.push(sy * w + sx);
            }
        }
        idx
    }

    pub fn apply(&self, s: &TrainSample) -> Result<TrainSample> {
        let (h, w) = (s.image.height(), s.image.width());
        if self.transpose && h != w {
            return Err(Error::invalid("Augment::apply", format!("cannot transpose a {h}x{w} image")));
        }
        let idx = self.gather(h, w);
        let hw = h * w;
        let px = s.image.pixels().data();
        let mut data = Vec::with_capacity(3 * hw);
        for &c in &self.channels {
            data.extend(idx.iter().map(|&i| px[c * hw + i]));
        }
        let image = ImagePlane::new(s.image.space(), Tensor::new([3, h, w], data)?)?;
        let mask = RegionMask::new(h, w, idx.iter().map(|&i| s.mask.data()[i]).collect())?;
        let semantic = match &s.semantic {
            None => None,
            Some(m) => {
                // Pooling blocks are aligned, so cells map onto cells.
                let cells = self.gather(h / FEATURE_STRIDE, w / FEATURE_STRIDE);
                let n = cells.len();
                if m.shape() != [n, n] {
                    return Err(Error::shape("Augment::apply", "semantic", format!("{:?} for {n} cells", m.shape())));
                }
                let d = m.data();
                let out = cells
                    .iter()
                    .flat_map(|&i| cells.iter().map(move |&j| d[i * n + j]))
                    .collect();
                Some(Tensor::new([n, n], out)?)
            }
        };
        Ok(TrainSample { image, mask, semantic })
    }
}

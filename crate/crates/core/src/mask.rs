use crate::autograd::avg_pool;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `H×W` map in `[0, 1]`. Ground truth is binary; predictions are probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "RegionMask::new",
                "data length",
                format!("{height}x{width} needs {} values, got {}", height * width, data.len()),
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("RegionMask::new", "values must lie in [0, 1]"));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    /// Accepts `[H,W]`, `[1,H,W]` or `[1,1,H,W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
            return Err(Error::shape("RegionMask::from_tensor", "rank", format!("{s:?}")));
        }
        Self::new(s[s.len() - 2], s[s.len() - 1], t.data().to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn positives(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    /// Mean value, i.e. the foreground fraction for a binary mask.
    pub fn area_fraction(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// `[1,1,H,W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, 1, self.height, self.width], self.data.clone())
    }

    /// Soft `k×k` average pooling.
    pub fn pooled(&self, k: usize) -> Result<RegionMask> {
        let t = avg_pool(&self.to_tensor(), k)?;
        Ok(Self {
            height: self.height / k,
            width: self.width / k,
            data: t.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    /// Average-pool by `k`, then threshold at 0.5. Thin regions survive as
    /// long as they cover half a cell.
    pub fn downsample_binary(&self, k: usize) -> Result<RegionMask> {
        let mut m = self.pooled(k)?;
        m.data.iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
        Ok(m)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RegionMask {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

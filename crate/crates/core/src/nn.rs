//! Named parameter storage and convolution layers.

use rand::Rng;

use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors. Order is registration order and is the
/// order used by checkpoints and optimizers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Replace every tensor by name; shapes must match exactly.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, tensor) in other {
            let slot = self
                .by_name_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if slot.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}`: shape {:?} does not match model shape {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor.clone();
        }
        Ok(())
    }

    /// Put every parameter on `graph` as a gradient-tracking leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| graph.param(t.clone())).collect(),
        }
    }

    /// Put every parameter on `graph` as a constant.
    pub fn bind_frozen(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| graph.constant(t.clone())).collect(),
        }
    }
}

/// Graph handles for a [`ParamStore`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in [`ParamStore`] order, e.g. parameters rebuilt from other nodes.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-uniform weights, zero bias.
    Relu,
    /// He-uniform weights scaled by the factor, zero bias.
    Scaled(f64),
    Zeros,
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: Conv2dSpec,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = match init {
            Init::Relu => Tensor::uniform(shape, -bound, bound, rng),
            Init::Scaled(s) => Tensor::uniform(shape, -bound * s, bound * s, rng),
            Init::Zeros => Tensor::zeros(shape),
        };
        let weight = store.register(format!("{name}.weight"), weight);
        let bias = store.register(format!("{name}.bias"), Tensor::zeros([out_channels]));
        Self {
            weight,
            bias,
            spec,
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// `padding = kernel / 2`, stride as given.
    pub fn same<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Self::new(
            store,
            name,
            in_channels,
            out_channels,
            kernel,
            Conv2dSpec::new(stride, kernel / 2),
            init,
            rng,
        )
    }

    pub fn forward(&self, graph: &mut Graph, params: &Bound, x: Var) -> Result<Var> {
        graph.conv2d(x, params.var(self.weight), Some(params.var(self.bias)), self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

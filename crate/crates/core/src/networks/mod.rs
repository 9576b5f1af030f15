//! Translation generator, real/fake discriminator and the segmenter.
//!
//! Parameters live in a [`ParamSet`], an ordered list of named tensors. Each
//! network keeps a layout of indices into its set; a forward pass binds the
//! set onto a [`Graph`] and reads the bound variables by index.

mod discriminator;
mod generator;
mod segmenter;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

pub use discriminator::{Discriminator, DiscriminatorConfig, REAL};
pub use generator::{Generator, GeneratorConfig};
pub use segmenter::{Segmenter, SegmenterConfig};

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.02;
/// Negative slope of every leaky ReLU in the GAN.
pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }

    /// Gradients for previously bound variables; zeros where none flowed.
    pub fn grads(&self, g: &Graph<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(&v, t)| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }

    /// Replaces the values with those of `other`, which must carry the same
    /// names and shapes in the same order.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::CheckpointMismatch(format!(
                "parameter names differ ({} vs {} entries)",
                self.names.len(),
                other.names.len()
            )));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "`{}`: expected shape {:?}, found {:?}",
                    self.names[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// Which of the three architectures a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Generator,
    Discriminator,
    Segmenter,
}

impl NetworkKind {
    pub fn tag(self) -> &'static str {
        match self {
            NetworkKind::Generator => "generator",
            NetworkKind::Discriminator => "discriminator",
            NetworkKind::Segmenter => "segmenter",
        }
    }
}

/// Common surface of the three networks.
pub trait Network<T: Element> {
    const KIND: NetworkKind;

    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
    /// Serialized architecture config stored alongside checkpoints.
    fn config_json(&self) -> String;
}

/// A convolution (optionally transposed) followed by optional instance norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvLayer {
    pub weight: usize,
    pub bias: usize,
    pub norm: Option<(usize, usize)>,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

pub(crate) struct LayerSpec<'a> {
    pub name: &'a str,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
    pub norm: bool,
}

impl ConvLayer {
    pub fn build<T: Element>(
        params: &mut ParamSet<T>,
        spec: LayerSpec<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let wshape = if spec.transposed {
            [spec.in_ch, spec.out_ch, spec.kernel, spec.kernel]
        } else {
            [spec.out_ch, spec.in_ch, spec.kernel, spec.kernel]
        };
        let weight = params.push(
            format!("{}.weight", spec.name),
            Tensor::randn(wshape, 0.0, INIT_STD, rng),
        );
        let bias = params.push(format!("{}.bias", spec.name), Tensor::zeros([spec.out_ch]));
        let norm = spec.norm.then(|| {
            let g = params.push(format!("{}.norm.gamma", spec.name), Tensor::ones([spec.out_ch]));
            let b = params.push(format!("{}.norm.beta", spec.name), Tensor::zeros([spec.out_ch]));
            (g, b)
        });
        Self {
            weight,
            bias,
            norm,
            stride: spec.stride,
            padding: spec.padding,
            transposed: spec.transposed,
        }
    }

    /// Convolution plus instance norm when configured; no activation.
    pub fn apply<T: Element>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let (w, b) = (vars[self.weight], vars[self.bias]);
        let y = if self.transposed {
            g.conv_transpose2d(x, w, Some(b), self.stride, self.padding)?
        } else {
            g.conv2d(x, w, Some(b), self.stride, self.padding)?
        };
        match self.norm {
            Some((gm, bt)) => g.instance_norm(y, vars[gm], vars[bt], NORM_EPS),
            None => Ok(y),
        }
    }
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn check_input<T: Element>(
    g: &Graph<T>,
    x: Var,
    channels: usize,
    what: &str,
) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != channels {
        return Err(Error::Shape(format!(
            "{what}: expected N×{channels}×H×W input, got {s:?}"
        )));
    }
    Ok((s[2], s[3]))
}

/// Runs `f` on a fresh graph with constant parameters and returns the output.
pub(crate) fn infer<T: Element>(
    params: &ParamSet<T>,
    x: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, &[Var], Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = f(&mut g, &vars, xv)?;
    Ok(g.value(y).clone())
}

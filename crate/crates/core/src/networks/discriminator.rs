use serde::{Deserialize, Serialize};

use super::{check_input, infer, seeded_rng, ConvLayer, LayerSpec, Network, NetworkKind, ParamSet};
use super::{INIT_STD, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Column of the discriminator output holding the "real" probability.
pub const REAL: usize = 1;

/// Five stride-2 convolutions, global average pooling to a feature vector,
/// and an affine map to two logits turned into probabilities by softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    /// Widths of the five conv layers; the last one is the feature size.
    pub widths: [usize; 5],
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [64, 128, 256, 256, 256],
        }
    }
}

impl DiscriminatorConfig {
    /// Smallest spatial extent that survives five halvings.
    pub const MIN_INPUT: usize = 32;

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Param(
                "discriminator channel counts must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.widths[4]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T = f32> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
    convs: Vec<ConvLayer>,
    head_w: usize,
    head_b: usize,
}

impl<T: Element> Discriminator<T> {
    pub fn init(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::new();
        let mut convs = Vec::with_capacity(5);
        let mut in_ch = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(ConvLayer::build(
                &mut params,
                LayerSpec {
                    name: &format!("conv{i}"),
                    in_ch,
                    out_ch: w,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                    transposed: false,
                    norm: i > 0,
                },
                &mut rng,
            ));
            in_ch = w;
        }
        let head_w = params.push(
            "head.weight",
            Tensor::randn([2, config.feature_size()], 0.0, INIT_STD, &mut rng),
        );
        let head_b = params.push("head.bias", Tensor::zeros([2]));
        Ok(Self {
            config,
            params,
            convs,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn num_conv_layers(&self) -> usize {
        self.convs.len()
    }

    /// Which conv layers carry instance normalization.
    pub fn normalized_layers(&self) -> Vec<bool> {
        self.convs.iter().map(|c| c.norm.is_some()).collect()
    }

    pub fn cast<U: Element>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            params: self.params.cast(),
            convs: self.convs.clone(),
            head_w: self.head_w,
            head_b: self.head_b,
        }
    }

    /// Pooled feature vector, `N × feature_size`.
    pub fn features(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let (h, w) = check_input(g, x, self.config.in_channels, "discriminator")?;
        if h < DiscriminatorConfig::MIN_INPUT || w < DiscriminatorConfig::MIN_INPUT {
            return Err(Error::Shape(format!(
                "discriminator input {h}x{w} is smaller than {0}x{0}, the minimum for five stride-2 layers",
                DiscriminatorConfig::MIN_INPUT
            )));
        }
        let mut cur = x;
        for layer in &self.convs {
            let y = layer.apply(g, vars, cur)?;
            cur = g.leaky_relu(y, LEAKY_SLOPE)?;
        }
        g.global_avg_pool(cur)
    }

    /// `N×2` probabilities; column [`REAL`] is the probability of "real".
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let f = self.features(g, vars, x)?;
        let logits = g.linear(f, vars[self.head_w], vars[self.head_b])?;
        g.softmax(logits, 1)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        infer(&self.params, x, |g, vars, xv| self.forward(g, vars, xv))
    }

    #[cfg(test)]
    pub(crate) fn head_indices(&self) -> (usize, usize) {
        (self.head_w, self.head_b)
    }
}

impl<T: Element> Network<T> for Discriminator<T> {
    const KIND: NetworkKind = NetworkKind::Discriminator;

    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn config_json(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }
}

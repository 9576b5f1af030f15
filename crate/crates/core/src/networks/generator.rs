use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_input, infer, seeded_rng, ConvLayer, LayerSpec, Network, NetworkKind, ParamSet};
use super::LEAKY_SLOPE;
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// U-Net style encoder-decoder: four stride-2 convolution blocks down, four
/// stride-2 transposed-convolution blocks up, 1×1 convolution + tanh head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Output widths of the four down blocks.
    pub widths: [usize; 4],
    pub dropout_p: f64,
    /// Number of leading decoder blocks that apply dropout while training.
    pub dropout_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            out_channels: 3,
            widths: [64, 128, 256, 512],
            dropout_p: 0.5,
            dropout_blocks: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn with_base_width(base: usize) -> Self {
        Self {
            widths: [base, base * 2, base * 4, base * 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Param("generator channel counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Param(format!(
                "generator dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.dropout_blocks > 4 {
            return Err(Error::Param("generator has only 4 decoder blocks".into()));
        }
        Ok(())
    }

    /// Input channels of each decoder block, including the skip features.
    pub fn up_in_channels(&self) -> [usize; 4] {
        let w = self.widths;
        let out = self.up_out_channels();
        [w[3], out[0] + w[2], out[1] + w[1], out[2] + w[0]]
    }

    pub fn up_out_channels(&self) -> [usize; 4] {
        let w = self.widths;
        [w[2], w[1], w[0], w[0]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T = f32> {
    config: GeneratorConfig,
    params: ParamSet<T>,
    down: Vec<ConvLayer>,
    up: Vec<ConvLayer>,
    head: ConvLayer,
}

impl<T: Element> Generator<T> {
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::new();
        let mut down = Vec::with_capacity(4);
        let mut in_ch = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            down.push(ConvLayer::build(
                &mut params,
                LayerSpec {
                    name: &format!("down{i}"),
                    in_ch,
                    out_ch: w,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                    transposed: false,
                    norm: true,
                },
                &mut rng,
            ));
            in_ch = w;
        }
        let mut up = Vec::with_capacity(4);
        for (i, (cin, cout)) in config
            .up_in_channels()
            .into_iter()
            .zip(config.up_out_channels())
            .enumerate()
        {
            up.push(ConvLayer::build(
                &mut params,
                LayerSpec {
                    name: &format!("up{i}"),
                    in_ch: cin,
                    out_ch: cout,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                    transposed: true,
                    norm: true,
                },
                &mut rng,
            ));
        }
        let head = ConvLayer::build(
            &mut params,
            LayerSpec {
                name: "head",
                in_ch: config.widths[0],
                out_ch: config.out_channels,
                kernel: 1,
                stride: 1,
                padding: 0,
                transposed: false,
                norm: false,
            },
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            down,
            up,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn num_down_blocks(&self) -> usize {
        self.down.len()
    }

    pub fn num_up_blocks(&self) -> usize {
        self.up.len()
    }

    pub fn cast<U: Element>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
            down: self.down.clone(),
            up: self.up.clone(),
            head: self.head,
        }
    }

    /// Forward pass on bound parameters `vars`. The output of up-block
    /// `4 - i` is concatenated with the output of down-block `i` (1-based)
    /// before entering the next up-block.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let (h, w) = check_input(g, x, self.config.in_channels, "generator")?;
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "generator input {h}x{w}: height and width must be non-zero multiples of 16"
            )));
        }
        let mut skips = Vec::with_capacity(4);
        let mut cur = x;
        for layer in &self.down {
            let y = layer.apply(g, vars, cur)?;
            cur = g.leaky_relu(y, LEAKY_SLOPE)?;
            skips.push(cur);
        }
        for (j, layer) in self.up.iter().enumerate() {
            let input = if j == 0 {
                cur
            } else {
                g.concat_channels(&[cur, skips[3 - j]])?
            };
            let y = layer.apply(g, vars, input)?;
            let mut y = g.relu(y)?;
            if j < self.config.dropout_blocks {
                y = g.dropout(y, self.config.dropout_p, training, rng)?;
            }
            cur = y;
        }
        let y = self.head.apply(g, vars, cur)?;
        g.tanh(y)
    }

    /// Inference-mode translation of a batch.
    pub fn translate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut rng = seeded_rng(0);
        infer(&self.params, x, |g, vars, xv| {
            self.forward(g, vars, xv, false, &mut rng)
        })
    }
}

impl<T: Element> Network<T> for Generator<T> {
    const KIND: NetworkKind = NetworkKind::Generator;

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

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            widths: [4, 8, 8, 8],
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn parameter_count_matches_layer_formula() {
        let cfg = GeneratorConfig::default();
        let gen = Generator::<f32>::init(cfg.clone(), 3).unwrap();
        // conv block: cin·cout·k² weights, cout bias, 2·cout norm params
        let block = |cin: usize, cout: usize, k: usize, norm: bool| {
            cin * cout * k * k + cout + if norm { 2 * cout } else { 0 }
        };
        let down = block(3, 64, 4, true)
            + block(64, 128, 4, true)
            + block(128, 256, 4, true)
            + block(256, 512, 4, true);
        let up = block(512, 256, 4, true)
            + block(512, 128, 4, true)
            + block(256, 64, 4, true)
            + block(128, 64, 4, true);
        let head = block(64, 3, 1, false);
        assert_eq!(gen.params().num_scalars(), down + up + head);
        assert_eq!(down + up + head, 6_299_139);
    }

    #[test]
    fn same_seed_gives_identical_params() {
        let a = Generator::<f32>::init(tiny(), 11).unwrap();
        let b = Generator::<f32>::init(tiny(), 11).unwrap();
        let c = Generator::<f32>::init(tiny(), 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn norm_params_start_at_identity() {
        let gen = Generator::<f32>::init(tiny(), 1).unwrap();
        for (name, t) in gen.params().iter() {
            if name.ends_with("gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            } else if name.ends_with("beta") || name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn output_shape_and_range() {
        let gen = Generator::<f32>::init(tiny(), 5).unwrap();
        let mut rng = seeded_rng(9);
        let x = Tensor::rand_uniform([1, 3, 64, 64], -1.0, 1.0, &mut rng);
        let y = gen.translate(&x).unwrap();
        assert_eq!(y.shape(), &[1, 3, 64, 64]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(gen.translate(&x).unwrap(), y);
    }

    #[test]
    fn rejects_sizes_not_divisible_by_16() {
        let gen = Generator::<f32>::init(tiny(), 5).unwrap();
        let err = gen.translate(&Tensor::zeros([1, 3, 40, 48])).unwrap_err();
        assert!(err.to_string().contains("multiples of 16"), "{err}");
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = tiny();
        cfg.dropout_p = 1.0;
        assert!(Generator::<f32>::init(cfg, 0).is_err());
        let mut cfg = tiny();
        cfg.widths[2] = 0;
        assert!(Generator::<f32>::init(cfg, 0).is_err());
    }
}

use serde::{Deserialize, Serialize};

use super::{check_input, infer, seeded_rng, ConvLayer, LayerSpec, Network, NetworkKind, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Compact encoder-decoder segmenter with skip connections.
///
/// ```text
/// stem   3x3 s1   in -> w0          H
/// enc1   4x4 s2   w0 -> w1          H/2
/// enc2   4x4 s2   w1 -> w2          H/4
/// mid    3x3 s1   w2 -> w2          H/4
/// dec2   4x4 s2T  w2 -> w1  ++enc1  H/2
/// dec1   4x4 s2T 2w1 -> w0  ++stem  H
/// head   1x1     2w0 -> classes     H
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub widths: [usize; 3],
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 6,
            widths: [32, 64, 128],
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Param("segmenter channel counts must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Param(format!(
                "segmenter needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmenter<T = f32> {
    config: SegmenterConfig,
    params: ParamSet<T>,
    stem: ConvLayer,
    enc1: ConvLayer,
    enc2: ConvLayer,
    mid: ConvLayer,
    dec2: ConvLayer,
    dec1: ConvLayer,
    head: ConvLayer,
}

impl<T: Element> Segmenter<T> {
    pub fn init(config: SegmenterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::new();
        let [w0, w1, w2] = config.widths;
        let mut layer = |name: &str, in_ch, out_ch, kernel, stride, transposed, norm| {
            ConvLayer::build(
                &mut params,
                LayerSpec {
                    name,
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding: if kernel == 1 { 0 } else { 1 },
                    transposed,
                    norm,
                },
                &mut rng,
            )
        };
        let stem = layer("stem", config.in_channels, w0, 3, 1, false, true);
        let enc1 = layer("enc1", w0, w1, 4, 2, false, true);
        let enc2 = layer("enc2", w1, w2, 4, 2, false, true);
        let mid = layer("mid", w2, w2, 3, 1, false, true);
        let dec2 = layer("dec2", w2, w1, 4, 2, true, true);
        let dec1 = layer("dec1", 2 * w1, w0, 4, 2, true, true);
        let head = layer("head", 2 * w0, config.num_classes, 1, 1, false, false);
        Ok(Self {
            config,
            params,
            stem,
            enc1,
            enc2,
            mid,
            dec2,
            dec1,
            head,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn cast<U: Element>(&self) -> Segmenter<U> {
        Segmenter {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem,
            enc1: self.enc1,
            enc2: self.enc2,
            mid: self.mid,
            dec2: self.dec2,
            dec1: self.dec1,
            head: self.head,
        }
    }

    /// Per-pixel class logits, `N × classes × H × W`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let (h, w) = check_input(g, x, self.config.in_channels, "segmenter")?;
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "segmenter input {h}x{w}: height and width must be non-zero multiples of 4"
            )));
        }
        let block = |layer: &ConvLayer, g: &mut Graph<T>, x: Var| -> Result<Var> {
            let y = layer.apply(g, vars, x)?;
            g.relu(y)
        };
        let s = block(&self.stem, g, x)?;
        let e1 = block(&self.enc1, g, s)?;
        let e2 = block(&self.enc2, g, e1)?;
        let m = block(&self.mid, g, e2)?;
        let d2 = block(&self.dec2, g, m)?;
        let d2 = g.concat_channels(&[d2, e1])?;
        let d1 = block(&self.dec1, g, d2)?;
        let d1 = g.concat_channels(&[d1, s])?;
        self.head.apply(g, vars, d1)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        infer(&self.params, x, |g, vars, xv| self.forward(g, vars, xv))
    }

    /// Argmax class per pixel, `N·H·W` entries.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        self.logits(x)?.argmax_channels()
    }
}

impl<T: Element> Network<T> for Segmenter<T> {
    const KIND: NetworkKind = NetworkKind::Segmenter;

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

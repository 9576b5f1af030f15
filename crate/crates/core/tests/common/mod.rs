//! Central finite-difference gradient checks shared by the gradient tests
//! and the acceptance target.
#![allow(dead_code)]

use geoadapt::networks::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Network, Segmenter,
    SegmenterConfig,
};
use geoadapt::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 3e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Gradients smaller than this are compared on absolute error (round-off
/// of the differences is ~1e-11 at this step).
pub const GRAD_FLOOR: f64 = 1e-5;
/// Coordinates sampled per input tensor in network-sized checks.
pub const NETWORK_SAMPLES: usize = 24;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose ±step crossed a kink (different branch pattern).
    pub skipped: usize,
    /// (input index, coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn merge(&mut self, o: GradReport) {
        if o.max_rel > self.max_rel {
            self.max_rel = o.max_rel;
            self.worst = o.worst;
        }
        self.checked += o.checked;
        self.skipped += o.skipped;
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel < TOLERANCE
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Value of `sum(w ⊙ f(inputs))` (or `f` itself when scalar) and the branch
/// fingerprint of the forward pass.
fn project(f: &Build<'_>, inputs: &[Tensor<f64>], w: &Option<Tensor<f64>>, grad: bool) -> (Graph<f64>, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grad)).collect();
    let y = f(&mut g, &vars).expect("forward");
    let loss = match w {
        None => y,
        Some(w) => {
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv).expect("projection");
            g.sum(p).expect("sum")
        }
    };
    (g, vars, loss)
}

/// Compares reverse-mode gradients of every input with central differences.
/// `sample` caps the coordinates checked per input (random subset).
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    sample: Option<usize>,
    rng: &mut ChaCha8Rng,
    f: &Build<'_>,
) -> GradReport {
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars).expect("forward");
        g.value(y).clone()
    };
    let w = (!probe.is_scalar()).then(|| Tensor::from_fn(probe.shape().to_vec(), |_| rng.random_range(-1.0..1.0)));
    let (mut g, vars, loss) = project(f, inputs, &w, true);
    let base_fp = g.branch_fingerprint();
    g.backward(loss).expect("backward");
    let mut report = GradReport::default();
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        let n = t.numel();
        let coords: Vec<usize> = match sample {
            Some(s) if s < n => (0..s).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let eval = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[k].data_mut()[i] += delta;
                let (g, _, l) = project(f, &moved, &w, false);
                (g.value(l).item(), g.branch_fingerprint())
            };
            // fourth-order central stencil: tiny instance-norm planes are
            // strongly curved on the scale of sqrt(eps)
            let pts = [2.0, 1.0, -1.0, -2.0].map(|m| eval(m * STEP));
            if pts.iter().any(|p| p.1 != base_fp) {
                report.skipped += 1;
                continue;
            }
            let numeric = (-pts[0].0 + 8.0 * pts[1].0 - 8.0 * pts[2].0 + pts[3].0) / (12.0 * STEP);
            let e = rel_err(analytic.data()[i], numeric);
            if e > report.max_rel {
                report.max_rel = e;
                report.worst = Some((k, i, analytic.data()[i], numeric));
            }
            report.checked += 1;
        }
    }
    report
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.3..2.0))
}

/// Primitives covered by [`check_primitive`].
pub const PRIMITIVES: &[&str] = &[
    "conv2d",
    "conv_transpose2d",
    "leaky_relu",
    "relu",
    "tanh",
    "sigmoid",
    "log",
    "clamp",
    "scale",
    "add_scalar",
    "add",
    "sub",
    "mul",
    "dropout",
    "instance_norm",
    "softmax",
    "sum",
    "mean",
    "l1_distance",
    "concat_channels",
    "global_avg_pool",
    "linear",
    "column",
    "cross_entropy",
];

pub const NETWORKS: &[&str] = &["generator", "discriminator", "segmenter"];

/// Runs `trials` checks of one primitive on random shapes.
pub fn check_primitive(name: &str, trials: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradReport::default();
    for trial in 0..trials {
        let r = &mut rng;
        let n = r.random_range(1..=2usize);
        let c = r.random_range(1..=3usize);
        let h = r.random_range(2..=5usize);
        let w = r.random_range(2..=5usize);
        let flat = [r.random_range(1..=12usize)];
        let img = [n, c, h, w];
        let rep = match name {
            "conv2d" => {
                let k = r.random_range(1..=h.min(w).min(3));
                let stride = r.random_range(1..=2);
                let pad = r.random_range(0..=1);
                let o = r.random_range(1..=3);
                let x = randn(r, &img);
                let wt = randn(r, &[o, c, k, k]);
                let b = randn(r, &[o]);
                gradcheck(&[x, wt, b], None, r, &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad))
            }
            "conv_transpose2d" => {
                let stride = r.random_range(1..=2);
                let k = r.random_range(stride..=4);
                let pad = r.random_range(0..=(k - 1) / 2);
                let o = r.random_range(1..=3);
                let x = randn(r, &img);
                let wt = randn(r, &[c, o, k, k]);
                let b = randn(r, &[o]);
                gradcheck(&[x, wt, b], None, r, &move |g, v| {
                    g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad)
                })
            }
            "leaky_relu" => gradcheck(&[randn(r, &img)], None, r, &|g, v| g.leaky_relu(v[0], 0.2)),
            "relu" => gradcheck(&[randn(r, &img)], None, r, &|g, v| g.relu(v[0])),
            "tanh" => gradcheck(&[randn(r, &img)], None, r, &|g, v| g.tanh(v[0])),
            "sigmoid" => gradcheck(&[randn(r, &img)], None, r, &|g, v| g.sigmoid(v[0])),
            "log" => gradcheck(&[positive(r, &img)], None, r, &|g, v| g.log(v[0])),
            "clamp" => gradcheck(&[randn(r, &img)], None, r, &|g, v| g.clamp(v[0], -0.5, 0.5)),
            "scale" => {
                let s = r.random_range(-3.0..3.0);
                gradcheck(&[randn(r, &img)], None, r, &move |g, v| g.scale(v[0], s))
            }
            "add_scalar" => gradcheck(&[randn(r, &flat)], None, r, &|g, v| g.add_scalar(v[0], 0.7)),
            "add" => gradcheck(&[randn(r, &img), randn(r, &img)], None, r, &|g, v| g.add(v[0], v[1])),
            "sub" => gradcheck(&[randn(r, &img), randn(r, &img)], None, r, &|g, v| g.sub(v[0], v[1])),
            "mul" => gradcheck(&[randn(r, &img), randn(r, &img)], None, r, &|g, v| g.mul(v[0], v[1])),
            "dropout" => {
                let s = seed ^ trial as u64;
                gradcheck(&[randn(r, &img)], None, r, &move |g, v| {
                    let mut d = ChaCha8Rng::seed_from_u64(s);
                    g.dropout(v[0], 0.5, true, &mut d)
                })
            }
            "instance_norm" => {
                let x = randn(r, &img);
                let gm = randn(r, &[c]);
                let bt = randn(r, &[c]);
                gradcheck(&[x, gm, bt], None, r, &|g, v| g.instance_norm(v[0], v[1], v[2], 1e-5))
            }
            "softmax" => {
                if trial % 2 == 0 {
                    gradcheck(&[randn(r, &[n, c + 1])], None, r, &|g, v| g.softmax(v[0], 1))
                } else {
                    gradcheck(&[randn(r, &img)], None, r, &|g, v| g.softmax(v[0], 1))
                }
            }
            "sum" => gradcheck(&[randn(r, &img)], None, r, &|g, v| g.sum(v[0])),
            "mean" => gradcheck(&[randn(r, &img)], None, r, &|g, v| g.mean(v[0])),
            "l1_distance" => gradcheck(&[randn(r, &img), randn(r, &img)], None, r, &|g, v| {
                g.l1_distance(v[0], v[1])
            }),
            "concat_channels" => {
                let c2 = r.random_range(1..=3);
                gradcheck(&[randn(r, &img), randn(r, &[n, c2, h, w])], None, r, &|g, v| {
                    g.concat_channels(&[v[0], v[1]])
                })
            }
            "global_avg_pool" => gradcheck(&[randn(r, &img)], None, r, &|g, v| g.global_avg_pool(v[0])),
            "linear" => {
                let f = flat[0];
                let o = r.random_range(1..=4);
                gradcheck(&[randn(r, &[n, f]), randn(r, &[o, f]), randn(r, &[o])], None, r, &|g, v| {
                    g.linear(v[0], v[1], v[2])
                })
            }
            "column" => {
                let k = r.random_range(2..=4);
                let col = r.random_range(0..k);
                gradcheck(&[randn(r, &[n, k])], None, r, &move |g, v| g.column(v[0], col))
            }
            "cross_entropy" => {
                let classes = c + 1;
                let labels: Vec<usize> = (0..n * h * w).map(|_| r.random_range(0..classes)).collect();
                let ignore = (trial % 3 == 0).then_some(0);
                let x = Tensor::from_fn([n, classes, h, w], |_| r.random_range(-2.0..2.0));
                gradcheck(&[x], None, r, &move |g, v| {
                    let (l, counted) = g.cross_entropy(v[0], &labels, ignore)?;
                    Ok(if counted == 0 { g.scale(l, 1.0)? } else { l })
                })
            }
            other => panic!("unknown primitive {other}"),
        };
        total.merge(rep);
    }
    total
}

fn with_input<N: Network<f64>>(net: &N, x: Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut v = net.params().tensors().to_vec();
    v.push(x);
    v
}

/// Runs `trials` checks of a tiny network (random widths and input sizes)
/// with respect to every parameter tensor and the input.
pub fn check_network(name: &str, trials: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradReport::default();
    for trial in 0..trials {
        let r = &mut rng;
        let n = r.random_range(1..=2usize);
        let cin = r.random_range(1..=3usize);
        let rep = match name {
            "generator" => {
                let b = r.random_range(1..=2usize);
                let cfg = GeneratorConfig {
                    in_channels: cin,
                    out_channels: r.random_range(1..=3),
                    widths: [b, b + 1, b + 2, b + 1],
                    ..GeneratorConfig::default()
                };
                let net = Generator::<f32>::init(cfg, trial as u64).unwrap().cast::<f64>();
                let side = 16 * r.random_range(1..=2usize);
                let x = randn(r, &[n, cin, side, 16]);
                let k = net.params().len();
                let s = seed ^ trial as u64;
                gradcheck(&with_input(&net, x), Some(NETWORK_SAMPLES), r, &|g, v| {
                    let mut d = ChaCha8Rng::seed_from_u64(s);
                    net.forward(g, &v[..k], v[k], trial % 2 == 0, &mut d)
                })
            }
            "discriminator" => {
                let cfg = DiscriminatorConfig {
                    in_channels: cin,
                    widths: [
                        r.random_range(1..=3),
                        r.random_range(1..=3),
                        r.random_range(1..=3),
                        r.random_range(1..=3),
                        r.random_range(1..=3),
                    ],
                };
                let net = Discriminator::<f32>::init(cfg, trial as u64).unwrap().cast::<f64>();
                let side = 32 + 16 * r.random_range(0..=1usize);
                let x = randn(r, &[n, cin, side, 32]);
                let k = net.params().len();
                gradcheck(&with_input(&net, x), Some(NETWORK_SAMPLES), r, &|g, v| net.forward(g, &v[..k], v[k]))
            }
            "segmenter" => {
                let cfg = SegmenterConfig {
                    in_channels: cin,
                    num_classes: r.random_range(2..=4),
                    widths: [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3)],
                };
                let classes = cfg.num_classes;
                let net = Segmenter::<f32>::init(cfg, trial as u64).unwrap().cast::<f64>();
                let (h, w) = (4 * r.random_range(1..=3usize), 4 * r.random_range(1..=2usize));
                let x = randn(r, &[n, cin, h, w]);
                let labels: Vec<usize> = (0..n * h * w).map(|_| r.random_range(0..classes)).collect();
                let k = net.params().len();
                gradcheck(&with_input(&net, x), Some(NETWORK_SAMPLES), r, &|g, v| {
                    let logits = net.forward(g, &v[..k], v[k])?;
                    Ok(g.cross_entropy(logits, &labels, None)?.0)
                })
            }
            other => panic!("unknown network {other}"),
        };
        total.merge(rep);
    }
    total
}

/// Independent per-pixel recount of every metric, without a confusion
/// matrix: `(pixel accuracy, per-class [acc, P, R, F1, IoU], macro means)`.
pub struct OracleMetrics {
    pub pixel_accuracy: f64,
    pub per_class: Vec<[Option<f64>; 5]>,
    pub macro_means: [Option<f64>; 5],
}

pub fn metric_oracle(pred: &[usize], truth: &[usize], classes: usize) -> OracleMetrics {
    let total = pred.len();
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let div = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    let per_class: Vec<[Option<f64>; 5]> = (0..classes)
        .map(|c| {
            let mut tp = 0;
            let mut fp = 0;
            let mut fneg = 0;
            let mut tn = 0;
            for (&p, &t) in pred.iter().zip(truth) {
                match (p == c, t == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => tn += 1,
                }
            }
            let precision = div(tp, tp + fp);
            let recall = div(tp, tp + fneg);
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) => Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }),
                _ => None,
            };
            [div(tp + tn, total), precision, recall, f1, div(tp, tp + fp + fneg)]
        })
        .collect();
    let macro_means = std::array::from_fn(|m| {
        let vals: Vec<f64> = per_class.iter().filter_map(|v| v[m]).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    });
    OracleMetrics {
        pixel_accuracy: correct as f64 / total as f64,
        per_class,
        macro_means,
    }
}

/// Random `(pred, truth, classes)` on a 32×32 grid; predictions are
/// correlated with the truth so every regime (hits, misses, absent
/// classes) occurs.
pub fn random_prediction_pair(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>, usize) {
    let classes = rng.random_range(2..=6);
    let truth_classes = rng.random_range(1..=classes);
    let truth: Vec<usize> = (0..32 * 32).map(|_| rng.random_range(0..truth_classes)).collect();
    let keep = rng.random_range(0.0..1.0);
    let pred = truth
        .iter()
        .map(|&t| if rng.random::<f64>() < keep { t } else { rng.random_range(0..classes) })
        .collect();
    (pred, truth, classes)
}

/// Every field of `report` equal to the oracle recount.
pub fn report_matches_oracle(report: &geoadapt::metrics::MetricsReport, o: &OracleMetrics) -> bool {
    report.pixel_accuracy == o.pixel_accuracy
        && report.per_class.len() == o.per_class.len()
        && report.per_class.iter().zip(&o.per_class).all(|(m, v)| m.values() == *v)
        && report
            .macro_avg
            .values()
            .iter()
            .zip(&o.macro_means)
            .all(|(m, v)| m.mean == *v)
}

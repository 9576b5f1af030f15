//! Step 2: unpaired source↔target translation with two generators, two
//! discriminators and a cycle-consistency term.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{make_batch, Log};
use crate::data::{DomainDataset, LabeledPatch, Split};
use crate::error::{Error, Result};
use crate::losses::{
    cycle_loss, discriminator_loss, generator_adv_loss, total_generator_objective, GanLossTerms,
    PROB_CLAMP,
};
use crate::networks::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Network, REAL,
};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor, Var};

/// Where the discriminator accuracy of the stop rule is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DMonitor {
    /// Held-out test splits, checked at the end of each epoch.
    HeldOut,
    /// Rolling accuracy on the training batches, checked after each batch.
    Training,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lambda_cycle: f64,
    /// Stop once discriminator accuracy exceeds this ...
    pub d_accuracy_min: f64,
    /// ... while the rolling generator total stays below this.
    pub g_loss_max: f64,
    /// Batches in the rolling windows.
    pub window: usize,
    pub monitor: DMonitor,
    /// Cap on held-out patches per domain used for the monitor.
    pub monitor_samples: usize,
    /// Generator updates towards the identity map before adversarial
    /// training (0 disables the warm-up).
    pub identity_init_steps: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 1,
            adam: AdamConfig::gan(),
            lambda_cycle: crate::losses::DEFAULT_LAMBDA_CYCLE,
            d_accuracy_min: 0.92,
            g_loss_max: 3.0,
            window: 50,
            monitor: DMonitor::HeldOut,
            monitor_samples: 100,
            identity_init_steps: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.window == 0 {
            return Err(Error::Config(
                "max_epochs, batch_size and window must be >= 1".into(),
            ));
        }
        if !(self.lambda_cycle >= 0.0 && self.lambda_cycle.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_cycle must be finite and >= 0, got {}",
                self.lambda_cycle
            )));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// The four networks of the translation model.
#[derive(Debug, Clone, PartialEq)]
pub struct GanNets {
    /// Source → target.
    pub g_st: Generator,
    /// Target → source.
    pub g_ts: Generator,
    /// Judges source-domain images.
    pub d_s: Discriminator,
    /// Judges target-domain images.
    pub d_t: Discriminator,
}

impl GanNets {
    pub fn init(gen: &GeneratorConfig, disc: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        let s = seed.wrapping_mul(4);
        Ok(Self {
            g_st: Generator::init(gen.clone(), s)?,
            g_ts: Generator::init(gen.clone(), s + 1)?,
            d_s: Discriminator::init(disc.clone(), s + 2)?,
            d_t: Discriminator::init(disc.clone(), s + 3)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanEpoch {
    pub epoch: usize,
    /// Means over the epoch's batches.
    pub terms: GanLossTerms,
    /// Discriminator accuracy on this epoch's training batches.
    pub d_accuracy_train: f64,
    pub rolling_d_accuracy: f64,
    pub rolling_g_total: f64,
    /// Held-out discriminator accuracy (held-out monitor only).
    pub d_accuracy_held_out: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum StopReason {
    Converged { epoch: usize },
    MaxEpochs { epoch: usize },
    /// Training hit a non-finite value; the networks hold the last finite
    /// parameters.
    Diverged { epoch: usize, message: String },
}

#[derive(Debug, Clone)]
pub struct GanResult {
    pub nets: GanNets,
    pub history: Vec<GanEpoch>,
    pub batch_terms: Vec<GanLossTerms>,
    pub stop: StopReason,
}

struct Rolling {
    cap: usize,
    items: VecDeque<f64>,
}

impl Rolling {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            items: VecDeque::with_capacity(cap),
        }
    }

    fn push(&mut self, v: f64) {
        if self.items.len() == self.cap {
            self.items.pop_front();
        }
        self.items.push_back(v);
    }

    fn full(&self) -> bool {
        self.items.len() == self.cap
    }

    fn mean(&self) -> f64 {
        if self.items.is_empty() {
            f64::NAN
        } else {
            self.items.iter().sum::<f64>() / self.items.len() as f64
        }
    }
}

struct Optims {
    g_st: Adam,
    g_ts: Adam,
    d_s: Adam,
    d_t: Adam,
}

impl Optims {
    fn new(cfg: AdamConfig, n: &GanNets) -> Self {
        Self {
            g_st: Adam::new(cfg, n.g_st.params().tensors()),
            g_ts: Adam::new(cfg, n.g_ts.params().tensors()),
            d_s: Adam::new(cfg, n.d_s.params().tensors()),
            d_t: Adam::new(cfg, n.d_t.params().tensors()),
        }
    }
}

fn real_prob(g: &mut Graph<f32>, d: &Discriminator, vars: &[Var], x: Var) -> Result<Var> {
    let p = d.forward(g, vars, x)?;
    g.column(p, REAL)
}

fn neg_log_mean(p: &[f32], flip: bool) -> f64 {
    p.iter()
        .map(|&v| {
            let v = if flip { 1.0 - v as f64 } else { v as f64 };
            -v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
        })
        .sum::<f64>()
        / p.len() as f64
}

/// Correct real/fake calls among `(real, fake)` probability lists.
fn correct_calls(real: &[f32], fake: &[f32]) -> (usize, usize) {
    let c = real.iter().filter(|&&p| p > 0.5).count() + fake.iter().filter(|&&p| p < 0.5).count();
    (c, real.len() + fake.len())
}

struct Step {
    terms: GanLossTerms,
    correct: usize,
    calls: usize,
}

fn train_step(
    nets: &mut GanNets,
    opt: &mut Optims,
    xs: Tensor,
    xt: Tensor,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Step> {
    // generator forward once; fakes feed the discriminator update as
    // constants and the generator update through the graph
    let mut gg = Graph::new();
    let v_st = nets.g_st.params().bind(&mut gg, true);
    let v_ts = nets.g_ts.params().bind(&mut gg, true);
    let xs_v = gg.constant(xs.clone());
    let xt_v = gg.constant(xt.clone());
    let fake_t = nets.g_st.forward(&mut gg, &v_st, xs_v, true, rng)?;
    let fake_s = nets.g_ts.forward(&mut gg, &v_ts, xt_v, true, rng)?;

    // (a) discriminators: real vs generated
    let mut gd = Graph::new();
    let vd_s = nets.d_s.params().bind(&mut gd, true);
    let vd_t = nets.d_t.params().bind(&mut gd, true);
    let real_s = gd.constant(xs);
    let real_t = gd.constant(xt);
    let fs = gd.constant(gg.value(fake_s).clone());
    let ft = gd.constant(gg.value(fake_t).clone());
    let ps_real = real_prob(&mut gd, &nets.d_s, &vd_s, real_s)?;
    let ps_fake = real_prob(&mut gd, &nets.d_s, &vd_s, fs)?;
    let pt_real = real_prob(&mut gd, &nets.d_t, &vd_t, real_t)?;
    let pt_fake = real_prob(&mut gd, &nets.d_t, &vd_t, ft)?;
    let ls = discriminator_loss(&mut gd, ps_real, ps_fake)?;
    let lt = discriminator_loss(&mut gd, pt_real, pt_fake)?;
    let ld = gd.add(ls, lt)?;
    gd.backward(ld)?;
    let (pr, pf): (Vec<f32>, Vec<f32>) = {
        let mut r = gd.value(ps_real).data().to_vec();
        r.extend_from_slice(gd.value(pt_real).data());
        let mut f = gd.value(ps_fake).data().to_vec();
        f.extend_from_slice(gd.value(pt_fake).data());
        (r, f)
    };
    let gs = nets.d_s.params().grads(&gd, &vd_s);
    let gt = nets.d_t.params().grads(&gd, &vd_t);
    opt.d_s.step(nets.d_s.params_mut().tensors_mut(), &gs)?;
    opt.d_t.step(nets.d_t.params_mut().tensors_mut(), &gt)?;
    drop(gd);

    // (b) generators against the updated discriminators
    let cd_s = nets.d_s.params().bind(&mut gg, false);
    let cd_t = nets.d_t.params().bind(&mut gg, false);
    let p_ft = real_prob(&mut gg, &nets.d_t, &cd_t, fake_t)?;
    let p_fs = real_prob(&mut gg, &nets.d_s, &cd_s, fake_s)?;
    let adv_st = generator_adv_loss(&mut gg, p_ft)?;
    let adv_ts = generator_adv_loss(&mut gg, p_fs)?;
    let rec_s = nets.g_ts.forward(&mut gg, &v_ts, fake_t, true, rng)?;
    let rec_t = nets.g_st.forward(&mut gg, &v_st, fake_s, true, rng)?;
    let cyc = cycle_loss(&mut gg, xs_v, rec_s, xt_v, rec_t)?;
    let total = total_generator_objective(&mut gg, adv_st, adv_ts, cyc, lambda)?;
    gg.backward(total)?;
    let g1 = nets.g_st.params().grads(&gg, &v_st);
    let g2 = nets.g_ts.params().grads(&gg, &v_ts);
    opt.g_st.step(nets.g_st.params_mut().tensors_mut(), &g1)?;
    opt.g_ts.step(nets.g_ts.params_mut().tensors_mut(), &g2)?;

    let (correct, calls) = correct_calls(&pr, &pf);
    Ok(Step {
        terms: GanLossTerms {
            d_loss_real: neg_log_mean(&pr, false),
            d_loss_fake: neg_log_mean(&pf, true),
            g_adv_st: gg.value(adv_st).item() as f64,
            g_adv_ts: gg.value(adv_ts).item() as f64,
            cycle_loss: gg.value(cyc).item() as f64,
            g_total: gg.value(total).item() as f64,
        },
        correct,
        calls,
    })
}

/// Held-out discriminator accuracy: each discriminator judges real images
/// of its domain and translations from the other domain.
pub fn held_out_d_accuracy(
    nets: &GanNets,
    source: &DomainDataset,
    target: &DomainDataset,
    limit: usize,
) -> Result<f64> {
    let real_p = |d: &Discriminator, x: &Tensor| -> Result<f32> {
        Ok(d.predict(x)?.data()[REAL])
    };
    let (mut correct, mut calls) = (0usize, 0usize);
    for p in source.patches.iter().take(limit) {
        let x = p.batch();
        let r = real_p(&nets.d_s, &x)?;
        let f = real_p(&nets.d_t, &nets.g_st.translate(&x)?)?;
        let (c, n) = correct_calls(&[r], &[f]);
        correct += c;
        calls += n;
    }
    for p in target.patches.iter().take(limit) {
        let x = p.batch();
        let r = real_p(&nets.d_t, &x)?;
        let f = real_p(&nets.d_s, &nets.g_ts.translate(&x)?)?;
        let (c, n) = correct_calls(&[r], &[f]);
        correct += c;
        calls += n;
    }
    if calls == 0 {
        return Err(Error::Data("no held-out patches for the discriminator monitor".into()));
    }
    Ok(correct as f64 / calls as f64)
}

fn identity_warmup(
    nets: &mut GanNets,
    cfg: &GanTrainConfig,
    source: &[&LabeledPatch],
    target: &[&LabeledPatch],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut a1 = Adam::new(cfg.adam, nets.g_st.params().tensors());
    let mut a2 = Adam::new(cfg.adam, nets.g_ts.params().tensors());
    for step in 0..cfg.identity_init_steps {
        for (gen, adam, pool) in [
            (&mut nets.g_st, &mut a1, source),
            (&mut nets.g_ts, &mut a2, target),
        ] {
            let x = pool[step % pool.len()].batch();
            let mut g = Graph::new();
            let v = gen.params().bind(&mut g, true);
            let xv = g.constant(x);
            let y = gen.forward(&mut g, &v, xv, true, rng)?;
            let l = g.l1_distance(y, xv)?;
            g.backward(l)?;
            let grads = gen.params().grads(&g, &v);
            adam.step(gen.params_mut().tensors_mut(), &grads)?;
        }
    }
    Ok(())
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::NonFiniteGrad { .. })
}

/// Trains the translation model until the stop rule fires or `max_epochs`
/// is reached. Training splits of `source` (labels unused) and `target`
/// supply the batches; their test splits feed the held-out monitor.
/// `on_epoch` is called after every completed epoch.
pub fn train_gan(
    nets: GanNets,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &GanTrainConfig,
    seed: u64,
    log: Log<'_>,
    on_epoch: &mut dyn FnMut(&GanEpoch, &GanNets) -> Result<()>,
) -> Result<GanResult> {
    cfg.validate()?;
    let channels = |ds: &DomainDataset| ds.patch_shape().map(|s| s.0);
    if channels(source) != channels(target) {
        return Err(Error::Data(format!(
            "source has {:?} channels, target {:?}",
            channels(source),
            channels(target)
        )));
    }
    let src_train: Vec<&LabeledPatch> = source.patches.iter().filter(|p| p.split == Split::Train).collect();
    let tgt_train: Vec<&LabeledPatch> = target.patches.iter().filter(|p| p.split == Split::Train).collect();
    if src_train.is_empty() || tgt_train.is_empty() {
        return Err(Error::Data("translation training needs train patches in both domains".into()));
    }
    let src_test = source.split(Split::Test);
    let tgt_test = target.split(Split::Test);
    let monitor = if cfg.monitor == DMonitor::HeldOut && src_test.is_empty() && tgt_test.is_empty() {
        log("[step2] no held-out patches; monitoring discriminator accuracy on training batches");
        DMonitor::Training
    } else {
        cfg.monitor
    };

    let mut nets = nets;
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    if cfg.identity_init_steps > 0 {
        identity_warmup(&mut nets, cfg, &src_train, &tgt_train, &mut noise_rng)?;
    }
    let mut opt = Optims::new(cfg.adam, &nets);
    let mut last_good = nets.clone();
    let mut d_roll = Rolling::new(cfg.window);
    let mut g_roll = Rolling::new(cfg.window);
    let mut history = Vec::new();
    let mut batch_terms = Vec::new();
    let mut s_order: Vec<usize> = (0..src_train.len()).collect();
    let mut t_order: Vec<usize> = (0..tgt_train.len()).collect();
    let per_epoch = src_train.len().max(tgt_train.len()).div_ceil(cfg.batch_size);

    for epoch in 1..=cfg.max_epochs {
        s_order.shuffle(&mut order_rng);
        t_order.shuffle(&mut order_rng);
        let mut sums = GanLossTerms::default();
        let (mut correct, mut calls) = (0usize, 0usize);
        let mut converged = false;
        for b in 0..per_epoch {
            let pick = |order: &[usize], pool: &[&LabeledPatch]| -> Vec<LabeledPatch> {
                (0..cfg.batch_size)
                    .map(|j| pool[order[(b * cfg.batch_size + j) % order.len()]].clone())
                    .collect()
            };
            let sp = pick(&s_order, &src_train);
            let tp = pick(&t_order, &tgt_train);
            let (xs, _) = make_batch(&sp.iter().collect::<Vec<_>>())?;
            let (xt, _) = make_batch(&tp.iter().collect::<Vec<_>>())?;
            let step = match train_step(&mut nets, &mut opt, xs, xt, cfg.lambda_cycle, &mut noise_rng) {
                Ok(s) if s.terms.g_total.is_finite() => s,
                Ok(_) => Err(Error::NonFinite { op: "generator objective" })?,
                Err(e) if is_numerical(&e) => {
                    log(&format!("[step2] epoch {epoch} batch {b}: {e}; keeping last finite parameters"));
                    return Ok(GanResult {
                        nets: last_good,
                        history,
                        batch_terms,
                        stop: StopReason::Diverged {
                            epoch,
                            message: e.to_string(),
                        },
                    });
                }
                Err(e) => return Err(e),
            };
            last_good.clone_from(&nets);
            let t = step.terms;
            sums.d_loss_real += t.d_loss_real;
            sums.d_loss_fake += t.d_loss_fake;
            sums.g_adv_st += t.g_adv_st;
            sums.g_adv_ts += t.g_adv_ts;
            sums.cycle_loss += t.cycle_loss;
            sums.g_total += t.g_total;
            correct += step.correct;
            calls += step.calls;
            d_roll.push(step.correct as f64 / step.calls as f64);
            g_roll.push(t.g_total);
            batch_terms.push(t);
            if monitor == DMonitor::Training
                && d_roll.full()
                && d_roll.mean() > cfg.d_accuracy_min
                && g_roll.mean() < cfg.g_loss_max
            {
                converged = true;
            }
        }
        let n = per_epoch as f64;
        let terms = GanLossTerms {
            d_loss_real: sums.d_loss_real / n,
            d_loss_fake: sums.d_loss_fake / n,
            g_adv_st: sums.g_adv_st / n,
            g_adv_ts: sums.g_adv_ts / n,
            cycle_loss: sums.cycle_loss / n,
            g_total: sums.g_total / n,
        };
        let held = if monitor == DMonitor::HeldOut {
            let a = held_out_d_accuracy(&nets, &src_test, &tgt_test, cfg.monitor_samples)?;
            if g_roll.full() && a > cfg.d_accuracy_min && g_roll.mean() < cfg.g_loss_max {
                converged = true;
            }
            Some(a)
        } else {
            None
        };
        let rec = GanEpoch {
            epoch,
            terms,
            d_accuracy_train: correct as f64 / calls as f64,
            rolling_d_accuracy: d_roll.mean(),
            rolling_g_total: g_roll.mean(),
            d_accuracy_held_out: held,
        };
        log(&format!(
            "[step2] epoch {epoch}/{} d_real {:.3} d_fake {:.3} g_adv {:.3} cycle {:.4} g_total {:.3} d_acc {:.3}{}",
            cfg.max_epochs,
            terms.d_loss_real,
            terms.d_loss_fake,
            terms.g_adv_loss(),
            terms.cycle_loss,
            terms.g_total,
            rec.d_accuracy_train,
            held.map_or(String::new(), |a| format!(" held-out d_acc {a:.3}"))
        ));
        on_epoch(&rec, &nets)?;
        history.push(rec);
        if converged {
            log(&format!("[step2] stop rule satisfied after epoch {epoch}"));
            return Ok(GanResult {
                nets,
                history,
                batch_terms,
                stop: StopReason::Converged { epoch },
            });
        }
    }
    Ok(GanResult {
        nets,
        history,
        batch_terms,
        stop: StopReason::MaxEpochs {
            epoch: cfg.max_epochs,
        },
    })
}

//! Training loops: the natural and adversarial SGD arms, free replay
//! training, clean-encoder pretraining, and per-epoch metrics/checkpoints.
//!
//! Forward-backward pass counts in the metrics are measured with the tape's
//! sweep counter around the batch loop, not computed from the schedule, so
//! the accounting claims (K+1 per batch for K-step training, m per batch for
//! free replay) are observations.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::attack::{pgd_attack_batch, AttackLossKind};
use crate::checkpoint::save_checkpoint;
use crate::config::{CleanPolicy, RunConfig};
use crate::data::{epoch_batches, Dataset};
use crate::defense::{evaluate, DefenseMode};
use crate::error::{Error, Result};
use crate::losses::{ce_from_logits, contrastive_batch, kl_batch, nce_batch};
use crate::membank::MemoryBank;
use crate::model::{
    clean_features, init_params, momentum_update, net_forward, register_net, EncoderParams,
    HeadKind, NetParams,
};
use crate::numerics::{backward_sweeps, tags, transpose, RngState, Tape, Tensor};

// ── training modes ──────────────────────────────────────────────────────────

/// The experiment arms. `That` is the full two-head method; the `No*`
/// variants ablate one of its loss terms; `StandardAtKl` is the
/// cross-entropy + KL-consistency comparison arm; the `Free*` modes replay
/// each mini-batch with a persistent perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Natural,
    StandardAt,
    StandardAtKl,
    That,
    ThatNoCl,
    ThatNoNce,
    FreeAt,
    FreeThat,
}

impl TrainMode {
    pub const ALL: [TrainMode; 8] = [
        TrainMode::Natural,
        TrainMode::StandardAt,
        TrainMode::StandardAtKl,
        TrainMode::That,
        TrainMode::ThatNoCl,
        TrainMode::ThatNoNce,
        TrainMode::FreeAt,
        TrainMode::FreeThat,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        for m in Self::ALL {
            if m.name() == s {
                return Ok(m);
            }
        }
        Err(Error::config(format!(
            "unknown training mode {s:?}; expected one of natural|standard_at|standard_at_kl|that|that_no_cl|that_no_nce|free_at|free_that"
        )))
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Natural => "natural",
            TrainMode::StandardAt => "standard_at",
            TrainMode::StandardAtKl => "standard_at_kl",
            TrainMode::That => "that",
            TrainMode::ThatNoCl => "that_no_cl",
            TrainMode::ThatNoNce => "that_no_nce",
            TrainMode::FreeAt => "free_at",
            TrainMode::FreeThat => "free_that",
        }
    }

    /// Serving classifier head. Arms that keep the normalized cross-entropy
    /// term classify by sharpened cosine; everything else uses raw logits.
    pub fn head_kind(self) -> HeadKind {
        match self {
            TrainMode::That | TrainMode::ThatNoCl | TrainMode::FreeThat => HeadKind::Normalized,
            _ => HeadKind::Plain,
        }
    }

    /// Whether the contrastive feature-alignment term is in the objective.
    pub fn uses_cl(self) -> bool {
        matches!(
            self,
            TrainMode::That | TrainMode::ThatNoNce | TrainMode::FreeThat
        )
    }

    /// The contrastive term needs the clean encoder for positives.
    pub fn needs_clean(self) -> bool {
        self.uses_cl()
    }

    /// The contrastive term draws negatives from the memory bank.
    pub fn uses_bank(self) -> bool {
        self.uses_cl()
    }

    pub fn is_free(self) -> bool {
        matches!(self, TrainMode::FreeAt | TrainMode::FreeThat)
    }

    /// Whether training inputs are perturbed at all.
    pub fn attacked(self) -> bool {
        self != TrainMode::Natural
    }
}

// ── learning-rate schedule ──────────────────────────────────────────────────

/// Step schedule: the base rate decays by 10x at each milestone, so the rate
/// at `epoch` is base x 0.1^(number of milestones <= epoch).
pub fn lr_at(epoch: usize, base: f64, milestones: &[usize]) -> f64 {
    let hits = milestones.iter().filter(|&&m| m <= epoch).count() as i32;
    base * 0.1f64.powi(hits)
}

// ── SGD with momentum and weight decay ──────────────────────────────────────

/// Textbook recurrence: v <- mu v + g + lambda w ; w <- w - lr v.
/// The `log_eta` sharpness parameter is excluded from weight decay; decaying
/// it would drift the head temperature even with zero gradient.
pub struct Sgd {
    momentum: f32,
    weight_decay: f32,
    velocity: Vec<(String, Tensor<f32>)>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            velocity: Vec::new(),
        }
    }

    /// One update over a fixed-order parameter list. The same list (names,
    /// shapes, order) must be passed on every call of a run.
    pub fn step(
        &mut self,
        lr: f64,
        params: &mut [(String, &mut Tensor<f32>)],
        grads: &[Tensor<f32>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "sgd: {} parameters vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::config(format!(
                "sgd: parameter set changed from {} tensors to {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let lr = lr as f32;
        let mu = self.momentum;
        for (i, (name, w)) in params.iter_mut().enumerate() {
            let (vname, v) = &mut self.velocity[i];
            let g = &grads[i];
            if vname != name || v.shape() != w.shape() || g.shape() != w.shape() {
                return Err(Error::shape(format!(
                    "sgd slot {i}: parameter {name} {:?}, velocity {vname} {:?}, gradient {:?}",
                    w.shape(),
                    v.shape(),
                    g.shape()
                )));
            }
            let wd = if name == "log_eta" {
                0.0
            } else {
                self.weight_decay
            };
            for ((vv, gv), wv) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
                *vv = mu * *vv + *gv + wd * *wv;
                *wv -= lr * *vv;
            }
        }
        Ok(())
    }
}

// ── one gradient step ───────────────────────────────────────────────────────

/// Which loss graph a weight update builds on the (already perturbed) input.
enum LossPlan<'a> {
    PlainCe,
    /// Cross-entropy on the clean branch plus weighted
    /// KL(softmax(clean logits) || softmax(adversarial logits)); both
    /// branches run through the trainable net, so accuracy pressure acts on
    /// clean inputs and robustness rides entirely on the consistency term.
    CeKl { kl_weight: f32 },
    Nce,
    NceCl {
        feat_clean: &'a Tensor<f32>,
        negs_t: &'a Tensor<f32>,
        tau: f32,
    },
    CeCl {
        feat_clean: &'a Tensor<f32>,
        negs_t: &'a Tensor<f32>,
        tau: f32,
    },
}

impl LossPlan<'_> {
    fn wants_eta(&self) -> bool {
        matches!(self, LossPlan::Nce | LossPlan::NceCl { .. })
    }
}

struct StepOut {
    /// Classification term (plain or normalized cross-entropy), batch mean.
    cls: f64,
    /// Auxiliary term (contrastive or KL), batch mean; 0 when absent.
    aux: f64,
    input_grad: Option<Tensor<f32>>,
}

/// Build the mode's loss on a trainable tape, backprop once, and apply one
/// SGD update. Exactly one backward sweep per call.
fn grad_step(
    enc: &mut EncoderParams,
    sgd: &mut Sgd,
    lr: f64,
    x_in: &Tensor<f32>,
    x_clean: Option<&Tensor<f32>>,
    y: &[usize],
    plan: &LossPlan,
    want_input_grad: bool,
) -> Result<StepOut> {
    let mut tape: Tape<f32> = Tape::new();
    let ids = register_net(&mut tape, &enc.robust, true);
    let eta_id = plan.wants_eta().then(|| tape.input(enc.log_eta.clone()));
    let xa = if want_input_grad {
        tape.input(x_in.clone())
    } else {
        tape.constant(x_in.clone())
    };
    let out = net_forward(&mut tape, &ids, &enc.arch, xa)?;

    let (total, cls_id, aux_id) = match plan {
        LossPlan::PlainCe => {
            let ce = ce_from_logits(&mut tape, out.logits, y)?;
            (ce, ce, None)
        }
        LossPlan::CeKl { kl_weight } => {
            let xc = x_clean.ok_or_else(|| {
                Error::config("KL consistency arm needs the clean batch".to_string())
            })?;
            let xcv = tape.constant(xc.clone());
            let outc = net_forward(&mut tape, &ids, &enc.arch, xcv)?;
            let ce = ce_from_logits(&mut tape, outc.logits, y)?;
            let kl = kl_batch(&mut tape, outc.logits, out.logits)?;
            let klw = tape.scale(kl, *kl_weight);
            let tot = tape.add(ce, klw)?;
            (tot, ce, Some(kl))
        }
        LossPlan::Nce => {
            let eta = eta_id.expect("nce plan registers log_eta");
            let nce = nce_batch(&mut tape, out.trunk_h, ids.classifier.w, eta, y)?;
            (nce, nce, None)
        }
        LossPlan::NceCl {
            feat_clean,
            negs_t,
            tau,
        } => {
            let eta = eta_id.expect("nce plan registers log_eta");
            let nce = nce_batch(&mut tape, out.trunk_h, ids.classifier.w, eta, y)?;
            let fc = tape.constant((*feat_clean).clone());
            let ng = tape.constant((*negs_t).clone());
            let cl = contrastive_batch(&mut tape, out.feat, fc, ng, *tau)?;
            let tot = tape.add(nce, cl)?;
            (tot, nce, Some(cl))
        }
        LossPlan::CeCl {
            feat_clean,
            negs_t,
            tau,
        } => {
            let ce = ce_from_logits(&mut tape, out.logits, y)?;
            let fc = tape.constant((*feat_clean).clone());
            let ng = tape.constant((*negs_t).clone());
            let cl = contrastive_batch(&mut tape, out.feat, fc, ng, *tau)?;
            let tot = tape.add(ce, cl)?;
            (tot, ce, Some(cl))
        }
    };

    let cls = tape.value(cls_id).item() as f64;
    let aux = aux_id.map(|a| tape.value(a).item() as f64).unwrap_or(0.0);
    let grads = tape.backward(total)?;

    let id_list = ids.all();
    let mut gtensors: Vec<Tensor<f32>> = Vec::with_capacity(id_list.len() + 1);
    for (i, (_, t)) in enc.robust.named_tensors().iter().enumerate() {
        gtensors.push(grads.get_or_zeros(id_list[i], t.shape()));
    }
    if let Some(eid) = eta_id {
        gtensors.push(grads.get_or_zeros(eid, enc.log_eta.shape()));
    }
    let mut params: Vec<(String, &mut Tensor<f32>)> = enc.robust.named_tensors_mut();
    if eta_id.is_some() {
        params.push(("log_eta".to_string(), &mut enc.log_eta));
    }
    sgd.step(lr, &mut params, &gtensors)?;

    let input_grad = want_input_grad.then(|| grads.get_or_zeros(xa, x_in.shape()));
    Ok(StepOut {
        cls,
        aux,
        input_grad,
    })
}

// ── metrics ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Auxiliary loss term mean (contrastive, or KL for the consistency arm).
    pub loss_cl: f64,
    /// Classification loss term mean (plain or normalized cross-entropy).
    pub loss_nce: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
    /// Backward sweeps measured during this epoch's batch loop.
    pub passes: u64,
    pub wall_secs: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.epoch, self.lr, self.loss_cl, self.loss_nce, self.clean_acc, self.robust_acc,
            self.passes
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<EpochMetrics>,
    /// PGD step count used by the robust-accuracy monitor column.
    pub eval_steps: usize,
}

impl RunMetrics {
    pub fn csv_header(eval_steps: usize) -> String {
        format!("epoch,lr,loss_cl,loss_nce,clean_acc,robust_acc@{eval_steps},passes")
    }

    pub fn total_passes(&self) -> u64 {
        self.rows.iter().map(|r| r.passes).sum()
    }
}

pub struct TrainOutcome {
    pub enc: EncoderParams,
    pub bank: Option<MemoryBank>,
    pub metrics: RunMetrics,
    pub best_robust: f64,
}

fn check_clean_matches(clean: &NetParams<f32>, template: &NetParams<f32>) -> Result<()> {
    let ct = clean.named_tensors();
    let tt = template.named_tensors();
    if ct.len() != tt.len() {
        return Err(Error::config(format!(
            "clean encoder has {} tensors, architecture needs {}",
            ct.len(),
            tt.len()
        )));
    }
    for ((cn, cv), (tn, tv)) in ct.iter().zip(&tt) {
        if cn != tn || cv.shape() != tv.shape() {
            return Err(Error::config(format!(
                "clean encoder tensor {cn} {:?} does not match architecture {tn} {:?}",
                cv.shape(),
                tv.shape()
            )));
        }
    }
    Ok(())
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// ── the training loop ───────────────────────────────────────────────────────

/// Train one arm. `clean` must carry a pretrained clean encoder for the
/// modes whose contrastive term needs it. With `out_dir` set, writes
/// `metrics.csv` (append-only), a checkpoint per epoch, `best.ckpt` at each
/// new best robust accuracy, and `final.ckpt`.
pub fn train(
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &RunConfig,
    clean: Option<NetParams<f32>>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::config("training set is empty".to_string()));
    }
    let mode = cfg.mode;
    let arch = cfg.arch_for(train_ds)?;
    let root = RngState::new(cfg.seed);

    let mut enc = crate::model::init_encoder(&arch, mode.head_kind(), cfg.eta_init, &root)?;
    if mode.needs_clean() {
        let c = clean.ok_or_else(|| {
            Error::config(format!(
                "mode {} requires a trained clean encoder",
                mode.name()
            ))
        })?;
        check_clean_matches(&c, &enc.robust)?;
        enc.clean = Some(c);
    }

    let mut bank = if mode.uses_bank() {
        Some(MemoryBank::init_bank(
            cfg.bank_capacity,
            arch.d_feat,
            &root.derive(tags::BANK_INIT),
        )?)
    } else {
        None
    };

    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let atk = cfg.attack_config();
    let eval_atk = cfg.attack_config().with_steps(cfg.eval_steps);
    let shuffle_root = root.derive(tags::SHUFFLE);
    let atk_root = root.derive(tags::ATTACK_TRAIN);
    let tau = cfg.tau as f32;
    let eps = atk.epsilon;
    let dim = train_ds.dim();

    let mut csv = match out_dir {
        Some(dir) => {
            let path = dir.join("metrics.csv");
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", RunMetrics::csv_header(cfg.eval_steps))
                .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    // Free modes replay each batch m times, so one data pass does the work
    // of m nominal epochs; the schedule and labels stay in nominal units.
    let (loops, label_stride) = if mode.is_free() {
        (cfg.epochs.div_ceil(cfg.replay_m), cfg.replay_m)
    } else {
        (cfg.epochs, 1)
    };
    // Perturbation state for free replay: one row per batch slot, carried
    // across replays and batches.
    let mut delta = Tensor::<f32>::zeros(&[cfg.batch, dim]);

    let mut rows: Vec<EpochMetrics> = Vec::with_capacity(loops);
    let mut best = f64::NEG_INFINITY;

    for li in 0..loops {
        let epoch_label = li * label_stride;
        let lr = lr_at(epoch_label, cfg.lr, &cfg.milestones);
        let t0 = Instant::now();
        let batches = epoch_batches(train_ds.len(), cfg.batch, &shuffle_root.derive(li as u64));

        let mut sum_cls = 0.0f64;
        let mut sum_aux = 0.0f64;
        let mut seen = 0usize;
        let sweeps_before = backward_sweeps();

        for (bi, idx) in batches.iter().enumerate() {
            let (x, y) = train_ds.select(idx);
            let b = y.len();
            let negs_t = bank.as_ref().map(|bk| transpose(&bk.negatives()));

            if mode.is_free() {
                // Reusable view of this batch's perturbation rows.
                let mut drows = Tensor::<f32>::zeros(&[b, dim]);
                drows
                    .data_mut()
                    .copy_from_slice(&delta.data()[..b * dim]);
                let fc_frozen = if mode.uses_cl() && cfg.clean_policy == CleanPolicy::Frozen {
                    Some(clean_features(&enc, &x)?)
                } else {
                    None
                };
                for _ in 0..cfg.replay_m {
                    let fc = match (&fc_frozen, mode.uses_cl()) {
                        (Some(f), _) => Some(f.clone()),
                        (None, true) => Some(clean_features(&enc, &x)?),
                        (None, false) => None,
                    };
                    let mut x_adv = x.clone();
                    for (xv, dv) in x_adv.data_mut().iter_mut().zip(drows.data()) {
                        *xv = (*xv + dv).clamp(0.0, 1.0);
                    }
                    let plan = match (&fc, &negs_t) {
                        (Some(f), Some(n)) => LossPlan::NceCl {
                            feat_clean: f,
                            negs_t: n,
                            tau,
                        },
                        _ => LossPlan::PlainCe,
                    };
                    let out = grad_step(&mut enc, &mut sgd, lr, &x_adv, None, &y, &plan, true)?;
                    let g = out.input_grad.expect("free replay asks for the input gradient");
                    for (dv, gv) in drows.data_mut().iter_mut().zip(g.data()) {
                        *dv = (*dv + eps * sign(*gv)).clamp(-eps, eps);
                    }
                    sum_cls += out.cls * b as f64;
                    sum_aux += out.aux * b as f64;
                    seen += b;
                    if mode.needs_clean() && cfg.clean_policy == CleanPolicy::Momentum {
                        let m = cfg.momentum_enc as f32;
                        momentum_update(enc.clean.as_mut().unwrap(), &enc.robust, m)?;
                    }
                }
                delta.data_mut()[..b * dim].copy_from_slice(drows.data());
                if let Some(bk) = bank.as_mut() {
                    bk.push_batch(&clean_features(&enc, &x)?)?;
                }
            } else {
                let x_in = if mode.attacked() {
                    let streams: Vec<RngState> = (0..b)
                        .map(|j| {
                            atk_root
                                .derive(li as u64)
                                .derive(bi as u64)
                                .derive(j as u64)
                        })
                        .collect();
                    pgd_attack_batch(&x, &y, &enc, AttackLossKind::from(enc.head), &atk, &streams)?
                } else {
                    x.clone()
                };
                let fc = if mode.uses_cl() {
                    Some(clean_features(&enc, &x)?)
                } else {
                    None
                };
                let plan = match mode {
                    TrainMode::Natural | TrainMode::StandardAt => LossPlan::PlainCe,
                    TrainMode::StandardAtKl => LossPlan::CeKl {
                        kl_weight: cfg.kl_weight as f32,
                    },
                    TrainMode::ThatNoCl => LossPlan::Nce,
                    TrainMode::That => LossPlan::NceCl {
                        feat_clean: fc.as_ref().unwrap(),
                        negs_t: negs_t.as_ref().unwrap(),
                        tau,
                    },
                    TrainMode::ThatNoNce => LossPlan::CeCl {
                        feat_clean: fc.as_ref().unwrap(),
                        negs_t: negs_t.as_ref().unwrap(),
                        tau,
                    },
                    TrainMode::FreeAt | TrainMode::FreeThat => unreachable!("free handled above"),
                };
                let x_clean = (mode == TrainMode::StandardAtKl).then_some(&x);
                let out = grad_step(&mut enc, &mut sgd, lr, &x_in, x_clean, &y, &plan, false)?;
                sum_cls += out.cls * b as f64;
                sum_aux += out.aux * b as f64;
                seen += b;
                if let (Some(bk), Some(f)) = (bank.as_mut(), fc.as_ref()) {
                    bk.push_batch(f)?;
                }
                if mode.needs_clean() && cfg.clean_policy == CleanPolicy::Momentum {
                    let m = cfg.momentum_enc as f32;
                    momentum_update(enc.clean.as_mut().unwrap(), &enc.robust, m)?;
                }
            }
        }

        let passes = backward_sweeps() - sweeps_before;
        let clean_rep = evaluate(&enc, test_ds, None, &DefenseMode::Softmax, &root, cfg.batch)?;
        let robust_rep = evaluate(
            &enc,
            test_ds,
            Some(&eval_atk),
            &DefenseMode::Softmax,
            &root,
            cfg.batch,
        )?;

        let row = EpochMetrics {
            epoch: epoch_label,
            lr,
            loss_cl: sum_aux / seen.max(1) as f64,
            loss_nce: sum_cls / seen.max(1) as f64,
            clean_acc: clean_rep.top1,
            robust_acc: robust_rep.top1,
            passes,
            wall_secs: t0.elapsed().as_secs_f64(),
        };
        if let Some((f, path)) = &mut csv {
            writeln!(f, "{}", row.csv_row()).map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(dir) = out_dir {
            save_checkpoint(
                &dir.join(format!("epoch-{epoch_label:03}.ckpt")),
                &enc,
                bank.as_ref(),
            )?;
            if row.robust_acc > best {
                save_checkpoint(&dir.join("best.ckpt"), &enc, bank.as_ref())?;
            }
        }
        best = best.max(row.robust_acc);
        rows.push(row);
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("final.ckpt"), &enc, bank.as_ref())?;
    }
    Ok(TrainOutcome {
        enc,
        bank,
        metrics: RunMetrics {
            rows,
            eval_steps: cfg.eval_steps,
        },
        best_robust: best,
    })
}

// ── clean-encoder pretraining ───────────────────────────────────────────────

/// Naturally train the clean encoder: plain cross-entropy on the trunk
/// classifier for `clean_epochs`. The feature head keeps its random
/// initialization, acting as a fixed projection whose outputs the forward
/// pass normalizes to unit length; the caller freezes the result.
/// Returns the parameters and the clean test accuracy.
pub fn train_clean_encoder(
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &RunConfig,
) -> Result<(NetParams<f32>, f64)> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::config("training set is empty".to_string()));
    }
    let arch = cfg.arch_for(train_ds)?;
    let clean_root = RngState::new(cfg.seed).derive(tags::INIT_CLEAN);
    let net = init_params::<f32>(&arch, &clean_root)?;
    // Wrapping in encoder params reuses the shared step/eval plumbing; the
    // sharpness parameter is untouched by the plain head.
    let mut enc = EncoderParams {
        arch: arch.clone(),
        head: HeadKind::Plain,
        clean: None,
        robust: net,
        log_eta: Tensor::scalar(0.0f32),
    };
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let shuffle_root = clean_root.derive(tags::SHUFFLE);

    for e in 0..cfg.clean_epochs {
        let lr = lr_at(e, cfg.lr, &cfg.milestones);
        for idx in epoch_batches(train_ds.len(), cfg.batch, &shuffle_root.derive(e as u64)) {
            let (x, y) = train_ds.select(&idx);
            grad_step(
                &mut enc,
                &mut sgd,
                lr,
                &x,
                None,
                &y,
                &LossPlan::PlainCe,
                false,
            )?;
        }
    }
    let rep = evaluate(
        &enc,
        test_ds,
        None,
        &DefenseMode::Softmax,
        &RngState::new(cfg.seed),
        cfg.batch,
    )?;
    Ok((enc.robust, rep.top1))
}

// ── tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.classes = 3;
        cfg.dim = 6;
        cfg.n_per_class = 10; // 30 samples -> 24 train / 6 test
        cfg.widths = vec![16];
        cfg.d_feat = 8;
        cfg.batch = 8;
        cfg.epochs = 2;
        cfg.steps = 2;
        cfg.eval_steps = 1;
        cfg.bank_capacity = 32;
        cfg.clean_epochs = 2;
        cfg.lr = 0.05;
        cfg.milestones = vec![];
        cfg
    }

    fn tiny_data(cfg: &RunConfig) -> (Dataset, Dataset) {
        cfg.load_datasets().unwrap()
    }

    #[test]
    fn lr_schedule_matches_reference_points() {
        let ms = [35usize, 60, 90];
        assert_eq!(lr_at(0, 1.6, &ms), 1.6);
        assert_eq!(lr_at(34, 1.6, &ms), 1.6);
        let e40 = lr_at(40, 1.6, &ms);
        assert!((e40 - 0.16).abs() < 1e-12, "epoch 40 -> {e40}");
        let e95 = lr_at(95, 1.6, &ms);
        assert!((e95 - 0.0016).abs() < 1e-15, "epoch 95 -> {e95}");
        // the milestone epoch itself is already decayed
        let e35 = lr_at(35, 1.6, &ms);
        assert!((e35 - 0.16).abs() < 1e-12);
        assert_eq!(lr_at(7, 0.1, &[]), 0.1);
    }

    #[test]
    fn sgd_matches_hand_computed_trace() {
        // Two elements, two steps, worked with the same f32 expressions the
        // optimizer uses, so the comparison is bitwise.
        let mu = 0.9f32;
        let wd = 0.1f32;
        let lr = 0.5f32;
        let grads = [[0.5f32, 0.25], [-1.0, 0.0]];

        let mut expect_w = [1.0f32, -2.0];
        let mut expect_v = [0.0f32, 0.0];
        for g in &grads {
            for j in 0..2 {
                expect_v[j] = mu * expect_v[j] + g[j] + wd * expect_w[j];
                expect_w[j] -= lr * expect_v[j];
            }
        }

        let mut w = Tensor::from_vec(vec![2], vec![1.0f32, -2.0]).unwrap();
        let mut sgd = Sgd::new(mu as f64, wd as f64);
        for g in &grads {
            let gt = Tensor::from_vec(vec![2], g.to_vec()).unwrap();
            let mut params = vec![("w".to_string(), &mut w)];
            sgd.step(lr as f64, &mut params, &[gt]).unwrap();
        }
        assert_eq!(w.data(), &expect_w[..], "bitwise identical recurrence");
    }

    #[test]
    fn sgd_excludes_log_eta_from_weight_decay() {
        let mut sgd = Sgd::new(0.9, 0.1);
        let mut eta = Tensor::from_vec(vec![1], vec![2.0f32]).unwrap();
        let mut w = Tensor::from_vec(vec![1], vec![2.0f32]).unwrap();
        let zero = Tensor::zeros(&[1]);
        let mut params = vec![
            ("log_eta".to_string(), &mut eta),
            ("w".to_string(), &mut w),
        ];
        sgd.step(0.5, &mut params, &[zero.clone(), zero.clone()])
            .unwrap();
        assert_eq!(eta.data()[0], 2.0, "no decay pull on log_eta");
        assert!(w.data()[0] < 2.0, "ordinary weight decays");
    }

    #[test]
    fn sgd_rejects_changed_parameter_sets() {
        let mut sgd = Sgd::new(0.9, 0.0);
        let mut a = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[2]);
        let mut params = vec![("a".to_string(), &mut a)];
        sgd.step(0.1, &mut params, std::slice::from_ref(&g)).unwrap();
        let mut a2 = Tensor::zeros(&[2]);
        let mut b = Tensor::zeros(&[2]);
        let mut params2 = vec![("a".to_string(), &mut a2), ("b".to_string(), &mut b)];
        assert!(sgd.step(0.1, &mut params2, &[g.clone(), g]).is_err());
    }

    #[test]
    fn mode_names_round_trip_and_flags_agree() {
        for m in TrainMode::ALL {
            assert_eq!(TrainMode::parse(m.name()).unwrap(), m);
            assert_eq!(m.uses_cl(), m.needs_clean());
            assert_eq!(m.uses_cl(), m.uses_bank());
        }
        assert!(TrainMode::parse("THAT").is_err());
        use crate::model::HeadKind::*;
        assert_eq!(TrainMode::That.head_kind(), Normalized);
        assert_eq!(TrainMode::ThatNoCl.head_kind(), Normalized);
        assert_eq!(TrainMode::FreeThat.head_kind(), Normalized);
        assert_eq!(TrainMode::StandardAt.head_kind(), Plain);
        assert_eq!(TrainMode::ThatNoNce.head_kind(), Plain);
        assert!(!TrainMode::Natural.attacked());
        assert!(TrainMode::FreeAt.is_free() && TrainMode::FreeThat.is_free());
    }

    #[test]
    fn pass_accounting_standard_modes() {
        let mut cfg = tiny_cfg();
        let (tr, te) = tiny_data(&cfg);
        // natural: one pass per batch
        cfg.mode = TrainMode::Natural;
        let out = train(&tr, &te, &cfg, None, None).unwrap();
        for row in &out.metrics.rows {
            assert_eq!(row.passes, 3, "24 samples / batch 8 = 3 batches");
        }
        // standard_at with K steps: K+1 per batch
        cfg.mode = TrainMode::StandardAt;
        cfg.steps = 2;
        let out = train(&tr, &te, &cfg, None, None).unwrap();
        for row in &out.metrics.rows {
            assert_eq!(row.passes, 3 * (2 + 1));
        }
        // the KL arm still does one update pass after the K attack passes
        cfg.mode = TrainMode::StandardAtKl;
        let out = train(&tr, &te, &cfg, None, None).unwrap();
        for row in &out.metrics.rows {
            assert_eq!(row.passes, 3 * (2 + 1));
        }
    }

    #[test]
    fn pass_accounting_free_modes() {
        let mut cfg = tiny_cfg();
        let (tr, te) = tiny_data(&cfg);
        cfg.mode = TrainMode::FreeAt;
        cfg.replay_m = 2;
        cfg.epochs = 4;
        let out = train(&tr, &te, &cfg, None, None).unwrap();
        assert_eq!(out.metrics.rows.len(), 2, "4 nominal epochs / m=2");
        for row in &out.metrics.rows {
            assert_eq!(row.passes, 3 * 2, "m passes per batch");
        }
        // m=1 equals the natural counter
        cfg.replay_m = 1;
        cfg.epochs = 1;
        let out = train(&tr, &te, &cfg, None, None).unwrap();
        assert_eq!(out.metrics.rows.len(), 1);
        assert_eq!(out.metrics.rows[0].passes, 3);
        // epoch labels advance in nominal units
        cfg.replay_m = 3;
        cfg.epochs = 7; // ceil(7/3) = 3 passes labeled 0, 3, 6
        let out = train(&tr, &te, &cfg, None, None).unwrap();
        let labels: Vec<usize> = out.metrics.rows.iter().map(|r| r.epoch).collect();
        assert_eq!(labels, vec![0, 3, 6]);
    }

    #[test]
    fn contrastive_modes_require_clean_encoder() {
        let mut cfg = tiny_cfg();
        let (tr, te) = tiny_data(&cfg);
        for mode in [TrainMode::That, TrainMode::ThatNoNce, TrainMode::FreeThat] {
            cfg.mode = mode;
            let err = match train(&tr, &te, &cfg, None, None) {
                Err(e) => e,
                Ok(_) => panic!("{mode:?} trained without a clean encoder"),
            };
            assert!(
                err.to_string().contains("clean encoder"),
                "{mode:?}: {err}"
            );
        }
        // and a mismatched clean encoder is rejected
        cfg.mode = TrainMode::That;
        let mut other = cfg.clone();
        other.widths = vec![4];
        let (otr, ote) = (&tr, &te);
        let (bad_clean, _) = train_clean_encoder(otr, ote, &other).unwrap();
        assert!(train(&tr, &te, &cfg, Some(bad_clean), None).is_err());
    }

    #[test]
    fn bank_fill_rate_counts_processed_samples() {
        let mut cfg = tiny_cfg();
        cfg.mode = TrainMode::That;
        cfg.epochs = 1;
        let (tr, te) = tiny_data(&cfg);
        let (clean, _) = train_clean_encoder(&tr, &te, &cfg).unwrap();

        cfg.bank_capacity = 32;
        let out = train(&tr, &te, &cfg, Some(clean.clone()), None).unwrap();
        let bank = out.bank.unwrap();
        assert_eq!(bank.pushed_total(), 24);
        assert_eq!(bank.cursor(), 24 % 32);

        cfg.bank_capacity = 8;
        let out = train(&tr, &te, &cfg, Some(clean), None).unwrap();
        let bank = out.bank.unwrap();
        assert_eq!(bank.pushed_total(), 24);
        assert_eq!(bank.cursor(), 24 % 8);
    }

    #[test]
    fn identical_config_and_seed_reproduce_bitwise() {
        let mut cfg = tiny_cfg();
        cfg.mode = TrainMode::That;
        let (tr, te) = tiny_data(&cfg);
        let (clean, _) = train_clean_encoder(&tr, &te, &cfg).unwrap();
        let a = train(&tr, &te, &cfg, Some(clean.clone()), None).unwrap();
        let b = train(&tr, &te, &cfg, Some(clean), None).unwrap();
        for ((na, ta), (nb, tb)) in a
            .enc
            .robust
            .named_tensors()
            .iter()
            .zip(&b.enc.robust.named_tensors())
        {
            assert_eq!(na, nb);
            let bits_a: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "tensor {na} differs between runs");
        }
        assert_eq!(a.enc.log_eta.data()[0].to_bits(), b.enc.log_eta.data()[0].to_bits());
        let ba: Vec<u32> = a.bank.unwrap().negatives().data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.bank.unwrap().negatives().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ba, bb);
        let rows_a: Vec<String> = a.metrics.rows.iter().map(|r| r.csv_row()).collect();
        let rows_b: Vec<String> = b.metrics.rows.iter().map(|r| r.csv_row()).collect();
        assert_eq!(rows_a, rows_b);
    }

    #[test]
    fn clean_policy_momentum_zero_tracks_robust_exactly() {
        let mut cfg = tiny_cfg();
        cfg.mode = TrainMode::That;
        cfg.epochs = 1;
        let (tr, te) = tiny_data(&cfg);
        let (clean, _) = train_clean_encoder(&tr, &te, &cfg).unwrap();

        // frozen: the clean net comes out bit-identical to what went in
        cfg.clean_policy = CleanPolicy::Frozen;
        let out = train(&tr, &te, &cfg, Some(clean.clone()), None).unwrap();
        for ((_, ta), (_, tb)) in out
            .enc
            .clean
            .as_ref()
            .unwrap()
            .named_tensors()
            .iter()
            .zip(&clean.named_tensors())
        {
            assert_eq!(ta.data(), tb.data());
        }

        // momentum with m_enc = 0: clean is overwritten by robust each step
        cfg.clean_policy = CleanPolicy::Momentum;
        cfg.momentum_enc = 0.0;
        let out = train(&tr, &te, &cfg, Some(clean), None).unwrap();
        for ((_, tc), (_, tr_)) in out
            .enc
            .clean
            .as_ref()
            .unwrap()
            .named_tensors()
            .iter()
            .zip(&out.enc.robust.named_tensors())
        {
            assert_eq!(tc.data(), tr_.data());
        }
    }

    #[test]
    fn clean_encoder_is_deterministic_and_better_than_chance() {
        let cfg = {
            let mut c = tiny_cfg();
            c.clean_epochs = 8;
            c.lr = 0.1;
            c
        };
        let (tr, te) = tiny_data(&cfg);
        let (a, acc_a) = train_clean_encoder(&tr, &te, &cfg).unwrap();
        let (b, acc_b) = train_clean_encoder(&tr, &te, &cfg).unwrap();
        assert_eq!(acc_a, acc_b);
        for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(&b.named_tensors()) {
            assert_eq!(ta.data(), tb.data());
        }
        assert!(
            acc_a > 1.0 / 3.0,
            "3-class accuracy {acc_a} should beat chance"
        );
    }

    #[test]
    fn metrics_csv_shape() {
        assert_eq!(
            RunMetrics::csv_header(10),
            "epoch,lr,loss_cl,loss_nce,clean_acc,robust_acc@10,passes"
        );
        let row = EpochMetrics {
            epoch: 3,
            lr: 0.1,
            loss_cl: 1.0,
            loss_nce: 2.0,
            clean_acc: 0.5,
            robust_acc: 0.25,
            passes: 9,
            wall_secs: 0.0,
        };
        assert_eq!(row.csv_row(), "3,0.1,1.000000,2.000000,0.500000,0.250000,9");
        assert_eq!(row.csv_row().split(',').count(), 7);
    }
}

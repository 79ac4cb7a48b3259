//! FGSM and PGD adversarial example generation against the classifier head,
//! with exact L-inf/L2 constraint enforcement, targeted and untargeted modes,
//! and per-sample derived random streams so batched, serial, and parallel
//! attack runs all produce identical perturbations.

use crate::error::{Error, Result};
use crate::losses;
use crate::model::{net_forward, register_net, EncoderParams, HeadKind};
use crate::numerics::{RngState, Scalar, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Linf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    /// Ascend the loss at the true label.
    Untargeted,
    /// Draw a target uniformly from the other classes and descend toward it.
    Targeted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Maximum perturbation, in [0,1] pixel units.
    pub epsilon: f32,
    /// Step size per iteration, same units.
    pub alpha: f32,
    /// Iteration count K.
    pub steps: usize,
    pub norm: NormKind,
    pub mode: AttackMode,
    /// Start from a uniform point in the epsilon ball instead of x itself.
    pub random_start: bool,
    /// Pixel bounds.
    pub lo: f32,
    pub hi: f32,
}

impl AttackConfig {
    /// The evaluation schedule the reference results use: eps 16/255,
    /// alpha 4/255, K=10, L-inf, untargeted.
    pub fn paper_default() -> Self {
        AttackConfig {
            epsilon: 16.0 / 255.0,
            alpha: 4.0 / 255.0,
            steps: 10,
            norm: NormKind::Linf,
            mode: AttackMode::Untargeted,
            random_start: true,
            lo: 0.0,
            hi: 1.0,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon {} must be > 0", self.epsilon)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config(format!("alpha {} must be > 0", self.alpha)));
        }
        if self.steps < 1 {
            return Err(Error::config("attack needs at least one step".to_string()));
        }
        if !(self.lo < self.hi) {
            return Err(Error::config(format!(
                "pixel bounds [{}, {}] are empty",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Which loss the attacker differentiates. Evaluation always attacks the
/// serving (softmax) head, so this is derived from the model's head kind;
/// training modes pick it explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackLossKind {
    /// Cross-entropy on raw affine logits.
    PlainCe,
    /// Cross-entropy on eta-sharpened cosine logits.
    Nce,
}

impl From<HeadKind> for AttackLossKind {
    fn from(h: HeadKind) -> Self {
        match h {
            HeadKind::Plain => AttackLossKind::PlainCe,
            HeadKind::Normalized => AttackLossKind::Nce,
        }
    }
}

/// Project a perturbation into the epsilon ball of the given norm. L-inf
/// clamps coordinates; L2 rescales the whole vector only when it is outside
/// the ball.
pub fn project<T: Scalar>(delta: &Tensor<T>, eps: T, norm: NormKind) -> Tensor<T> {
    let mut out = delta.clone();
    project_slice(out.data_mut(), eps, norm);
    out
}

fn project_slice<T: Scalar>(delta: &mut [T], eps: T, norm: NormKind) {
    match norm {
        NormKind::Linf => {
            for v in delta {
                *v = (*v).max_s(-eps).min_s(eps);
            }
        }
        NormKind::L2 => {
            let norm2 = crate::numerics::tensor::dot(delta, delta).sqrt();
            if norm2 > eps {
                let scale = eps / norm2;
                for v in delta {
                    *v *= scale;
                }
            }
        }
    }
}

#[inline]
fn sign<T: Scalar>(x: T) -> T {
    if x > T::ZERO {
        T::ONE
    } else if x < T::ZERO {
        -T::ONE
    } else {
        T::ZERO
    }
}

/// Build the mean attack loss over the batch on `tape` and return its id.
/// Per-sample gradients are unaffected by the mean: rows flow through
/// row-local ops only, and the attacker consumes them per row (sign or
/// row-normalized), which absorbs the 1/B factor.
pub(crate) fn attack_loss_on_tape(
    tape: &mut Tape<f32>,
    enc: &EncoderParams,
    kind: AttackLossKind,
    x: crate::numerics::VarId,
    labels: &[usize],
) -> Result<crate::numerics::VarId> {
    let ids = register_net(tape, &enc.robust, false);
    let out = net_forward(tape, &ids, &enc.arch, x)?;
    match kind {
        AttackLossKind::PlainCe => losses::ce_from_logits(tape, out.logits, labels),
        AttackLossKind::Nce => {
            let log_eta = tape.constant(enc.log_eta.clone());
            losses::nce_batch(tape, out.trunk_h, ids.classifier.w, log_eta, labels)
        }
    }
}

/// Scalar attack-loss value for one sample; used by diagnostics, surface
/// grids, and the ascent-property checks.
pub fn sample_loss(
    enc: &EncoderParams,
    kind: AttackLossKind,
    x: &Tensor<f32>,
    y: usize,
) -> Result<f32> {
    let mut tape = Tape::new();
    let row = x.reshaped(vec![1, x.numel()])?;
    let xi = tape.constant(row);
    let loss = attack_loss_on_tape(&mut tape, enc, kind, xi, &[y])?;
    Ok(tape.value(loss).item())
}

/// K-step PGD over a whole batch. `streams` carries one independent RNG
/// state per sample (already derived by the caller); it seeds the random
/// start and, in targeted mode, the target draw.
///
/// Both constraints hold exactly on return: |delta| within the epsilon ball
/// of the configured norm, and every pixel inside [lo, hi]. The pixel clamp
/// is folded into delta after every step; clamping moves each coordinate
/// toward zero perturbation, so it can only shrink the ball norms.
pub fn pgd_attack_batch(
    x: &Tensor<f32>,
    y: &[usize],
    enc: &EncoderParams,
    kind: AttackLossKind,
    cfg: &AttackConfig,
    streams: &[RngState],
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let b = x.view_rows();
    let d = x.view_cols();
    if y.len() != b || streams.len() != b {
        return Err(Error::shape(format!(
            "attack batch: {} rows, {} labels, {} streams",
            b,
            y.len(),
            streams.len()
        )));
    }
    let classes = enc.arch.classes;
    for &yi in y {
        if yi >= classes {
            return Err(Error::InvalidLabel {
                label: yi,
                classes,
            });
        }
    }

    // Per-sample target draw (targeted mode) and loss sign.
    let mut streams: Vec<RngState> = streams.to_vec();
    let (labels, dir): (Vec<usize>, f32) = match cfg.mode {
        AttackMode::Untargeted => (y.to_vec(), 1.0),
        AttackMode::Targeted => {
            let targets = y
                .iter()
                .zip(streams.iter_mut())
                .map(|(&yi, st)| {
                    let t = st.below(classes as u64 - 1) as usize;
                    if t >= yi {
                        t + 1
                    } else {
                        t
                    }
                })
                .collect();
            (targets, -1.0)
        }
    };

    let eps = cfg.epsilon;
    let mut x_adv: Vec<f32> = x.data().to_vec();
    if cfg.random_start {
        for (i, st) in streams.iter_mut().enumerate() {
            let xrow = x.row(i);
            let arow = &mut x_adv[i * d..(i + 1) * d];
            match cfg.norm {
                NormKind::Linf => {
                    for (av, &xv) in arow.iter_mut().zip(xrow) {
                        *av = xv + st.uniform_in(-eps as f64, eps as f64) as f32;
                    }
                }
                NormKind::L2 => {
                    // Uniform in the ball: sphere direction times eps*U^(1/d).
                    let dirv = st.unit_vector(d);
                    let radius = eps as f64 * st.uniform().powf(1.0 / d as f64);
                    for ((av, &xv), dv) in arow.iter_mut().zip(xrow).zip(dirv) {
                        *av = xv + (radius * dv) as f32;
                    }
                }
            }
        }
    }

    // Re-impose both constraints on the *realized* difference x_adv - x so
    // they hold exactly under f32 rounding: project, rebuild, then nudge any
    // coordinate a rounding error pushed past the L-inf boundary. The pixel
    // clamp runs last; it only ever moves a coordinate toward x (x itself is
    // in bounds), so it cannot re-violate either ball.
    let apply_constraints = |x_adv: &mut [f32]| {
        for i in 0..b {
            let xrow = x.row(i);
            let arow = &mut x_adv[i * d..(i + 1) * d];
            let mut diff: Vec<f32> = arow.iter().zip(xrow).map(|(&av, &xv)| av - xv).collect();
            project_slice(&mut diff, eps, cfg.norm);
            for ((av, &xv), &dv) in arow.iter_mut().zip(xrow).zip(&diff) {
                let mut v = xv + dv;
                while v - xv > eps {
                    v = v.next_down();
                }
                while v - xv < -eps {
                    v = v.next_up();
                }
                *av = v.max(cfg.lo).min(cfg.hi);
            }
        }
    };
    apply_constraints(&mut x_adv);

    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let xi = tape.input(Tensor::from_vec(vec![b, d], x_adv.clone())?);
        let loss = attack_loss_on_tape(&mut tape, enc, kind, xi, &labels)?;
        let grads = tape.backward(loss)?;
        let g = grads.get_or_zeros(xi, &[b, d]);

        for i in 0..b {
            let grow = g.row(i);
            let arow = &mut x_adv[i * d..(i + 1) * d];
            match cfg.norm {
                NormKind::Linf => {
                    for (av, &gv) in arow.iter_mut().zip(grow) {
                        *av += dir * cfg.alpha * sign(gv);
                    }
                }
                NormKind::L2 => {
                    let gnorm = crate::numerics::tensor::dot(grow, grow).sqrt();
                    if gnorm > 1e-20 {
                        let scale = dir * cfg.alpha / gnorm;
                        for (av, &gv) in arow.iter_mut().zip(grow) {
                            *av += scale * gv;
                        }
                    }
                }
            }
        }
        apply_constraints(&mut x_adv);
    }

    Tensor::from_vec(x.shape().to_vec(), x_adv)
}

/// Single-image PGD; `rng` is this sample's own stream.
pub fn pgd_attack(
    x: &Tensor<f32>,
    y: usize,
    enc: &EncoderParams,
    kind: AttackLossKind,
    cfg: &AttackConfig,
    rng: &RngState,
) -> Result<Tensor<f32>> {
    let row = x.reshaped(vec![1, x.numel()])?;
    let adv = pgd_attack_batch(&row, &[y], enc, kind, cfg, &[*rng])?;
    adv.reshaped(x.shape().to_vec())
}

/// One signed step of size epsilon: PGD with K=1, alpha=epsilon, and no
/// random start.
pub fn fgsm_attack(
    x: &Tensor<f32>,
    y: usize,
    enc: &EncoderParams,
    kind: AttackLossKind,
    cfg: &AttackConfig,
    rng: &RngState,
) -> Result<Tensor<f32>> {
    let mut one = cfg.clone();
    one.steps = 1;
    one.alpha = cfg.epsilon;
    one.random_start = false;
    pgd_attack(x, y, enc, kind, &one, rng)
}

/// Exact feasibility check used by tests and the evaluation harness:
/// perturbation within the ball (L-inf exactly, L2 with float-sum headroom)
/// and pixels within bounds.
pub fn constraints_satisfied(
    x: &Tensor<f32>,
    x_adv: &Tensor<f32>,
    cfg: &AttackConfig,
) -> bool {
    if x.shape() != x_adv.shape() {
        return false;
    }
    let b = x.view_rows();
    for i in 0..b {
        let xr = x.row(i);
        let ar = x_adv.row(i);
        match cfg.norm {
            NormKind::Linf => {
                if xr
                    .iter()
                    .zip(ar)
                    .any(|(&xv, &av)| (av - xv).abs() > cfg.epsilon)
                {
                    return false;
                }
            }
            NormKind::L2 => {
                let n: f32 = xr
                    .iter()
                    .zip(ar)
                    .map(|(&xv, &av)| (av - xv) * (av - xv))
                    .sum::<f32>()
                    .sqrt();
                if n > cfg.epsilon + 1e-6 {
                    return false;
                }
            }
        }
        if ar.iter().any(|&av| av < cfg.lo || av > cfg.hi) {
            return false;
        }
    }
    true
}

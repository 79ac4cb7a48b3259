//! Training-objective terms: contrastive alignment, normalized cross-entropy,
//! plain cross-entropy, and the KL divergence with its tail-dominance
//! diagnostic. Each loss exists twice: a pure scalar form used by oracles and
//! diagnostics, and a batched tape builder used by training and attacks. The
//! two are tested against each other.

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Scalar, Tape, Tensor, VarId};

/// Floor applied to probabilities inside logarithms. Keeps the KL term and
/// its gradient finite when a softmax output underflows to zero.
pub const PROB_FLOOR: f64 = 1e-12;

// ── pure forms ─────────────────────────────────────────────────────────────

/// InfoNCE-style contrastive loss for one anchor `u` against positive `v`
/// and a negative set (rows of `negatives`):
///
///   -log[ exp(u.v/tau) / (exp(u.v/tau) + sum_i exp(u.n_i/tau)) ]
///
/// All vectors are expected unit-norm. Computed through a shifted
/// log-sum-exp, so large 1/tau cannot overflow.
pub fn contrastive_loss<T: Scalar>(
    u: &Tensor<T>,
    v: &Tensor<T>,
    negatives: &Tensor<T>,
    tau: T,
) -> Result<T> {
    let d = u.numel();
    if v.numel() != d || negatives.view_cols() != d {
        return Err(Error::shape(format!(
            "contrastive dims: u {:?}, v {:?}, negatives {:?}",
            u.shape(),
            v.shape(),
            negatives.shape()
        )));
    }
    let n = negatives.view_rows();
    if n == 0 || negatives.numel() == 0 {
        return Err(Error::EmptyNegatives);
    }
    let pos = u.dot(v)? / tau;
    let mut sims = Vec::with_capacity(n + 1);
    sims.push(pos);
    for i in 0..n {
        sims.push(crate::numerics::tensor::dot(u.data(), negatives.row(i)) / tau);
    }
    Ok(log_sum_exp(&sims) - pos)
}

/// Normalized cross-entropy: logits and class weight columns are projected
/// to the unit sphere, cosine similarities are sharpened by 1/eta, and a
/// standard cross-entropy is taken over the result.
///
/// `class_weights` is [m, C] with column i holding class i's weight vector.
pub fn nce_loss<T: Scalar>(
    z: &Tensor<T>,
    class_weights: &Tensor<T>,
    y: usize,
    eta: T,
) -> Result<T> {
    let m = z.numel();
    if class_weights.rank() != 2 || class_weights.shape()[0] != m {
        return Err(Error::shape(format!(
            "nce dims: z {:?}, class_weights {:?}",
            z.shape(),
            class_weights.shape()
        )));
    }
    if eta <= T::ZERO {
        return Err(Error::config(format!("nce eta must be positive, got {eta}")));
    }
    let classes = class_weights.shape()[1];
    if y >= classes {
        return Err(Error::InvalidLabel { label: y, classes });
    }
    let zn = crate::numerics::l2_normalize(z)?;
    let wd = class_weights.data();
    let mut sims = Vec::with_capacity(classes);
    for i in 0..classes {
        let mut ip = T::ZERO;
        let mut sq = T::ZERO;
        for j in 0..m {
            let wji = wd[j * classes + i];
            ip += zn.data()[j] * wji;
            sq += wji * wji;
        }
        let norm = sq.sqrt();
        if norm <= T::ZERO_NORM_TOL {
            return Err(Error::ZeroNorm {
                norm: norm.to_f64(),
                tol: T::ZERO_NORM_TOL.to_f64(),
            });
        }
        sims.push(ip / norm / eta);
    }
    Ok(log_sum_exp(&sims) - sims[y])
}

fn check_distribution<T: Scalar>(name: &str, p: &Tensor<T>) -> Result<()> {
    let mut sum = T::ZERO;
    for &v in p.data() {
        if v < T::ZERO {
            return Err(Error::NotADistribution(format!(
                "{name} has negative entry {}",
                v.to_f64()
            )));
        }
        sum += v;
    }
    if (sum.to_f64() - 1.0).abs() > 1e-6 {
        return Err(Error::NotADistribution(format!(
            "{name} sums to {}",
            sum.to_f64()
        )));
    }
    Ok(())
}

/// KL(p || q) = sum_i p_i log(p_i / q_i), with q floored at `PROB_FLOOR` and
/// the usual 0 log 0 = 0 convention.
pub fn kl_divergence<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<T> {
    if p.shape() != q.shape() {
        return Err(Error::shape(format!(
            "kl on {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    let floor = T::from_f64(PROB_FLOOR);
    let mut acc = T::ZERO;
    for (&pi, &qi) in p.data().iter().zip(q.data()) {
        if pi > T::ZERO {
            acc += pi * (pi.ln() - qi.max_s(floor).ln());
        }
    }
    Ok(acc)
}

/// Fraction of the KL term mass carried by classes outside p's top-m.
///
/// Per-class contributions are taken in absolute value; "top-m" is by p
/// probability with ties broken toward the lower class index. Errors with
/// `ZeroDivergence` when every contribution is zero (p == q), since the
/// share is then undefined.
pub fn kl_tail_share<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>, top_m: usize) -> Result<T> {
    if p.shape() != q.shape() {
        return Err(Error::shape(format!(
            "kl_tail_share on {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    let floor = T::from_f64(PROB_FLOOR);
    let c = p.numel();
    let terms: Vec<T> = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(&pi, &qi)| {
            if pi > T::ZERO {
                (pi * (pi.ln() - qi.max_s(floor).ln())).abs()
            } else {
                T::ZERO
            }
        })
        .collect();
    let total: T = terms.iter().copied().sum();
    if total <= T::ZERO {
        return Err(Error::ZeroDivergence);
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        p.data()[b]
            .partial_cmp(&p.data()[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let head: T = order.iter().take(top_m).map(|&i| terms[i]).sum();
    Ok((total - head) / total)
}

// ── tape builders ──────────────────────────────────────────────────────────

/// Mean contrastive loss over a batch of anchors.
///
/// `u` is [B, d] (rows need not be pre-normalized; they are normalized here),
/// `v` is [B, d] of unit-norm positives, `negatives_t` is the negative set
/// already transposed to [d, N]. The caller registers `v` and `negatives_t`
/// as tape constants when they must not receive gradient.
pub fn contrastive_batch<T: Scalar>(
    tape: &mut Tape<T>,
    u: VarId,
    v: VarId,
    negatives_t: VarId,
    tau: T,
) -> Result<VarId> {
    if tau <= T::ZERO {
        return Err(Error::config(format!(
            "contrastive tau must be positive, got {tau}"
        )));
    }
    let b = tape.value(u).view_rows();
    let un = tape.normalize_rows(u)?;
    let pos = tape.row_dot(un, v)?; // [B]
    let neg = tape.matmul(un, negatives_t)?; // [B, N]
    let pos_col = tape.reshape(pos, vec![b, 1])?;
    let cat = tape.concat_cols(pos_col, neg)?; // [B, 1+N]
    let inv_tau = T::ONE / tau;
    let scaled = tape.scale(cat, inv_tau);
    let lse = tape.log_sum_exp_rows(scaled); // [B]
    let pos_scaled = tape.scale(pos, inv_tau);
    let per_row = tape.sub(lse, pos_scaled)?;
    Ok(tape.mean_all(per_row))
}

/// Mean normalized cross-entropy over a batch.
///
/// `z` is [B, m] of raw (unnormalized) logit vectors, `w` the [m, C] class
/// weight matrix, `log_eta` a live [1] parameter; sharpness eta = exp(log_eta)
/// stays positive for any parameter value.
pub fn nce_batch<T: Scalar>(
    tape: &mut Tape<T>,
    z: VarId,
    w: VarId,
    log_eta: VarId,
    y: &[usize],
) -> Result<VarId> {
    let zn = tape.normalize_rows(z)?;
    let wt = tape.transpose(w)?; // [C, m]
    let wtn = tape.normalize_rows(wt)?;
    let wn = tape.transpose(wtn)?; // [m, C], unit columns
    let cos = tape.matmul(zn, wn)?; // [B, C]
    let eta = tape.exp(log_eta);
    let sharpened = tape.div_by_scalar(cos, eta)?;
    let picked = tape.pick_per_row(sharpened, y)?;
    let lse = tape.log_sum_exp_rows(sharpened);
    let per_row = tape.sub(lse, picked)?;
    Ok(tape.mean_all(per_row))
}

/// Raw affine logits [B, C] from activations [B, m].
pub fn logits_batch<T: Scalar>(
    tape: &mut Tape<T>,
    h: VarId,
    w: VarId,
    bias: VarId,
) -> Result<VarId> {
    let z = tape.matmul(h, w)?;
    tape.add_row(z, bias)
}

/// Mean softmax cross-entropy from raw logits.
pub fn ce_from_logits<T: Scalar>(tape: &mut Tape<T>, logits: VarId, y: &[usize]) -> Result<VarId> {
    let picked = tape.pick_per_row(logits, y)?;
    let lse = tape.log_sum_exp_rows(logits);
    let per_row = tape.sub(lse, picked)?;
    Ok(tape.mean_all(per_row))
}

/// Mean KL(softmax(logits_clean) || softmax(logits_adv)) over the batch,
/// with the same probability floor as the pure form.
pub fn kl_batch<T: Scalar>(
    tape: &mut Tape<T>,
    logits_clean: VarId,
    logits_adv: VarId,
) -> Result<VarId> {
    let b = tape.value(logits_clean).view_rows();
    if tape.value(logits_clean).shape() != tape.value(logits_adv).shape() {
        return Err(Error::shape(format!(
            "kl_batch on {:?} vs {:?}",
            tape.value(logits_clean).shape(),
            tape.value(logits_adv).shape()
        )));
    }
    let floor = T::from_f64(PROB_FLOOR);
    let p = tape.softmax_rows(logits_clean);
    let q = tape.softmax_rows(logits_adv);
    let pc = tape.clamp_min(p, floor);
    let qc = tape.clamp_min(q, floor);
    let lp = tape.log(pc);
    let lq = tape.log(qc);
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum_all(terms);
    Ok(tape.scale(total, T::ONE / T::from_f64(b as f64)))
}

// ── combined objective ──────────────────────────────────────────────────────

/// Loss-term hyperparameters. The sharpness eta itself lives with the model
/// as a trainable log-parameter; this carries its initial value.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Contrastive temperature.
    pub tau: f32,
    /// Initial eta for the normalized cross-entropy head.
    pub eta_init: f32,
    /// Weight on the KL term in the cross-entropy + KL comparison arm.
    pub kl_weight: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.2,
            eta_init: 1.0 / 30.0,
            kl_weight: 1.0,
        }
    }
}

/// The full two-head objective for a batch: attack the normalized
/// cross-entropy head with PGD, then score
///
///   mean_i [ nce(f(x_adv_i), y_i) + cl(feat(x_adv_i), clean_feat(x_i)) ]
///
/// with the two terms summed unweighted. Negatives come from the whole
/// memory bank. Returns the loss value and the adversarial batch; gradient
/// plumbing for training builds the same graph with trainable weights.
pub fn combined_objective(
    x: &crate::numerics::Tensor<f32>,
    y: &[usize],
    enc: &crate::model::EncoderParams,
    memory: &crate::membank::MemoryBank,
    cfg: &LossConfig,
    atk: &crate::attack::AttackConfig,
    streams: &[crate::numerics::RngState],
) -> Result<(f32, crate::numerics::Tensor<f32>)> {
    use crate::attack::{pgd_attack_batch, AttackLossKind};
    use crate::model::{clean_features, net_forward, register_net};

    if enc.clean.is_none() {
        return Err(Error::config(
            "combined objective needs a clean encoder".to_string(),
        ));
    }
    if memory.dim() != enc.arch.d_feat {
        return Err(Error::shape(format!(
            "memory bank dim {} vs feature dim {}",
            memory.dim(),
            enc.arch.d_feat
        )));
    }
    let x_adv = pgd_attack_batch(x, y, enc, AttackLossKind::Nce, atk, streams)?;

    let feat_clean = clean_features(enc, x)?;
    let negatives_t = crate::numerics::transpose(&memory.negatives());

    let mut tape = Tape::new();
    let ids = register_net(&mut tape, &enc.robust, false);
    let xa = tape.constant(x_adv.clone());
    let out = net_forward(&mut tape, &ids, &enc.arch, xa)?;
    let log_eta = tape.constant(enc.log_eta.clone());
    let nce = nce_batch(&mut tape, out.trunk_h, ids.classifier.w, log_eta, y)?;
    let fc = tape.constant(feat_clean);
    let negs = tape.constant(negatives_t);
    let cl = contrastive_batch(&mut tape, out.feat, fc, negs, cfg.tau)?;
    let total = tape.add(nce, cl)?;
    Ok((tape.value(total).item(), x_adv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, RngState};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const LOG_ONE_PLUS_E_INV: f64 = 0.313_261_687_518_222_86;

    #[test]
    fn contrastive_orthogonal_negative_closed_form() {
        let u = Tensor::vector(vec![1.0_f64, 0.0]);
        let neg = Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let l = contrastive_loss(&u, &u, &neg, 1.0).unwrap();
        assert_relative_eq!(l, LOG_ONE_PLUS_E_INV, epsilon = 1e-12);
    }

    #[test]
    fn contrastive_all_negatives_equal_positive() {
        // Every similarity identical: loss = log(N + 1) for any tau.
        for (n, tau) in [(1usize, 0.3), (7, 1.0), (32, 0.07)] {
            let u = Tensor::vector(vec![0.6_f64, 0.8]);
            let mut negdata = Vec::new();
            for _ in 0..n {
                negdata.extend_from_slice(u.data());
            }
            let neg = Tensor::from_vec(vec![n, 2], negdata).unwrap();
            let l = contrastive_loss(&u, &u, &neg, tau).unwrap();
            assert_relative_eq!(l, ((n + 1) as f64).ln(), epsilon = 1e-9);
        }
    }

    #[test]
    fn contrastive_rejects_empty_negatives() {
        let u = Tensor::vector(vec![1.0_f32, 0.0]);
        let neg = Tensor::from_vec(vec![0, 2], vec![]).unwrap();
        assert!(matches!(
            contrastive_loss(&u, &u, &neg, 0.2),
            Err(Error::EmptyNegatives)
        ));
    }

    #[test]
    fn contrastive_survives_extreme_temperature() {
        // 1/tau = 1000: naive exponentials overflow, shifted form must not.
        let u = Tensor::vector(vec![1.0_f64, 0.0]);
        let neg = Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let l = contrastive_loss(&u, &u, &neg, 0.001).unwrap();
        assert!(l.is_finite());
        assert!(l >= 0.0 && l < 1e-6);
    }

    #[test]
    fn nce_uniform_similarities_give_log_c() {
        // z equidistant from every class weight: loss = log C.
        let m = 3;
        let c = 10;
        // columns all equal => all cosines equal
        let mut w = Tensor::zeros(&[m, c]);
        for j in 0..m {
            for i in 0..c {
                w.data_mut()[j * c + i] = [0.2, -0.4, 0.9][j];
            }
        }
        let z = Tensor::vector(vec![1.0_f64, 0.5, -0.3]);
        for y in [0, 4, 9] {
            let l = nce_loss(&z, &w, y, 0.0333).unwrap();
            assert_relative_eq!(l, (c as f64).ln(), epsilon = 1e-9);
        }
    }

    #[test]
    fn nce_orthogonal_two_class_closed_form() {
        let z = Tensor::vector(vec![2.0_f64, 0.0]); // normalizes to e1
        let w = Tensor::from_vec(vec![2, 2], vec![3.0, 0.0, 0.0, 5.0]).unwrap();
        let l = nce_loss(&z, &w, 0, 1.0).unwrap();
        assert_relative_eq!(l, LOG_ONE_PLUS_E_INV, epsilon = 1e-12);
    }

    #[test]
    fn nce_rejects_bad_label_and_zero_weight() {
        let z = Tensor::vector(vec![1.0_f32, 0.0]);
        let w = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            nce_loss(&z, &w, 2, 1.0),
            Err(Error::InvalidLabel { label: 2, classes: 2 })
        ));
        let wz = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(nce_loss(&z, &wz, 0, 1.0), Err(Error::ZeroNorm { .. })));
        let zz = Tensor::vector(vec![0.0_f32, 0.0]);
        assert!(matches!(nce_loss(&zz, &w, 0, 1.0), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn kl_closed_forms() {
        let p = Tensor::vector(vec![1.0_f64, 0.0]);
        let q = Tensor::vector(vec![0.5_f64, 0.5]);
        assert_relative_eq!(
            kl_divergence(&p, &q).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_relative_eq!(kl_divergence(&q, &q).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_rejects_non_distributions() {
        let p = Tensor::vector(vec![0.7_f64, 0.7]);
        let q = Tensor::vector(vec![0.5_f64, 0.5]);
        assert!(matches!(
            kl_divergence(&p, &q),
            Err(Error::NotADistribution(_))
        ));
        let neg = Tensor::vector(vec![1.5_f64, -0.5]);
        assert!(matches!(
            kl_divergence(&neg, &q),
            Err(Error::NotADistribution(_))
        ));
    }

    #[test]
    fn kl_zero_q_entry_hits_floor_not_infinity() {
        let p = Tensor::vector(vec![0.5_f64, 0.5]);
        let q = Tensor::vector(vec![1.0_f64, 0.0]);
        let expected = 0.5 * (0.5_f64.ln() - 1.0_f64.ln()) + 0.5 * (0.5_f64.ln() - PROB_FLOOR.ln());
        let got = kl_divergence(&p, &q).unwrap();
        assert!(got.is_finite());
        assert_relative_eq!(got, expected, epsilon = 1e-9);
    }

    #[test]
    fn tail_share_edge_cases() {
        let p = Tensor::vector(vec![1.0_f64, 0.0]);
        let q = Tensor::vector(vec![0.5_f64, 0.5]);
        assert_relative_eq!(kl_tail_share(&p, &q, 1).unwrap(), 0.0, epsilon = 1e-15);
        assert!(matches!(
            kl_tail_share(&q, &q, 1),
            Err(Error::ZeroDivergence)
        ));
    }

    #[test]
    fn tail_share_tie_break_prefers_lower_index() {
        // p has equal mass everywhere; top-2 must be classes {0, 1}. q skews
        // only class 3, so all divergence mass sits outside any {0,1} head.
        let p = Tensor::vector(vec![0.25_f64; 4]);
        let q = Tensor::vector(vec![0.25 + 0.075, 0.25 + 0.075, 0.25 + 0.075, 0.025]);
        let share = kl_tail_share(&p, &q, 2).unwrap();
        let terms: Vec<f64> = p
            .data()
            .iter()
            .zip(q.data())
            .map(|(&pi, &qi)| (pi * (pi.ln() - qi.ln())).abs())
            .collect();
        let total: f64 = terms.iter().sum();
        let expected = (terms[2] + terms[3]) / total;
        assert_relative_eq!(share, expected, epsilon = 1e-12);
    }

    #[test]
    fn batch_builders_match_pure_forms() {
        let rng = RngState::new(417);
        for trial in 0..20 {
            let d = 6;
            let n_neg = 5;
            let b = 3;
            let mut r = rng.derive(trial);
            let mut udata = Vec::new();
            let mut vdata = Vec::new();
            for _ in 0..b {
                udata.extend(r.unit_vector(d).iter().map(|&x| x * r.uniform_in(0.5, 2.0)));
                vdata.extend(r.unit_vector(d));
            }
            let mut negdata = Vec::new();
            for _ in 0..n_neg {
                negdata.extend(r.unit_vector(d));
            }
            let u = Tensor::from_vec(vec![b, d], udata).unwrap();
            let v = Tensor::from_vec(vec![b, d], vdata).unwrap();
            let negs = Tensor::from_vec(vec![n_neg, d], negdata).unwrap();
            let tau = 0.2;

            let mut tape = Tape::<f64>::new();
            let ui = tape.input(u.clone());
            let vi = tape.constant(v.clone());
            let nt = tape.constant(crate::numerics::transpose(&negs));
            let loss = contrastive_batch(&mut tape, ui, vi, nt, tau).unwrap();
            let got = tape.value(loss).item();

            let mut expect = 0.0;
            for i in 0..b {
                let urow = crate::numerics::l2_normalize(
                    &Tensor::vector(u.row(i).to_vec()),
                )
                .unwrap();
                let vrow = Tensor::vector(v.row(i).to_vec());
                expect += contrastive_loss(&urow, &vrow, &negs, tau).unwrap();
            }
            expect /= b as f64;
            assert_relative_eq!(got, expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn nce_batch_matches_pure_form() {
        let mut rng = RngState::new(31);
        let (b, m, c) = (4, 5, 7);
        let z = Tensor::from_vec(
            vec![b, m],
            (0..b * m).map(|_| rng.normal()).collect::<Vec<f64>>(),
        )
        .unwrap();
        let w = Tensor::from_vec(
            vec![m, c],
            (0..m * c).map(|_| rng.normal()).collect::<Vec<f64>>(),
        )
        .unwrap();
        let y: Vec<usize> = (0..b).map(|i| i % c).collect();
        let eta = 1.0 / 30.0;

        let mut tape = Tape::<f64>::new();
        let zi = tape.input(z.clone());
        let wi = tape.input(w.clone());
        let le = tape.input(Tensor::scalar((eta as f64).ln()));
        let loss = nce_batch(&mut tape, zi, wi, le, &y).unwrap();
        let got = tape.value(loss).item();

        let mut expect = 0.0;
        for i in 0..b {
            expect += nce_loss(&Tensor::vector(z.row(i).to_vec()), &w, y[i], eta).unwrap();
        }
        expect /= b as f64;
        assert_relative_eq!(got, expect, epsilon = 1e-10);
    }

    #[test]
    fn kl_batch_matches_pure_form() {
        let mut rng = RngState::new(88);
        let (b, c) = (3, 6);
        let lc = Tensor::from_vec(
            vec![b, c],
            (0..b * c).map(|_| rng.normal() * 2.0).collect::<Vec<f64>>(),
        )
        .unwrap();
        let la = Tensor::from_vec(
            vec![b, c],
            (0..b * c).map(|_| rng.normal() * 2.0).collect::<Vec<f64>>(),
        )
        .unwrap();
        let mut tape = Tape::<f64>::new();
        let ci = tape.input(lc.clone());
        let ai = tape.input(la.clone());
        let loss = kl_batch(&mut tape, ci, ai).unwrap();
        let got = tape.value(loss).item();

        let mut expect = 0.0;
        for i in 0..b {
            let p = Tensor::vector(crate::numerics::stable_softmax(lc.row(i)));
            let q = Tensor::vector(crate::numerics::stable_softmax(la.row(i)));
            expect += kl_divergence(&p, &q).unwrap();
        }
        expect /= b as f64;
        assert_relative_eq!(got, expect, epsilon = 1e-10);
    }

    #[test]
    fn loss_builders_pass_finite_differences() {
        let mut rng = RngState::new(2024);
        let (b, d, n_neg, c) = (2, 4, 3, 5);
        let u = Tensor::from_vec(
            vec![b, d],
            (0..b * d).map(|_| rng.normal()).collect::<Vec<f64>>(),
        )
        .unwrap();
        let v: Tensor<f64> = {
            let mut data = Vec::new();
            for _ in 0..b {
                data.extend(rng.unit_vector(d));
            }
            Tensor::from_vec(vec![b, d], data).unwrap()
        };
        let negs_t: Tensor<f64> = {
            let mut data = Vec::new();
            for _ in 0..n_neg {
                data.extend(rng.unit_vector(d));
            }
            crate::numerics::transpose(&Tensor::from_vec(vec![n_neg, d], data).unwrap())
        };
        let w = Tensor::from_vec(
            vec![d, c],
            (0..d * c).map(|_| rng.normal()).collect::<Vec<f64>>(),
        )
        .unwrap();
        let log_eta = Tensor::scalar((1.0_f64 / 30.0).ln());
        let y: Vec<usize> = vec![1, 3];

        let vv = v.clone();
        let nn = negs_t.clone();
        let yy = y.clone();
        let f = move |tape: &mut Tape<f64>, ids: &[VarId]| {
            let vi = tape.constant(vv.clone());
            let ni = tape.constant(nn.clone());
            let cl = contrastive_batch(tape, ids[0], vi, ni, 0.2)?;
            let nce = nce_batch(tape, ids[0], ids[1], ids[2], &yy)?;
            tape.add(cl, nce)
        };
        let report = finite_diff_check(
            &f,
            &[u, w, log_eta],
            &["u", "w", "log_eta"],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.all_pass(),
            "max rel err {} at {:?}",
            report.max_rel_err(),
            report.entries
        );
    }

    proptest! {
        #[test]
        fn nce_scale_invariance(c_scale in 0.05_f64..20.0, seed in 0u64..5000) {
            let mut rng = RngState::new(seed);
            let (m, c) = (4, 6);
            let z = Tensor::vector((0..m).map(|_| rng.normal() + 0.1).collect::<Vec<f64>>());
            if z.norm() < 1e-3 {
                return Ok(());
            }
            let w = Tensor::from_vec(
                vec![m, c],
                (0..m * c).map(|_| rng.normal()).collect::<Vec<f64>>(),
            ).unwrap();
            let zs = z.map(|x| x * c_scale);
            let a = nce_loss(&z, &w, 2, 0.1).unwrap();
            let b = nce_loss(&zs, &w, 2, 0.1).unwrap();
            prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }

        #[test]
        fn contrastive_decreases_in_positive_similarity(seed in 0u64..5000, t in 0.05_f64..0.9) {
            // Raising u.v while every u.n_i stays fixed must strictly lower
            // the loss. Negatives are projected into the orthogonal
            // complement of span{u, v} so that rotating u toward v inside
            // that plane leaves all negative similarities at exactly zero.
            let mut rng = RngState::new(seed);
            let d = 8;
            let u = Tensor::vector(rng.unit_vector(d));
            let v = Tensor::vector(rng.unit_vector(d));
            let uv = u.dot(&v).unwrap();
            prop_assume!(uv.abs() < 0.95);
            // Gram-Schmidt frame of span{u, v}.
            let e1 = u.clone();
            let mut w: Vec<f64> = v
                .data()
                .iter()
                .zip(e1.data())
                .map(|(&vi, &ui)| vi - uv * ui)
                .collect();
            crate::numerics::l2_normalize_slice(&mut w).unwrap();
            let mut negdata = Vec::new();
            let mut kept = 0;
            for _ in 0..6 {
                let raw = rng.unit_vector(d);
                let a: f64 = raw.iter().zip(e1.data()).map(|(x, y)| x * y).sum();
                let b: f64 = raw.iter().zip(&w).map(|(x, y)| x * y).sum();
                let mut proj: Vec<f64> = raw
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x - a * e1.data()[i] - b * w[i])
                    .collect();
                if crate::numerics::l2_normalize_slice(&mut proj).is_ok() {
                    negdata.extend(proj);
                    kept += 1;
                }
                if kept == 3 {
                    break;
                }
            }
            prop_assume!(kept == 3);
            let negs = Tensor::from_vec(vec![3, d], negdata).unwrap();
            let stepped = Tensor::vector(
                u.data().iter().zip(v.data()).map(|(&a, &b)| a + t * (b - a)).collect(),
            );
            let u2 = crate::numerics::l2_normalize(&stepped).unwrap();
            prop_assume!(u2.dot(&v).unwrap() > uv + 1e-6);
            let l1 = contrastive_loss(&u, &v, &negs, 0.2).unwrap();
            let l2 = contrastive_loss(&u2, &v, &negs, 0.2).unwrap();
            prop_assert!(l2 < l1, "{} -> {}", l1, l2);
        }

        #[test]
        fn kl_nonnegative(seed in 0u64..5000) {
            let mut rng = RngState::new(seed);
            let c = 8;
            let p = Tensor::vector(crate::numerics::stable_softmax(
                &(0..c).map(|_| rng.normal() * 3.0).collect::<Vec<f64>>(),
            ));
            let q = Tensor::vector(crate::numerics::stable_softmax(
                &(0..c).map(|_| rng.normal() * 3.0).collect::<Vec<f64>>(),
            ));
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= -1e-12, "kl = {}", kl);
        }

        #[test]
        fn contrastive_is_nonnegative(seed in 0u64..2000) {
            let mut rng = RngState::new(seed);
            let d = 6;
            let u = Tensor::vector(rng.unit_vector(d));
            let v = Tensor::vector(rng.unit_vector(d));
            let mut negdata = Vec::new();
            for _ in 0..3 {
                negdata.extend(rng.unit_vector(d));
            }
            let negs = Tensor::from_vec(vec![3, d], negdata).unwrap();
            let l = contrastive_loss(&u, &v, &negs, 0.2).unwrap();
            prop_assert!(l >= 0.0);
        }
    }

    mod combined {
        use super::*;
        use crate::attack::AttackConfig;
        use crate::membank::MemoryBank;
        use crate::model::{
            clean_features, init_encoder, init_params, robust_forward, ArchitectureConfig,
            HeadKind, InputShape, TrunkSpec,
        };
        use crate::numerics::tags;

        fn fixture() -> (crate::model::EncoderParams, MemoryBank, Tensor<f32>, Vec<usize>) {
            let arch = ArchitectureConfig {
                input: InputShape::Flat(8),
                trunk: TrunkSpec::Mlp { widths: vec![10] },
                d_feat: 6,
                classes: 4,
            };
            let rng = RngState::new(91);
            let mut enc = init_encoder(&arch, HeadKind::Normalized, 1.0 / 30.0, &rng).unwrap();
            enc.clean = Some(init_params(&arch, &rng.derive(tags::INIT_CLEAN)).unwrap());
            let bank = MemoryBank::init_bank(8, 6, &rng.derive(tags::BANK_INIT)).unwrap();
            let mut dr = rng.derive(77);
            let b = 3;
            let x = Tensor::from_vec(
                vec![b, 8],
                (0..b * 8).map(|_| dr.uniform_in(0.1, 0.9) as f32).collect(),
            )
            .unwrap();
            (enc, bank, x, vec![0, 2, 3])
        }

        #[test]
        fn decomposes_into_separate_loss_terms() {
            let (enc, bank, x, y) = fixture();
            let cfg = LossConfig::default();
            let atk = AttackConfig::paper_default().with_steps(3);
            let streams: Vec<RngState> =
                (0..3).map(|i| RngState::new(5).derive(i as u64)).collect();
            let (total, x_adv) =
                combined_objective(&x, &y, &enc, &bank, &cfg, &atk, &streams).unwrap();

            // Recompute each term from the returned x_adv with the pure
            // scalar forms.
            let eta = enc.log_eta.item().exp();
            let negs = bank.negatives();
            let feat_clean = clean_features(&enc, &x).unwrap();
            let mut acc = 0.0f32;
            for i in 0..3 {
                let xi = Tensor::vector(x_adv.row(i).to_vec());
                let (u, _) = robust_forward(&xi, &enc).unwrap();
                let (trunk_h, _, _) =
                    crate::model::forward_values(&enc.robust, &enc.arch, &xi.reshaped(vec![1, 8]).unwrap())
                        .unwrap();
                let z = Tensor::vector(trunk_h.row(0).to_vec());
                let nce = nce_loss(&z, &enc.robust.classifier.w, y[i], eta).unwrap();
                let v = Tensor::vector(feat_clean.row(i).to_vec());
                let cl = contrastive_loss(&u, &v, &negs, cfg.tau).unwrap();
                acc += nce + cl;
            }
            assert_relative_eq!(total, acc / 3.0, epsilon = 1e-6);
        }

        #[test]
        fn requires_clean_encoder_and_matching_bank() {
            let (mut enc, bank, x, y) = fixture();
            let cfg = LossConfig::default();
            let atk = AttackConfig::paper_default().with_steps(1);
            let streams: Vec<RngState> =
                (0..3).map(|i| RngState::new(5).derive(i as u64)).collect();
            let wrong_bank = MemoryBank::init_bank(8, 5, &RngState::new(1)).unwrap();
            assert!(matches!(
                combined_objective(&x, &y, &enc, &wrong_bank, &cfg, &atk, &streams),
                Err(Error::ShapeMismatch(_))
            ));
            enc.clean = None;
            assert!(matches!(
                combined_objective(&x, &y, &enc, &bank, &cfg, &atk, &streams),
                Err(Error::Config(_))
            ));
        }
    }
}

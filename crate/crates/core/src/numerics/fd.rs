use crate::error::Result;

use super::scalar::Scalar;
use super::tape::{Tape, VarId};
use super::tensor::Tensor;

/// A differentiable scalar function of a parameter list, expressed as a tape
/// construction. The closure receives one `VarId` per parameter, in order,
/// and must return the loss variable.
pub trait TapeFn<T: Scalar>: Fn(&mut Tape<T>, &[VarId]) -> Result<VarId> {}
impl<T: Scalar, F: Fn(&mut Tape<T>, &[VarId]) -> Result<VarId>> TapeFn<T> for F {}

/// Loss value plus the gradient with respect to every parameter. Parameters
/// the loss does not reach get zero gradients.
pub fn value_and_grad<T: Scalar>(
    f: &impl TapeFn<T>,
    params: &[Tensor<T>],
) -> Result<(T, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.input(p.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let out = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.get_or_zeros(id, p.shape()))
        .collect();
    Ok((value, out))
}

pub fn grad<T: Scalar>(f: &impl TapeFn<T>, params: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    value_and_grad(f, params).map(|(_, g)| g)
}

fn eval_with_signature<T: Scalar>(
    f: &impl TapeFn<T>,
    params: &[Tensor<T>],
) -> Result<(T, Vec<bool>)> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.input(p.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    Ok((tape.value(loss).item(), tape.kink_signature()))
}

/// Per-parameter outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdEntry {
    pub name: String,
    /// worst relative error over all checked coordinates
    pub max_rel_err: f64,
    /// flat index of the worst coordinate
    pub worst_coord: usize,
    /// coordinates compared against the analytic gradient
    pub checked: usize,
    /// coordinates skipped because the +/-h evaluations straddled a kink
    pub excluded: usize,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub tol: f64,
    pub step: f64,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }

    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tol)
    }

    pub fn total_checked(&self) -> usize {
        self.entries.iter().map(|e| e.checked).sum()
    }

    pub fn total_excluded(&self) -> usize {
        self.entries.iter().map(|e| e.excluded).sum()
    }
}

/// Relative error with a floor: coordinates where both values are tiny are
/// compared absolutely, otherwise one ulp of finite-difference noise on a
/// near-zero entry would dominate the ratio.
fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Central-difference check of the tape gradient at the given point.
///
/// Every coordinate of every parameter is perturbed by +/-`step`. A
/// coordinate is excluded (not failed) when the two perturbed forward passes
/// disagree on any relu/clamp branch: the function is not differentiable
/// across that boundary, so neither estimate is meaningful there.
pub fn finite_diff_check<T: Scalar>(
    f: &impl TapeFn<T>,
    params: &[Tensor<T>],
    names: &[&str],
    step: f64,
    tol: f64,
) -> Result<FdReport> {
    assert_eq!(params.len(), names.len());
    let (_, analytic) = value_and_grad(f, params)?;
    let h = T::from_f64(step);

    let mut entries = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, name) in names.iter().enumerate() {
        let mut entry = FdEntry {
            name: name.to_string(),
            max_rel_err: 0.0,
            worst_coord: 0,
            checked: 0,
            excluded: 0,
        };
        for ci in 0..params[pi].numel() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let (f_plus, sig_plus) = eval_with_signature(f, &work)?;
            work[pi].data_mut()[ci] = orig - h;
            let (f_minus, sig_minus) = eval_with_signature(f, &work)?;
            work[pi].data_mut()[ci] = orig;

            if sig_plus != sig_minus {
                entry.excluded += 1;
                continue;
            }
            let fd = (f_plus.to_f64() - f_minus.to_f64()) / (2.0 * step);
            let an = analytic[pi].data()[ci].to_f64();
            let err = rel_err(fd, an);
            entry.checked += 1;
            if err > entry.max_rel_err {
                entry.max_rel_err = err;
                entry.worst_coord = ci;
            }
        }
        entries.push(entry);
    }
    Ok(FdReport {
        entries,
        tol,
        step,
    })
}

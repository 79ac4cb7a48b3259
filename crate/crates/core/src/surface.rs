//! Loss-surface grids: evaluate the serving-head loss on an S x S lattice
//! around one sample, spanned by two directions (adversarial, Rademacher,
//! or zero), and export the result as CSV for plotting.

use crate::attack::{attack_loss_on_tape, AttackLossKind};
use crate::defense::head_loss_value;
use crate::error::{Error, Result};
use crate::model::EncoderParams;
use crate::numerics::{RngState, Tape, Tensor};

// ── directions ──────────────────────────────────────────────────────────────

/// How one grid axis direction is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirKind {
    Rademacher,
    Adversarial,
    Zero,
}

impl DirKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rademacher" => Ok(DirKind::Rademacher),
            "adversarial" | "adv" => Ok(DirKind::Adversarial),
            "zero" => Ok(DirKind::Zero),
            _ => Err(Error::config(format!(
                "unknown direction {s:?}; expected rademacher|adversarial|zero"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DirKind::Rademacher => "rademacher",
            DirKind::Adversarial => "adversarial",
            DirKind::Zero => "zero",
        }
    }
}

/// Entries +-s equiprobably.
pub fn rademacher_direction(numel: usize, rng: &RngState, s: f32) -> Tensor<f32> {
    let mut st = *rng;
    let data: Vec<f32> = (0..numel)
        .map(|_| if st.next_u64() & 1 == 1 { s } else { -s })
        .collect();
    Tensor::from_vec(vec![numel], data).expect("vector shape")
}

/// Sign of the input gradient of the serving-head classification loss at x,
/// scaled by s: the FGSM step direction. Built on the same tape graph the
/// attacker differentiates.
pub fn adversarial_direction(
    x: &Tensor<f32>,
    y: usize,
    enc: &EncoderParams,
    s: f32,
) -> Result<Tensor<f32>> {
    let mut tape: Tape<f32> = Tape::new();
    let row = x.reshaped(vec![1, x.numel()])?;
    let xi = tape.input(row);
    let loss = attack_loss_on_tape(&mut tape, enc, AttackLossKind::from(enc.head), xi, &[y])?;
    let grads = tape.backward(loss)?;
    let g = grads.get_or_zeros(xi, &[1, x.numel()]);
    let data: Vec<f32> = g
        .data()
        .iter()
        .map(|&v| {
            if v > 0.0 {
                s
            } else if v < 0.0 {
                -s
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(vec![x.numel()], data)
}

pub fn zero_direction(numel: usize) -> Tensor<f32> {
    Tensor::zeros(&[numel])
}

/// Dispatch one axis direction. The stream is consumed only by Rademacher
/// draws, so callers derive a distinct stream per axis.
pub fn make_direction(
    kind: DirKind,
    x: &Tensor<f32>,
    y: usize,
    enc: &EncoderParams,
    s: f32,
    rng: &RngState,
) -> Result<Tensor<f32>> {
    match kind {
        DirKind::Rademacher => Ok(rademacher_direction(x.numel(), rng, s)),
        DirKind::Adversarial => adversarial_direction(x, y, enc, s),
        DirKind::Zero => Ok(zero_direction(x.numel())),
    }
}

// ── the grid ────────────────────────────────────────────────────────────────

/// Full description of one surface evaluation.
#[derive(Debug, Clone)]
pub struct SurfaceSpec {
    /// Flat center image.
    pub x: Tensor<f32>,
    pub y: usize,
    pub dir1: DirKind,
    pub dir2: DirKind,
    /// Half-range r; axes sweep [-r, r].
    pub radius: f32,
    /// Direction entry magnitude s.
    pub scale: f32,
    /// Grid resolution S per axis; odd so the center is a grid point.
    pub resolution: usize,
}

impl SurfaceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 2 == 0 {
            return Err(Error::config(format!(
                "surface resolution {} must be odd so the center is a grid point",
                self.resolution
            )));
        }
        if !(self.radius > 0.0) {
            return Err(Error::config(format!(
                "surface radius {} must be > 0",
                self.radius
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config(format!(
                "surface scale {} must be > 0",
                self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SurfaceGrid {
    /// [S, S] loss values; rows sweep the first direction's coefficient.
    pub values: Tensor<f32>,
    /// The shared coefficient axis for both directions.
    pub axis: Vec<f32>,
    /// Number of cells where at least one pixel needed clamping to [0,1].
    pub clamped_cells: usize,
    /// loss(x, y): the center cell, from the same code path as evaluation.
    pub center: f32,
}

impl SurfaceGrid {
    pub fn max_minus_center(&self) -> f32 {
        let max = self
            .values
            .data()
            .iter()
            .fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        max - self.center
    }
}

/// Evaluate cell (i, j) = loss(x + a_i d1 + b_j d2, y) with a and b sweeping
/// [-r, r] uniformly. Out-of-bounds pixels are clamped to [0,1] and counted.
pub fn loss_grid(
    enc: &EncoderParams,
    spec: &SurfaceSpec,
    d1: &Tensor<f32>,
    d2: &Tensor<f32>,
) -> Result<SurfaceGrid> {
    spec.validate()?;
    let n = spec.x.numel();
    if d1.numel() != n || d2.numel() != n {
        return Err(Error::shape(format!(
            "direction sizes {} / {} vs image {}",
            d1.numel(),
            d2.numel(),
            n
        )));
    }
    let s = spec.resolution;
    let axis: Vec<f32> = if s == 1 {
        vec![0.0]
    } else {
        (0..s)
            .map(|i| -spec.radius + 2.0 * spec.radius * i as f32 / (s - 1) as f32)
            .collect()
    };

    let mut values = Tensor::<f32>::zeros(&[s, s]);
    let mut clamped_cells = 0usize;
    let mut point = Tensor::<f32>::zeros(&[n]);
    for (i, &a) in axis.iter().enumerate() {
        for (j, &b) in axis.iter().enumerate() {
            let mut clamped = false;
            for (idx, pv) in point.data_mut().iter_mut().enumerate() {
                let raw = spec.x.data()[idx] + a * d1.data()[idx] + b * d2.data()[idx];
                let c = raw.clamp(0.0, 1.0);
                clamped |= c != raw;
                *pv = c;
            }
            if clamped {
                clamped_cells += 1;
            }
            values.row_mut(i)[j] = head_loss_value(enc, &point, spec.y)?;
        }
    }
    let center = values.row(s / 2)[s / 2];
    Ok(SurfaceGrid {
        values,
        axis,
        clamped_cells,
        center,
    })
}

// ── CSV export ──────────────────────────────────────────────────────────────

/// CSV body: `# key = value` comment lines, then S rows of S loss values.
pub fn grid_csv(grid: &SurfaceGrid, comments: &[(String, String)]) -> String {
    let s = grid.axis.len();
    let mut out = String::new();
    for (k, v) in comments {
        out.push_str(&format!("# {k} = {v}\n"));
    }
    out.push_str(&format!("# resolution = {s}\n"));
    out.push_str(&format!("# clamped_cells = {}\n", grid.clamped_cells));
    out.push_str(&format!("# center_loss = {}\n", grid.center));
    for i in 0..s {
        let row: Vec<String> = grid.values.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Companion file with the shared coefficient axis, one value per line.
pub fn axes_csv(grid: &SurfaceGrid) -> String {
    let mut out = String::from("coefficient\n");
    for v in &grid.axis {
        out.push_str(&format!("{v}\n"));
    }
    out
}

// ── tests ───────────────────────────────────────────────────────────────────

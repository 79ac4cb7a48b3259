//! Test-time classification: the softmax head, the nearest-neighbor gallery
//! defense over clean features, and the evaluation harness that drives
//! attacks against them.

use crate::attack::{pgd_attack_batch, AttackConfig, AttackLossKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses;
use crate::model::{clean_features, forward_values, EncoderParams, HeadKind};
use crate::numerics::{tags, RngState, Tensor};

/// Clean-feature index over the training set: one unit-norm row and one
/// label per sample, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    pub feats: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Encode every training sample with the clean encoder's feature head; a
/// model without a separate clean encoder galleries its own features.
/// Chunked so the forward graphs stay small; output order is dataset order.
pub fn build_gallery(enc: &EncoderParams, data: &Dataset) -> Result<GalleryIndex> {
    if data.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let d = enc.arch.d_feat;
    let mut rows = Vec::with_capacity(data.len() * d);
    let chunk = 256;
    let mut i = 0;
    while i < data.len() {
        let hi = (i + chunk).min(data.len());
        let idx: Vec<usize> = (i..hi).collect();
        let (x, _) = data.select(&idx);
        let feats = match &enc.clean {
            Some(_) => clean_features(enc, &x)?,
            None => forward_values(&enc.robust, &enc.arch, &x)?.1,
        };
        rows.extend_from_slice(feats.data());
        i = hi;
    }
    Ok(GalleryIndex {
        feats: Tensor::from_vec(vec![data.len(), d], rows)?,
        labels: data.labels.clone(),
        classes: data.classes,
    })
}

/// Persist a gallery in the shared record-container format. Labels are
/// stored as f32 (exact for any realistic gallery size).
pub fn save_gallery(path: &std::path::Path, g: &GalleryIndex) -> Result<()> {
    let desc = format!(
        "kind = gallery\nclasses = {}\nn = {}\nd = {}\n",
        g.classes,
        g.len(),
        g.feats.view_cols()
    );
    let labels = Tensor::from_vec(
        vec![g.labels.len()],
        g.labels.iter().map(|&l| l as f32).collect(),
    )?;
    crate::checkpoint::save_records(
        path,
        &desc,
        &[("feats".to_string(), &g.feats), ("labels".to_string(), &labels)],
    )
}

pub fn load_gallery(path: &std::path::Path) -> Result<GalleryIndex> {
    let (desc, tensors) = crate::checkpoint::load_records(path)?;
    let mut classes = None;
    for line in desc.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == "kind" && v.trim() != "gallery" {
                return Err(Error::Checkpoint(format!(
                    "{}: record kind {:?} is not a gallery",
                    path.display(),
                    v.trim()
                )));
            }
            if k.trim() == "classes" {
                classes = v.trim().parse::<usize>().ok();
            }
        }
    }
    let classes = classes.ok_or_else(|| {
        Error::Checkpoint(format!("{}: missing classes in descriptor", path.display()))
    })?;
    let mut feats = None;
    let mut labels = None;
    for (name, t) in tensors {
        match name.as_str() {
            "feats" => feats = Some(t),
            "labels" => labels = Some(t),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "{}: unexpected tensor {name}",
                    path.display()
                )))
            }
        }
    }
    let (feats, labels) = match (feats, labels) {
        (Some(f), Some(l)) => (f, l),
        _ => {
            return Err(Error::Checkpoint(format!(
                "{}: gallery needs feats and labels tensors",
                path.display()
            )))
        }
    };
    if feats.rank() != 2 || feats.view_rows() != labels.numel() {
        return Err(Error::Checkpoint(format!(
            "{}: feats {:?} do not match {} labels",
            path.display(),
            feats.shape(),
            labels.numel()
        )));
    }
    let labels: Vec<usize> = labels.data().iter().map(|&v| v as usize).collect();
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::Checkpoint(format!(
            "{}: label outside {} classes",
            path.display(),
            classes
        )));
    }
    Ok(GalleryIndex {
        feats,
        labels,
        classes,
    })
}

/// Weighted k-nearest-neighbor vote from a precomputed query feature:
/// retrieve the k most similar gallery rows by dot product and sum their
/// similarities per class. Rank ties keep the lower gallery index; negative
/// similarities count as-is.
pub fn knn_confidence_from_feature(
    u: &[f32],
    gallery: &GalleryIndex,
    k: usize,
) -> Result<Vec<f32>> {
    let n = gallery.len();
    if n == 0 {
        return Err(Error::EmptyGallery);
    }
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, max: n });
    }
    if gallery.feats.view_cols() != u.len() {
        return Err(Error::shape(format!(
            "query dim {} vs gallery dim {}",
            u.len(),
            gallery.feats.view_cols()
        )));
    }
    // Similarities and the vote accumulate in f64 so the result matches a
    // double-precision brute-force scan to f32 rounding.
    let mut sims: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let s: f64 = gallery
                .feats
                .row(i)
                .iter()
                .zip(u)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            (s, i)
        })
        .collect();
    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    let mut conf = vec![0.0f64; gallery.classes];
    for &(s, i) in sims.iter().take(k) {
        conf[gallery.labels[i]] += s;
    }
    Ok(conf.into_iter().map(|v| v as f32).collect())
}

/// knn_confidence for a raw image: encodes it with the robust feature head
/// first.
pub fn knn_confidence(
    x: &Tensor<f32>,
    enc: &EncoderParams,
    gallery: &GalleryIndex,
    k: usize,
) -> Result<Vec<f32>> {
    let (u, _) = crate::model::robust_forward(x, enc)?;
    knn_confidence_from_feature(u.data(), gallery, k)
}

fn argmax_lowest_tie(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Serving-head class scores for a batch: eta-sharpened cosine scores for
/// the normalized head (argmax is eta-invariant), raw affine logits for the
/// plain head.
pub fn head_scores(enc: &EncoderParams, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (trunk_h, _, logits) = forward_values(&enc.robust, &enc.arch, x)?;
    match enc.head {
        HeadKind::Plain => Ok(logits),
        HeadKind::Normalized => {
            let b = trunk_h.view_rows();
            let m = trunk_h.view_cols();
            let c = enc.arch.classes;
            let w = &enc.robust.classifier.w;
            // Unit columns of the class-weight matrix.
            let mut wn = vec![0.0f32; m * c];
            for j in 0..c {
                let norm: f32 = (0..m).map(|i| w.data()[i * c + j].powi(2)).sum::<f32>().sqrt();
                if norm < 1e-8 {
                    return Err(Error::ZeroNorm {
                        norm: norm as f64,
                        tol: 1e-8,
                    });
                }
                for i in 0..m {
                    wn[i * c + j] = w.data()[i * c + j] / norm;
                }
            }
            let wn = Tensor::from_vec(vec![m, c], wn)?;
            let mut zn = trunk_h.clone();
            for i in 0..b {
                crate::numerics::l2_normalize_slice(&mut zn.data_mut()[i * m..(i + 1) * m])?;
            }
            crate::numerics::matmul(&zn, &wn)
        }
    }
}

/// Predicted classes for a batch via the serving head; ties break to the
/// lowest class index.
pub fn classify_batch(enc: &EncoderParams, x: &Tensor<f32>) -> Result<Vec<usize>> {
    let scores = head_scores(enc, x)?;
    Ok((0..scores.view_rows())
        .map(|i| argmax_lowest_tie(scores.row(i)))
        .collect())
}

/// Single-image softmax-head prediction.
pub fn softmax_classify(x: &Tensor<f32>, enc: &EncoderParams) -> Result<usize> {
    let row = x.reshaped(vec![1, x.numel()])?;
    Ok(classify_batch(enc, &row)?[0])
}

/// Serving-head loss for one sample, computed on plain values (no tape).
/// The surface grid and the per-sample evaluation report share this exact
/// code path.
pub fn head_loss_value(enc: &EncoderParams, x: &Tensor<f32>, y: usize) -> Result<f32> {
    let row = x.reshaped(vec![1, x.numel()])?;
    let (trunk_h, _, logits) = forward_values(&enc.robust, &enc.arch, &row)?;
    match enc.head {
        HeadKind::Plain => {
            let z = logits.row(0);
            let shifted: Vec<f64> = z.iter().map(|&v| v as f64).collect();
            let lse = crate::numerics::log_sum_exp(&shifted);
            if y >= z.len() {
                return Err(Error::InvalidLabel {
                    label: y,
                    classes: z.len(),
                });
            }
            Ok((lse - shifted[y]) as f32)
        }
        HeadKind::Normalized => {
            let z = Tensor::vector(trunk_h.row(0).to_vec());
            let eta = enc.log_eta.item().exp();
            losses::nce_loss(&z, &enc.robust.classifier.w, y, eta)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefenseKind {
    Softmax,
    Knn,
}

impl DefenseKind {
    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::Softmax => "softmax",
            DefenseKind::Knn => "knn",
        }
    }
}

pub enum DefenseMode<'a> {
    Softmax,
    Knn { gallery: &'a GalleryIndex, k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub index: usize,
    pub label: usize,
    pub pred: usize,
    /// Serving-head loss on the (possibly attacked) input actually scored.
    pub loss: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub defense: String,
    /// "none", "pgd", or "fgsm".
    pub attack: String,
    pub steps: usize,
    pub epsilon: f32,
    pub top1: f64,
    pub n: usize,
    pub per_class: Vec<f64>,
    pub samples: Vec<SampleOutcome>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "defense_mode,attack,K,eps,top1,n_samples";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{}",
            self.defense, self.attack, self.steps, self.epsilon, self.top1, self.n
        )
    }
}

/// Attack (optionally) and classify an entire dataset. Attacks always
/// target the serving softmax head, whatever defense scores the result;
/// per-sample random streams are derived from the sample index, so results
/// do not depend on batch composition.
pub fn evaluate(
    enc: &EncoderParams,
    data: &Dataset,
    attack: Option<&AttackConfig>,
    defense: &DefenseMode,
    rng: &RngState,
    batch: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::config("evaluation set is empty".to_string()));
    }
    let eval_rng = rng.derive(tags::ATTACK_EVAL);
    let kind = AttackLossKind::from(enc.head);
    let b = batch.max(1);
    let mut samples = Vec::with_capacity(data.len());
    let mut hits_per_class = vec![0usize; data.classes];
    let mut count_per_class = vec![0usize; data.classes];

    let mut start = 0;
    while start < data.len() {
        let hi = (start + b).min(data.len());
        let idx: Vec<usize> = (start..hi).collect();
        let (x, y) = data.select(&idx);
        let x_eval = match attack {
            Some(cfg) => {
                let streams: Vec<RngState> =
                    idx.iter().map(|&i| eval_rng.derive(i as u64)).collect();
                pgd_attack_batch(&x, &y, enc, kind, cfg, &streams)?
            }
            None => x,
        };
        let preds: Vec<usize> = match defense {
            DefenseMode::Softmax => classify_batch(enc, &x_eval)?,
            DefenseMode::Knn { gallery, k } => {
                let (_, feats, _) = forward_values(&enc.robust, &enc.arch, &x_eval)?;
                let mut p = Vec::with_capacity(idx.len());
                for r in 0..feats.view_rows() {
                    let conf = knn_confidence_from_feature(feats.row(r), gallery, *k)?;
                    p.push(argmax_lowest_tie(&conf));
                }
                p
            }
        };
        for (row, (&i, (&label, &pred))) in idx.iter().zip(y.iter().zip(&preds)).enumerate() {
            let xi = Tensor::vector(x_eval.row(row).to_vec());
            let loss = head_loss_value(enc, &xi, label)?;
            count_per_class[label] += 1;
            if pred == label {
                hits_per_class[label] += 1;
            }
            samples.push(SampleOutcome {
                index: i,
                label,
                pred,
                loss,
            });
        }
        start = hi;
    }

    let hits: usize = hits_per_class.iter().sum();
    let per_class = hits_per_class
        .iter()
        .zip(&count_per_class)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    Ok(EvalReport {
        defense: match defense {
            DefenseMode::Softmax => "softmax".to_string(),
            DefenseMode::Knn { k, .. } => format!("knn{k}"),
        },
        attack: match attack {
            None => "none".to_string(),
            Some(c) if c.steps == 1 => "fgsm".to_string(),
            Some(_) => "pgd".to_string(),
        },
        steps: attack.map_or(0, |c| c.steps),
        epsilon: attack.map_or(0.0, |c| c.epsilon),
        top1: hits as f64 / data.len() as f64,
        n: data.len(),
        per_class,
        samples,
    })
}

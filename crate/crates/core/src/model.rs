//! Encoder architectures and parameter containers. Both encoders share one
//! structure: a trunk (MLP or small conv stack), a two-layer feature
//! projection head emitting unit-norm vectors, and a one-layer classifier
//! head. The clean encoder is a separate parameter set of the same shape,
//! trained naturally and normally frozen; the robust encoder carries the
//! adversarial training.

use crate::error::{Error, Result};
use crate::numerics::{tags, RngState, Scalar, Tape, Tensor, VarId};

/// Input geometry of the dataset the encoder consumes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputShape {
    /// Flat feature vector of the given width.
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl InputShape {
    pub fn dim(&self) -> usize {
        match self {
            InputShape::Flat(d) => *d,
            InputShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }
}

/// Trunk layout. The conv stack is fixed at two 3x3 convolutions each
/// followed by relu and 2x2 mean pooling, then one dense relu layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrunkSpec {
    Mlp { widths: Vec<usize> },
    Conv {
        channels1: usize,
        channels2: usize,
        dense: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureConfig {
    pub input: InputShape,
    pub trunk: TrunkSpec,
    pub d_feat: usize,
    pub classes: usize,
}

impl ArchitectureConfig {
    /// Default trunk for flat synthetic vectors.
    pub fn mlp(input_dim: usize, classes: usize) -> Self {
        ArchitectureConfig {
            input: InputShape::Flat(input_dim),
            trunk: TrunkSpec::Mlp {
                widths: vec![256, 256],
            },
            d_feat: 128,
            classes,
        }
    }

    /// Default trunk for image data.
    pub fn conv(channels: usize, height: usize, width: usize, classes: usize) -> Self {
        ArchitectureConfig {
            input: InputShape::Image {
                channels,
                height,
                width,
            },
            trunk: TrunkSpec::Conv {
                channels1: 16,
                channels2: 32,
                dense: 256,
            },
            d_feat: 128,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_feat < 2 {
            return Err(Error::config(format!("d_feat {} < 2", self.d_feat)));
        }
        if self.classes < 2 {
            return Err(Error::config(format!("classes {} < 2", self.classes)));
        }
        if self.input.dim() == 0 {
            return Err(Error::config("input dimension is zero".to_string()));
        }
        match &self.trunk {
            TrunkSpec::Mlp { widths } => {
                if widths.is_empty() || widths.iter().any(|&w| w == 0) {
                    return Err(Error::config(format!("bad MLP widths {widths:?}")));
                }
            }
            TrunkSpec::Conv {
                channels1,
                channels2,
                dense,
            } => {
                if *channels1 == 0 || *channels2 == 0 || *dense == 0 {
                    return Err(Error::config("conv trunk has a zero width".to_string()));
                }
                match &self.input {
                    InputShape::Image { height, width, .. } => {
                        if height % 4 != 0 || width % 4 != 0 {
                            return Err(Error::config(format!(
                                "conv trunk pools twice; image {height}x{width} must be divisible by 4"
                            )));
                        }
                    }
                    InputShape::Flat(_) => {
                        return Err(Error::config(
                            "conv trunk requires image-shaped input".to_string(),
                        ))
                    }
                }
            }
        }
        Ok(())
    }

    /// Width of the last trunk activation, which both heads consume.
    pub fn trunk_out_dim(&self) -> usize {
        match &self.trunk {
            TrunkSpec::Mlp { widths } => *widths.last().unwrap(),
            TrunkSpec::Conv { dense, .. } => *dense,
        }
    }
}

// ── parameter containers ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T = f32> {
    /// [in, out]
    pub w: Tensor<T>,
    /// [out]
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T = f32> {
    /// [cout, cin, 3, 3]
    pub w: Tensor<T>,
    /// [cout]
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrunkParams<T = f32> {
    Mlp(Vec<Dense<T>>),
    Conv {
        conv1: ConvLayer<T>,
        conv2: ConvLayer<T>,
        dense: Dense<T>,
    },
}

/// One encoder: trunk, two-layer feature head, one-layer classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T = f32> {
    pub trunk: TrunkParams<T>,
    pub feat1: Dense<T>,
    pub feat2: Dense<T>,
    pub classifier: Dense<T>,
}

/// Classification head the robust encoder trains and serves with. `Plain`
/// reads raw affine logits; `Normalized` reads eta-sharpened cosine scores
/// between the trunk activation and classifier columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Plain,
    Normalized,
}

/// Full two-encoder parameter bundle plus the learnable NCE sharpness.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = f32> {
    pub arch: ArchitectureConfig,
    pub head: HeadKind,
    /// Naturally trained reference encoder; `None` until attached. Required
    /// by every contrastive training mode.
    pub clean: Option<NetParams<T>>,
    pub robust: NetParams<T>,
    /// [1]; eta = exp(log_eta) > 0 for any parameter value.
    pub log_eta: Tensor<T>,
}

impl<T: Scalar> NetParams<T> {
    /// Stable (name, tensor) listing; checkpoint layout and optimizer state
    /// both key off this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        match &self.trunk {
            TrunkParams::Mlp(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    out.push((format!("trunk.{i}.w"), &l.w));
                    out.push((format!("trunk.{i}.b"), &l.b));
                }
            }
            TrunkParams::Conv {
                conv1,
                conv2,
                dense,
            } => {
                out.push(("trunk.conv1.w".to_string(), &conv1.w));
                out.push(("trunk.conv1.b".to_string(), &conv1.b));
                out.push(("trunk.conv2.w".to_string(), &conv2.w));
                out.push(("trunk.conv2.b".to_string(), &conv2.b));
                out.push(("trunk.dense.w".to_string(), &dense.w));
                out.push(("trunk.dense.b".to_string(), &dense.b));
            }
        }
        out.push(("feat1.w".to_string(), &self.feat1.w));
        out.push(("feat1.b".to_string(), &self.feat1.b));
        out.push(("feat2.w".to_string(), &self.feat2.w));
        out.push(("feat2.b".to_string(), &self.feat2.b));
        out.push(("classifier.w".to_string(), &self.classifier.w));
        out.push(("classifier.b".to_string(), &self.classifier.b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        match &mut self.trunk {
            TrunkParams::Mlp(layers) => {
                for (i, l) in layers.iter_mut().enumerate() {
                    out.push((format!("trunk.{i}.w"), &mut l.w));
                    out.push((format!("trunk.{i}.b"), &mut l.b));
                }
            }
            TrunkParams::Conv {
                conv1,
                conv2,
                dense,
            } => {
                out.push(("trunk.conv1.w".to_string(), &mut conv1.w));
                out.push(("trunk.conv1.b".to_string(), &mut conv1.b));
                out.push(("trunk.conv2.w".to_string(), &mut conv2.w));
                out.push(("trunk.conv2.b".to_string(), &mut conv2.b));
                out.push(("trunk.dense.w".to_string(), &mut dense.w));
                out.push(("trunk.dense.b".to_string(), &mut dense.b));
            }
        }
        out.push(("feat1.w".to_string(), &mut self.feat1.w));
        out.push(("feat1.b".to_string(), &mut self.feat1.b));
        out.push(("feat2.w".to_string(), &mut self.feat2.w));
        out.push(("feat2.b".to_string(), &mut self.feat2.b));
        out.push(("classifier.w".to_string(), &mut self.classifier.w));
        out.push(("classifier.b".to_string(), &mut self.classifier.b));
        out
    }
}

// ── initialization ─────────────────────────────────────────────────────────

fn init_dense<T: Scalar>(rng: &mut RngState, fan_in: usize, fan_out: usize) -> Dense<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let data: Vec<T> = (0..fan_in * fan_out)
        .map(|_| T::from_f64(rng.uniform_in(-bound, bound)))
        .collect();
    Dense {
        w: Tensor::from_vec(vec![fan_in, fan_out], data).unwrap(),
        b: Tensor::zeros(&[fan_out]),
    }
}

fn init_conv<T: Scalar>(rng: &mut RngState, cin: usize, cout: usize) -> ConvLayer<T> {
    let fan_in = cin * 9;
    let bound = (1.0 / fan_in as f64).sqrt();
    let data: Vec<T> = (0..cout * cin * 9)
        .map(|_| T::from_f64(rng.uniform_in(-bound, bound)))
        .collect();
    ConvLayer {
        w: Tensor::from_vec(vec![cout, cin, 3, 3], data).unwrap(),
        b: Tensor::zeros(&[cout]),
    }
}

/// Fan-in scaled uniform initialization, biases zero, reproducible from the
/// given stream. Each layer draws from its own derived sub-stream so editing
/// one layer's width never shifts another layer's draw.
pub fn init_params<T: Scalar>(arch: &ArchitectureConfig, rng: &RngState) -> Result<NetParams<T>> {
    arch.validate()?;
    let trunk = match &arch.trunk {
        TrunkSpec::Mlp { widths } => {
            let mut layers = Vec::with_capacity(widths.len());
            let mut fan_in = arch.input.dim();
            for (i, &w) in widths.iter().enumerate() {
                let mut r = rng.derive(100 + i as u64);
                layers.push(init_dense(&mut r, fan_in, w));
                fan_in = w;
            }
            TrunkParams::Mlp(layers)
        }
        TrunkSpec::Conv {
            channels1,
            channels2,
            dense,
        } => {
            let InputShape::Image {
                channels,
                height,
                width,
            } = arch.input
            else {
                unreachable!("validate() rejects conv over flat input");
            };
            let mut r1 = rng.derive(100);
            let mut r2 = rng.derive(101);
            let mut r3 = rng.derive(102);
            let flat = channels2 * (height / 4) * (width / 4);
            TrunkParams::Conv {
                conv1: init_conv(&mut r1, channels, *channels1),
                conv2: init_conv(&mut r2, *channels1, *channels2),
                dense: init_dense(&mut r3, flat, *dense),
            }
        }
    };
    let h = arch.trunk_out_dim();
    let mut rf1 = rng.derive(200);
    let mut rf2 = rng.derive(201);
    let mut rc = rng.derive(202);
    Ok(NetParams {
        trunk,
        feat1: init_dense(&mut rf1, h, h),
        feat2: init_dense(&mut rf2, h, arch.d_feat),
        classifier: init_dense(&mut rc, h, arch.classes),
    })
}

/// Fresh encoder bundle: robust net initialized, clean slot empty, eta at
/// its configured starting value.
pub fn init_encoder(
    arch: &ArchitectureConfig,
    head: HeadKind,
    eta_init: f64,
    rng: &RngState,
) -> Result<EncoderParams> {
    if eta_init <= 0.0 {
        return Err(Error::config(format!("eta_init {eta_init} must be positive")));
    }
    let robust = init_params(arch, &rng.derive(tags::INIT_ROBUST))?;
    Ok(EncoderParams {
        arch: arch.clone(),
        head,
        clean: None,
        robust,
        log_eta: Tensor::scalar(eta_init.ln() as f32),
    })
}

// ── tape forward ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct DenseIds {
    pub w: VarId,
    pub b: VarId,
}

#[derive(Debug, Clone)]
pub enum TrunkIds {
    Mlp(Vec<DenseIds>),
    Conv {
        conv1: DenseIds,
        conv2: DenseIds,
        dense: DenseIds,
    },
}

/// Tape handles for one registered network, mirroring `NetParams`.
#[derive(Debug, Clone)]
pub struct NetIds {
    pub trunk: TrunkIds,
    pub feat1: DenseIds,
    pub feat2: DenseIds,
    pub classifier: DenseIds,
}

impl NetIds {
    /// Flat id listing in `named_tensors` order.
    pub fn all(&self) -> Vec<VarId> {
        let mut out = Vec::new();
        match &self.trunk {
            TrunkIds::Mlp(layers) => {
                for l in layers {
                    out.push(l.w);
                    out.push(l.b);
                }
            }
            TrunkIds::Conv {
                conv1,
                conv2,
                dense,
            } => {
                out.extend([conv1.w, conv1.b, conv2.w, conv2.b, dense.w, dense.b]);
            }
        }
        out.extend([
            self.feat1.w,
            self.feat1.b,
            self.feat2.w,
            self.feat2.b,
            self.classifier.w,
            self.classifier.b,
        ]);
        out
    }
}

/// Put every tensor of `net` on the tape. `trainable: false` registers them
/// as constants, which prunes all weight-gradient work from backward passes
/// that only need input gradients (attack steps).
pub fn register_net<T: Scalar>(tape: &mut Tape<T>, net: &NetParams<T>, trainable: bool) -> NetIds {
    let mut reg = |t: &Tensor<T>| {
        if trainable {
            tape.input(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    let trunk = match &net.trunk {
        TrunkParams::Mlp(layers) => TrunkIds::Mlp(
            layers
                .iter()
                .map(|l| DenseIds {
                    w: reg(&l.w),
                    b: reg(&l.b),
                })
                .collect(),
        ),
        TrunkParams::Conv {
            conv1,
            conv2,
            dense,
        } => TrunkIds::Conv {
            conv1: DenseIds {
                w: reg(&conv1.w),
                b: reg(&conv1.b),
            },
            conv2: DenseIds {
                w: reg(&conv2.w),
                b: reg(&conv2.b),
            },
            dense: DenseIds {
                w: reg(&dense.w),
                b: reg(&dense.b),
            },
        },
    };
    NetIds {
        trunk,
        feat1: DenseIds {
            w: reg(&net.feat1.w),
            b: reg(&net.feat1.b),
        },
        feat2: DenseIds {
            w: reg(&net.feat2.w),
            b: reg(&net.feat2.b),
        },
        classifier: DenseIds {
            w: reg(&net.classifier.w),
            b: reg(&net.classifier.b),
        },
    }
}

/// Forward outputs for a batch.
#[derive(Debug, Clone, Copy)]
pub struct NetOut {
    /// last trunk activation, [B, trunk_out]
    pub trunk_h: VarId,
    /// unit-norm feature head output, [B, d_feat]
    pub feat: VarId,
    /// raw affine classifier logits, [B, C]
    pub logits: VarId,
}

/// Run the network on a flat [B, D] input batch. Both heads are always
/// built; ops feeding an unused head are dead weight on the tape but cost a
/// fraction of the trunk, and keeping one path avoids forward variants that
/// could drift apart.
pub fn net_forward<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &NetIds,
    arch: &ArchitectureConfig,
    x: VarId,
) -> Result<NetOut> {
    let in_dim = arch.input.dim();
    let got = tape.value(x).view_cols();
    if got != in_dim {
        return Err(Error::shape(format!(
            "input width {got}, architecture wants {in_dim}"
        )));
    }
    let batch = tape.value(x).view_rows();
    let mut h = x;
    match (&ids.trunk, &arch.trunk) {
        (TrunkIds::Mlp(layers), TrunkSpec::Mlp { .. }) => {
            for l in layers {
                let z = crate::losses::logits_batch(tape, h, l.w, l.b)?;
                h = tape.relu(z);
            }
        }
        (
            TrunkIds::Conv {
                conv1,
                conv2,
                dense,
            },
            TrunkSpec::Conv { channels2, .. },
        ) => {
            let InputShape::Image {
                channels,
                height,
                width,
            } = arch.input
            else {
                return Err(Error::shape("conv trunk on flat input".to_string()));
            };
            let img = tape.reshape(h, vec![batch, channels, height, width])?;
            let c1 = tape.conv2d(img, conv1.w, conv1.b)?;
            let r1 = tape.relu(c1);
            let p1 = tape.avg_pool2(r1)?;
            let c2 = tape.conv2d(p1, conv2.w, conv2.b)?;
            let r2 = tape.relu(c2);
            let p2 = tape.avg_pool2(r2)?;
            let flatw = channels2 * (height / 4) * (width / 4);
            let flat = tape.reshape(p2, vec![batch, flatw])?;
            let z = crate::losses::logits_batch(tape, flat, dense.w, dense.b)?;
            h = tape.relu(z);
        }
        _ => {
            return Err(Error::shape(
                "trunk ids do not match architecture".to_string(),
            ))
        }
    }
    let f1z = crate::losses::logits_batch(tape, h, ids.feat1.w, ids.feat1.b)?;
    let f1 = tape.relu(f1z);
    let f2 = crate::losses::logits_batch(tape, f1, ids.feat2.w, ids.feat2.b)?;
    let feat = tape.normalize_rows(f2)?;
    let logits = crate::losses::logits_batch(tape, h, ids.classifier.w, ids.classifier.b)?;
    Ok(NetOut {
        trunk_h: h,
        feat,
        logits,
    })
}

// ── value-level forwards ───────────────────────────────────────────────────

/// Forward a batch without keeping gradient structure; returns (trunk
/// activations, unit features, raw logits) as plain tensors.
pub fn forward_values<T: Scalar>(
    net: &NetParams<T>,
    arch: &ArchitectureConfig,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let ids = register_net(&mut tape, net, false);
    let xi = tape.constant(x.clone());
    let out = net_forward(&mut tape, &ids, arch, xi)?;
    Ok((
        tape.value(out.trunk_h).clone(),
        tape.value(out.feat).clone(),
        tape.value(out.logits).clone(),
    ))
}

/// Clean-encoder feature batch: unit-norm rows, [B, d_feat].
pub fn clean_features<T: Scalar>(enc: &EncoderParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let clean = enc
        .clean
        .as_ref()
        .ok_or_else(|| Error::config("clean encoder not attached".to_string()))?;
    let (_, feat, _) = forward_values(clean, &enc.arch, x)?;
    Ok(feat)
}

/// Single-image clean feature vector v = g(x), unit norm.
pub fn clean_forward<T: Scalar>(x: &Tensor<T>, enc: &EncoderParams<T>) -> Result<Tensor<T>> {
    let row = x.reshaped(vec![1, x.numel()])?;
    let feat = clean_features(enc, &row)?;
    Ok(Tensor::vector(feat.row(0).to_vec()))
}

/// Single-image robust forward: (unit feature u, raw logits z).
pub fn robust_forward<T: Scalar>(
    x: &Tensor<T>,
    enc: &EncoderParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let row = x.reshaped(vec![1, x.numel()])?;
    let (_, feat, logits) = forward_values(&enc.robust, &enc.arch, &row)?;
    Ok((
        Tensor::vector(feat.row(0).to_vec()),
        Tensor::vector(logits.row(0).to_vec()),
    ))
}

/// MoCo-style slow copy: every clean weight moves toward its robust twin,
/// w_c <- m*w_c + (1-m)*w_a.
pub fn momentum_update<T: Scalar>(
    clean: &mut NetParams<T>,
    robust: &NetParams<T>,
    m: T,
) -> Result<()> {
    if m < T::ZERO || m > T::ONE {
        return Err(Error::config(format!("momentum {m} outside [0,1]")));
    }
    let rsrc = robust.named_tensors();
    let mut cdst = clean.named_tensors_mut();
    if rsrc.len() != cdst.len() {
        return Err(Error::shape(format!(
            "momentum update: {} tensors vs {}",
            cdst.len(),
            rsrc.len()
        )));
    }
    for ((cname, ct), (rname, rt)) in cdst.iter_mut().zip(&rsrc) {
        if cname != rname || ct.shape() != rt.shape() {
            return Err(Error::shape(format!(
                "momentum update mismatch: {cname} {:?} vs {rname} {:?}",
                ct.shape(),
                rt.shape()
            )));
        }
        let one_minus = T::ONE - m;
        for (c, &r) in ct.data_mut().iter_mut().zip(rt.data()) {
            *c = m * *c + one_minus * r;
        }
    }
    Ok(())
}

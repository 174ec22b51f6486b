//! Encoder/decoder stacks for the four layer designs (MLP, MLP+BN, ResNet,
//! ResNet+BN).
//!
//! `depth` is the combined encoder + decoder depth, not counting the final
//! `[hidden × 2]` decoder layer. Each network receives `depth / 2` counted
//! dense layers; the decoder additionally gets the output layer followed by
//! a bounding layer. Square hidden layers become residual blocks in the
//! ResNet variants, which is why those need `depth >= 4`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BatchNorm, Bounding, Dense, Layer, NetError, Network, Residual};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    MlpBn,
    Resnet,
    ResnetBn,
}

impl ArchKind {
    pub fn batchnorm(self) -> bool {
        matches!(self, ArchKind::MlpBn | ArchKind::ResnetBn)
    }

    pub fn residual(self) -> bool {
        matches!(self, ArchKind::Resnet | ArchKind::ResnetBn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Bag-of-words features to the document code `h`.
    Encoder,
    /// `[h; ℓ]` to bounded `(μ_f, σ²_f)`.
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchOptions {
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub bounding: Bounding,
}

impl Default for ArchOptions {
    fn default() -> Self {
        Self {
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            bounding: Bounding::default(),
        }
    }
}

/// Builds a randomly initialised network. For the decoder role `d_out` must
/// be 2 (the raw mean and variance channels).
pub fn build_architecture<R: Rng + ?Sized>(
    kind: ArchKind,
    role: Role,
    depth: usize,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
    opts: &ArchOptions,
    rng: &mut R,
) -> Result<Network, NetError> {
    if depth < 2 || depth % 2 != 0 {
        return Err(NetError::Config(format!("depth must be an even number >= 2, got {depth}")));
    }
    if kind.residual() && depth < 4 {
        return Err(NetError::Config(format!(
            "{kind:?} needs depth >= 4 to hold a residual block, got {depth}"
        )));
    }
    if d_in == 0 || d_hidden == 0 || d_out == 0 {
        return Err(NetError::Config("layer widths must be positive".into()));
    }
    if role == Role::Decoder && d_out != 2 {
        return Err(NetError::Config(format!("decoder output must have 2 channels, got {d_out}")));
    }
    opts.bounding.validate()?;

    let counted = depth / 2;
    // Width sequence of the dense layers.
    let mut widths = vec![d_in];
    match role {
        Role::Encoder => {
            widths.extend(std::iter::repeat(d_hidden).take(counted - 1));
            widths.push(d_out);
        }
        Role::Decoder => {
            widths.extend(std::iter::repeat(d_hidden).take(counted));
            widths.push(d_out);
        }
    }

    let bn = |dim: usize| BatchNorm::new(dim, opts.bn_momentum, opts.bn_eps);
    let mut layers = Vec::new();
    let n_dense = widths.len() - 1;
    for i in 0..n_dense {
        let (a, b) = (widths[i], widths[i + 1]);
        let last = i + 1 == n_dense;
        if last {
            layers.push(Layer::Dense(Dense::random(a, b, rng)));
        } else if kind.residual() && a == b && i > 0 {
            layers.push(Layer::Residual(Residual {
                norm: kind.batchnorm().then(|| bn(a)),
                dense: Dense::random(a, b, rng),
            }));
        } else {
            layers.push(Layer::Dense(Dense::random(a, b, rng)));
            if kind.batchnorm() {
                layers.push(Layer::BatchNorm(bn(b)));
            }
            layers.push(Layer::Relu { dim: b });
        }
    }
    if role == Role::Decoder {
        layers.push(Layer::Bounding(opts.bounding));
    }
    Network::new(layers)
}

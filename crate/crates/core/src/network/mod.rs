//! Convolutional embedding backbone ending in global average pooling, plus
//! the one-layer open-set discriminator.

mod checkpoint;

use std::fmt;

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_header, save_checkpoint,
    CheckpointError, CheckpointHeader, CHECKPOINT_VERSION,
};

/// What the discriminator's dense layer sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscInput {
    /// Squared distances from the L2-normalised embedding to each
    /// L2-normalised prototype, sorted ascending (`K` inputs).
    #[default]
    Distances,
    /// The GAP embedding itself (`embed_dim` inputs).
    Embedding,
}

impl std::str::FromStr for DiscInput {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "distances" => Ok(DiscInput::Distances),
            "embedding" => Ok(DiscInput::Embedding),
            other => Err(format!(
                "unknown discriminator input `{other}` (expected distances or embedding)"
            )),
        }
    }
}

impl fmt::Display for DiscInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiscInput::Distances => "distances",
            DiscInput::Embedding => "embedding",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_size: usize,
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub disc_input: DiscInput,
    /// Known classes per task; the width of the discriminator input in
    /// `Distances` mode.
    pub n_closed: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            input_size: 32,
            conv_channels: vec![16, 32, 64, 64],
            kernel_size: 3,
            disc_input: DiscInput::Distances,
            n_closed: 4,
        }
    }
}

impl Arch {
    pub fn embed_dim(&self) -> usize {
        *self.conv_channels.last().unwrap_or(&0)
    }

    pub fn disc_in_dim(&self) -> usize {
        match self.disc_input {
            DiscInput::Distances => self.n_closed,
            DiscInput::Embedding => self.embed_dim(),
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let fail = |msg: String| Err(NetworkError::InvalidArch(msg));
        let blocks = self.conv_channels.len();
        if blocks == 0 {
            return fail("at least one conv block is required".into());
        }
        if self.conv_channels.contains(&0) {
            return fail("conv channel counts must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return fail(format!("kernel size {} must be odd", self.kernel_size));
        }
        if blocks >= usize::BITS as usize
            || self.input_size == 0
            || self.input_size % (1 << blocks) != 0
        {
            return fail(format!(
                "input size {} is not divisible by 2^{blocks}",
                self.input_size
            ));
        }
        if self.disc_input == DiscInput::Distances && self.n_closed == 0 {
            return fail("n_closed must be positive".into());
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel_size;
        let mut c_in = 1;
        let mut out = Vec::new();
        for (b, &c) in self.conv_channels.iter().enumerate() {
            out.push((format!("conv{b}.kernel"), vec![k, k, c_in, c]));
            out.push((format!("conv{b}.bias"), vec![c]));
            c_in = c;
        }
        out.push(("disc.weight".into(), vec![self.disc_in_dim(), 2]));
        out.push(("disc.bias".into(), vec![2]));
        out
    }
}

#[derive(Debug)]
pub enum NetworkError {
    InvalidArch(String),
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    Autodiff(AutodiffError),
    Checkpoint(CheckpointError),
}

impl fmt::Display for NetworkError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidArch(msg) => write!(f, "invalid architecture: {msg}"),
            Self::ShapeMismatch {
                what,
                expected,
                actual,
            } => {
                write!(f, "{what}: expected shape {expected:?}, got {actual:?}")
            }
            Self::Autodiff(e) => write!(f, "{e}"),
            Self::Checkpoint(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for NetworkError {}

impl From<AutodiffError> for NetworkError {
    fn from(e: AutodiffError) -> Self {
        NetworkError::Autodiff(e)
    }
}

impl From<CheckpointError> for NetworkError {
    fn from(e: CheckpointError) -> Self {
        NetworkError::Checkpoint(e)
    }
}

/// Immutable parameter snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    arch: Arch,
    tensors: Vec<Tensor<T>>,
    seed: u64,
}

impl<T: Scalar> Params<T> {
    /// Wrap tensors laid out as [`Arch::layout`].
    pub fn from_tensors(
        arch: Arch,
        tensors: Vec<Tensor<T>>,
        seed: u64,
    ) -> Result<Self, NetworkError> {
        arch.validate()?;
        let layout = arch.layout();
        if layout.len() != tensors.len() {
            return Err(NetworkError::InvalidArch(format!(
                "{} parameter tensors for a layout of {}",
                tensors.len(),
                layout.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(NetworkError::InvalidArch(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(NetworkError::InvalidArch(format!(
                    "{name} holds non-finite values"
                )));
            }
        }
        Ok(Params {
            arch,
            tensors,
            seed,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// `θ ← θ − lr · ∇θ`, returning the new snapshot.
    pub fn sgd_step(&self, grads: &[Tensor<T>], lr: f64) -> Params<T> {
        let lr = T::of(lr);
        let tensors = self
            .tensors
            .iter()
            .zip(grads)
            .map(|(p, g)| {
                let data = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&w, &d)| w - lr * d)
                    .collect();
                Tensor::new(p.shape().to_vec(), data).expect("same shape")
            })
            .collect();
        Params {
            arch: self.arch.clone(),
            tensors,
            seed: self.seed,
        }
    }

    /// Add every tensor to `graph` as a leaf.
    pub fn register(
        &self,
        graph: &mut Graph<T>,
        requires_grad: bool,
    ) -> Result<ParamNodes, AutodiffError> {
        let ids = self
            .tensors
            .iter()
            .map(|t| graph.leaf(t.clone(), requires_grad))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ParamNodes { ids })
    }
}

/// Graph handles of a registered [`Params`], in layout order.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    ids: Vec<NodeId>,
}

impl ParamNodes {
    pub fn from_ids(ids: Vec<NodeId>) -> Self {
        ParamNodes { ids }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn conv(&self, block: usize) -> (NodeId, NodeId) {
        (self.ids[2 * block], self.ids[2 * block + 1])
    }

    fn disc(&self) -> (NodeId, NodeId) {
        let n = self.ids.len();
        (self.ids[n - 2], self.ids[n - 1])
    }
}

/// Fan-in scaled uniform weights (`bound = sqrt(6 / fan_in)`), zero biases.
/// Values are drawn in f64 so every width starts from the same numbers.
pub fn init_params<T: Scalar>(arch: &Arch, seed: u64) -> Result<Params<T>, NetworkError> {
    arch.validate()?;
    let mut rng = stream(seed, Stream::Init);
    let tensors = arch
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![T::zero(); n]
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new(-bound, bound).expect("positive bound");
                (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
            };
            Tensor::new(shape, data).expect("layout shape")
        })
        .collect();
    Params::from_tensors(arch.clone(), tensors, seed)
}

/// Per block: conv → ReLU → 2×2 max-pool; then global average pooling.
/// `images` must be `[n, input_size, input_size, 1]`; returns `[n, embed_dim]`.
pub fn embed<T: Scalar>(
    graph: &mut Graph<T>,
    nodes: &ParamNodes,
    arch: &Arch,
    images: NodeId,
) -> Result<NodeId, NetworkError> {
    let shape = graph.value(images).shape().to_vec();
    let s = arch.input_size;
    if shape.len() != 4 || shape[1..] != [s, s, 1] {
        let n = shape.first().copied().unwrap_or(1);
        return Err(NetworkError::ShapeMismatch {
            what: "image batch",
            expected: vec![n, s, s, 1],
            actual: shape,
        });
    }
    let mut x = images;
    for block in 0..arch.conv_channels.len() {
        let (k, b) = nodes.conv(block);
        x = graph.conv2d(x, k, b)?;
        x = graph.relu(x)?;
        x = graph.max_pool2(x)?;
    }
    Ok(graph.gap(x)?)
}

#[derive(Debug, Clone, Copy)]
pub struct Discrimination {
    /// `[n, 2]` logits, column 0 = known, column 1 = open.
    pub logits: NodeId,
    /// Softmax of `logits`; column 1 is `p_open`.
    pub probs: NodeId,
}

/// One dense layer with softmax over `{known, open}`.
pub fn discriminate<T: Scalar>(
    graph: &mut Graph<T>,
    nodes: &ParamNodes,
    features: NodeId,
) -> Result<Discrimination, NetworkError> {
    let (w, b) = nodes.disc();
    let expected = graph.value(w).shape()[0];
    let fs = graph.value(features).shape().to_vec();
    if fs.len() != 2 || fs[1] != expected {
        let n = fs.first().copied().unwrap_or(1);
        return Err(NetworkError::ShapeMismatch {
            what: "discriminator input",
            expected: vec![n, expected],
            actual: fs,
        });
    }
    let logits = graph.dense(features, w, b)?;
    let probs = graph.softmax(logits)?;
    Ok(Discrimination { logits, probs })
}

/// Embeddings of `images` (`[n, s, s, 1]`) without gradient tracking,
/// evaluated in chunks of `chunk` images.
pub fn embed_values<T: Scalar>(
    params: &Params<T>,
    images: &Tensor<T>,
    chunk: usize,
) -> Result<Tensor<T>, NetworkError> {
    let n = images.shape()[0];
    let per_image = images.len() / n;
    let d = params.arch().embed_dim();
    let mut out = Vec::with_capacity(n * d);
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let mut shape = images.shape().to_vec();
        shape[0] = len;
        let part = Tensor::new(
            shape,
            images.data()[start * per_image..(start + len) * per_image].to_vec(),
        )?;
        let mut g = Graph::new();
        let nodes = params.register(&mut g, false)?;
        let x = g.constant(part)?;
        let e = embed(&mut g, &nodes, params.arch(), x)?;
        out.extend_from_slice(g.value(e).data());
        start += len;
    }
    Ok(Tensor::new(vec![n, d], out)?)
}

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum AutodiffError {
    ShapeMismatch {
        node: usize,
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    NonFinite {
        node: usize,
        op: &'static str,
    },
    ZeroNorm {
        node: usize,
    },
    NotScalar {
        shape: Vec<usize>,
    },
    BackwardTwice,
    UnknownNode(usize),
    InvalidTensor(String),
    FiniteDifference {
        leaf: usize,
        entry: usize,
    },
}

impl fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch {
                node,
                op,
                expected,
                actual,
            } => write!(
                f,
                "shape mismatch at node {node} ({op}): expected {expected:?}, got {actual:?}"
            ),
            Self::NonFinite { node, op } => {
                write!(f, "non-finite value produced at node {node} ({op})")
            }
            Self::ZeroNorm { node } => {
                write!(f, "L2 normalization of a zero vector at node {node}")
            }
            Self::NotScalar { shape } => {
                write!(f, "backward requires a scalar output, got shape {shape:?}")
            }
            Self::BackwardTwice => write!(f, "backward already ran on this graph"),
            Self::UnknownNode(id) => write!(f, "unknown node id {id}"),
            Self::InvalidTensor(msg) => write!(f, "invalid tensor: {msg}"),
            Self::FiniteDifference { leaf, entry } => write!(
                f,
                "non-finite finite-difference estimate for leaf {leaf}, entry {entry}"
            ),
        }
    }
}

impl std::error::Error for AutodiffError {}

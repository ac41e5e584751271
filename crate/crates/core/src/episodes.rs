//! Meta-learning tasks: a random known/unknown split of the class pool, then
//! support, query and open samples drawn from it.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EpisodeError {
    ClosedCountOutOfRange {
        n_closed: usize,
        pool: usize,
    },
    InsufficientSamples {
        class: usize,
        name: String,
        needed: usize,
        available: usize,
    },
    InsufficientOpen {
        needed: usize,
        available: usize,
    },
    UnknownClass(usize),
}

impl fmt::Display for EpisodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ClosedCountOutOfRange { n_closed, pool } => {
                write!(
                    f,
                    "n_closed = {n_closed} must lie in 1..{pool} for a pool of {pool} classes"
                )
            }
            Self::InsufficientSamples {
                class,
                name,
                needed,
                available,
            } => write!(
                f,
                "class {class} ({name}) has {available} samples, episode needs {needed}"
            ),
            Self::InsufficientOpen { needed, available } => {
                write!(
                    f,
                    "open classes hold {available} samples, episode needs {needed}"
                )
            }
            Self::UnknownClass(c) => write!(f, "class {c} is not in the dataset"),
        }
    }
}

impl std::error::Error for EpisodeError {}

/// Episode-level known (`closed`) and unknown (`open`) classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub closed: Vec<usize>,
    pub open: Vec<usize>,
}

/// How open samples are spread over the open classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpenSampling {
    /// Uniform over all open-class samples pooled together.
    #[default]
    Pooled,
    /// Equal quota per open class (remainder to the earliest classes).
    Balanced,
}

impl std::str::FromStr for OpenSampling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pooled" => Ok(OpenSampling::Pooled),
            "balanced" => Ok(OpenSampling::Balanced),
            other => Err(format!(
                "unknown open sampling `{other}` (expected pooled or balanced)"
            )),
        }
    }
}

impl fmt::Display for OpenSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpenSampling::Pooled => "pooled",
            OpenSampling::Balanced => "balanced",
        })
    }
}

/// Uniformly random `n_closed`-subset of `pool` as the closed classes; the
/// rest of the pool is open. Both lists are returned in ascending order.
pub fn draw_partition<R: Rng + ?Sized>(
    pool: &[usize],
    n_closed: usize,
    rng: &mut R,
) -> Result<Partition, EpisodeError> {
    if n_closed == 0 || n_closed >= pool.len() {
        return Err(EpisodeError::ClosedCountOutOfRange {
            n_closed,
            pool: pool.len(),
        });
    }
    let picked: BTreeSet<usize> = index::sample(rng, pool.len(), n_closed)
        .into_iter()
        .collect();
    let mut closed: Vec<usize> = picked.iter().map(|&i| pool[i]).collect();
    let mut open: Vec<usize> = (0..pool.len())
        .filter(|i| !picked.contains(i))
        .map(|i| pool[i])
        .collect();
    closed.sort_unstable();
    open.sort_unstable();
    Ok(Partition { closed, open })
}

/// One task. Indices refer to the borrowed dataset; labels are episode labels
/// `0..K` in the order of `partition.closed`.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    dataset: &'a Dataset,
    pub partition: Partition,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
    pub open: Vec<usize>,
}

impl<'a> Episode<'a> {
    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    /// Number of closed classes.
    pub fn k(&self) -> usize {
        self.partition.closed.len()
    }

    /// Episode label of an original class id, if the class is closed.
    pub fn episode_label(&self, class: usize) -> Option<usize> {
        self.partition.closed.iter().position(|&c| c == class)
    }

    /// Original class id of an episode label.
    pub fn class_of(&self, label: usize) -> usize {
        self.partition.closed[label]
    }

    /// All episode images stacked as `[support | query | open]` in NHWC with
    /// one channel.
    pub fn batch<T: Scalar>(&self) -> Tensor<T> {
        let all: Vec<usize> = self
            .support
            .iter()
            .chain(&self.query)
            .chain(&self.open)
            .copied()
            .collect();
        stack_images(self.dataset, &all)
    }
}

/// Stack the given dataset images into an `[n, h, w, 1]` tensor.
pub fn stack_images<T: Scalar>(ds: &Dataset, indices: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(indices.len() * ds.height() * ds.width());
    for &i in indices {
        data.extend(ds.image(i).iter().map(|&v| T::of(v)));
    }
    Tensor::new(vec![indices.len(), ds.height(), ds.width(), 1], data)
        .expect("non-empty image batch")
}

/// Draw `n_support + n_query` distinct samples per closed class (first
/// `n_support` become support) and `n_open` open samples.
pub fn sample_episode<'a, R: Rng + ?Sized>(
    ds: &'a Dataset,
    partition: &Partition,
    n_support: usize,
    n_query: usize,
    n_open: usize,
    sampling: OpenSampling,
    rng: &mut R,
) -> Result<Episode<'a>, EpisodeError> {
    for &c in partition.closed.iter().chain(&partition.open) {
        if c >= ds.n_classes() {
            return Err(EpisodeError::UnknownClass(c));
        }
    }
    let per_class = n_support + n_query;
    let mut support = Vec::with_capacity(partition.closed.len() * n_support);
    let mut support_labels = Vec::with_capacity(support.capacity());
    let mut query = Vec::with_capacity(partition.closed.len() * n_query);
    let mut query_labels = Vec::with_capacity(query.capacity());
    for (label, &class) in partition.closed.iter().enumerate() {
        let pool = ds.indices_of(class);
        if pool.len() < per_class {
            return Err(EpisodeError::InsufficientSamples {
                class,
                name: ds.class_names()[class].clone(),
                needed: per_class,
                available: pool.len(),
            });
        }
        let chosen = index::sample(rng, pool.len(), per_class).into_vec();
        for (j, &i) in chosen.iter().enumerate() {
            if j < n_support {
                support.push(pool[i]);
                support_labels.push(label);
            } else {
                query.push(pool[i]);
                query_labels.push(label);
            }
        }
    }

    let mut open = Vec::with_capacity(n_open);
    if n_open > 0 {
        match sampling {
            OpenSampling::Pooled => {
                let pool: Vec<usize> = partition
                    .open
                    .iter()
                    .flat_map(|&c| ds.indices_of(c))
                    .collect();
                if pool.len() < n_open {
                    return Err(EpisodeError::InsufficientOpen {
                        needed: n_open,
                        available: pool.len(),
                    });
                }
                open.extend(
                    index::sample(rng, pool.len(), n_open)
                        .into_iter()
                        .map(|i| pool[i]),
                );
            }
            OpenSampling::Balanced => {
                let n_classes = partition.open.len();
                if n_classes == 0 {
                    return Err(EpisodeError::InsufficientOpen {
                        needed: n_open,
                        available: 0,
                    });
                }
                for (j, &class) in partition.open.iter().enumerate() {
                    let quota = n_open / n_classes + usize::from(j < n_open % n_classes);
                    let pool = ds.indices_of(class);
                    if pool.len() < quota {
                        return Err(EpisodeError::InsufficientSamples {
                            class,
                            name: ds.class_names()[class].clone(),
                            needed: quota,
                            available: pool.len(),
                        });
                    }
                    open.extend(
                        index::sample(rng, pool.len(), quota)
                            .into_iter()
                            .map(|i| pool[i]),
                    );
                }
            }
        }
    }

    Ok(Episode {
        dataset: ds,
        partition: partition.clone(),
        support,
        support_labels,
        query,
        query_labels,
        open,
    })
}

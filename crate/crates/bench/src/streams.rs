//! Task streams: Split-MNIST, Permuted-MNIST and synthetic Gaussian blobs.
//!
//! MNIST tasks keep indices into shared raw images and are only turned into
//! `f64` matrices on demand: ten materialised permuted copies of the training
//! set would not fit in memory.

use std::sync::Arc;

use frcl_core::likelihood::Likelihood;
use frcl_core::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{BenchError, Result};
use crate::idx::RawImages;

/// Training images held out for validation when not running the final protocol.
pub const VALIDATION_SIZE: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSet {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl TaskSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Where the evaluation images come from.
#[derive(Clone, Debug)]
pub struct MnistData {
    train_src: Arc<RawImages>,
    test_src: Arc<RawImages>,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
}

impl MnistData {
    /// With `final_protocol` the model trains on the full training file and
    /// is tested on the test file; otherwise the last 10 000 training images
    /// are held out and play the role of the test set.
    pub fn new(train: RawImages, test: RawImages, final_protocol: bool) -> Result<Self> {
        let n = train.len();
        if final_protocol {
            let test_idx = (0..test.len()).collect();
            return Ok(Self {
                train_src: Arc::new(train),
                test_src: Arc::new(test),
                train_idx: (0..n).collect(),
                test_idx,
            });
        }
        if n <= VALIDATION_SIZE {
            return Err(BenchError::Config(format!("{n} training images leave nothing after the validation split")));
        }
        let train = Arc::new(train);
        Ok(Self {
            test_src: Arc::clone(&train),
            train_src: train,
            train_idx: (0..n - VALIDATION_SIZE).collect(),
            test_idx: (n - VALIDATION_SIZE..n).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.train_src.width
    }
}

#[derive(Clone, Debug)]
enum Source {
    Images {
        data: MnistData,
        perm: Option<Arc<Vec<usize>>>,
        label_offset: usize,
    },
    Owned {
        train: TaskSet,
        test: TaskSet,
    },
}

#[derive(Clone, Debug)]
struct TaskSpec {
    name: String,
    classes: usize,
    source: Source,
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    tasks: Vec<TaskSpec>,
    dim: usize,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn name(&self, task: usize) -> &str {
        &self.tasks[task].name
    }

    pub fn class_count(&self, task: usize) -> usize {
        self.tasks[task].classes
    }

    pub fn likelihood(&self, task: usize) -> Likelihood {
        Likelihood::for_classes(self.class_count(task)).expect("tasks have at least two classes")
    }

    pub fn len_of(&self, task: usize, part: Part) -> usize {
        match &self.tasks[task].source {
            Source::Images { data, .. } => match part {
                Part::Train => data.train_idx.len(),
                Part::Test => data.test_idx.len(),
            },
            Source::Owned { train, test } => match part {
                Part::Train => train.len(),
                Part::Test => test.len(),
            },
        }
    }

    /// Rows `idx` (positions within the task's part) with their labels.
    pub fn rows(&self, task: usize, part: Part, idx: &[usize]) -> TaskSet {
        match &self.tasks[task].source {
            Source::Images { data, perm, label_offset } => {
                let (src, pos) = match part {
                    Part::Train => (&data.train_src, &data.train_idx),
                    Part::Test => (&data.test_src, &data.test_idx),
                };
                let global: Vec<usize> = idx.iter().map(|&i| pos[i]).collect();
                TaskSet {
                    x: src.to_matrix(&global, perm.as_deref().map(Vec::as_slice)),
                    labels: global.iter().map(|&g| src.labels[g] as usize - label_offset).collect(),
                }
            }
            Source::Owned { train, test } => {
                let set = match part {
                    Part::Train => train,
                    Part::Test => test,
                };
                TaskSet {
                    x: set.x.select_rows(idx),
                    labels: idx.iter().map(|&i| set.labels[i]).collect(),
                }
            }
        }
    }

    pub fn part(&self, task: usize, part: Part) -> TaskSet {
        let all: Vec<usize> = (0..self.len_of(task, part)).collect();
        self.rows(task, part, &all)
    }

    /// Pixel permutation of an image task, if any.
    pub fn permutation(&self, task: usize) -> Option<&[usize]> {
        match &self.tasks[task].source {
            Source::Images { perm, .. } => perm.as_deref().map(Vec::as_slice),
            Source::Owned { .. } => None,
        }
    }

    /// Steps at which a new task starts when every task is trained for
    /// `steps_per_task` minibatches in order.
    pub fn true_boundaries(&self, steps_per_task: usize) -> Vec<u64> {
        (1..self.len()).map(|k| (k * steps_per_task) as u64).collect()
    }
}

fn digit_subset(src: &RawImages, pos: &[usize], digits: [u8; 2]) -> Vec<usize> {
    pos.iter().copied().filter(|&g| digits.contains(&src.labels[g])).collect()
}

/// Five binary tasks: digits 0/1, 2/3, 4/5, 6/7, 8/9. Labels are 0 for the
/// even digit and 1 for the odd one.
pub fn make_split_mnist(data: &MnistData) -> TaskStream {
    let tasks = (0..5u8)
        .map(|k| {
            let digits = [2 * k, 2 * k + 1];
            let sub = MnistData {
                train_idx: digit_subset(&data.train_src, &data.train_idx, digits),
                test_idx: digit_subset(&data.test_src, &data.test_idx, digits),
                ..data.clone()
            };
            TaskSpec {
                name: format!("split-{}/{}", digits[0], digits[1]),
                classes: 2,
                source: Source::Images { data: sub, perm: None, label_offset: 2 * k as usize },
            }
        })
        .collect();
    TaskStream { tasks, dim: data.width() }
}

/// Fixed pixel permutation of task `task`; task 0 is the identity.
pub fn task_permutation(width: usize, task: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..width).collect();
    if task > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (task as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        p.shuffle(&mut rng);
    }
    p
}

/// `task_count` ten-class tasks over the same images under different pixel
/// permutations.
pub fn make_permuted_mnist(data: &MnistData, task_count: usize, seed: u64) -> TaskStream {
    let tasks = (0..task_count)
        .map(|t| TaskSpec {
            name: format!("permuted-{t}"),
            classes: 10,
            source: Source::Images {
                data: data.clone(),
                perm: (t > 0).then(|| Arc::new(task_permutation(data.width(), t, seed))),
                label_offset: 0,
            },
        })
        .collect();
    TaskStream { tasks, dim: data.width() }
}

/// Each task draws `classes` unit-covariance Gaussian clusters whose centres
/// sit at least `separation` apart from every other centre in the stream.
/// Cluster `c` carries label `c`; `n_per_task` points go to each of the
/// training and test sets.
pub fn make_blobs(
    task_count: usize,
    classes: usize,
    dims: usize,
    separation: f64,
    n_per_task: usize,
    seed: u64,
) -> Result<TaskStream> {
    if !(separation > 0.0) || classes < 2 || dims == 0 || task_count == 0 || n_per_task == 0 {
        return Err(BenchError::Config(
            "blobs need separation > 0, at least two classes and nonzero sizes".into(),
        ));
    }
    let centres = blob_centres(task_count, classes, dims, separation, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut sample = |centres: &[Vec<f64>]| {
        let labels: Vec<usize> = (0..n_per_task).map(|i| i % classes).collect();
        let x = Matrix::from_fn(n_per_task, dims, |i, j| {
            let z: f64 = rng.sample(StandardNormal);
            centres[labels[i]][j] + z
        });
        TaskSet { x, labels }
    };
    let tasks = centres
        .chunks(classes)
        .enumerate()
        .map(|(t, cs)| {
            let train = sample(cs);
            let test = sample(cs);
            TaskSpec {
                name: format!("blobs-{t}"),
                classes,
                source: Source::Owned { train, test },
            }
        })
        .collect();
    Ok(TaskStream { tasks, dim: dims })
}

/// Cluster centres used by [`make_blobs`], `classes` consecutive entries per task.
pub fn blob_centres(task_count: usize, classes: usize, dims: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = task_count * classes;
    // a box wide enough that rejection sampling rarely struggles
    let mut half = separation * (total as f64).powf(1.0 / dims as f64).max(1.0);
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut failures = 0;
    while centres.len() < total {
        let c: Vec<f64> = (0..dims).map(|_| rng.random_range(-half..half)).collect();
        let far = centres
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() >= separation * separation);
        if far {
            centres.push(c);
        } else {
            failures += 1;
            if failures % 1000 == 0 {
                half *= 1.5;
            }
        }
    }
    centres
}

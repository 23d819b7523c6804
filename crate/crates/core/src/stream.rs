//! Exemplar-free class-incremental data protocol.
//!
//! Classes are shuffled once under the stream seed and partitioned into
//! disjoint label spaces: the first `base_m` classes form task 1 (or the
//! first `inc_n` when `base_m = 0`), and every following `inc_n` classes form
//! another task. Example order within a task is preserved from the input
//! collections; only class membership is randomized.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{validate_labels, LabeledExample};
use crate::error::{Error, Result};
use crate::rng::named_rng;

/// Split parameters for the `B/Base-m, Inc-n` protocol.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub total_classes: usize,
    /// Classes in the first task; 0 means an equal split of `inc_n` each.
    pub base_m: usize,
    /// Classes per subsequent task.
    pub inc_n: usize,
    pub seed: u64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_classes == 0 {
            return Err(Error::config("stream: total_classes must be positive"));
        }
        if self.inc_n == 0 {
            return Err(Error::config("stream: inc_n must be positive"));
        }
        if self.base_m == 0 {
            if self.total_classes % self.inc_n != 0 {
                return Err(Error::config(format!(
                    "stream: inc_n {} does not divide total_classes {}",
                    self.inc_n, self.total_classes
                )));
            }
        } else {
            if self.base_m >= self.total_classes {
                return Err(Error::config("stream: base_m must leave room for incremental tasks"));
            }
            if (self.total_classes - self.base_m) % self.inc_n != 0 {
                return Err(Error::config(format!(
                    "stream: inc_n {} does not divide total_classes - base_m = {}",
                    self.inc_n,
                    self.total_classes - self.base_m
                )));
            }
        }
        Ok(())
    }

    /// Number of tasks implied by the split.
    pub fn num_tasks(&self) -> usize {
        if self.base_m == 0 {
            self.total_classes / self.inc_n
        } else {
            1 + (self.total_classes - self.base_m) / self.inc_n
        }
    }
}

/// The ordered sequence of disjoint-label tasks.
///
/// Immutable after construction; the atomic counters only audit how often
/// each training task was served.
#[derive(Debug)]
pub struct IncrementalStream {
    label_spaces: Vec<Vec<usize>>,
    train_tasks: Vec<Vec<LabeledExample>>,
    test_tasks: Vec<Vec<LabeledExample>>,
    train_accesses: Vec<AtomicUsize>,
}

impl IncrementalStream {
    /// Number of tasks `B`.
    pub fn num_tasks(&self) -> usize {
        self.label_spaces.len()
    }

    /// Label space `Y_b` (1-based stage), sorted ascending by class id.
    pub fn label_space(&self, b: usize) -> Result<&[usize]> {
        self.check_stage(b)?;
        Ok(&self.label_spaces[b - 1])
    }

    /// All classes seen up to and including stage `b`, sorted ascending.
    pub fn seen_classes(&self, b: usize) -> Result<Vec<usize>> {
        self.check_stage(b)?;
        let mut seen: Vec<usize> = self.label_spaces[..b].iter().flatten().copied().collect();
        seen.sort_unstable();
        Ok(seen)
    }

    /// Training task `D^b` (1-based). Each call is recorded so the
    /// exemplar-free contract can be audited.
    pub fn train_set(&self, b: usize) -> Result<&[LabeledExample]> {
        self.check_stage(b)?;
        self.train_accesses[b - 1].fetch_add(1, Ordering::Relaxed);
        Ok(&self.train_tasks[b - 1])
    }

    /// Union of the testing tasks `D_t^1 ... D_t^b` in task order.
    pub fn cumulative_test_set(&self, b: usize) -> Result<Vec<&LabeledExample>> {
        self.check_stage(b)?;
        Ok(self.test_tasks[..b].iter().flatten().collect())
    }

    /// Test task for a single stage; used by per-stage metric breakdowns.
    pub fn test_task(&self, b: usize) -> Result<&[LabeledExample]> {
        self.check_stage(b)?;
        Ok(&self.test_tasks[b - 1])
    }

    /// How many times each training task has been served.
    pub fn train_access_counts(&self) -> Vec<usize> {
        self.train_accesses.iter().map(|a| a.load(Ordering::Relaxed)).collect()
    }

    fn check_stage(&self, b: usize) -> Result<()> {
        if b == 0 || b > self.num_tasks() {
            return Err(Error::Index(format!(
                "stage {b} outside 1..={}",
                self.num_tasks()
            )));
        }
        Ok(())
    }
}

/// Build the stream: shuffle class ids under the seed, partition them into
/// label spaces, and group the examples per task (input order preserved).
pub fn build_stream(
    train_examples: Vec<LabeledExample>,
    test_examples: Vec<LabeledExample>,
    config: &StreamConfig,
) -> Result<IncrementalStream> {
    config.validate()?;
    validate_labels(&train_examples, config.total_classes)?;
    validate_labels(&test_examples, config.total_classes)?;

    let mut order: Vec<usize> = (0..config.total_classes).collect();
    order.shuffle(&mut named_rng(config.seed, "stream/shuffle"));

    let mut label_spaces = Vec::with_capacity(config.num_tasks());
    let mut cursor = 0usize;
    for b in 0..config.num_tasks() {
        let take = if b == 0 && config.base_m > 0 { config.base_m } else { config.inc_n };
        let mut space: Vec<usize> = order[cursor..cursor + take].to_vec();
        space.sort_unstable();
        label_spaces.push(space);
        cursor += take;
    }
    debug_assert_eq!(cursor, config.total_classes);

    let mut task_of_class = vec![0usize; config.total_classes];
    for (t, space) in label_spaces.iter().enumerate() {
        for &c in space {
            task_of_class[c] = t;
        }
    }

    let group = |examples: Vec<LabeledExample>| {
        let mut tasks: Vec<Vec<LabeledExample>> = vec![Vec::new(); label_spaces.len()];
        for ex in examples {
            tasks[task_of_class[ex.label]].push(ex);
        }
        tasks
    };

    let train_tasks = group(train_examples);
    let test_tasks = group(test_examples);
    let train_accesses = (0..label_spaces.len()).map(|_| AtomicUsize::new(0)).collect();

    Ok(IncrementalStream { label_spaces, train_tasks, test_tasks, train_accesses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use proptest::prelude::*;

    fn examples(total_classes: usize, per_class: usize) -> Vec<LabeledExample> {
        let mut out = Vec::new();
        for label in 0..total_classes {
            for i in 0..per_class {
                let input =
                    ArrayD::from_shape_vec(IxDyn(&[2]), vec![label as f64, i as f64]).unwrap();
                out.push(LabeledExample { input, label });
            }
        }
        out
    }

    fn cfg(total: usize, base: usize, inc: usize, seed: u64) -> StreamConfig {
        StreamConfig { total_classes: total, base_m: base, inc_n: inc, seed }
    }

    #[test]
    fn equal_split_shapes() {
        let s = build_stream(examples(100, 1), examples(100, 1), &cfg(100, 0, 10, 0)).unwrap();
        assert_eq!(s.num_tasks(), 10);
        for b in 1..=10 {
            assert_eq!(s.label_space(b).unwrap().len(), 10);
        }
    }

    #[test]
    fn base50_inc5_shapes() {
        let s = build_stream(examples(100, 1), examples(100, 1), &cfg(100, 50, 5, 0)).unwrap();
        assert_eq!(s.num_tasks(), 11);
        assert_eq!(s.label_space(1).unwrap().len(), 50);
        for b in 2..=11 {
            assert_eq!(s.label_space(b).unwrap().len(), 5);
        }
    }

    #[test]
    fn divisibility_violations_are_config_errors() {
        assert!(matches!(
            build_stream(examples(10, 1), examples(10, 1), &cfg(10, 0, 3, 0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_stream(examples(10, 1), examples(10, 1), &cfg(10, 4, 4, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn out_of_range_labels_are_data_errors() {
        let mut train = examples(10, 1);
        train[0].label = 10;
        assert!(matches!(
            build_stream(train, examples(10, 1), &cfg(10, 0, 5, 0)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn same_seed_same_spaces_different_seed_differs() {
        let a = build_stream(examples(20, 1), examples(20, 1), &cfg(20, 0, 5, 3)).unwrap();
        let b = build_stream(examples(20, 1), examples(20, 1), &cfg(20, 0, 5, 3)).unwrap();
        for s in 1..=4 {
            assert_eq!(a.label_space(s).unwrap(), b.label_space(s).unwrap());
        }
        // At least one of a few seed pairs must produce a different order.
        let differs = (0..5u64).any(|s| {
            let c = build_stream(examples(20, 1), examples(20, 1), &cfg(20, 0, 5, 100 + s)).unwrap();
            (1..=4).any(|b_| c.label_space(b_).unwrap() != a.label_space(b_).unwrap())
        });
        assert!(differs);
    }

    #[test]
    fn train_set_contents_and_bounds() {
        let s = build_stream(examples(100, 10), examples(100, 2), &cfg(100, 0, 10, 1)).unwrap();
        let t1 = s.train_set(1).unwrap();
        assert_eq!(t1.len(), 100);
        let y1 = s.label_space(1).unwrap();
        assert!(t1.iter().all(|ex| y1.contains(&ex.label)));
        for b in 1..=10 {
            let yb = s.label_space(b).unwrap();
            assert!(s.train_set(b).unwrap().iter().all(|ex| yb.contains(&ex.label)));
        }
        assert!(s.train_set(0).is_err());
        assert!(s.train_set(11).is_err());
    }

    #[test]
    fn cumulative_test_set_matches_concatenation() {
        let s = build_stream(examples(8, 2), examples(8, 3), &cfg(8, 0, 2, 7)).unwrap();
        assert_eq!(s.cumulative_test_set(1).unwrap().len(), s.test_task(1).unwrap().len());
        assert_eq!(s.cumulative_test_set(4).unwrap().len(), 24);

        // Brute-force: concatenate tasks 1..=2 and compare sorted labels.
        let got: Vec<usize> = {
            let mut v: Vec<usize> = s.cumulative_test_set(2).unwrap().iter().map(|e| e.label).collect();
            v.sort_unstable();
            v
        };
        let expect: Vec<usize> = {
            let mut v: Vec<usize> = s
                .test_task(1)
                .unwrap()
                .iter()
                .chain(s.test_task(2).unwrap())
                .map(|e| e.label)
                .collect();
            v.sort_unstable();
            v
        };
        assert_eq!(got, expect);
    }

    #[test]
    fn access_counter_counts() {
        let s = build_stream(examples(4, 1), examples(4, 1), &cfg(4, 0, 2, 0)).unwrap();
        let _ = s.train_set(1).unwrap();
        let _ = s.train_set(1).unwrap();
        let _ = s.train_set(2).unwrap();
        assert_eq!(s.train_access_counts(), vec![2, 1]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Disjointness, coverage, and conservation over random valid splits.
        #[test]
        fn partition_invariants(inc in 1usize..6, tasks in 1usize..6, base_extra in 0usize..3, seed in 0u64..1000, per_class in 1usize..4) {
            let base_m = if base_extra == 0 { 0 } else { inc * base_extra };
            let total = base_m + inc * tasks;
            let config = cfg(total, base_m, inc, seed);
            let s = build_stream(examples(total, per_class), examples(total, per_class), &config).unwrap();

            // Pairwise disjoint label spaces.
            for i in 1..=s.num_tasks() {
                for j in (i + 1)..=s.num_tasks() {
                    let yi = s.label_space(i).unwrap();
                    let yj = s.label_space(j).unwrap();
                    prop_assert!(yi.iter().all(|c| !yj.contains(c)));
                }
            }
            // Union covers the class set.
            let seen = s.seen_classes(s.num_tasks()).unwrap();
            prop_assert_eq!(seen, (0..total).collect::<Vec<_>>());
            // Conservation of examples.
            let train_total: usize = (1..=s.num_tasks()).map(|b| s.train_set(b).unwrap().len()).sum();
            prop_assert_eq!(train_total, total * per_class);
            let test_total = s.cumulative_test_set(s.num_tasks()).unwrap().len();
            prop_assert_eq!(test_total, total * per_class);
        }
    }
}

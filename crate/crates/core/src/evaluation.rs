//! Per-stage accuracy accounting.
//!
//! Counts are kept as exact integers; accuracies are rendered to floats on
//! demand, so identities like "overall = count-weighted mean of new and old"
//! hold exactly. "New" at stage b means labels in `Y_b`; "old" pools every
//! earlier label space, matching the two-curve presentation of the breakdown.

use std::collections::BTreeMap;
use std::collections::HashSet;

use crate::data::Tensor;
use crate::error::{Error, Result};
use crate::parallel;
use crate::stream::IncrementalStream;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCount {
    pub correct: u64,
    pub total: u64,
}

/// Accuracy record for one incremental stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsRecord {
    pub stage: usize,
    pub n_seen_classes: usize,
    pub correct_new: u64,
    pub total_new: u64,
    pub correct_old: u64,
    pub total_old: u64,
    pub per_class: BTreeMap<usize, ClassCount>,
}

impl MetricsRecord {
    pub fn correct_overall(&self) -> u64 {
        self.correct_new + self.correct_old
    }

    pub fn n_test(&self) -> u64 {
        self.total_new + self.total_old
    }

    pub fn acc_overall(&self) -> f64 {
        self.correct_overall() as f64 / self.n_test() as f64
    }

    pub fn acc_new(&self) -> f64 {
        self.correct_new as f64 / self.total_new as f64
    }

    /// Accuracy over old classes; absent at the first stage.
    pub fn acc_old(&self) -> Option<f64> {
        if self.total_old == 0 {
            None
        } else {
            Some(self.correct_old as f64 / self.total_old as f64)
        }
    }
}

/// Final and averaged accuracy over a full run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub a_last: f64,
    pub a_mean: f64,
}

/// Exact counting accuracy of `predict` over the cumulative test set of
/// stage `b`. Predictions outside the seen label space violate the protocol.
/// Prediction fans out over the worker pool; tallying is sequential in input
/// order, so results are identical with or without parallelism.
pub fn evaluate_stage<F>(predict: F, stream: &IncrementalStream, b: usize) -> Result<MetricsRecord>
where
    F: Fn(&Tensor) -> Result<usize> + Sync,
{
    let new_classes: HashSet<usize> = stream.label_space(b)?.iter().copied().collect();
    let seen: HashSet<usize> = stream.seen_classes(b)?.into_iter().collect();
    let data = stream.cumulative_test_set(b)?;
    let predictions = parallel::map_ordered(&data, |ex| predict(&ex.input));

    let mut record = MetricsRecord {
        stage: b,
        n_seen_classes: seen.len(),
        correct_new: 0,
        total_new: 0,
        correct_old: 0,
        total_old: 0,
        per_class: BTreeMap::new(),
    };
    for (ex, pred) in data.iter().zip(predictions) {
        let pred = pred?;
        if !seen.contains(&pred) {
            return Err(Error::Protocol(format!(
                "prediction {pred} outside the seen label space at stage {b}"
            )));
        }
        let hit = pred == ex.label;
        let slot = record.per_class.entry(ex.label).or_default();
        slot.total += 1;
        if hit {
            slot.correct += 1;
        }
        if new_classes.contains(&ex.label) {
            record.total_new += 1;
            if hit {
                record.correct_new += 1;
            }
        } else {
            record.total_old += 1;
            if hit {
                record.correct_old += 1;
            }
        }
    }
    Ok(record)
}

/// Collapse per-stage records into the final and averaged accuracies.
/// Records must cover stages `1..=B` contiguously.
pub fn summarize(records: &[MetricsRecord]) -> Result<RunSummary> {
    if records.is_empty() {
        return Err(Error::Protocol("no stage records".into()));
    }
    for (i, r) in records.iter().enumerate() {
        if r.stage != i + 1 {
            return Err(Error::Protocol(format!(
                "stage records not contiguous: position {i} holds stage {}",
                r.stage
            )));
        }
    }
    let sum: f64 = records.iter().map(|r| r.acc_overall()).sum();
    Ok(RunSummary {
        a_last: records.last().unwrap().acc_overall(),
        a_mean: sum / records.len() as f64,
    })
}

/// Fixed CSV schema: `stage,n_seen_classes,acc_overall,acc_new,acc_old,n_test`.
/// Floats are written in shortest round-trip form; `acc_old` is empty at the
/// first stage.
pub fn records_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("stage,n_seen_classes,acc_overall,acc_new,acc_old,n_test\n");
    for r in records {
        let old = r.acc_old().map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.stage,
            r.n_seen_classes,
            r.acc_overall(),
            r.acc_new(),
            old,
            r.n_test()
        ));
    }
    out
}

/// Summary line with the exact column names `A_last,A_avg`.
pub fn summary_to_csv(summary: &RunSummary) -> String {
    format!("A_last,A_avg\n{},{}\n", summary.a_last, summary.a_mean)
}

/// One parsed row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub stage: usize,
    pub n_seen_classes: usize,
    pub acc_overall: f64,
    pub acc_new: f64,
    pub acc_old: Option<f64>,
    pub n_test: u64,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Corrupt("empty metrics csv".into()))?;
    if header != "stage,n_seen_classes,acc_overall,acc_new,acc_old,n_test" {
        return Err(Error::Corrupt(format!("unexpected metrics header '{header}'")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Corrupt(format!("row {i} has {} fields", fields.len())));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Corrupt(format!("bad float '{s}' in row {i}")))
        };
        rows.push(CsvRow {
            stage: fields[0].parse().map_err(|_| Error::Corrupt(format!("bad stage in row {i}")))?,
            n_seen_classes: fields[1]
                .parse()
                .map_err(|_| Error::Corrupt(format!("bad class count in row {i}")))?,
            acc_overall: parse_f(fields[2])?,
            acc_new: parse_f(fields[3])?,
            acc_old: if fields[4].is_empty() { None } else { Some(parse_f(fields[4])?) },
            n_test: fields[5].parse().map_err(|_| Error::Corrupt(format!("bad n_test in row {i}")))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledExample;
    use crate::stream::{build_stream, StreamConfig};
    use ndarray::{ArrayD, IxDyn};

    fn toy_stream(classes: usize, inc: usize, per_class: usize) -> IncrementalStream {
        let make = |n: usize| {
            let mut v = Vec::new();
            for label in 0..classes {
                for i in 0..n {
                    let input = ArrayD::from_shape_vec(
                        IxDyn(&[2]),
                        vec![label as f64, i as f64],
                    )
                    .unwrap();
                    v.push(LabeledExample { input, label });
                }
            }
            v
        };
        build_stream(
            make(per_class),
            make(per_class),
            &StreamConfig { total_classes: classes, base_m: 0, inc_n: inc, seed: 0 },
        )
        .unwrap()
    }

    #[test]
    fn perfect_predictor() {
        let s = toy_stream(6, 2, 3);
        // Inputs encode the label in coordinate 0.
        let r = evaluate_stage(|x| Ok(x[[0]] as usize), &s, 2).unwrap();
        assert_eq!(r.acc_overall(), 1.0);
        assert_eq!(r.acc_new(), 1.0);
        assert_eq!(r.acc_old(), Some(1.0));
        assert_eq!(r.n_test(), 12);
        assert!(r.acc_old().is_some());
        let r1 = evaluate_stage(|x| Ok(x[[0]] as usize), &s, 1).unwrap();
        assert_eq!(r1.acc_old(), None);
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let s = toy_stream(5, 1, 4);
        let any_seen = s.label_space(1).unwrap()[0];
        let r = evaluate_stage(|_| Ok(any_seen), &s, 5).unwrap();
        assert!((r.acc_overall() - 1.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn randomized_predictor_matches_manual_tally() {
        let s = toy_stream(4, 2, 5); // cumulative at stage 2: 40 examples
        let seen = s.seen_classes(2).unwrap();
        let pick = move |x: &Tensor| {
            let h = (x[[0]] * 31.0 + x[[1]] * 7.0) as usize;
            Ok(seen[h % seen.len()])
        };
        let r = evaluate_stage(&pick, &s, 2).unwrap();

        let mut correct = 0u64;
        let mut total = 0u64;
        let mut per_class: BTreeMap<usize, ClassCount> = BTreeMap::new();
        for ex in s.cumulative_test_set(2).unwrap() {
            let p = pick(&ex.input).unwrap();
            total += 1;
            let slot = per_class.entry(ex.label).or_default();
            slot.total += 1;
            if p == ex.label {
                correct += 1;
                slot.correct += 1;
            }
        }
        assert_eq!(r.n_test(), total);
        assert_eq!(r.correct_overall(), correct);
        assert_eq!(r.per_class, per_class);
    }

    #[test]
    fn out_of_space_prediction_is_protocol_violation() {
        let s = toy_stream(4, 2, 1);
        let err = evaluate_stage(|_| Ok(999), &s, 1);
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn decomposition_identity() {
        let s = toy_stream(6, 3, 3);
        let seen = s.seen_classes(2).unwrap();
        let r = evaluate_stage(|x| Ok(seen[(x[[1]] as usize) % seen.len()]), &s, 2).unwrap();
        assert_eq!(r.correct_overall(), r.correct_new + r.correct_old);
        assert_eq!(r.n_test(), r.total_new + r.total_old);
        let weighted = (r.acc_new() * r.total_new as f64
            + r.acc_old().unwrap() * r.total_old as f64)
            / r.n_test() as f64;
        assert!((r.acc_overall() - weighted).abs() < 1e-15);
        let per_class_total: u64 = r.per_class.values().map(|c| c.total).sum();
        assert_eq!(per_class_total, r.n_test());
    }

    #[test]
    fn summarize_cases() {
        let rec = |stage: usize, correct: u64, total: u64| MetricsRecord {
            stage,
            n_seen_classes: stage,
            correct_new: correct,
            total_new: total,
            correct_old: 0,
            total_old: 0,
            per_class: BTreeMap::new(),
        };
        let one = summarize(&[rec(1, 3, 4)]).unwrap();
        assert_eq!(one.a_last, 0.75);
        assert_eq!(one.a_mean, 0.75);

        let two = summarize(&[rec(1, 4, 4), rec(2, 2, 4)]).unwrap();
        assert_eq!(two.a_last, 0.5);
        assert_eq!(two.a_mean, 0.75);

        // Ten pseudo-random accuracies against an independent mean.
        let recs: Vec<MetricsRecord> = (1..=10)
            .map(|b| rec(b, (b * 7 % 11) as u64, 11))
            .collect();
        let s = summarize(&recs).unwrap();
        let mean = recs.iter().map(|r| r.acc_overall()).sum::<f64>() / 10.0;
        assert_eq!(s.a_mean, mean);
        let lo = recs.iter().map(|r| r.acc_overall()).fold(f64::INFINITY, f64::min);
        let hi = recs.iter().map(|r| r.acc_overall()).fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= s.a_mean && s.a_mean <= hi);

        assert!(summarize(&[rec(1, 1, 2), rec(3, 1, 2)]).is_err());
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = toy_stream(4, 2, 3);
        let seen = s.seen_classes(2).unwrap();
        let records: Vec<MetricsRecord> = (1..=2)
            .map(|b| evaluate_stage(|x| Ok(seen[(x[[0]] as usize) % seen.len()]), &s, b).unwrap())
            .collect();
        let csv = records_to_csv(&records);
        let rows = parse_metrics_csv(&csv).unwrap();
        assert_eq!(rows.len(), 2);
        for (row, rec) in rows.iter().zip(&records) {
            assert_eq!(row.stage, rec.stage);
            assert_eq!(row.acc_overall, rec.acc_overall());
            assert_eq!(row.acc_old, rec.acc_old());
            assert_eq!(row.n_test, rec.n_test());
        }
        assert!(parse_metrics_csv("bogus\n1,2\n").is_err());
    }
}

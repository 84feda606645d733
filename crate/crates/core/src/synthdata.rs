//! Synthetic stand-ins for the classification and segmentation tasks, the
//! split protocol, and CSV export/import.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::normal_cdf;
use crate::seeds::{stream_rng, Stream};
use crate::stochnet::{Label, LabeledExample, Task};

/// Two isotropic Gaussian clusters centred at `(−1,−1)` (class 0) and
/// `(1,1)` (class 1). Example `i` belongs to class `i mod 2`.
pub fn gen_classification(seed: u64, n: usize, noise_sigma: f64) -> Vec<LabeledExample> {
    let mut rng = stream_rng(seed, Stream::Data);
    (0..n)
        .map(|i| {
            let class = i % 2;
            let centre = if class == 1 { 1.0 } else { -1.0 };
            let x = (0..2)
                .map(|_| centre + noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            LabeledExample { x, y: Label::Class(class) }
        })
        .collect()
}

/// Error of the optimal rule `sign(x₁ + x₂)` on [`gen_classification`] data:
/// the centres are `2√2` apart, so the error is `Φ(−√2/σ)`.
pub fn classification_bayes_error(noise_sigma: f64) -> f64 {
    normal_cdf(-std::f64::consts::SQRT_2 / noise_sigma)
}

/// Rectangle side lengths are drawn uniformly from `2..=side/2 + 1`.
pub fn rect_side_range(side: usize) -> (usize, usize) {
    (2, side / 2 + 1)
}

/// Expected fraction of foreground cells under the rectangle sampler.
pub fn expected_mask_coverage(grid_h: usize, grid_w: usize) -> f64 {
    let mean_side = |side: usize| {
        let (lo, hi) = rect_side_range(side);
        (lo + hi) as f64 / 2.0
    };
    mean_side(grid_h) * mean_side(grid_w) / (grid_h * grid_w) as f64
}

/// Grid images, each holding one axis-aligned rectangle of intensity 1 plus
/// i.i.d. Gaussian pixel noise. The label is the rectangle's indicator mask.
pub fn gen_segmentation(
    seed: u64,
    n: usize,
    grid_h: usize,
    grid_w: usize,
    noise_sigma: f64,
) -> Result<Vec<LabeledExample>> {
    if grid_h < 4 || grid_w < 4 {
        return Err(Error::Config(format!("grid {grid_h}x{grid_w} is smaller than 4x4")));
    }
    let mut rng = stream_rng(seed, Stream::Data);
    let (h_lo, h_hi) = rect_side_range(grid_h);
    let (w_lo, w_hi) = rect_side_range(grid_w);
    Ok((0..n)
        .map(|_| {
            let rh = rng.random_range(h_lo..=h_hi);
            let rw = rng.random_range(w_lo..=w_hi);
            let top = rng.random_range(0..=grid_h - rh);
            let left = rng.random_range(0..=grid_w - rw);
            let mut mask = vec![0u8; grid_h * grid_w];
            for r in top..top + rh {
                for c in left..left + rw {
                    mask[r * grid_w + c] = 1;
                }
            }
            let x = mask
                .iter()
                .map(|&m| f64::from(m) + noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            LabeledExample { x, y: Label::Mask(mask) }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Fraction of all data available for learning and certification.
    pub base_fraction: f64,
    /// Fraction of the base set used to train the prior.
    pub prefix_fraction_of_base: f64,
    /// Fraction of the base set the Hoeffding baseline trains on.
    pub baseline_train_fraction_of_base: f64,
    pub seed: u64,
}

impl SplitPlan {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            base_fraction: 0.9,
            prefix_fraction_of_base: 0.5,
            baseline_train_fraction_of_base: 0.9,
            seed,
        }
    }
}

/// Index sets into the original dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub base: Vec<usize>,
    pub final_holdout: Vec<usize>,
    pub prefix: Vec<usize>,
    pub bound: Vec<usize>,
    pub baseline_train: Vec<usize>,
    pub baseline_holdout: Vec<usize>,
}

fn split_count(total: usize, fraction: f64) -> usize {
    // The nudge keeps products such as 0.9 × 90 from flooring one short.
    ((total as f64 * fraction + 1e-9).floor() as usize).min(total)
}

/// Partitions `0..len` according to `plan`.
///
/// The full index range is shuffled once with the plan's seed. The first
/// `⌊base_fraction·len⌋` indices form the base set, the rest the final
/// holdout. The base set is then cut, in the same order, into prefix/bound
/// and baseline-train/baseline-holdout.
pub fn apply_split(len: usize, plan: &SplitPlan) -> Result<Splits> {
    if len < 10 {
        return Err(Error::Split(format!("dataset of {len} examples is smaller than 10")));
    }
    for (name, f) in [
        ("base_fraction", plan.base_fraction),
        ("prefix_fraction_of_base", plan.prefix_fraction_of_base),
        ("baseline_train_fraction_of_base", plan.baseline_train_fraction_of_base),
    ] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Split(format!("{name} = {f} is outside (0, 1)")));
        }
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream_rng(plan.seed, Stream::Split));

    let n_base = split_count(len, plan.base_fraction);
    let (base, final_holdout) = order.split_at(n_base);
    let n_prefix = split_count(base.len(), plan.prefix_fraction_of_base);
    let (prefix, bound) = base.split_at(n_prefix);
    let n_train = split_count(base.len(), plan.baseline_train_fraction_of_base);
    let (baseline_train, baseline_holdout) = base.split_at(n_train);

    let splits = Splits {
        base: base.to_vec(),
        final_holdout: final_holdout.to_vec(),
        prefix: prefix.to_vec(),
        bound: bound.to_vec(),
        baseline_train: baseline_train.to_vec(),
        baseline_holdout: baseline_holdout.to_vec(),
    };
    for (name, part) in [
        ("base", &splits.base),
        ("final_holdout", &splits.final_holdout),
        ("prefix", &splits.prefix),
        ("bound", &splits.bound),
        ("baseline_train", &splits.baseline_train),
        ("baseline_holdout", &splits.baseline_holdout),
    ] {
        if part.is_empty() {
            return Err(Error::Split(format!("{name} subset is empty for {len} examples")));
        }
    }
    Ok(splits)
}

/// Clones the examples at `indices`, in index-list order.
pub fn subset<T: Clone>(data: &[T], indices: &[usize]) -> Vec<T> {
    indices.iter().map(|&i| data[i].clone()).collect()
}

/// Writes examples as CSV.
///
/// Classification rows are `x1,x2,y`. Segmentation rows are
/// `grid_h,grid_w,x_0..x_{hw-1},m_0..m_{hw-1}` with the image and mask in
/// row-major order.
pub fn write_csv<W: Write>(w: W, task: Task, examples: &[LabeledExample]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    match task {
        Task::Classify => {
            out.write_record(["x1", "x2", "y"])?;
            for ex in examples {
                let Label::Class(y) = ex.y else {
                    return Err(Error::Format("segmentation label in classification export".into()));
                };
                if ex.x.len() != 2 {
                    return Err(Error::shape("classification features", 2, ex.x.len()));
                }
                out.write_record([ex.x[0].to_string(), ex.x[1].to_string(), y.to_string()])?;
            }
        }
        Task::Segment => {
            let Some(first) = examples.first() else {
                out.flush()?;
                return Ok(());
            };
            let cells = first.x.len();
            let side = (cells as f64).sqrt() as usize;
            let (gh, gw) = if side * side == cells { (side, side) } else { (1, cells) };
            let mut header = vec!["grid_h".to_string(), "grid_w".to_string()];
            header.extend((0..cells).map(|i| format!("x_{i}")));
            header.extend((0..cells).map(|i| format!("m_{i}")));
            out.write_record(&header)?;
            for ex in examples {
                let Label::Mask(mask) = &ex.y else {
                    return Err(Error::Format("class label in segmentation export".into()));
                };
                if ex.x.len() != cells || mask.len() != cells {
                    return Err(Error::shape("segmentation row", cells, ex.x.len()));
                }
                let mut row = vec![gh.to_string(), gw.to_string()];
                row.extend(ex.x.iter().map(f64::to_string));
                row.extend(mask.iter().map(u8::to_string));
                out.write_record(&row)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(field: &str, line: usize) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("line {line}: cannot parse `{field}`")))
}

pub fn read_csv<R: Read>(r: R, task: Task) -> Result<Vec<LabeledExample>> {
    let mut input = csv::Reader::from_reader(r);
    let mut examples = Vec::new();
    for (i, record) in input.records().enumerate() {
        let record = record?;
        let line = i + 2;
        match task {
            Task::Classify => {
                if record.len() != 3 {
                    return Err(Error::Format(format!("line {line}: expected 3 fields")));
                }
                examples.push(LabeledExample {
                    x: vec![parse(&record[0], line)?, parse(&record[1], line)?],
                    y: Label::Class(parse(&record[2], line)?),
                });
            }
            Task::Segment => {
                let gh: usize = parse(&record[0], line)?;
                let gw: usize = parse(&record[1], line)?;
                let cells = gh * gw;
                if record.len() != 2 + 2 * cells {
                    return Err(Error::Format(format!("line {line}: expected {} fields", 2 + 2 * cells)));
                }
                let x = (0..cells).map(|k| parse(&record[2 + k], line)).collect::<Result<_>>()?;
                let mask = (0..cells)
                    .map(|k| {
                        let v: u8 = parse(&record[2 + cells + k], line)?;
                        if v > 1 {
                            return Err(Error::Format(format!("line {line}: mask value {v}")));
                        }
                        Ok(v)
                    })
                    .collect::<Result<_>>()?;
                examples.push(LabeledExample { x, y: Label::Mask(mask) });
            }
        }
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochnet::{dsc, threshold_mask};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn zero_noise_classes_are_separable() {
        for ex in gen_classification(3, 101, 0.0) {
            let s = ex.x[0] + ex.x[1];
            match ex.y {
                Label::Class(0) => assert!(s < 0.0),
                Label::Class(1) => assert!(s > 0.0),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn classes_are_balanced() {
        for n in [1usize, 2, 7, 100, 1001] {
            let data = gen_classification(9, n, 0.5);
            let ones = data.iter().filter(|e| e.y == Label::Class(1)).count();
            assert!((n - ones).abs_diff(ones) <= 1);
        }
    }

    #[test]
    fn bayes_error_matches_simulation() {
        // Closed form Φ(−√2/0.5) = Φ(−2√2); simulated with the Bayes rule.
        let sigma = 0.5;
        let closed = classification_bayes_error(sigma);
        assert_abs_diff_eq!(closed, 0.002_338_867_490_523_6, epsilon = 1e-12);
        let data = gen_classification(21, 2_000_000, sigma);
        let errors = data
            .iter()
            .filter(|e| (e.x[0] + e.x[1] > 0.0) != (e.y == Label::Class(1)))
            .count();
        let rate = errors as f64 / data.len() as f64;
        let se = (closed * (1.0 - closed) / data.len() as f64).sqrt();
        assert!((rate - closed).abs() < 4.0 * se, "{rate} vs {closed}");

        let sigma = 1.0;
        let data = gen_classification(22, 400_000, sigma);
        let errors = data
            .iter()
            .filter(|e| (e.x[0] + e.x[1] > 0.0) != (e.y == Label::Class(1)))
            .count();
        let rate = errors as f64 / data.len() as f64;
        let closed = classification_bayes_error(sigma);
        assert!((rate - closed).abs() < 4.0 * (closed * (1.0 - closed) / data.len() as f64).sqrt());
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_classification(5, 50, 0.7), gen_classification(5, 50, 0.7));
        assert_ne!(gen_classification(5, 50, 0.7), gen_classification(6, 50, 0.7));
        assert_eq!(
            gen_segmentation(5, 20, 8, 8, 0.3).unwrap(),
            gen_segmentation(5, 20, 8, 8, 0.3).unwrap()
        );
    }

    #[test]
    fn segmentation_masks_and_thresholding() {
        assert!(gen_segmentation(1, 3, 3, 8, 0.1).is_err());
        let data = gen_segmentation(2, 500, 8, 8, 0.0).unwrap();
        for ex in &data {
            let Label::Mask(m) = &ex.y else { unreachable!() };
            assert!(m.contains(&1));
            let pred: Vec<f64> = ex.x.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
            assert_eq!(dsc(&threshold_mask(&pred), m).unwrap(), 1.0);
        }
    }

    #[test]
    fn mask_coverage_matches_sampler_expectation() {
        // Enumerate the sampler: sides uniform on 2..=5 for an 8×8 grid.
        let sides: Vec<f64> = (2..=5).map(f64::from).collect();
        let mean_side = sides.iter().sum::<f64>() / sides.len() as f64;
        let enumerated = mean_side * mean_side / 64.0;
        assert_abs_diff_eq!(expected_mask_coverage(8, 8), enumerated, epsilon = 1e-15);

        let data = gen_segmentation(4, 10_000, 8, 8, 0.2).unwrap();
        let coverage = data
            .iter()
            .map(|e| match &e.y {
                Label::Mask(m) => m.iter().map(|&v| f64::from(v)).sum::<f64>() / 64.0,
                _ => unreachable!(),
            })
            .sum::<f64>()
            / data.len() as f64;
        assert!((coverage - enumerated).abs() <= 0.02 * enumerated, "{coverage} vs {enumerated}");
    }

    #[test]
    fn default_split_sizes() {
        let s = apply_split(100, &SplitPlan::with_seed(0)).unwrap();
        assert_eq!(
            [s.base.len(), s.final_holdout.len(), s.prefix.len(), s.bound.len(), s.baseline_train.len(), s.baseline_holdout.len()],
            [90, 10, 45, 45, 81, 9]
        );
        let s = apply_split(9000, &SplitPlan::with_seed(0)).unwrap();
        assert_eq!([s.prefix.len(), s.bound.len(), s.baseline_holdout.len()], [4050, 4050, 810]);
    }

    #[test]
    fn split_errors() {
        assert!(apply_split(9, &SplitPlan::with_seed(0)).is_err());
        let plan = SplitPlan {
            base_fraction: 1.0,
            ..SplitPlan::with_seed(0)
        };
        assert!(apply_split(100, &plan).is_err());
        let plan = SplitPlan {
            prefix_fraction_of_base: 0.01,
            ..SplitPlan::with_seed(0)
        };
        assert!(apply_split(20, &plan).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let plan = SplitPlan::with_seed(42);
        assert_eq!(apply_split(500, &plan).unwrap(), apply_split(500, &plan).unwrap());
        assert_ne!(
            apply_split(500, &plan).unwrap(),
            apply_split(500, &SplitPlan::with_seed(43)).unwrap()
        );
    }

    #[test]
    fn csv_round_trip() {
        let data = gen_classification(8, 30, 0.6);
        let mut buf = Vec::new();
        write_csv(&mut buf, Task::Classify, &data).unwrap();
        assert!(buf.starts_with(b"x1,x2,y\n"));
        assert_eq!(read_csv(&buf[..], Task::Classify).unwrap(), data);

        let data = gen_segmentation(8, 12, 8, 8, 0.4).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, Task::Segment, &data).unwrap();
        assert_eq!(read_csv(&buf[..], Task::Segment).unwrap(), data);
        assert!(read_csv(&b"x1,x2,y\n1,2\n"[..], Task::Classify).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn splits_partition_the_data(
            len in 10usize..400,
            base in 0.5f64..0.95,
            prefix in 0.2f64..0.8,
            train in 0.5f64..0.9,
            seed in any::<u64>(),
        ) {
            let plan = SplitPlan { base_fraction: base, prefix_fraction_of_base: prefix, baseline_train_fraction_of_base: train, seed };
            if let Ok(s) = apply_split(len, &plan) {
                let all: HashSet<_> = s.base.iter().chain(&s.final_holdout).copied().collect();
                prop_assert_eq!(all.len(), len);
                prop_assert_eq!(s.base.len() + s.final_holdout.len(), len);
                let pb: HashSet<_> = s.prefix.iter().chain(&s.bound).copied().collect();
                prop_assert_eq!(pb.len(), s.prefix.len() + s.bound.len());
                prop_assert_eq!(&pb, &s.base.iter().copied().collect::<HashSet<_>>());
                let tb: HashSet<_> = s.baseline_train.iter().chain(&s.baseline_holdout).copied().collect();
                prop_assert_eq!(tb.len(), s.base.len());
                prop_assert_eq!(tb, pb);
            }
        }
    }
}

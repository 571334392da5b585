//! Honest, subsampled forests of gradient trees and the forest-weighted
//! solve at query points.

use std::borrow::Cow;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{validate_for_model, Dataset};
use crate::error::{GrfError, Result};
use crate::moments::{MomentModel, ParameterEstimate};
use crate::par::map_range;
use crate::rng::{stream_rng, DOMAIN_HALF_SAMPLE, DOMAIN_TREE};
use crate::tree::{grow_tree, SplitOptions, Tree};
use crate::weights::WeightVector;

pub const FOREST_FORMAT: &str = "grf-forest";
pub const FOREST_FORMAT_VERSION: u32 = 1;

/// How many samples each tree draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SubsampleSize {
    /// `s = ⌊f·n⌋`, `f ∈ (0, 0.5]`.
    Fraction(f64),
    /// `s = ⌈n^β⌉`, `β ∈ (0, 1)`.
    Exponent(f64),
    Count(usize),
}

impl SubsampleSize {
    pub fn resolve(&self, n: usize) -> usize {
        match *self {
            SubsampleSize::Fraction(f) => (f * n as f64).floor() as usize,
            SubsampleSize::Exponent(beta) => (n as f64).powf(beta).ceil() as usize,
            SubsampleSize::Count(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestOptions {
    pub num_trees: usize,
    /// Trees per little bag (ℓ); only used with `ci_group_sampling`.
    pub little_bag_size: usize,
    pub subsample: SubsampleSize,
    pub split: SplitOptions,
    pub seed: u64,
    /// Grow trees in little bags sharing a half-sample, enabling variance estimates.
    pub ci_group_sampling: bool,
}

impl Default for ForestOptions {
    fn default() -> Self {
        ForestOptions {
            num_trees: 2000,
            little_bag_size: 4,
            subsample: SubsampleSize::Fraction(0.5),
            split: SplitOptions::default(),
            seed: 42,
            ci_group_sampling: true,
        }
    }
}

impl ForestOptions {
    /// Check the options against a training set of `n` samples; returns `s`.
    pub fn validate(&self, n: usize) -> Result<usize> {
        let invalid = |msg: String| Err(GrfError::InvalidOptions(msg));
        self.split.validate()?;
        if self.num_trees == 0 {
            return invalid("num_trees must be positive".into());
        }
        match self.subsample {
            SubsampleSize::Fraction(f) if !(f > 0.0 && f <= 0.5) => {
                return invalid(format!("subsample fraction {f} outside (0, 0.5]"))
            }
            SubsampleSize::Exponent(b) if !(b > 0.0 && b < 1.0) => {
                return invalid(format!("subsample exponent {b} outside (0, 1)"))
            }
            _ => {}
        }
        if n < 4 * self.split.min_node_size {
            return invalid(format!(
                "need at least {} samples for min_node_size {}, got {n}",
                4 * self.split.min_node_size,
                self.split.min_node_size
            ));
        }
        let s = self.subsample.resolve(n);
        if s < 2 || s > n {
            return invalid(format!("subsample size {s} must lie in [2, {n}]"));
        }
        if self.ci_group_sampling {
            if self.little_bag_size < 2 {
                return invalid("little_bag_size must be at least 2".into());
            }
            if !self.num_trees.is_multiple_of(self.little_bag_size) {
                return invalid(format!(
                    "num_trees {} is not a multiple of little_bag_size {}",
                    self.num_trees, self.little_bag_size
                ));
            }
            if s > n / 2 {
                return invalid(format!(
                    "subsample size {s} exceeds half-sample size {}",
                    n / 2
                ));
            }
        }
        Ok(s)
    }
}

/// One tree plus the bookkeeping needed for honesty and little bags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub tree: Tree,
    /// Sorted subsample `I_b`.
    pub subsample: Vec<usize>,
    /// Sorted structure half `J1 ⊂ I_b`; leaves hold `I_b \ J1`.
    pub j1: Vec<usize>,
    /// Little bag (half-sample) index, when grouped.
    pub group: Option<usize>,
}

impl TreeRecord {
    pub fn contains(&self, i: usize) -> bool {
        self.subsample.binary_search(&i).is_ok()
    }
}

#[derive(Debug, Clone)]
pub struct Forest {
    options: ForestOptions,
    model: MomentModel,
    split_model: MomentModel,
    data: Arc<Dataset>,
    half_samples: Vec<Vec<usize>>,
    trees: Vec<TreeRecord>,
}

pub fn train_forest(
    data: impl Into<Arc<Dataset>>,
    model: MomentModel,
    opts: ForestOptions,
) -> Result<Forest> {
    Forest::train(data, model, opts)
}

impl Forest {
    pub fn train(
        data: impl Into<Arc<Dataset>>,
        model: MomentModel,
        opts: ForestOptions,
    ) -> Result<Forest> {
        let split_model = model.clone();
        Self::train_with_split_model(data, model, split_model, opts)
    }

    /// Grow trees with `split_model`'s pseudo-outcomes but solve `model` at
    /// query time (e.g. regression splits feeding a quantile solve).
    pub fn train_with_split_model(
        data: impl Into<Arc<Dataset>>,
        model: MomentModel,
        split_model: MomentModel,
        opts: ForestOptions,
    ) -> Result<Forest> {
        let data = data.into();
        validate_for_model(&data, model.kind())?;
        validate_for_model(&data, split_model.kind())?;
        let n = data.n();
        let s = opts.validate(n)?;

        let half_samples: Vec<Vec<usize>> = if opts.ci_group_sampling {
            let groups = opts.num_trees / opts.little_bag_size;
            (0..groups)
                .map(|g| {
                    let mut rng = stream_rng(opts.seed, DOMAIN_HALF_SAMPLE, g as u64);
                    let mut h = rand::seq::index::sample(&mut rng, n, n / 2).into_vec();
                    h.sort_unstable();
                    h
                })
                .collect()
        } else {
            Vec::new()
        };

        let trees = map_range(opts.num_trees, |b| {
            let mut rng = stream_rng(opts.seed, DOMAIN_TREE, b as u64);
            let group = opts.ci_group_sampling.then(|| b / opts.little_bag_size);
            let mut subsample: Vec<usize> = match group {
                Some(g) => {
                    let pool = &half_samples[g];
                    rand::seq::index::sample(&mut rng, pool.len(), s)
                        .into_iter()
                        .map(|k| pool[k])
                        .collect()
                }
                None => rand::seq::index::sample(&mut rng, n, s).into_vec(),
            };
            subsample.sort_unstable();
            let mut shuffled = subsample.clone();
            shuffled.shuffle(&mut rng);
            let (j1, j2) = shuffled.split_at(s / 2);
            let mut j1 = j1.to_vec();
            j1.sort_unstable();
            let tree = grow_tree(&data, &j1, j2, &split_model, &opts.split, &mut rng)?;
            Ok(TreeRecord {
                tree,
                subsample,
                j1,
                group,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        Ok(Forest {
            options: opts,
            model,
            split_model,
            data,
            half_samples,
            trees,
        })
    }

    pub fn options(&self) -> &ForestOptions {
        &self.options
    }

    pub fn model(&self) -> &MomentModel {
        &self.model
    }

    pub fn split_model(&self) -> &MomentModel {
        &self.split_model
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn trees(&self) -> &[TreeRecord] {
        &self.trees
    }

    /// Half-samples `H_g`, one per little bag (empty without grouping).
    pub fn half_samples(&self) -> &[Vec<usize>] {
        &self.half_samples
    }

    pub fn subsample_size(&self) -> usize {
        self.trees.first().map_or(0, |t| t.subsample.len())
    }

    fn check_query(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.data.p() {
            return Err(GrfError::FeatureMismatch(format!(
                "query has {} features, forest expects {}",
                x.len(),
                self.data.p()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GrfError::InvalidData("query point must be finite".into()));
        }
        Ok(())
    }

    /// Honest leaf members of `x` for each tree (`None` where the leaf is empty).
    pub fn leaf_members<'a>(&'a self, x: &[f64]) -> Vec<Option<&'a [usize]>> {
        self.trees
            .iter()
            .map(|rec| {
                let leaf = rec.tree.leaf_samples(rec.tree.leaf_index(x));
                (!leaf.is_empty()).then_some(leaf)
            })
            .collect()
    }

    /// Averages `1/|L_b|` co-leaf weights over trees whose leaf has members.
    fn accumulate<'a>(&self, leaves: impl Iterator<Item = Cow<'a, [usize]>>) -> Option<Vec<f64>> {
        let mut alpha = vec![0.0; self.data.n()];
        let mut contributing = 0usize;
        for leaf in leaves {
            if leaf.is_empty() {
                continue;
            }
            contributing += 1;
            let w = 1.0 / leaf.len() as f64;
            for &i in leaf.iter() {
                alpha[i] += w;
            }
        }
        if contributing == 0 {
            return None;
        }
        let scale = 1.0 / contributing as f64;
        alpha.iter_mut().for_each(|a| *a *= scale);
        Some(alpha)
    }

    /// Forest weights `α_i(x)`.
    pub fn compute_weights(&self, x: &[f64]) -> Result<WeightVector> {
        self.check_query(x)?;
        let leaves = self
            .trees
            .iter()
            .map(|rec| Cow::Borrowed(rec.tree.leaf_samples(rec.tree.leaf_index(x))));
        self.accumulate(leaves)
            .map(WeightVector::from_normalized)
            .ok_or(GrfError::NoContributingTrees { sample: None })
    }

    /// Out-of-bag weights for training sample `i`: only trees whose subsample
    /// excludes `i`, and `i` itself never receives weight.
    pub fn compute_oob_weights(&self, i: usize) -> Result<WeightVector> {
        if i >= self.data.n() {
            return Err(GrfError::InvalidOptions(format!(
                "sample index {i} out of range"
            )));
        }
        let leaves = self.trees.iter().filter(|rec| !rec.contains(i)).map(|rec| {
            let leaf = rec
                .tree
                .leaf_samples(rec.tree.leaf_index_of_sample(&self.data, i));
            if leaf.contains(&i) {
                Cow::Owned(leaf.iter().copied().filter(|&k| k != i).collect())
            } else {
                Cow::Borrowed(leaf)
            }
        });
        self.accumulate(leaves)
            .map(WeightVector::from_normalized)
            .ok_or(GrfError::NoContributingTrees { sample: Some(i) })
    }

    pub fn predict(&self, x: &[f64]) -> Result<ParameterEstimate> {
        let weights = self.compute_weights(x)?;
        self.model.solve_weighted(&self.data, &weights)
    }

    pub fn predict_oob(&self, i: usize) -> Result<ParameterEstimate> {
        let weights = self.compute_oob_weights(i)?;
        self.model.solve_weighted(&self.data, &weights)
    }

    /// One prediction per query row, in order.
    pub fn predict_batch(&self, points: &[Vec<f64>]) -> Vec<Result<ParameterEstimate>> {
        map_range(points.len(), |k| self.predict(&points[k]))
    }

    /// Out-of-bag predictions for every training sample.
    pub fn predict_oob_all(&self) -> Vec<Result<ParameterEstimate>> {
        map_range(self.data.n(), |i| self.predict_oob(i))
    }

    /// Serialize as versioned JSON. Output is a pure function of the forest.
    pub fn save<W: Write>(&self, writer: W) -> Result<()> {
        let file = ForestFileRef {
            format: FOREST_FORMAT,
            version: FOREST_FORMAT_VERSION,
            options: &self.options,
            model: &self.model,
            split_model: &self.split_model,
            data: &self.data,
            half_samples: &self.half_samples,
            trees: &self.trees,
        };
        serde_json::to_writer(writer, &file)?;
        Ok(())
    }

    pub fn load<R: Read>(reader: R) -> Result<Forest> {
        let file: ForestFile = serde_json::from_reader(reader)?;
        if file.format != FOREST_FORMAT {
            return Err(GrfError::InvalidData(format!(
                "not a forest file (format `{}`)",
                file.format
            )));
        }
        if file.version != FOREST_FORMAT_VERSION {
            return Err(GrfError::UnsupportedVersion(file.version));
        }
        file.data.validate()?;
        let (n, p) = (file.data.n(), file.data.p());
        for rec in &file.trees {
            rec.tree.validate(n, p)?;
            if rec.subsample.iter().chain(&rec.j1).any(|&i| i >= n) {
                return Err(GrfError::InvalidData("tree subsample out of range".into()));
            }
        }
        Ok(Forest {
            options: file.options,
            model: file.model,
            split_model: file.split_model,
            data: Arc::new(file.data),
            half_samples: file.half_samples,
            trees: file.trees,
        })
    }

    pub fn save_to_path(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(file)
    }

    pub fn load_from_path(path: impl AsRef<std::path::Path>) -> Result<Forest> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::load(file)
    }

    #[cfg(test)]
    pub(crate) fn from_parts(
        model: MomentModel,
        data: Dataset,
        trees: Vec<TreeRecord>,
        half_samples: Vec<Vec<usize>>,
        options: ForestOptions,
    ) -> Forest {
        Forest {
            options,
            split_model: model.clone(),
            model,
            data: Arc::new(data),
            half_samples,
            trees,
        }
    }
}

#[derive(Serialize)]
struct ForestFileRef<'a> {
    format: &'static str,
    version: u32,
    options: &'a ForestOptions,
    model: &'a MomentModel,
    split_model: &'a MomentModel,
    data: &'a Dataset,
    half_samples: &'a [Vec<usize>],
    trees: &'a [TreeRecord],
}

#[derive(Deserialize)]
struct ForestFile {
    format: String,
    version: u32,
    options: ForestOptions,
    model: MomentModel,
    split_model: MomentModel,
    data: Dataset,
    half_samples: Vec<Vec<usize>>,
    trees: Vec<TreeRecord>,
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::tree::TreeNode;

    /// A depth-one tree splitting feature 0 at `threshold`.
    pub fn stump(threshold: f64, left: Vec<usize>, right: Vec<usize>) -> Tree {
        let nodes = vec![
            TreeNode::Split {
                feature: 0,
                threshold,
                left: 1,
                right: 2,
            },
            TreeNode::Leaf { samples: left },
            TreeNode::Leaf { samples: right },
        ];
        serde_json::from_value(serde_json::json!({ "nodes": nodes })).unwrap()
    }

    pub fn record(tree: Tree, subsample: Vec<usize>, group: Option<usize>) -> TreeRecord {
        TreeRecord {
            tree,
            subsample,
            j1: Vec::new(),
            group,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    fn four_samples() -> Dataset {
        Dataset::from_columns(vec![vec![0.0, 1.0, 2.0, 3.0]])
            .unwrap()
            .with_outcome(vec![10.0, 20.0, 30.0, 40.0])
            .unwrap()
    }

    fn opts() -> ForestOptions {
        ForestOptions {
            ci_group_sampling: false,
            ..ForestOptions::default()
        }
    }

    #[test]
    fn single_tree_weights() {
        let forest = Forest::from_parts(
            MomentModel::Regression,
            four_samples(),
            vec![record(
                stump(0.5, vec![0, 1], vec![2, 3]),
                vec![0, 1, 2, 3],
                None,
            )],
            vec![],
            opts(),
        );
        assert_eq!(
            forest.compute_weights(&[2.5]).unwrap().as_slice(),
            &[0.0, 0.0, 0.5, 0.5]
        );
        assert_eq!(forest.predict(&[2.5]).unwrap().value(), 35.0);
    }

    #[test]
    fn two_tree_average() {
        let forest = Forest::from_parts(
            MomentModel::Regression,
            four_samples(),
            vec![
                record(stump(1.5, vec![1], vec![3]), vec![1, 3], None),
                record(stump(2.5, vec![1, 2], vec![0]), vec![0, 1, 2], None),
            ],
            vec![],
            opts(),
        );
        assert_eq!(
            forest.compute_weights(&[1.0]).unwrap().as_slice(),
            &[0.0, 0.75, 0.25, 0.0]
        );
    }

    #[test]
    fn empty_leaves_contribute_nothing() {
        let forest = Forest::from_parts(
            MomentModel::Regression,
            four_samples(),
            vec![
                record(stump(1.5, vec![], vec![3]), vec![3], None),
                record(stump(1.5, vec![1], vec![2]), vec![1, 2], None),
            ],
            vec![],
            opts(),
        );
        assert_eq!(
            forest.compute_weights(&[0.0]).unwrap().as_slice(),
            &[0.0, 1.0, 0.0, 0.0]
        );

        let all_empty = Forest::from_parts(
            MomentModel::Regression,
            four_samples(),
            vec![record(stump(1.5, vec![], vec![3]), vec![3], None)],
            vec![],
            opts(),
        );
        assert!(matches!(
            all_empty.compute_weights(&[0.0]),
            Err(GrfError::NoContributingTrees { .. })
        ));
    }

    #[test]
    fn oob_uses_only_trees_without_the_sample() {
        let forest = Forest::from_parts(
            MomentModel::Regression,
            four_samples(),
            vec![
                record(stump(1.5, vec![0], vec![2]), vec![0, 2], None),
                record(stump(1.5, vec![1], vec![3]), vec![1, 3], None),
            ],
            vec![],
            opts(),
        );
        // Sample 0 is in tree 0's subsample, so only tree 1 (leaf {1}) counts.
        assert_eq!(forest.predict_oob(0).unwrap().value(), 20.0);
        // Sample 1 sits only in tree 1; tree 0 sends it to leaf {0}.
        assert_eq!(forest.predict_oob(1).unwrap().value(), 10.0);
    }

    #[test]
    fn query_dimension_checked() {
        let forest = Forest::from_parts(
            MomentModel::Regression,
            four_samples(),
            vec![record(stump(1.5, vec![0], vec![2]), vec![0, 2], None)],
            vec![],
            opts(),
        );
        assert_eq!(
            forest.predict(&[1.0, 2.0]).unwrap_err().tag(),
            "FeatureMismatch"
        );
    }

    fn synthetic(n: usize) -> Dataset {
        let x: Vec<f64> = (0..n).map(|i| ((i * 7919) % n) as f64 / n as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| if *v > 0.5 { 1.0 } else { 0.0 }).collect();
        Dataset::from_columns(vec![x])
            .unwrap()
            .with_outcome(y)
            .unwrap()
    }

    #[test]
    fn little_bags_nest_in_half_samples() {
        let data = synthetic(100);
        let opts = ForestOptions {
            num_trees: 4,
            little_bag_size: 2,
            subsample: SubsampleSize::Count(50),
            ..ForestOptions::default()
        };
        let forest = Forest::train(data, MomentModel::Regression, opts).unwrap();
        assert_eq!(forest.half_samples().len(), 2);
        for h in forest.half_samples() {
            assert_eq!(h.len(), 50);
        }
        for (b, rec) in forest.trees().iter().enumerate() {
            assert_eq!(rec.group, Some(b / 2));
            let h = &forest.half_samples()[b / 2];
            assert!(rec.subsample.iter().all(|i| h.binary_search(i).is_ok()));
            assert_eq!(rec.j1.len(), 25);
        }
    }

    #[test]
    fn invalid_options() {
        let data = synthetic(10);
        let opts = ForestOptions {
            num_trees: 4,
            little_bag_size: 2,
            subsample: SubsampleSize::Count(6),
            split: SplitOptions {
                min_node_size: 1,
                ..SplitOptions::default()
            },
            ..ForestOptions::default()
        };
        let err = Forest::train(data.clone(), MomentModel::Regression, opts.clone()).unwrap_err();
        assert_eq!(err.tag(), "InvalidOptions");
        let err = Forest::train(
            data.clone(),
            MomentModel::Regression,
            ForestOptions {
                num_trees: 5,
                subsample: SubsampleSize::Count(4),
                ..opts.clone()
            },
        )
        .unwrap_err();
        assert_eq!(err.tag(), "InvalidOptions");
        let err = Forest::train(
            data,
            MomentModel::Instrumental,
            ForestOptions {
                subsample: SubsampleSize::Count(4),
                ..opts
            },
        )
        .unwrap_err();
        assert_eq!(err.tag(), "MissingRole");
    }

    #[test]
    fn save_load_roundtrip() {
        let data = synthetic(80);
        let opts = ForestOptions {
            num_trees: 8,
            little_bag_size: 2,
            ..ForestOptions::default()
        };
        let forest = Forest::train(data, MomentModel::Regression, opts).unwrap();
        let mut buf = Vec::new();
        forest.save(&mut buf).unwrap();
        let back = Forest::load(buf.as_slice()).unwrap();
        let mut again = Vec::new();
        back.save(&mut again).unwrap();
        assert_eq!(buf, again);
        for x in [0.1, 0.45, 0.9] {
            assert_eq!(
                forest.predict(&[x]).unwrap().value().to_bits(),
                back.predict(&[x]).unwrap().value().to_bits()
            );
        }
    }

    #[test]
    fn rejects_wrong_version() {
        let data = synthetic(40);
        let forest = Forest::train(
            data,
            MomentModel::Regression,
            ForestOptions {
                num_trees: 2,
                little_bag_size: 2,
                ..ForestOptions::default()
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        forest.save(&mut buf).unwrap();
        let text = String::from_utf8(buf)
            .unwrap()
            .replacen("\"version\":1", "\"version\":99", 1);
        assert!(matches!(
            Forest::load(text.as_bytes()),
            Err(GrfError::UnsupportedVersion(99))
        ));
    }
}

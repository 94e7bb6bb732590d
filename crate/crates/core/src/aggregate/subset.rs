//! Fixed patch selection: averaging over a subset, exhaustive subset search,
//! and beam search over subsets.

use std::cmp::Reverse;
use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scores::{argmax, ScoreTensor, Split};

pub const DEFAULT_SUBSET_CAP: u128 = 2_000_000;

/// Sorted, unique, non-empty patch indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Subset(Vec<usize>);

impl Subset {
    pub fn new(mut indices: Vec<usize>, n_patches: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptySubset);
        }
        indices.sort_unstable();
        indices.dedup();
        if let Some(&index) = indices.iter().find(|&&i| i >= n_patches) {
            return Err(Error::PatchOutOfRange {
                index,
                n: n_patches,
            });
        }
        Ok(Self(indices))
    }

    pub fn all(n_patches: usize) -> Result<Self> {
        Self::new((0..n_patches).collect(), n_patches)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::fmt::Display for Subset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub predicted: Vec<usize>,
    pub accuracy: f64,
}

impl Predictions {
    pub(crate) fn from_predicted(
        predicted: Vec<usize>,
        labels: impl Iterator<Item = usize>,
    ) -> Self {
        let hits = predicted
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == *l)
            .count();
        let accuracy = if predicted.is_empty() {
            0.0
        } else {
            hits as f64 / predicted.len() as f64
        };
        Self {
            predicted,
            accuracy,
        }
    }
}

/// Sums the subset's class scores for one image into `acc`.
fn subset_sum(scores: &ScoreTensor, image: usize, subset: &[usize], acc: &mut [f64]) {
    acc.iter_mut().for_each(|v| *v = 0.0);
    for &p in subset {
        for (a, &s) in acc.iter_mut().zip(scores.patch_scores(image, p)) {
            *a += f64::from(s);
        }
    }
}

/// Class with the highest mean score over `subset` (lowest class on ties).
pub fn subset_prediction(scores: &ScoreTensor, image: usize, subset: &Subset) -> usize {
    let mut acc = vec![0.0; scores.n_classes()];
    subset_sum(scores, image, subset.indices(), &mut acc);
    argmax(&acc)
}

/// Mean-of-subset prediction for every image, with accuracy against labels.
pub fn average_predict(scores: &ScoreTensor, subset: &Subset) -> Result<Predictions> {
    check_subset(scores, subset)?;
    let predicted: Vec<usize> = (0..scores.n_images())
        .into_par_iter()
        .map(|i| subset_prediction(scores, i, subset))
        .collect();
    Ok(Predictions::from_predicted(
        predicted,
        scores.labels().iter().map(|&l| l as usize),
    ))
}

/// Accuracy of the subset average restricted to `images`.
pub fn subset_accuracy(scores: &ScoreTensor, subset: &Subset, images: &[usize]) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    count_correct(scores, subset.indices(), images) as f64 / images.len() as f64
}

fn count_correct(scores: &ScoreTensor, subset: &[usize], images: &[usize]) -> usize {
    let mut acc = vec![0.0; scores.n_classes()];
    images
        .iter()
        .filter(|&&i| {
            subset_sum(scores, i, subset, &mut acc);
            argmax(&acc) == scores.label(i)
        })
        .count()
}

fn check_subset(scores: &ScoreTensor, subset: &Subset) -> Result<()> {
    match subset.indices().last() {
        None => Err(Error::EmptySubset),
        Some(&last) if last >= scores.n_patches() => Err(Error::PatchOutOfRange {
            index: last,
            n: scores.n_patches(),
        }),
        _ => Ok(()),
    }
}

/// Images used as the search objective.
pub fn objective_images(scores: &ScoreTensor, split: Split) -> Result<Vec<usize>> {
    let images = scores.images_in(split);
    if images.is_empty() {
        return Err(Error::DegenerateSplit(format!(
            "no {split:?} images in score tensor"
        )));
    }
    Ok(images)
}

/// Patches ordered by their own accuracy on `images`, best first; ties keep
/// the lower index first.
pub fn rank_patches(scores: &ScoreTensor, images: &[usize]) -> Vec<usize> {
    let counts: Vec<usize> = (0..scores.n_patches())
        .into_par_iter()
        .map(|p| count_correct(scores, &[p], images))
        .collect();
    let mut order: Vec<usize> = (0..scores.n_patches()).collect();
    order.sort_by_key(|&p| (Reverse(counts[p]), p));
    order
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Exhaustive search for the `k`-subset with the best average-prediction
/// accuracy on `objective` images. Ties go to the lexicographically smallest
/// subset.
pub fn brute_force_best_subset(
    scores: &ScoreTensor,
    k: usize,
    objective: Split,
    cap: u128,
) -> Result<(Subset, f64)> {
    let n = scores.n_patches();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "subset size {k} outside 1..={n}"
        )));
    }
    let count = binomial(n, k);
    if count > cap {
        return Err(Error::TooLarge { count, cap });
    }
    let images = objective_images(scores, objective)?;

    const CHUNK: usize = 4096;
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut combo: Vec<usize> = (0..k).collect();
    let mut done = false;
    while !done {
        let mut chunk = Vec::with_capacity(CHUNK);
        while chunk.len() < CHUNK && !done {
            chunk.push(combo.clone());
            done = !next_combination(&mut combo, n);
        }
        let counts: Vec<usize> = chunk
            .par_iter()
            .map(|c| count_correct(scores, c, &images))
            .collect();
        for (c, hits) in chunk.into_iter().zip(counts) {
            if best.as_ref().is_none_or(|(b, _)| hits > *b) {
                best = Some((hits, c));
            }
        }
    }
    let (hits, subset) = best.expect("at least one combination");
    Ok((Subset(subset), hits as f64 / images.len() as f64))
}

/// Advances to the next k-combination of `0..n` in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let Some(i) = (0..k).rev().find(|&i| combo[i] < n - k + i) else {
        return false;
    };
    combo[i] += 1;
    for j in i + 1..k {
        combo[j] = combo[j - 1] + 1;
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamStep {
    pub subset: Subset,
    /// Accuracy on the split the search optimised.
    pub objective_accuracy: f64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

struct Kept {
    subset: Vec<usize>,
    sums: Vec<f64>,
}

/// Beam search over patch subsets. Level 1 scores every single patch; each
/// later level extends every kept subset by every absent patch, drops
/// duplicates, and keeps the `beam_width` best by objective accuracy (ties to
/// the lexicographically smallest subset). Returns the best subset for each
/// size `1..=max_k`.
pub fn beam_search_subsets(
    scores: &ScoreTensor,
    beam_width: usize,
    max_k: usize,
    objective: Split,
) -> Result<Vec<BeamStep>> {
    if beam_width == 0 {
        return Err(Error::InvalidParameter(
            "beam width must be at least 1".into(),
        ));
    }
    let n = scores.n_patches();
    let max_k = max_k.min(n);
    let images = objective_images(scores, objective)?;
    let train = scores.images_in(Split::Train);
    let test = scores.images_in(Split::Test);
    let c = scores.n_classes();
    let stride = images.len() * c;

    let mut beam = vec![Kept {
        subset: Vec::new(),
        sums: vec![0.0; stride],
    }];
    let mut steps = Vec::with_capacity(max_k);
    for _ in 0..max_k {
        let mut candidates: BTreeMap<Vec<usize>, (usize, usize)> = BTreeMap::new();
        for (b, kept) in beam.iter().enumerate() {
            for p in (0..n).filter(|p| !kept.subset.contains(p)) {
                let mut s = kept.subset.clone();
                s.push(p);
                s.sort_unstable();
                candidates.entry(s).or_insert((b, p));
            }
        }
        let mut scored: Vec<(usize, Vec<usize>, (usize, usize))> = candidates
            .into_par_iter()
            .map(|(subset, (b, p))| {
                let parent = &beam[b].sums;
                let mut acc = vec![0.0; c];
                let hits = images
                    .iter()
                    .enumerate()
                    .filter(|&(row, &i)| {
                        let base = &parent[row * c..(row + 1) * c];
                        for ((a, &s0), &sp) in
                            acc.iter_mut().zip(base).zip(scores.patch_scores(i, p))
                        {
                            *a = s0 + f64::from(sp);
                        }
                        argmax(&acc) == scores.label(i)
                    })
                    .count();
                (hits, subset, (b, p))
            })
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        scored.truncate(beam_width);

        let (best_hits, best_subset, _) = &scored[0];
        let best = Subset(best_subset.clone());
        steps.push(BeamStep {
            objective_accuracy: *best_hits as f64 / images.len() as f64,
            train_accuracy: (!train.is_empty()).then(|| subset_accuracy(scores, &best, &train)),
            test_accuracy: (!test.is_empty()).then(|| subset_accuracy(scores, &best, &test)),
            subset: best,
        });

        beam = scored
            .into_par_iter()
            .map(|(_, subset, (b, p))| {
                let parent = &beam[b].sums;
                let mut sums = parent.clone();
                for (row, &i) in images.iter().enumerate() {
                    for (a, &sp) in sums[row * c..(row + 1) * c]
                        .iter_mut()
                        .zip(scores.patch_scores(i, p))
                    {
                        *a += f64::from(sp);
                    }
                }
                Kept { subset, sums }
            })
            .collect();
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Tensor with 2 classes where patch `p` is correct exactly on the images
    /// listed in `correct[p]` and confidently wrong elsewhere.
    fn tensor_with_hits(n_images: usize, correct: &[&[usize]]) -> ScoreTensor {
        let n_patches = correct.len();
        let mut data = Vec::new();
        for i in 0..n_images {
            for hits in correct {
                if hits.contains(&i) {
                    data.extend([0.9, 0.1]);
                } else {
                    data.extend([0.1, 0.9]);
                }
            }
        }
        ScoreTensor::new(
            n_patches,
            2,
            vec![0; n_images],
            vec![Split::Train; n_images],
            data,
        )
        .unwrap()
    }

    #[test]
    fn subset_validation() {
        assert!(matches!(Subset::new(vec![], 3), Err(Error::EmptySubset)));
        assert!(matches!(
            Subset::new(vec![3], 3),
            Err(Error::PatchOutOfRange { index: 3, n: 3 })
        ));
        assert_eq!(Subset::new(vec![2, 0, 2], 3).unwrap().indices(), &[0, 2]);
    }

    #[test]
    fn uniform_patches_do_not_shift_prediction() {
        // patch 0 one-hot correct, patches 1..3 uniform
        let labels = vec![0, 2, 1, 2];
        let mut data = Vec::new();
        for &l in &labels {
            for c in 0..3u32 {
                data.push(if c == l { 1.0 } else { 0.0 });
            }
            for _ in 0..2 {
                data.extend([1.0 / 3.0; 3]);
            }
        }
        let t = ScoreTensor::new(3, 3, labels, vec![Split::Train; 4], data).unwrap();
        let pred = average_predict(&t, &Subset::all(3).unwrap()).unwrap();
        assert_eq!(pred.accuracy, 1.0);
    }

    #[test]
    fn single_patch_average_is_its_argmax() {
        let t = tensor_with_hits(4, &[&[0, 1], &[2]]);
        let p = average_predict(&t, &Subset::new(vec![1], 2).unwrap()).unwrap();
        assert_eq!(p.predicted, vec![1, 1, 0, 1]);
        assert_eq!(p.accuracy, 0.25);
    }

    #[test]
    fn brute_force_examples() {
        // per-patch accuracy 0.2, 0.9, 0.5 over 10 images
        let t = tensor_with_hits(
            10,
            &[&[0, 1], &[0, 1, 2, 3, 4, 5, 6, 7, 8], &[0, 1, 2, 3, 4]],
        );
        let (s, acc) = brute_force_best_subset(&t, 1, Split::Train, DEFAULT_SUBSET_CAP).unwrap();
        assert_eq!(s.indices(), &[1]);
        assert!((acc - 0.9).abs() < 1e-12);
        let (s, _) = brute_force_best_subset(&t, 3, Split::Train, DEFAULT_SUBSET_CAP).unwrap();
        assert_eq!(s.indices(), &[0, 1, 2]);

        let twins = tensor_with_hits(5, &[&[1, 2], &[1, 2]]);
        let (s, _) = brute_force_best_subset(&twins, 1, Split::Train, DEFAULT_SUBSET_CAP).unwrap();
        assert_eq!(s.indices(), &[0]);
    }

    #[test]
    fn brute_force_cap_and_split() {
        let t = tensor_with_hits(3, &[&[0usize][..]; 30]);
        assert!(matches!(
            brute_force_best_subset(&t, 15, Split::Train, DEFAULT_SUBSET_CAP),
            Err(Error::TooLarge { .. })
        ));
        assert!(matches!(
            brute_force_best_subset(&t, 1, Split::Test, DEFAULT_SUBSET_CAP),
            Err(Error::DegenerateSplit(_))
        ));
    }

    #[test]
    fn combinations_in_order() {
        let mut c = vec![0, 1];
        let mut all = vec![c.clone()];
        while next_combination(&mut c, 4) {
            all.push(c.clone());
        }
        assert_eq!(
            all,
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![0, 3],
                vec![1, 2],
                vec![1, 3],
                vec![2, 3]
            ]
        );
        assert_eq!(binomial(8, 4), 70);
        assert_eq!(binomial(105, 2), 5460);
        assert_eq!(binomial(3, 5), 0);
    }

    #[test]
    fn dominant_patch_first() {
        let t = tensor_with_hits(6, &[&[0, 1, 2, 3, 4], &[0, 1, 2, 3], &[0, 1, 2], &[0]]);
        let steps = beam_search_subsets(&t, 2, 4, Split::Train).unwrap();
        assert_eq!(steps.len(), 4);
        assert_eq!(steps[0].subset.indices(), &[0]);
        assert_eq!(steps[3].subset.indices(), &[0, 1, 2, 3]);
        assert_eq!(steps[0].test_accuracy, None);
    }

    #[test]
    fn greedy_beam_of_one() {
        let t = tensor_with_hits(6, &[&[0, 1, 2], &[3, 4], &[0, 1, 2, 3]]);
        let steps = beam_search_subsets(&t, 1, 3, Split::Train).unwrap();
        // greedy: best single is {2}; then extend {2} only
        assert_eq!(steps[0].subset.indices(), &[2]);
        assert!(steps[1].subset.indices().contains(&2));
    }

    #[test]
    fn rank_by_accuracy() {
        let t = tensor_with_hits(4, &[&[0], &[0, 1, 2], &[0, 1, 2], &[]]);
        assert_eq!(rank_patches(&t, &[0, 1, 2, 3]), vec![1, 2, 0, 3]);
    }
}

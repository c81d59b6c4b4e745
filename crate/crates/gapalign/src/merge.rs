//! Combine the rewritten set with the original SFT dataset under a
//! target size ratio, and build the ablation datasets (same-size sample,
//! distillation set).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus_io::InstructionPair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergePlan {
    /// Rewritten-to-SFT size ratio; the included rewritten count is
    /// `round(ratio * |sft|)`.
    pub ratio: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

fn default_true() -> bool {
    true
}

impl Default for MergePlan {
    fn default() -> Self {
        MergePlan {
            ratio: 0.05,
            seed: 0,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeManifest {
    pub ratio_requested: f64,
    pub ratio_achieved: f64,
    pub sft_count: usize,
    pub rewritten_available: usize,
    pub rewritten_included: usize,
    pub total: usize,
    pub seed: u64,
}

/// Seeded uniform sample of `count` indices out of `0..n` without
/// replacement, returned sorted so output order is stable.
fn sample_indices(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + (rng.gen::<u64>() as usize) % (n - i);
        indices.swap(i, j);
    }
    let mut chosen = indices[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Concatenate the SFT dataset with a ratio-controlled, seeded subsample
/// of the rewritten set. If the rewritten set is smaller than the target
/// it is taken whole and the achieved ratio is reported; it is never
/// padded by duplication.
pub fn merge_datasets(
    sft: &[InstructionPair],
    rewritten: &[InstructionPair],
    plan: &MergePlan,
) -> Result<(Vec<InstructionPair>, MergeManifest)> {
    if sft.is_empty() {
        return Err(Error::Precondition("SFT dataset is empty".into()));
    }
    if !(plan.ratio > 0.0 && plan.ratio.is_finite()) {
        return Err(Error::Precondition(format!("ratio must be positive, got {}", plan.ratio)));
    }
    let target = (plan.ratio * sft.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let included: Vec<InstructionPair> = if rewritten.len() > target {
        sample_indices(rewritten.len(), target, &mut rng)
            .into_iter()
            .map(|i| rewritten[i].clone())
            .collect()
    } else {
        rewritten.to_vec()
    };
    let manifest = MergeManifest {
        ratio_requested: plan.ratio,
        ratio_achieved: included.len() as f64 / sft.len() as f64,
        sft_count: sft.len(),
        rewritten_available: rewritten.len(),
        rewritten_included: included.len(),
        total: sft.len() + included.len(),
        seed: plan.seed,
    };
    let mut combined: Vec<InstructionPair> = sft.iter().cloned().chain(included).collect();
    if plan.shuffle {
        for i in (1..combined.len()).rev() {
            let j = (rng.gen::<u64>() as usize) % (i + 1);
            combined.swap(i, j);
        }
    }
    Ok((combined, manifest))
}

/// Seeded uniform sample without replacement, output order stable by
/// original index. Used for the equal-size ablation.
pub fn sample_same_size(
    combined: &[InstructionPair],
    target: usize,
    seed: u64,
) -> Result<Vec<InstructionPair>> {
    if target == 0 {
        return Err(Error::Precondition("sample target must be >= 1".into()));
    }
    if target > combined.len() {
        return Err(Error::Precondition(format!(
            "sample target {target} exceeds dataset size {}",
            combined.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_indices(combined.len(), target, &mut rng)
        .into_iter()
        .map(|i| combined[i].clone())
        .collect())
}

/// Combine a rewritten same-distribution set with the rewritten
/// difference set (the distillation ablation). Provenance stays on each
/// pair through its origin_id.
pub fn build_distillation_set(
    rewritten_same_distribution: &[InstructionPair],
    rewritten_diff: &[InstructionPair],
) -> Vec<InstructionPair> {
    rewritten_same_distribution
        .iter()
        .chain(rewritten_diff)
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_io::Source;
    use std::collections::HashMap;

    fn pairs(prefix: &str, n: usize, source: Source) -> Vec<InstructionPair> {
        (0..n)
            .map(|i| InstructionPair {
                id: format!("{prefix}{i}"),
                instruction: format!("Q{i}"),
                response: format!("A{i}"),
                source,
                origin_id: match source {
                    Source::Rewritten => Some(format!("orig{i}")),
                    Source::OriginalSft => None,
                },
            })
            .collect()
    }

    #[test]
    fn ratio_controls_included_count() {
        let sft = pairs("s", 1000, Source::OriginalSft);
        let rewritten = pairs("r", 500, Source::Rewritten);
        let plan = MergePlan {
            ratio: 0.05,
            seed: 1,
            shuffle: false,
        };
        let (combined, manifest) = merge_datasets(&sft, &rewritten, &plan).unwrap();
        assert_eq!(combined.len(), 1050);
        assert_eq!(manifest.rewritten_included, 50);
        assert!((manifest.ratio_achieved - 0.05).abs() < 1e-12);
    }

    #[test]
    fn shortfall_reports_achieved_ratio() {
        let sft = pairs("s", 1000, Source::OriginalSft);
        let rewritten = pairs("r", 10, Source::Rewritten);
        let plan = MergePlan {
            ratio: 0.05,
            seed: 1,
            shuffle: false,
        };
        let (combined, manifest) = merge_datasets(&sft, &rewritten, &plan).unwrap();
        assert_eq!(combined.len(), 1010);
        assert!((manifest.ratio_achieved - 0.01).abs() < 1e-12);
    }

    #[test]
    fn merge_is_deterministic_under_seed() {
        let sft = pairs("s", 100, Source::OriginalSft);
        let rewritten = pairs("r", 80, Source::Rewritten);
        let plan = MergePlan {
            ratio: 0.3,
            seed: 42,
            shuffle: true,
        };
        let (a, _) = merge_datasets(&sft, &rewritten, &plan).unwrap();
        let (b, _) = merge_datasets(&sft, &rewritten, &plan).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sft_multiset_is_preserved() {
        let sft = pairs("s", 50, Source::OriginalSft);
        let rewritten = pairs("r", 50, Source::Rewritten);
        let plan = MergePlan {
            ratio: 0.2,
            seed: 3,
            shuffle: true,
        };
        let (combined, _) = merge_datasets(&sft, &rewritten, &plan).unwrap();
        let mut counts: HashMap<&str, i32> = HashMap::new();
        for p in &combined {
            if p.source == Source::OriginalSft {
                *counts.entry(p.id.as_str()).or_insert(0) += 1;
            }
        }
        assert_eq!(counts.len(), 50);
        assert!(counts.values().all(|c| *c == 1));
    }

    #[test]
    fn empty_sft_is_an_error() {
        let rewritten = pairs("r", 5, Source::Rewritten);
        assert!(merge_datasets(&[], &rewritten, &MergePlan::default()).is_err());
    }

    #[test]
    fn source_tags_survive_the_merge() {
        let sft = pairs("s", 20, Source::OriginalSft);
        let rewritten = pairs("r", 20, Source::Rewritten);
        let plan = MergePlan {
            ratio: 0.5,
            seed: 9,
            shuffle: true,
        };
        let (combined, manifest) = merge_datasets(&sft, &rewritten, &plan).unwrap();
        let rewritten_count = combined.iter().filter(|p| p.source == Source::Rewritten).count();
        assert_eq!(rewritten_count, manifest.rewritten_included);
    }

    #[test]
    fn same_size_identity_at_full_target() {
        let combined = pairs("c", 30, Source::OriginalSft);
        let out = sample_same_size(&combined, 30, 5).unwrap();
        assert_eq!(out, combined);
    }

    #[test]
    fn same_size_zero_target_errors() {
        let combined = pairs("c", 5, Source::OriginalSft);
        assert!(sample_same_size(&combined, 0, 1).is_err());
    }

    #[test]
    fn same_size_overlong_target_errors() {
        let combined = pairs("c", 5, Source::OriginalSft);
        assert!(sample_same_size(&combined, 6, 1).is_err());
    }

    #[test]
    fn same_size_different_seeds_differ() {
        let combined = pairs("c", 150, Source::OriginalSft);
        let a = sample_same_size(&combined, 100, 1).unwrap();
        let b = sample_same_size(&combined, 100, 2).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(b.len(), 100);
        assert_ne!(a, b);
    }

    #[test]
    fn distillation_concat_preserves_both_sides() {
        let same = pairs("same", 10, Source::Rewritten);
        let diff = pairs("diff", 5, Source::Rewritten);
        let out = build_distillation_set(&same, &diff);
        assert_eq!(out.len(), 15);
        assert_eq!(out[0].id, "same0");
        assert_eq!(out[10].id, "diff0");
    }

    #[test]
    fn distillation_empty_diff_side() {
        let same = pairs("same", 4, Source::Rewritten);
        let out = build_distillation_set(&same, &[]);
        assert_eq!(out, same);
    }
}

//! Synthetic hierarchical sequences with controllable leaf-level ambiguity.
//!
//! A sequence picks a leaf `ℓ*`. Its context steps reveal `ℓ*`'s ancestors from
//! the top of the tree down, one level per stretch of steps. The final step
//! shows `ℓ*` itself with probability `1 − α`. Otherwise it shows a uniform
//! draw from `ℓ*`'s sibling set, which includes `ℓ*`. The parent of the final
//! label is therefore always predictable from context.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::taxonomy::Taxonomy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub branching: usize,
    pub depth: usize,
    pub seq_len: usize,
    pub d_in: usize,
    pub ambiguity: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            branching: 3,
            depth: 3,
            seq_len: 8,
            d_in: 32,
            ambiguity: 0.5,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("data: {m}")));
        if self.branching < 2 {
            return bad("branching must be at least 2");
        }
        if self.depth < 2 {
            return bad("depth must be at least 2");
        }
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2");
        }
        if self.d_in < 1 {
            return bad("d_in must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return bad("ambiguity must lie in [0, 1]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        Ok(())
    }
}

/// A taxonomy together with a feature prototype for every node.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTaxonomy {
    pub taxonomy: Taxonomy,
    /// Indexed by node id; the root prototype is the zero vector.
    pub prototypes: Vec<Vec<f64>>,
}

/// Complete tree whose prototypes drift from parent to child by a gaussian
/// offset of standard deviation `1/depth`, so nearby nodes have similar features.
pub fn build_taxonomy(
    branching: usize,
    depth: usize,
    d_in: usize,
    seed: u64,
) -> Result<SynthTaxonomy> {
    let taxonomy = Taxonomy::complete(branching, depth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(taxonomy.len());
    for n in taxonomy.nodes() {
        let proto = match n.parent {
            None => vec![0.0; d_in],
            Some(p) => {
                let offset = Normal::new(0.0, 1.0 / n.depth as f64).expect("positive std");
                prototypes[p]
                    .iter()
                    .map(|c| c + offset.sample(&mut rng))
                    .collect()
            }
        };
        prototypes.push(proto);
    }
    Ok(SynthTaxonomy {
        taxonomy,
        prototypes,
    })
}

/// One generated sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub seq_id: u64,
    /// `seq_len` rows of `d_in` features.
    pub features: Vec<Vec<f64>>,
    /// Leaf shown at the final step.
    pub leaf_id: usize,
    /// Ancestors of `leaf_id` at levels `1..=L`.
    pub level_labels: Vec<usize>,
    /// Node whose prototype generated each step.
    pub step_labels: Vec<usize>,
}

/// Depth revealed by context step `t` (1-based) of a sequence of length `n`.
pub fn revealed_depth(t: usize, levels: usize, n: usize) -> usize {
    (t * levels).div_ceil(n - 1).clamp(1, levels)
}

/// Draws sequence `index`; the result depends only on `(cfg.seed, index)`.
pub fn sample_sequence(
    tax: &SynthTaxonomy,
    cfg: &GeneratorConfig,
    index: u64,
) -> Result<SequenceSample> {
    cfg.validate()?;
    let t = &tax.taxonomy;
    if t.levels() != cfg.depth || tax.prototypes.first().map(Vec::len) != Some(cfg.d_in) {
        return Err(invalid("taxonomy does not match the generator config"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let emit = |node: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        tax.prototypes[node]
            .iter()
            .map(|c| {
                if cfg.noise > 0.0 {
                    c + noise.sample(rng)
                } else {
                    *c
                }
            })
            .collect()
    };

    let leaves = t.leaves();
    let target = leaves[rng.gen_range(0..leaves.len())];
    let n = cfg.seq_len;
    let mut features = Vec::with_capacity(n);
    let mut step_labels = Vec::with_capacity(n);
    for step in 1..n {
        let node = t.ancestor_at(target, revealed_depth(step, cfg.depth, n))?;
        features.push(emit(node, &mut rng));
        step_labels.push(node);
    }
    let final_leaf = if rng.gen::<f64>() < cfg.ambiguity {
        *t.siblings(target)?
            .choose(&mut rng)
            .expect("leaf has siblings")
    } else {
        target
    };
    features.push(emit(final_leaf, &mut rng));
    step_labels.push(final_leaf);
    Ok(SequenceSample {
        seq_id: index,
        features,
        leaf_id: final_leaf,
        level_labels: t.path(final_leaf)?,
        step_labels,
    })
}

/// Train / validation / test partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<SequenceSample>,
    pub val: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
}

const SPLIT_STRIDE: u64 = 1 << 32;

/// Samples three disjoint index ranges, so split sizes never change each other.
pub fn make_splits(
    tax: &SynthTaxonomy,
    cfg: &GeneratorConfig,
    sizes: [usize; 3],
) -> Result<Splits> {
    let draw = |k: u64, n: usize| -> Result<Vec<SequenceSample>> {
        (0..n as u64)
            .map(|i| sample_sequence(tax, cfg, k * SPLIT_STRIDE + i))
            .collect()
    };
    Ok(Splits {
        train: draw(0, sizes[0])?,
        val: draw(1, sizes[1])?,
        test: draw(2, sizes[2])?,
    })
}

pub fn write_jsonl(path: impl AsRef<Path>, samples: &[SequenceSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads samples back and checks their labels against `tax`.
pub fn read_jsonl(path: impl AsRef<Path>, tax: &Taxonomy) -> Result<Vec<SequenceSample>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SequenceSample = serde_json::from_str(&line)?;
        let path = tax
            .path(s.leaf_id)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if path != s.level_labels {
            return Err(Error::Format(format!(
                "line {}: level labels disagree with leaf",
                i + 1
            )));
        }
        if s.features.len() < 2 {
            return Err(Error::Format(format!(
                "line {}: sequence shorter than 2",
                i + 1
            )));
        }
        out.push(s);
    }
    if let Some(first) = out.first() {
        let (n, d) = (first.features.len(), first.features[0].len());
        if out
            .iter()
            .any(|s| s.features.len() != n || s.features.iter().any(|r| r.len() != d))
        {
            return Err(Error::Format("ragged feature rows".into()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn cfg(alpha: f64) -> GeneratorConfig {
        GeneratorConfig {
            ambiguity: alpha,
            ..Default::default()
        }
    }

    #[test]
    fn taxonomy_is_deterministic() {
        let a = build_taxonomy(3, 3, 8, 7).unwrap();
        let b = build_taxonomy(3, 3, 8, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.taxonomy.leaves().len(), 27);
        assert!(a.prototypes[0].iter().all(|&c| c == 0.0));
        assert_ne!(a, build_taxonomy(3, 3, 8, 8).unwrap());
    }

    #[test]
    fn context_reveals_depth_progressively() {
        let n = 8;
        let depths: Vec<usize> = (1..n).map(|t| revealed_depth(t, 3, n)).collect();
        assert_eq!(depths, vec![1, 1, 2, 2, 3, 3, 3]);
        assert_eq!(revealed_depth(1, 3, 2), 3);
    }

    #[test]
    fn no_ambiguity_keeps_the_target() {
        let c = cfg(0.0);
        let tax = build_taxonomy(c.branching, c.depth, c.d_in, c.seed).unwrap();
        for i in 0..200 {
            let s = sample_sequence(&tax, &c, i).unwrap();
            assert_eq!(s.leaf_id, s.step_labels[c.seq_len - 2]);
            assert_eq!(s.features.len(), c.seq_len);
        }
    }

    #[test]
    fn noiseless_last_context_step_is_the_leaf_prototype() {
        let c = GeneratorConfig {
            noise: 0.0,
            ..cfg(0.5)
        };
        let tax = build_taxonomy(c.branching, c.depth, c.d_in, c.seed).unwrap();
        let s = sample_sequence(&tax, &c, 3).unwrap();
        let leaf = s.step_labels[c.seq_len - 2];
        assert!(tax.taxonomy.is_leaf(leaf));
        assert_eq!(s.features[c.seq_len - 2], tax.prototypes[leaf]);
    }

    #[test]
    fn full_ambiguity_is_uniform_over_siblings() {
        let c = cfg(1.0);
        let tax = build_taxonomy(c.branching, c.depth, c.d_in, c.seed).unwrap();
        let t = &tax.taxonomy;
        let mut counts = [0usize; 3];
        let n = 10_000;
        for i in 0..n {
            let s = sample_sequence(&tax, &c, i).unwrap();
            let target = s.step_labels[c.seq_len - 2];
            assert_eq!(
                t.ancestor_at(s.leaf_id, 2).unwrap(),
                t.ancestor_at(target, 2).unwrap()
            );
            let pos = t
                .siblings(s.leaf_id)
                .unwrap()
                .iter()
                .position(|&x| x == s.leaf_id)
                .unwrap();
            counts[pos] += 1;
        }
        let e = n as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        // 99th percentile of chi-square with 2 degrees of freedom
        assert!(chi2 < 9.21, "{counts:?} chi2 {chi2}");
    }

    fn plug_in_mi(pairs: &[(usize, usize)]) -> f64 {
        let n = pairs.len() as f64;
        let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
        let mut pa: HashMap<usize, f64> = HashMap::new();
        let mut pb: HashMap<usize, f64> = HashMap::new();
        for &(a, b) in pairs {
            *joint.entry((a, b)).or_default() += 1.0 / n;
            *pa.entry(a).or_default() += 1.0 / n;
            *pb.entry(b).or_default() += 1.0 / n;
        }
        joint
            .iter()
            .map(|(&(a, b), &p)| p * (p / (pa[&a] * pb[&b])).ln())
            .sum()
    }

    #[test]
    fn context_information_falls_with_ambiguity() {
        let mut last = f64::INFINITY;
        for alpha in [0.0, 0.5, 1.0] {
            let c = cfg(alpha);
            let tax = build_taxonomy(c.branching, c.depth, c.d_in, c.seed).unwrap();
            let pairs: Vec<(usize, usize)> = (0..10_000)
                .map(|i| {
                    let s = sample_sequence(&tax, &c, i).unwrap();
                    (s.step_labels[c.seq_len - 2], s.leaf_id)
                })
                .collect();
            let mi = plug_in_mi(&pairs);
            assert!(mi < last, "alpha {alpha}: {mi} !< {last}");
            last = mi;
        }
    }

    #[test]
    fn splits_are_disjoint_and_stable() {
        let c = cfg(0.5);
        let tax = build_taxonomy(c.branching, c.depth, c.d_in, c.seed).unwrap();
        let a = make_splits(&tax, &c, [4, 2, 2]).unwrap();
        let b = make_splits(&tax, &c, [8, 2, 2]).unwrap();
        assert_eq!(a.val, b.val);
        assert_eq!(a.train[..], b.train[..4]);
        assert_ne!(a.train[0].features, a.val[0].features);
    }

    #[test]
    fn jsonl_round_trip() {
        let c = cfg(0.5);
        let tax = build_taxonomy(c.branching, c.depth, c.d_in, c.seed).unwrap();
        let samples: Vec<_> = (0..5)
            .map(|i| sample_sequence(&tax, &c, i).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        write_jsonl(&path, &samples).unwrap();
        assert_eq!(read_jsonl(&path, &tax.taxonomy).unwrap(), samples);

        let mut bad = samples[0].clone();
        bad.level_labels[0] = 2;
        write_jsonl(&path, &[bad]).unwrap();
        assert!(read_jsonl(&path, &tax.taxonomy).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0.5).validate().is_ok());
        assert!(cfg(1.5).validate().is_err());
        assert!(GeneratorConfig {
            branching: 1,
            ..cfg(0.0)
        }
        .validate()
        .is_err());
        assert!(GeneratorConfig {
            seq_len: 1,
            ..cfg(0.0)
        }
        .validate()
        .is_err());
    }
}

//! Offline caption backend: fills `"{class} characterized by {characteristics}"` with
//! two to four class attributes drawn without replacement, each draw Boltzmann-weighted
//! by attribute salience at the configured sampling temperature.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Caption, CaptionConstraints, CaptionSet};
use crate::error::{Error, Result};
use crate::morphology::StageClass;
use crate::rng::{rng_for, stream_seed};

pub const CLASS_SLOT: &str = "{class}";
pub const CHARACTERISTICS_SLOT: &str = "{characteristics}";

/// Attempts at drawing a caption inside the length window before giving up.
const LENGTH_ATTEMPTS: usize = 64;
/// Redraws allowed for a caption that duplicates one already in the set.
const DEDUP_RETRIES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Characteristic {
    pub phrase: String,
    /// Salience score; higher scores are drawn more often.
    pub weight: f64,
}

impl Characteristic {
    fn new(phrase: &str, weight: f64) -> Self {
        Self {
            phrase: phrase.to_string(),
            weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplate {
    pub frame: String,
    pub pools: BTreeMap<StageClass, Vec<Characteristic>>,
    pub min_characteristics: usize,
    pub max_characteristics: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        let c = Characteristic::new;
        let mut pools = BTreeMap::new();
        pools.insert(
            StageClass::Spore,
            vec![
                c("small round cells", 0.9),
                c("smooth spherical walls", 0.7),
                c("bright yellow pigmentation", 0.9),
                c("a warm golden hue", 0.6),
                c("no branching filaments", 0.8),
                c("scattered isolated dots", 0.8),
                c("the earliest dormant growth phase", 0.7),
                c("compact single-celled bodies", 0.6),
                c("dispersed clusters across the surface", 0.5),
                c("a thick protective coat", 0.4),
            ],
        );
        pools.insert(
            StageClass::Hyphae,
            vec![
                c("long thread-like filaments", 0.9),
                c("tubular branching cells", 0.9),
                c("orange colored strands", 0.8),
                c("a deeper orange tint toward the tips", 0.6),
                c("forked branches extending outward", 0.8),
                c("a central cell with radiating threads", 0.7),
                c("the active middle stage of development", 0.7),
                c("apical tip growth", 0.5),
                c("a few leftover round cells nearby", 0.5),
                c("sparse two-level branching", 0.6),
            ],
        );
        pools.insert(
            StageClass::Mycelium,
            vec![
                c("a dense interwoven network", 0.9),
                c("deep red coloration", 0.9),
                c("red-orange to dark red gradients", 0.7),
                c("many layers of recursive branching", 0.8),
                c("a mature fully developed colony", 0.8),
                c("thick fan-like branch clusters", 0.6),
                c("fine tapering terminal threads", 0.6),
                c("the final stage of the life cycle", 0.7),
                c("residual young filaments woven throughout", 0.5),
                c("a complex web of filaments", 0.7),
            ],
        );
        Self {
            frame: format!("{CLASS_SLOT} characterized by {CHARACTERISTICS_SLOT}"),
            pools,
            min_characteristics: 2,
            max_characteristics: 4,
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.frame.matches(CLASS_SLOT).count() != 1 {
            return Err(Error::Config(format!(
                "caption frame must contain exactly one {CLASS_SLOT} slot: '{}'",
                self.frame
            )));
        }
        if !self.frame.contains(CHARACTERISTICS_SLOT) {
            return Err(Error::Config(format!(
                "caption frame needs a {CHARACTERISTICS_SLOT} slot: '{}'",
                self.frame
            )));
        }
        if self.min_characteristics == 0 || self.min_characteristics > self.max_characteristics {
            return Err(Error::Config(format!(
                "invalid characteristic count range {}..={}",
                self.min_characteristics, self.max_characteristics
            )));
        }
        Ok(())
    }

    fn pool(&self, class: StageClass) -> Result<&[Characteristic]> {
        let pool = self
            .pools
            .get(&class)
            .ok_or_else(|| Error::Config(format!("no characteristic pool for {class}")))?;
        if pool.len() < self.max_characteristics {
            return Err(Error::Config(format!(
                "pool for {class} has {} characteristics, fewer than the {} a caption may request",
                pool.len(),
                self.max_characteristics
            )));
        }
        if let Some(bad) = pool.iter().find(|c| !c.weight.is_finite()) {
            return Err(Error::Config(format!("non-finite weight for '{}'", bad.phrase)));
        }
        Ok(pool)
    }

    /// Joins phrases as "a", "a and b", "a, b and c".
    fn join(phrases: &[&str]) -> String {
        match phrases {
            [] => String::new(),
            [one] => (*one).to_string(),
            [init @ .., last] => format!("{} and {last}", init.join(", ")),
        }
    }

    pub fn fill(&self, class: StageClass, phrases: &[&str]) -> String {
        self.frame
            .replace(CLASS_SLOT, class.name())
            .replace(CHARACTERISTICS_SLOT, &Self::join(phrases))
    }
}

/// Weighted draw of `k` distinct indices with `P(i) ∝ exp(w_i / temperature)` at each step.
fn boltzmann_without_replacement<R: Rng + ?Sized>(
    weights: &[f64],
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Vec<usize> {
    let top = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut mass: Vec<f64> = weights.iter().map(|w| ((w - top) / temperature).exp()).collect();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = mass.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut choice = mass.iter().rposition(|&m| m > 0.0).unwrap_or(0);
        for (i, &m) in mass.iter().enumerate() {
            if m > 0.0 && u < m {
                choice = i;
                break;
            }
            u -= m;
        }
        picked.push(choice);
        mass[choice] = 0.0;
    }
    picked
}

fn sample_caption<R: Rng + ?Sized>(
    class: StageClass,
    template: &PromptTemplate,
    constraints: &CaptionConstraints,
    rng: &mut R,
) -> Result<String> {
    let pool = template.pool(class)?;
    let weights: Vec<f64> = pool.iter().map(|c| c.weight).collect();
    for _ in 0..LENGTH_ATTEMPTS {
        let k = rng.random_range(template.min_characteristics..=template.max_characteristics);
        let picks = boltzmann_without_replacement(&weights, k, constraints.sampling_temperature, rng);
        let phrases: Vec<&str> = picks.iter().map(|&i| pool[i].phrase.as_str()).collect();
        let caption = template.fill(class, &phrases);
        if constraints.accepts(&caption) {
            return Ok(caption);
        }
    }
    Err(Error::Config(format!(
        "template cannot produce {class} captions with {}..={} tokens",
        constraints.min_len, constraints.max_len
    )))
}

/// The `k`-th batch: exactly `batch_size` captions, each inside the length window.
pub fn generate_batch<R: Rng + ?Sized>(
    class: StageClass,
    template: &PromptTemplate,
    constraints: &CaptionConstraints,
    batch_index: usize,
    rng: &mut R,
) -> Result<Vec<Caption>> {
    constraints.validate()?;
    template.validate()?;
    (0..constraints.batch_size)
        .map(|_| {
            Ok(Caption {
                text: sample_caption(class, template, constraints, rng)?,
                batch: Some(batch_index),
            })
        })
        .collect()
}

/// Seed of batch `k` for `class`; batches are independent of each other.
fn batch_rng(seed: u64, class: StageClass, k: usize) -> crate::rng::SeededRng {
    rng_for(stream_seed(seed, class.name()), k as u64)
}

/// Union of `⌈N/B⌉` batches, truncated to exactly `N` captions. Duplicates are redrawn
/// from the batch's stream up to a fixed budget and kept otherwise, in which case the
/// set is marked as not deduplicated.
pub fn generate_set(
    class: StageClass,
    template: &PromptTemplate,
    constraints: &CaptionConstraints,
    seed: u64,
) -> Result<CaptionSet> {
    constraints.validate()?;
    template.validate()?;
    let mut seen = HashSet::new();
    let mut captions = Vec::with_capacity(constraints.total);
    let mut deduplicated = true;
    for k in 0..constraints.batches() {
        let mut rng = batch_rng(seed, class, k);
        let batch = generate_batch(class, template, constraints, k, &mut rng)?;
        for mut caption in batch {
            if captions.len() == constraints.total {
                break;
            }
            let mut retries = 0;
            while seen.contains(&caption.text) && retries < DEDUP_RETRIES {
                caption.text = sample_caption(class, template, constraints, &mut rng)?;
                retries += 1;
            }
            if !seen.insert(caption.text.clone()) {
                deduplicated = false;
            }
            captions.push(caption);
        }
    }
    Ok(CaptionSet {
        class,
        captions,
        provider: "template".into(),
        deduplicated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captions::{caption_stats, tokenize};
    use crate::rng::rng_from_seed;
    use std::collections::BTreeSet;

    fn constraints(total: usize, batch: usize) -> CaptionConstraints {
        CaptionConstraints {
            total,
            batch_size: batch,
            ..CaptionConstraints::default()
        }
    }

    #[test]
    fn single_spore_caption_has_frame_words() {
        let t = PromptTemplate::default();
        assert_eq!(t.pools[&StageClass::Spore].len(), 10);
        let batch = generate_batch(StageClass::Spore, &t, &constraints(1, 1), 0, &mut rng_from_seed(1)).unwrap();
        assert_eq!(batch.len(), 1);
        assert!(batch[0].text.contains("spore"));
        assert!(batch[0].text.contains("characterized by"));
    }

    #[test]
    fn hyphae_batch_lengths() {
        let t = PromptTemplate::default();
        let c = constraints(8, 4);
        let batch = generate_batch(StageClass::Hyphae, &t, &c, 3, &mut rng_from_seed(2)).unwrap();
        assert_eq!(batch.len(), 4);
        for cap in batch {
            let n = tokenize(&cap.text).len();
            assert!((c.min_len..=c.max_len).contains(&n), "{n}: {}", cap.text);
            assert_eq!(cap.batch, Some(3));
        }
    }

    #[test]
    fn mycelium_ten_by_four() {
        let set = generate_set(StageClass::Mycelium, &PromptTemplate::default(), &constraints(10, 4), 5).unwrap();
        assert_eq!(set.len(), 10);
        let batches: BTreeSet<_> = set.captions.iter().filter_map(|c| c.batch).collect();
        assert_eq!(batches.len(), 3);
    }

    #[test]
    fn batch_counts() {
        let t = PromptTemplate::default();
        let set = generate_set(StageClass::Spore, &t, &constraints(8, 8), 1).unwrap();
        assert!(set.captions.iter().all(|c| c.batch == Some(0)));
        let set = generate_set(StageClass::Spore, &t, &constraints(0, 1), 1).unwrap();
        assert!(set.is_empty());
        let set = generate_set(StageClass::Spore, &t, &constraints(25, 8), 1).unwrap();
        assert_eq!(set.captions.iter().filter_map(|c| c.batch).max(), Some(3));
        assert_eq!(set.len(), 25);
    }

    #[test]
    fn sets_are_deterministic_and_dedup() {
        let t = PromptTemplate::default();
        let c = CaptionConstraints::default();
        for class in StageClass::ALL {
            let a = generate_set(class, &t, &c, 42).unwrap();
            let b = generate_set(class, &t, &c, 42).unwrap();
            assert_eq!(a, b);
            assert!(a.deduplicated);
            assert!(a.texts().all(|s| s.starts_with(class.name())));
        }
        assert_ne!(
            generate_set(StageClass::Spore, &t, &c, 1).unwrap(),
            generate_set(StageClass::Spore, &t, &c, 2).unwrap()
        );
    }

    #[test]
    fn vocabulary_comes_from_grammar() {
        let t = PromptTemplate::default();
        for class in StageClass::ALL {
            let set = generate_set(class, &t, &CaptionConstraints::default(), 9).unwrap();
            let mut allowed: BTreeSet<String> = tokenize(&t.frame.replace(CLASS_SLOT, class.name()))
                .into_iter()
                .collect();
            allowed.insert("and".into());
            for ch in &t.pools[&class] {
                allowed.extend(tokenize(&ch.phrase));
            }
            let used: BTreeSet<String> = set.texts().flat_map(tokenize).collect();
            assert!(used.is_subset(&allowed), "{:?}", used.difference(&allowed).collect::<Vec<_>>());
            assert_eq!(caption_stats(&set).vocabulary, used.len());
        }
    }

    #[test]
    fn small_pool_is_config_error() {
        let mut t = PromptTemplate::default();
        t.pools.get_mut(&StageClass::Spore).unwrap().truncate(3);
        let err = generate_batch(StageClass::Spore, &t, &constraints(1, 1), 0, &mut rng_from_seed(1));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn frame_validation() {
        for frame in ["no slots here", "{class} {class} {characteristics}", "{class} alone"] {
            let t = PromptTemplate {
                frame: frame.into(),
                ..PromptTemplate::default()
            };
            assert!(t.validate().is_err(), "{frame}");
        }
    }

    #[test]
    fn unreachable_length_window_is_reported() {
        let c = CaptionConstraints {
            min_len: 39,
            max_len: 40,
            ..constraints(1, 1)
        };
        let err = generate_batch(StageClass::Spore, &PromptTemplate::default(), &c, 0, &mut rng_from_seed(1));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn low_temperature_prefers_salient_phrases() {
        let weights = [0.1, 0.9, 0.2];
        let mut rng = rng_from_seed(3);
        let hits = (0..200)
            .filter(|_| boltzmann_without_replacement(&weights, 1, 0.05, &mut rng)[0] == 1)
            .count();
        assert!(hits > 190);
        let picks = boltzmann_without_replacement(&weights, 3, 0.9, &mut rng);
        let distinct: BTreeSet<_> = picks.iter().collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn join_forms() {
        assert_eq!(PromptTemplate::join(&["a"]), "a");
        assert_eq!(PromptTemplate::join(&["a", "b"]), "a and b");
        assert_eq!(PromptTemplate::join(&["a", "b", "c"]), "a, b and c");
    }
}

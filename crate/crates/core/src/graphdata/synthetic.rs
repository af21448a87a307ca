//! Synthetic propagation trees with planted class-evidence tokens.
//!
//! Every post carries one signal slot. For a class-`c` event, a slot holds
//! a token from class `c`'s planted set, except in a noisy subset of posts
//! where it holds a planted token of a uniformly drawn class. The number of
//! noisy posts is `⌊noise_rate·|V| + U⌋` with `U ~ U[0,1)`, so each post is
//! noisy with probability `noise_rate` while any tree of two or more posts
//! keeps at least one clean slot for `noise_rate < 1 - 1/|V|`. All other
//! token slots are drawn uniformly from the non-planted pool.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::{PlantedRegistry, Post, PropagationEvent, Vocabulary};

/// Number of vocabulary entries reserved for PAD and UNK.
pub const RESERVED_TOKENS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_events: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
    /// Inclusive range of posts per event.
    pub tree_size_range: (usize, usize),
    /// Inclusive range of tokens per post.
    pub tokens_per_post_range: (usize, usize),
    pub planted_tokens_per_class: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_events: 500,
            num_classes: 4,
            vocab_size: 200,
            tree_size_range: (3, 10),
            tokens_per_post_range: (2, 6),
            planted_tokens_per_class: 5,
            noise_rate: 0.2,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let planted = self.num_classes * self.planted_tokens_per_class;
        if self.num_classes == 0 || self.planted_tokens_per_class == 0 {
            return Err(Error::Config(
                "num_classes and planted_tokens_per_class must be positive".into(),
            ));
        }
        if self.vocab_size <= planted + RESERVED_TOKENS {
            return Err(Error::Config(format!(
                "vocab_size {} too small: need more than {} planted + {} reserved tokens",
                self.vocab_size, planted, RESERVED_TOKENS
            )));
        }
        let (lo, hi) = self.tree_size_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "invalid tree_size_range ({lo}, {hi})"
            )));
        }
        let (lo, hi) = self.tokens_per_post_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "invalid tokens_per_post_range ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise_rate {} outside [0, 1]",
                self.noise_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub events: Vec<PropagationEvent>,
    pub vocabulary: Vocabulary,
    pub registry: PlantedRegistry,
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut vocabulary = Vocabulary::with_specials();
    for i in RESERVED_TOKENS..config.vocab_size {
        vocabulary.insert(&format!("w{i}"));
    }

    let mut pool: Vec<usize> = (RESERVED_TOKENS..config.vocab_size).collect();
    pool.shuffle(&mut rng);
    let k = config.planted_tokens_per_class;
    let mut classes = BTreeMap::new();
    for c in 0..config.num_classes {
        let mut toks = pool[c * k..(c + 1) * k].to_vec();
        toks.sort_unstable();
        classes.insert(c, toks);
    }
    let mut background = pool[config.num_classes * k..].to_vec();
    background.sort_unstable();
    let registry = PlantedRegistry { classes };

    let mut labels: Vec<usize> = (0..config.num_events)
        .map(|i| i % config.num_classes)
        .collect();
    labels.shuffle(&mut rng);

    let mut events = Vec::with_capacity(config.num_events);
    for (idx, &label) in labels.iter().enumerate() {
        let n = rng.gen_range(config.tree_size_range.0..=config.tree_size_range.1);
        let noisy_count =
            ((config.noise_rate * n as f64 + rng.gen::<f64>()).floor() as usize).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut noisy = vec![false; n];
        for &v in &order[..noisy_count] {
            noisy[v] = true;
        }

        let mut posts = Vec::with_capacity(n);
        for (v, &is_noisy) in noisy.iter().enumerate() {
            let m = rng.gen_range(config.tokens_per_post_range.0..=config.tokens_per_post_range.1);
            let mut tokens: Vec<usize> = (0..m)
                .map(|_| *background.choose(&mut rng).expect("non-empty"))
                .collect();
            let signal_class = if is_noisy {
                rng.gen_range(0..config.num_classes)
            } else {
                label
            };
            let slot = rng.gen_range(0..m);
            tokens[slot] = *registry
                .tokens_of(signal_class)
                .choose(&mut rng)
                .expect("non-empty");
            let parent = (v > 0).then(|| format!("p{}", rng.gen_range(0..v)));
            posts.push(Post::new(format!("p{v}"), parent.as_deref(), tokens));
        }
        events.push(PropagationEvent::new(format!("e{idx}"), label, posts)?);
    }

    Ok(SyntheticDataset {
        events,
        vocabulary,
        registry,
    })
}

//! Synthetic implicit-feedback data with planted low-rank structure and a
//! skewed popularity profile.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Catalog, Interaction, InteractionDataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    /// Dimension of the planted user/item factors.
    pub latent_dim: usize,
    pub min_per_user: usize,
    pub max_per_user: usize,
    /// Zipf exponent of the item popularity prior.
    pub popularity_exponent: f64,
    /// Weight of the planted affinity `<x_u, y_i>` in the choice logits.
    pub affinity: f64,
    /// Attach each item's dominant latent dimension as a `genre` attribute.
    pub item_genres: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 1000,
            items: 2000,
            latent_dim: 8,
            min_per_user: 10,
            max_per_user: 60,
            popularity_exponent: 0.8,
            affinity: 8.0,
            item_genres: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 || self.latent_dim == 0 {
            return Err(Error::config("synthetic users, items and latent_dim must be positive"));
        }
        if self.min_per_user == 0 || self.min_per_user > self.max_per_user || self.max_per_user > self.items {
            return Err(Error::config("need 1 <= min_per_user <= max_per_user <= items"));
        }
        Ok(())
    }
}

fn normal_rows<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    let scale = 1.0 / (dim as f64).sqrt();
    (0..rows)
        .map(|_| (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Each user picks a random number of distinct items without replacement
/// with probability proportional to `popularity_i * exp(affinity * <x_u, y_i>)`.
pub fn generate(cfg: &SynthConfig) -> Result<InteractionDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let users = normal_rows(&mut rng, cfg.users, cfg.latent_dim);
    let items = normal_rows(&mut rng, cfg.items, cfg.latent_dim);
    // popularity rank is a random permutation of item ids
    let mut order: Vec<usize> = (0..cfg.items).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut log_pop = vec![0.0; cfg.items];
    for (rank, &item) in order.iter().enumerate() {
        log_pop[item] = -cfg.popularity_exponent * ((rank + 1) as f64).ln();
    }

    let mut catalog = Catalog::with_counts(cfg.users, cfg.items);
    if cfg.item_genres {
        for (i, y) in items.iter().enumerate() {
            let g = y
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(d, _)| d)
                .unwrap_or(0);
            catalog.add_item_attribute(i, &format!("genre{g}"))?;
        }
    }

    let mut interactions = Vec::new();
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(cfg.items);
    for (u, x) in users.iter().enumerate() {
        let count = rng.random_range(cfg.min_per_user..=cfg.max_per_user);
        keys.clear();
        for (i, y) in items.iter().enumerate() {
            let logit = log_pop[i] + cfg.affinity * x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
            // Efraimidis-Spirakis key in log space: ln(U) / w
            let e: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE).ln();
            keys.push((e * (-logit).exp(), i));
        }
        keys.select_nth_unstable_by(count - 1, |a, b| b.0.total_cmp(&a.0));
        for &(_, i) in &keys[..count] {
            let t = rng.random_range(0..1_000_000i64);
            interactions.push(Interaction::new(u, i, t));
        }
    }
    InteractionDataset::new(Arc::new(catalog), interactions)
}

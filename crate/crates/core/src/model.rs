//! Hybrid matrix factorization.
//!
//! Every user and item owns one identity attribute plus any side attributes
//! from the catalog. An entity's latent vector is the unweighted sum of its
//! attribute embeddings; the score of a pair is the inner product of the two
//! vectors plus the item-side attribute biases.
//!
//! Attribute index layout (per side): `0..num_entities` are identity
//! attributes, side attribute `a` lives at `num_entities + a`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Catalog, InteractionDataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub init_scale: f64,
    pub l2_user: f64,
    pub l2_item: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            init_scale: 0.05,
            l2_user: 0.0,
            l2_item: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim must be >= 1"));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::config("init_scale must be finite and >= 0"));
        }
        if !(self.l2_user >= 0.0 && self.l2_item >= 0.0) {
            return Err(Error::config("l2 coefficients must be >= 0"));
        }
        Ok(())
    }
}

/// Dense row-major `rows x dim` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingTable {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sum_rows(table: &EmbeddingTable, features: &[usize], out: &mut [f64]) {
    out.fill(0.0);
    for &f in features {
        for (o, v) in out.iter_mut().zip(table.row(f)) {
            *o += v;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    dim: usize,
    user_features: Vec<Vec<usize>>,
    item_features: Vec<Vec<usize>>,
    user_embeddings: EmbeddingTable,
    item_embeddings: EmbeddingTable,
    item_bias: Vec<f64>,
}

/// Item representations and bias sums for a fixed item list.
#[derive(Clone, Debug)]
pub struct ItemBlock {
    pub items: Vec<usize>,
    pub reprs: EmbeddingTable,
    pub bias: Vec<f64>,
}

/// Row-major `users x items` score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBlock {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ScoreBlock {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

impl FactorModel {
    /// Uniform `[-init_scale, init_scale]` embeddings, zero biases.
    pub fn new(cfg: &ModelConfig, catalog: &Catalog) -> Result<Self> {
        cfg.validate()?;
        let (nu, ni) = (catalog.num_users(), catalog.num_items());
        let user_features = (0..nu)
            .map(|u| {
                std::iter::once(u)
                    .chain(catalog.user_attributes(u).iter().map(|a| nu + a))
                    .collect()
            })
            .collect();
        let item_features = (0..ni)
            .map(|i| {
                std::iter::once(i)
                    .chain(catalog.item_attributes(i).iter().map(|a| ni + a))
                    .collect()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut table = |rows: usize| {
            let mut t = EmbeddingTable::zeros(rows, cfg.dim);
            if cfg.init_scale > 0.0 {
                for v in &mut t.data {
                    *v = rng.random_range(-cfg.init_scale..=cfg.init_scale);
                }
            }
            t
        };
        let user_embeddings = table(nu + catalog.user_attr_vocab.len());
        let item_embeddings = table(ni + catalog.item_attr_vocab.len());
        let item_bias = vec![0.0; item_embeddings.rows()];
        Ok(FactorModel {
            dim: cfg.dim,
            user_features,
            item_features,
            user_embeddings,
            item_embeddings,
            item_bias,
        })
    }

    /// Popularity baseline: zero embeddings, identity bias = train count.
    pub fn popularity(train: &InteractionDataset) -> Result<Self> {
        let cfg = ModelConfig {
            dim: 1,
            init_scale: 0.0,
            ..ModelConfig::default()
        };
        let mut model = FactorModel::new(&cfg, train.catalog())?;
        for (_, item) in train.positive_pairs() {
            model.item_bias[item] += 1.0;
        }
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_users(&self) -> usize {
        self.user_features.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_features.len()
    }

    pub fn user_features(&self, user: usize) -> Result<&[usize]> {
        self.user_features.get(user).map(Vec::as_slice).ok_or(Error::Lookup {
            kind: "user",
            index: user,
        })
    }

    pub fn item_features(&self, item: usize) -> Result<&[usize]> {
        self.item_features.get(item).map(Vec::as_slice).ok_or(Error::Lookup {
            kind: "item",
            index: item,
        })
    }

    pub fn user_embeddings(&self) -> &EmbeddingTable {
        &self.user_embeddings
    }

    pub fn item_embeddings(&self) -> &EmbeddingTable {
        &self.item_embeddings
    }

    pub fn item_bias(&self) -> &[f64] {
        &self.item_bias
    }

    pub fn user_embeddings_mut(&mut self) -> &mut EmbeddingTable {
        &mut self.user_embeddings
    }

    pub fn item_embeddings_mut(&mut self) -> &mut EmbeddingTable {
        &mut self.item_embeddings
    }

    pub fn item_bias_mut(&mut self) -> &mut [f64] {
        &mut self.item_bias
    }

    pub fn user_repr(&self, user: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        sum_rows(&self.user_embeddings, self.user_features(user)?, &mut out);
        Ok(out)
    }

    pub fn item_repr(&self, item: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        sum_rows(&self.item_embeddings, self.item_features(item)?, &mut out);
        Ok(out)
    }

    pub fn item_repr_into(&self, item: usize, out: &mut [f64]) -> Result<()> {
        sum_rows(&self.item_embeddings, self.item_features(item)?, out);
        Ok(())
    }

    /// Sum of biases over the item's attributes.
    pub fn item_bias_sum(&self, item: usize) -> Result<f64> {
        Ok(self.item_features(item)?.iter().map(|&f| self.item_bias[f]).sum())
    }

    pub fn score(&self, user: usize, item: usize) -> Result<f64> {
        let u = self.user_repr(user)?;
        let v = self.item_repr(item)?;
        Ok(dot(&u, &v) + self.item_bias_sum(item)?)
    }

    pub fn user_block(&self, users: &[usize]) -> Result<EmbeddingTable> {
        let mut reprs = EmbeddingTable::zeros(users.len(), self.dim);
        for (r, &u) in users.iter().enumerate() {
            sum_rows(&self.user_embeddings, self.user_features(u)?, reprs.row_mut(r));
        }
        Ok(reprs)
    }

    pub fn item_block(&self, items: &[usize]) -> Result<ItemBlock> {
        let mut reprs = EmbeddingTable::zeros(items.len(), self.dim);
        let mut bias = Vec::with_capacity(items.len());
        for (r, &i) in items.iter().enumerate() {
            sum_rows(&self.item_embeddings, self.item_features(i)?, reprs.row_mut(r));
            bias.push(self.item_bias_sum(i)?);
        }
        Ok(ItemBlock {
            items: items.to_vec(),
            reprs,
            bias,
        })
    }

    /// Every item, in index order.
    pub fn all_items(&self) -> ItemBlock {
        let items: Vec<usize> = (0..self.num_items()).collect();
        self.item_block(&items).expect("indices in range")
    }

    /// Scores of one precomputed user vector against a block of items.
    pub fn scores_against(user_repr: &[f64], block: &ItemBlock) -> Vec<f64> {
        (0..block.items.len())
            .map(|c| dot(user_repr, block.reprs.row(c)) + block.bias[c])
            .collect()
    }

    /// Scores of `user` against every item.
    pub fn user_scores(&self, user: usize, all_items: &ItemBlock) -> Result<Vec<f64>> {
        let u = self.user_repr(user)?;
        Ok(Self::scores_against(&u, all_items))
    }

    /// Pairwise scores; rows computed in parallel, each entry identical to
    /// [`FactorModel::score`].
    pub fn score_block(&self, users: &[usize], items: &[usize]) -> Result<ScoreBlock> {
        let user_reprs = self.user_block(users)?;
        let block = self.item_block(items)?;
        let data: Vec<f64> = (0..users.len())
            .into_par_iter()
            .flat_map_iter(|r| Self::scores_against(user_reprs.row(r), &block))
            .collect();
        Ok(ScoreBlock {
            rows: users.len(),
            cols: items.len(),
            data,
        })
    }

    /// `l2_user * |U|^2 + l2_item * |I|^2` over both embedding tables.
    pub fn reg_penalty(&self, cfg: &ModelConfig) -> f64 {
        let mut total = 0.0;
        if cfg.l2_user != 0.0 {
            total += cfg.l2_user * self.user_embeddings.squared_norm();
        }
        if cfg.l2_item != 0.0 {
            total += cfg.l2_item * self.item_embeddings.squared_norm();
        }
        total
    }

    pub fn is_finite(&self) -> bool {
        self.user_embeddings.data.iter().all(|v| v.is_finite())
            && self.item_embeddings.data.iter().all(|v| v.is_finite())
            && self.item_bias.iter().all(|v| v.is_finite())
    }

    /// `params -= learning_rate * grad`.
    pub fn apply_gradient(&mut self, grad: &Gradient, learning_rate: f64) {
        for (&r, g) in &grad.user_rows {
            for (w, d) in self.user_embeddings.row_mut(r).iter_mut().zip(g) {
                *w -= learning_rate * d;
            }
        }
        for (&r, g) in &grad.item_rows {
            for (w, d) in self.item_embeddings.row_mut(r).iter_mut().zip(g) {
                *w -= learning_rate * d;
            }
        }
        for (&r, &g) in &grad.item_bias {
            self.item_bias[r] -= learning_rate * g;
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let ok = self.user_embeddings.dim == self.dim
            && self.item_embeddings.dim == self.dim
            && self.user_embeddings.data.len() == self.user_embeddings.rows * self.dim
            && self.item_embeddings.data.len() == self.item_embeddings.rows * self.dim
            && self.item_bias.len() == self.item_embeddings.rows
            && self
                .user_features
                .iter()
                .flatten()
                .all(|&f| f < self.user_embeddings.rows)
            && self
                .item_features
                .iter()
                .flatten()
                .all(|&f| f < self.item_embeddings.rows);
        if !ok {
            return Err(Error::data("checkpoint tables have inconsistent shapes"));
        }
        Ok(())
    }
}

/// Sparse gradient keyed by attribute row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradient {
    pub user_rows: BTreeMap<usize, Vec<f64>>,
    pub item_rows: BTreeMap<usize, Vec<f64>>,
    pub item_bias: BTreeMap<usize, f64>,
}

fn accumulate(rows: &mut BTreeMap<usize, Vec<f64>>, row: usize, g: &[f64], scale: f64) {
    let slot = rows.entry(row).or_insert_with(|| vec![0.0; g.len()]);
    for (s, v) in slot.iter_mut().zip(g) {
        *s += scale * v;
    }
}

impl Gradient {
    /// Adds `scale * g` (a gradient w.r.t. the user vector) to each of the
    /// user's attribute rows.
    pub fn add_user(&mut self, model: &FactorModel, user: usize, g: &[f64], scale: f64) {
        for &f in &model.user_features[user] {
            accumulate(&mut self.user_rows, f, g, scale);
        }
    }

    pub fn add_item(&mut self, model: &FactorModel, item: usize, g: &[f64], scale: f64) {
        for &f in &model.item_features[item] {
            accumulate(&mut self.item_rows, f, g, scale);
        }
    }

    pub fn add_item_bias(&mut self, model: &FactorModel, item: usize, g: f64) {
        for &f in &model.item_features[item] {
            *self.item_bias.entry(f).or_insert(0.0) += g;
        }
    }

    /// Marks rows as touched with a zero gradient (so regularization reaches them).
    pub fn touch_user(&mut self, model: &FactorModel, user: usize) {
        for &f in &model.user_features[user] {
            self.user_rows.entry(f).or_insert_with(|| vec![0.0; model.dim]);
        }
    }

    pub fn touch_item(&mut self, model: &FactorModel, item: usize) {
        for &f in &model.item_features[item] {
            self.item_rows.entry(f).or_insert_with(|| vec![0.0; model.dim]);
        }
    }

    /// Adds the L2 gradient on touched rows and returns the penalty of those rows.
    pub fn add_regularization(&mut self, model: &FactorModel, cfg: &ModelConfig) -> f64 {
        let mut penalty = 0.0;
        for (coeff, rows, table) in [
            (cfg.l2_user, &mut self.user_rows, &model.user_embeddings),
            (cfg.l2_item, &mut self.item_rows, &model.item_embeddings),
        ] {
            if coeff == 0.0 {
                continue;
            }
            for (&r, g) in rows.iter_mut() {
                let w = table.row(r);
                penalty += coeff * dot(w, w);
                for (gv, wv) in g.iter_mut().zip(w) {
                    *gv += 2.0 * coeff * wv;
                }
            }
        }
        penalty
    }

    pub fn is_finite(&self) -> bool {
        self.user_rows.values().flatten().all(|v| v.is_finite())
            && self.item_rows.values().flatten().all(|v| v.is_finite())
            && self.item_bias.values().all(|v| v.is_finite())
    }
}

pub const CHECKPOINT_FORMAT: &str = "bars-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: format tag, version, model config, catalog and tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub catalog: Catalog,
    pub model: FactorModel,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, catalog: Catalog, model: FactorModel) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            config,
            catalog,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.model.check_shapes()?;
        if ckpt.model.num_users() != ckpt.catalog.num_users() || ckpt.model.num_items() != ckpt.catalog.num_items() {
            return Err(Error::data("checkpoint model does not match its catalog"));
        }
        Ok(ckpt)
    }
}

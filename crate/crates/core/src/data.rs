//! Interaction logs, token vocabularies and train/test splitting.
//!
//! Tokens in input files are arbitrary strings. They are mapped to dense
//! indices in first-seen order, and the resulting [`Catalog`] is shared (via
//! `Arc`) by every split derived from the same load, so indices stay stable
//! across train, test and dev sets and across checkpoints.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One observed (user, item) event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    /// Epoch seconds, 0 when the input has no time column.
    pub timestamp: i64,
    pub weight: f64,
}

impl Interaction {
    pub fn new(user: usize, item: usize, timestamp: i64) -> Self {
        Interaction {
            user,
            item,
            timestamp,
            weight: 1.0,
        }
    }
}

/// Bidirectional token <-> dense index map, assigned in first-seen order.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(vocab: Vocab) -> Self {
        vocab.tokens
    }
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index for `token`, assigning the next one if unseen.
    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), i);
        i
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Entity vocabularies plus side-feature assignments.
///
/// Attribute lists hold side attributes only; identity attributes are added
/// by the factorization model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub users: Vocab,
    pub items: Vocab,
    pub user_attr_vocab: Vocab,
    pub item_attr_vocab: Vocab,
    user_attributes: Vec<Vec<usize>>,
    item_attributes: Vec<Vec<usize>>,
}

impl Catalog {
    /// Catalog with synthetic tokens `u0..`, `i0..` and no side attributes.
    pub fn with_counts(num_users: usize, num_items: usize) -> Self {
        let users = Vocab::from((0..num_users).map(|u| format!("u{u}")).collect::<Vec<_>>());
        let items = Vocab::from((0..num_items).map(|i| format!("i{i}")).collect::<Vec<_>>());
        Catalog {
            users,
            items,
            user_attr_vocab: Vocab::new(),
            item_attr_vocab: Vocab::new(),
            user_attributes: vec![Vec::new(); num_users],
            item_attributes: vec![Vec::new(); num_items],
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn user_attributes(&self, user: usize) -> &[usize] {
        self.user_attributes.get(user).map_or(&[], Vec::as_slice)
    }

    pub fn item_attributes(&self, item: usize) -> &[usize] {
        self.item_attributes.get(item).map_or(&[], Vec::as_slice)
    }

    /// Attaches a side attribute to a user, interning the attribute token.
    pub fn add_user_attribute(&mut self, user: usize, attr: &str) -> Result<()> {
        if user >= self.num_users() {
            return Err(Error::Lookup {
                kind: "user",
                index: user,
            });
        }
        let a = self.user_attr_vocab.intern(attr);
        push_unique(&mut self.user_attributes[user], a);
        Ok(())
    }

    pub fn add_item_attribute(&mut self, item: usize, attr: &str) -> Result<()> {
        if item >= self.num_items() {
            return Err(Error::Lookup {
                kind: "item",
                index: item,
            });
        }
        let a = self.item_attr_vocab.intern(attr);
        push_unique(&mut self.item_attributes[item], a);
        Ok(())
    }

    fn intern_user(&mut self, token: &str) -> usize {
        let u = self.users.intern(token);
        if u == self.user_attributes.len() {
            self.user_attributes.push(Vec::new());
        }
        u
    }

    fn intern_item(&mut self, token: &str) -> usize {
        let i = self.items.intern(token);
        if i == self.item_attributes.len() {
            self.item_attributes.push(Vec::new());
        }
        i
    }

    fn check(&self) -> Result<()> {
        let bad_user = self
            .user_attributes
            .iter()
            .flatten()
            .any(|&a| a >= self.user_attr_vocab.len());
        let bad_item = self
            .item_attributes
            .iter()
            .flatten()
            .any(|&a| a >= self.item_attr_vocab.len());
        if bad_user || bad_item {
            return Err(Error::data("attribute id outside its vocabulary"));
        }
        Ok(())
    }
}

fn push_unique(list: &mut Vec<usize>, value: usize) {
    if !list.contains(&value) {
        list.push(value);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    /// `user<TAB>item[<TAB>timestamp]`
    TsvTriples,
    /// `user<TAB>item<TAB>timestamp`, timestamp mandatory.
    TsvWithTime,
}

#[derive(Clone, Debug, Default)]
pub struct AttributePaths {
    pub user: Option<PathBuf>,
    pub item: Option<PathBuf>,
}

/// Immutable interaction log over a shared catalog.
#[derive(Clone, Debug)]
pub struct InteractionDataset {
    catalog: Arc<Catalog>,
    interactions: Vec<Interaction>,
    positives: Vec<Vec<usize>>,
}

impl PartialEq for InteractionDataset {
    fn eq(&self, other: &Self) -> bool {
        self.catalog == other.catalog && self.interactions == other.interactions
    }
}

impl InteractionDataset {
    /// Builds a dataset, validating indices and weights.
    pub fn new(catalog: Arc<Catalog>, interactions: Vec<Interaction>) -> Result<Self> {
        catalog.check()?;
        let (nu, ni) = (catalog.num_users(), catalog.num_items());
        let mut positives = vec![Vec::new(); nu];
        for (row, it) in interactions.iter().enumerate() {
            if it.user >= nu {
                return Err(Error::data(format!("interaction {row}: user {} out of range", it.user)));
            }
            if it.item >= ni {
                return Err(Error::data(format!("interaction {row}: item {} out of range", it.item)));
            }
            if !(it.weight > 0.0) {
                return Err(Error::data(format!("interaction {row}: weight must be positive")));
            }
            positives[it.user].push(it.item);
        }
        for items in &mut positives {
            items.sort_unstable();
            items.dedup();
        }
        Ok(InteractionDataset {
            catalog,
            interactions,
            positives,
        })
    }

    /// Convenience constructor over generated tokens.
    pub fn from_pairs(num_users: usize, num_items: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let catalog = Arc::new(Catalog::with_counts(num_users, num_items));
        let interactions = pairs.iter().map(|&(u, i)| Interaction::new(u, i, 0)).collect();
        Self::new(catalog, interactions)
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn num_users(&self) -> usize {
        self.catalog.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.catalog.num_items()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Sorted, deduplicated positive items of `user`.
    pub fn positives(&self, user: usize) -> &[usize] {
        self.positives.get(user).map_or(&[], Vec::as_slice)
    }

    pub fn is_positive(&self, user: usize, item: usize) -> bool {
        self.positives(user).binary_search(&item).is_ok()
    }

    /// Distinct (user, item) pairs, ordered by user then item.
    pub fn positive_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.positives
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }

    /// Derived dataset over the same catalog.
    pub fn with_interactions(&self, interactions: Vec<Interaction>) -> Self {
        // indices were validated against this catalog already
        let mut positives = vec![Vec::new(); self.num_users()];
        for it in &interactions {
            positives[it.user].push(it.item);
        }
        for items in &mut positives {
            items.sort_unstable();
            items.dedup();
        }
        InteractionDataset {
            catalog: Arc::clone(&self.catalog),
            interactions,
            positives,
        }
    }

    /// Content hash over catalog tokens and interactions.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for t in self.catalog.users.tokens() {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        hasher.update([1u8]);
        for t in self.catalog.items.tokens() {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        for it in &self.interactions {
            hasher.update((it.user as u64).to_le_bytes());
            hasher.update((it.item as u64).to_le_bytes());
            hasher.update(it.timestamp.to_le_bytes());
            hasher.update(it.weight.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

struct RawRow<'a> {
    user: &'a str,
    item: &'a str,
    timestamp: i64,
}

fn parse_rows<'a>(path: &Path, text: &'a str, format: InputFormat) -> Result<Vec<RawRow<'a>>> {
    let mut rows = Vec::new();
    for (line, content) in content_lines(text) {
        let fields = split_fields(content);
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line,
            message,
        };
        let want_time = format == InputFormat::TsvWithTime;
        let expected = if want_time { 3..=3 } else { 2..=3 };
        if !expected.contains(&fields.len()) {
            return Err(parse_err(format!(
                "expected {} columns, found {}",
                if want_time { "3" } else { "2 or 3" },
                fields.len()
            )));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err("empty user or item token".into()));
        }
        let timestamp = match fields.get(2) {
            Some(t) => t
                .parse::<i64>()
                .map_err(|e| parse_err(format!("bad timestamp `{t}`: {e}")))?,
            None => 0,
        };
        rows.push(RawRow {
            user: fields[0],
            item: fields[1],
            timestamp,
        });
    }
    Ok(rows)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

/// Reads an interaction file, assigning token indices in first-seen order.
pub fn load_interactions(path: &Path, format: InputFormat, attrs: &AttributePaths) -> Result<InteractionDataset> {
    let text = read_text(path)?;
    let rows = parse_rows(path, &text, format)?;
    if rows.is_empty() {
        return Err(Error::NoInteractions);
    }
    let mut catalog = Catalog::default();
    let interactions: Vec<Interaction> = rows
        .iter()
        .map(|r| {
            let user = catalog.intern_user(r.user);
            let item = catalog.intern_item(r.item);
            Interaction::new(user, item, r.timestamp)
        })
        .collect();
    if let Some(p) = &attrs.user {
        read_attribute_pairs(p, &mut catalog, true)?;
    }
    if let Some(p) = &attrs.item {
        read_attribute_pairs(p, &mut catalog, false)?;
    }
    let ds = InteractionDataset::new(Arc::new(catalog), interactions)?;
    log::info!(
        "loaded {}: {} users, {} items, {} interactions",
        path.display(),
        ds.num_users(),
        ds.num_items(),
        ds.len()
    );
    Ok(ds)
}

/// Reads an interaction file against an existing catalog; unknown tokens are errors.
pub fn load_interactions_with_catalog(
    path: &Path,
    format: InputFormat,
    catalog: Arc<Catalog>,
) -> Result<InteractionDataset> {
    let text = read_text(path)?;
    let rows = parse_rows(path, &text, format)?;
    let unknown = |token: &str| Error::UnknownEntity {
        path: path.to_owned(),
        token: token.to_owned(),
    };
    let interactions = rows
        .iter()
        .map(|r| {
            let user = catalog.users.get(r.user).ok_or_else(|| unknown(r.user))?;
            let item = catalog.items.get(r.item).ok_or_else(|| unknown(r.item))?;
            Ok(Interaction::new(user, item, r.timestamp))
        })
        .collect::<Result<Vec<_>>>()?;
    InteractionDataset::new(catalog, interactions)
}

fn read_attribute_pairs(path: &Path, catalog: &mut Catalog, users: bool) -> Result<()> {
    let text = read_text(path)?;
    for (line, content) in content_lines(&text) {
        let fields = split_fields(content);
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: path.to_owned(),
                line,
                message: format!("expected 2 columns, found {}", fields.len()),
            });
        }
        let (entity, attr) = (fields[0], fields[1]);
        let index = if users {
            catalog.users.get(entity)
        } else {
            catalog.items.get(entity)
        };
        let Some(index) = index else {
            return Err(Error::UnknownEntity {
                path: path.to_owned(),
                token: entity.to_owned(),
            });
        };
        if users {
            catalog.add_user_attribute(index, attr)?;
        } else {
            catalog.add_item_attribute(index, attr)?;
        }
    }
    Ok(())
}

/// Writes `user<TAB>item<TAB>timestamp` lines using catalog tokens.
pub fn write_interactions(ds: &InteractionDataset, path: &Path) -> Result<()> {
    let cat = ds.catalog();
    let mut out = String::with_capacity(ds.len() * 16);
    for it in ds.interactions() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            cat.users.token(it.user).unwrap_or_default(),
            cat.items.token(it.item).unwrap_or_default(),
            it.timestamp
        );
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitProtocol {
    RandomHoldout,
    Chronological,
}

#[derive(Clone, Debug)]
pub struct SplitPair {
    pub train: InteractionDataset,
    pub test: InteractionDataset,
    pub protocol: SplitProtocol,
}

fn check_fraction(test_fraction: f64) -> Result<()> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    Ok(())
}

/// Independent per-interaction Bernoulli(test_fraction) assignment.
pub fn split_random(ds: &InteractionDataset, test_fraction: f64, seed: u64) -> Result<SplitPair> {
    check_fraction(test_fraction)?;
    if ds.is_empty() {
        return Err(Error::NoInteractions);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (test, train): (Vec<_>, Vec<_>) = ds.interactions().iter().partition(|_| rng.random_bool(test_fraction));
    Ok(SplitPair {
        train: ds.with_interactions(train),
        test: ds.with_interactions(test),
        protocol: SplitProtocol::RandomHoldout,
    })
}

/// Sorts by timestamp (stable, so ties keep file order) and holds out the
/// last `ceil(test_fraction * n)` interactions.
pub fn split_chronological(ds: &InteractionDataset, test_fraction: f64) -> Result<SplitPair> {
    check_fraction(test_fraction)?;
    if ds.is_empty() {
        return Err(Error::NoInteractions);
    }
    if ds.interactions().iter().all(|it| it.timestamp == 0) {
        return Err(Error::MissingTimestamps);
    }
    let mut sorted = ds.interactions().to_vec();
    sorted.sort_by_key(|it| it.timestamp);
    let n = sorted.len();
    // the epsilon absorbs products like 0.3 * 10 = 3.0000000000000004
    let n_test = ((test_fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let test = sorted.split_off(n - n_test.min(n));
    Ok(SplitPair {
        train: ds.with_interactions(sorted),
        test: ds.with_interactions(test),
        protocol: SplitProtocol::Chronological,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
}

impl DatasetStats {
    pub fn from_counts(users: usize, items: usize, interactions: usize) -> Result<Self> {
        if users == 0 || items == 0 {
            return Err(Error::data("dataset has no users or no items"));
        }
        Ok(DatasetStats {
            users,
            items,
            interactions,
            density: interactions as f64 / (users as f64 * items as f64),
        })
    }
}

pub fn dataset_stats(ds: &InteractionDataset) -> Result<DatasetStats> {
    DatasetStats::from_counts(ds.num_users(), ds.num_items(), ds.len())
}

/// On-disk layout of a split directory.
pub mod split_dir {
    use super::*;

    pub const USERS: &str = "users.vocab";
    pub const ITEMS: &str = "items.vocab";
    pub const USER_ATTR_VOCAB: &str = "user_attrs.vocab";
    pub const ITEM_ATTR_VOCAB: &str = "item_attrs.vocab";
    pub const USER_ATTRS: &str = "user_attrs.tsv";
    pub const ITEM_ATTRS: &str = "item_attrs.tsv";
    pub const TRAIN: &str = "train.tsv";
    pub const TEST: &str = "test.tsv";

    fn write_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in vocab.tokens() {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    fn read_vocab(path: &Path) -> Result<Vocab> {
        let text = read_text(path)?;
        Ok(Vocab::from(
            text.lines()
                .filter(|l| !l.is_empty())
                .map(str::to_owned)
                .collect::<Vec<_>>(),
        ))
    }

    /// Writes vocabularies, attribute pairs and both splits into `dir`.
    pub fn save(split: &SplitPair, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let cat = split.train.catalog();
        write_vocab(&cat.users, &dir.join(USERS))?;
        write_vocab(&cat.items, &dir.join(ITEMS))?;
        write_vocab(&cat.user_attr_vocab, &dir.join(USER_ATTR_VOCAB))?;
        write_vocab(&cat.item_attr_vocab, &dir.join(ITEM_ATTR_VOCAB))?;
        let mut users = String::new();
        for u in 0..cat.num_users() {
            for &a in cat.user_attributes(u) {
                let _ = writeln!(
                    users,
                    "{}\t{}",
                    cat.users.token(u).unwrap_or_default(),
                    cat.user_attr_vocab.token(a).unwrap_or_default()
                );
            }
        }
        fs::write(dir.join(USER_ATTRS), users)?;
        let mut items = String::new();
        for i in 0..cat.num_items() {
            for &a in cat.item_attributes(i) {
                let _ = writeln!(
                    items,
                    "{}\t{}",
                    cat.items.token(i).unwrap_or_default(),
                    cat.item_attr_vocab.token(a).unwrap_or_default()
                );
            }
        }
        fs::write(dir.join(ITEM_ATTRS), items)?;
        write_interactions(&split.train, &dir.join(TRAIN))?;
        write_interactions(&split.test, &dir.join(TEST))?;
        Ok(())
    }

    /// Reloads a directory written by [`save`], preserving every index.
    pub fn load(dir: &Path, protocol: SplitProtocol) -> Result<SplitPair> {
        let mut catalog = Catalog {
            users: read_vocab(&dir.join(USERS))?,
            items: read_vocab(&dir.join(ITEMS))?,
            user_attr_vocab: read_vocab(&dir.join(USER_ATTR_VOCAB))?,
            item_attr_vocab: read_vocab(&dir.join(ITEM_ATTR_VOCAB))?,
            ..Catalog::default()
        };
        catalog.user_attributes = vec![Vec::new(); catalog.num_users()];
        catalog.item_attributes = vec![Vec::new(); catalog.num_items()];
        for (file, users) in [(USER_ATTRS, true), (ITEM_ATTRS, false)] {
            let path = dir.join(file);
            if path.exists() {
                read_attribute_pairs(&path, &mut catalog, users)?;
            }
        }
        let catalog = Arc::new(catalog);
        let train = load_interactions_with_catalog(&dir.join(TRAIN), InputFormat::TsvTriples, Arc::clone(&catalog))?;
        let test = load_interactions_with_catalog(&dir.join(TEST), InputFormat::TsvTriples, catalog)?;
        Ok(SplitPair { train, test, protocol })
    }
}

//! Interaction ingest, dense subsetting, the 7:1:2 split, synthetic noise
//! injection, and seeded sampling.
//!
//! Input files are UTF-8 text with one `user<TAB>item` pair of external ids
//! per line. Dense indices are assigned in first-appearance order and the
//! id maps travel with every derived set so that splits share one id space.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `user<TAB>item`, got {content:?}")]
    MalformedLine { line: usize, content: String },
    #[error("dataset is empty: {0}")]
    Empty(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cannot inject {requested} pairs: only {available} unobserved pairs exist")]
    Capacity { requested: usize, available: usize },
    #[error("corrupt sidecar {path}: {message}")]
    CorruptSidecar { path: String, message: String },
}

/// One observed (user, item) positive, in dense indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
}

/// Bidirectional map between external ids and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    /// Dense index -> external id, in first-appearance order.
    pub external: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl IdMap {
    fn intern(&mut self, id: &str) -> usize {
        if let Some(&idx) = self.index.get(id) {
            return idx;
        }
        let idx = self.external.len();
        self.external.push(id.to_string());
        self.index.insert(id.to_string(), idx);
        idx
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .external
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    pub fn dense(&self, external: &str) -> Option<usize> {
        self.index.get(external).copied()
    }
}

/// A set of observed positives together with its id space.
///
/// Derived sets (splits, noisy variants) keep the parent's id maps and
/// counts so embeddings and metrics index consistently across them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSet {
    pub interactions: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
    pub user_ids: IdMap,
    pub item_ids: IdMap,
}

impl InteractionSet {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Positives per user, indexed by dense user id.
    pub fn positives_by_user(&self) -> Vec<HashSet<usize>> {
        let mut sets = vec![HashSet::new(); self.num_users];
        for it in &self.interactions {
            sets[it.user].insert(it.item);
        }
        sets
    }

    pub fn interaction_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_users];
        for it in &self.interactions {
            counts[it.user] += 1;
        }
        counts
    }

    /// Same id space, different interaction list.
    pub fn with_interactions(&self, interactions: Vec<Interaction>) -> InteractionSet {
        InteractionSet {
            interactions,
            num_users: self.num_users,
            num_items: self.num_items,
            user_ids: self.user_ids.clone(),
            item_ids: self.item_ids.clone(),
        }
    }

    fn rebuild_indexes(&mut self) {
        self.user_ids.rebuild_index();
        self.item_ids.rebuild_index();
    }
}

/// Ground truth for synthetically injected noise.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NoiseLedger {
    pub injected: Vec<Interaction>,
    pub rate: f64,
    pub seed: u64,
}

impl NoiseLedger {
    pub fn injected_set(&self) -> HashSet<Interaction> {
        self.injected.iter().copied().collect()
    }
}

/// Ingest statistics worth reporting next to the set itself.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LoadStats {
    pub lines: usize,
    pub duplicates_dropped: usize,
}

/// Reads a `user<TAB>item` file, assigning dense ids in first-appearance
/// order and dropping duplicate pairs.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<(InteractionSet, LoadStats), DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let (set, stats) = parse_interactions(&text)?;
    if stats.duplicates_dropped > 0 {
        log::info!(
            "{}: dropped {} duplicate pair(s)",
            path.display(),
            stats.duplicates_dropped
        );
    }
    Ok((set, stats))
}

/// Parses interaction text; see [`load_interactions`].
pub fn parse_interactions(text: &str) -> Result<(InteractionSet, LoadStats), DataError> {
    let mut user_ids = IdMap::default();
    let mut item_ids = IdMap::default();
    let mut interactions = Vec::new();
    let mut seen: HashSet<Interaction> = HashSet::new();
    let mut stats = LoadStats::default();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        stats.lines += 1;
        let (user_ext, item_ext) = line
            .split_once('\t')
            .filter(|(u, i)| !u.is_empty() && !i.is_empty() && !i.contains('\t'))
            .ok_or_else(|| DataError::MalformedLine {
                line: lineno + 1,
                content: line.to_string(),
            })?;
        let interaction = Interaction {
            user: user_ids.intern(user_ext),
            item: item_ids.intern(item_ext),
        };
        if seen.insert(interaction) {
            interactions.push(interaction);
        } else {
            stats.duplicates_dropped += 1;
        }
    }

    if interactions.is_empty() {
        return Err(DataError::Empty(
            "no interactions found in input".to_string(),
        ));
    }

    let set = InteractionSet {
        num_users: user_ids.len(),
        num_items: item_ids.len(),
        interactions,
        user_ids,
        item_ids,
    };
    Ok((set, stats))
}

/// Keeps the `n` users with the most interactions (ties to the smaller dense
/// id) and reindexes users and items densely, preserving original id order.
pub fn densify_top_users(set: &InteractionSet, n: usize) -> Result<InteractionSet, DataError> {
    if n == 0 {
        return Err(DataError::InvalidArgument(
            "densify_top_users requires n >= 1".to_string(),
        ));
    }
    if n > set.num_users {
        return Err(DataError::InvalidArgument(format!(
            "n = {n} exceeds the {} users present",
            set.num_users
        )));
    }

    let counts = set.interaction_counts();
    let mut order: Vec<usize> = (0..set.num_users).collect();
    order.sort_by_key(|&u| (std::cmp::Reverse(counts[u]), u));
    let kept: HashSet<usize> = order[..n].iter().copied().collect();

    // New indices follow the old dense order of whatever survives.
    let mut user_remap = HashMap::new();
    let mut user_ids = IdMap::default();
    for u in 0..set.num_users {
        if kept.contains(&u) {
            user_remap.insert(u, user_ids.len());
            user_ids.intern(&set.user_ids.external[u]);
        }
    }

    let surviving_items: HashSet<usize> = set
        .interactions
        .iter()
        .filter(|it| kept.contains(&it.user))
        .map(|it| it.item)
        .collect();
    let mut item_remap = HashMap::new();
    let mut item_ids = IdMap::default();
    for i in 0..set.num_items {
        if surviving_items.contains(&i) {
            item_remap.insert(i, item_ids.len());
            item_ids.intern(&set.item_ids.external[i]);
        }
    }

    let interactions = set
        .interactions
        .iter()
        .filter(|it| kept.contains(&it.user))
        .map(|it| Interaction {
            user: user_remap[&it.user],
            item: item_remap[&it.item],
        })
        .collect();

    Ok(InteractionSet {
        interactions,
        num_users: user_ids.len(),
        num_items: item_ids.len(),
        user_ids,
        item_ids,
    })
}

/// Per-user 7:1:2 split: each user's interactions are shuffled with the seed,
/// then `floor(0.2 k)` go to test, `floor(0.1 k)` to valid, and the remainder
/// to train. Every user therefore keeps at least one training interaction.
pub fn split(
    set: &InteractionSet,
    seed: u64,
) -> Result<(InteractionSet, InteractionSet, InteractionSet), DataError> {
    let counts = set.interaction_counts();
    if let Some(user) = counts.iter().position(|&c| c == 0) {
        return Err(DataError::InvalidArgument(format!(
            "user {user} has no interactions"
        )));
    }

    let mut per_user: Vec<Vec<Interaction>> = vec![Vec::new(); set.num_users];
    for it in &set.interactions {
        per_user[it.user].push(*it);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for items in per_user.iter_mut() {
        items.shuffle(&mut rng);
        let k = items.len();
        let n_test = k / 5;
        let n_valid = k / 10;
        test.extend_from_slice(&items[..n_test]);
        valid.extend_from_slice(&items[n_test..n_test + n_valid]);
        train.extend_from_slice(&items[n_test + n_valid..]);
    }

    Ok((
        set.with_interactions(train),
        set.with_interactions(valid),
        set.with_interactions(test),
    ))
}

/// Adds `round(rate * |train|)` uniformly sampled unobserved pairs as
/// synthetic positives and records them in a ledger.
pub fn inject_noise(
    train: &InteractionSet,
    rate: f64,
    seed: u64,
) -> Result<(InteractionSet, NoiseLedger), DataError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(DataError::InvalidArgument(format!(
            "noise rate {rate} outside [0, 1]"
        )));
    }
    let target = (rate * train.len() as f64).round() as usize;
    let capacity = train.num_users * train.num_items - train.len();
    if target > capacity {
        return Err(DataError::Capacity {
            requested: target,
            available: capacity,
        });
    }

    let mut observed: HashSet<Interaction> = train.interactions.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut injected = Vec::with_capacity(target);
    while injected.len() < target {
        let candidate = Interaction {
            user: rng.gen_range(0..train.num_users),
            item: rng.gen_range(0..train.num_items),
        };
        if observed.insert(candidate) {
            injected.push(candidate);
        }
    }

    let mut noisy = train.clone();
    noisy.interactions.extend_from_slice(&injected);
    let ledger = NoiseLedger {
        injected,
        rate,
        seed,
    };
    Ok((noisy, ledger))
}

/// Draws `min(n, |set|)` interactions uniformly without replacement.
pub fn sample_interactions(set: &InteractionSet, n: usize, seed: u64) -> Vec<Interaction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = set.interactions.clone();
    let take = n.min(pool.len());
    let (sampled, _) = pool.partial_shuffle(&mut rng, take);
    sampled.to_vec()
}

/// Draws `min(n, len)` indices in `0..len` uniformly without replacement.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..len).collect();
    let take = n.min(len);
    let (sampled, _) = pool.partial_shuffle(&mut rng, take);
    sampled.to_vec()
}

/// Split/seed provenance stored in the sidecar next to a persisted set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SetMeta {
    pub role: String,
    pub split_seed: Option<u64>,
    pub noise_seed: Option<u64>,
    pub noise_rate: Option<f64>,
}

/// Writes the set as `user<TAB>item` external-id lines plus a JSON sidecar
/// (`<path>.meta.json`) holding the id maps and split/seed metadata.
pub fn save_interactions(
    set: &InteractionSet,
    path: impl AsRef<Path>,
    meta: &SetMeta,
) -> Result<(), DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    for it in &set.interactions {
        writeln!(
            out,
            "{}\t{}",
            set.user_ids.external[it.user], set.item_ids.external[it.item]
        )
        .map_err(io_err)?;
    }
    fs::write(path, out).map_err(io_err)?;

    #[derive(Serialize)]
    struct Sidecar<'a> {
        meta: &'a SetMeta,
        num_users: usize,
        num_items: usize,
        user_ids: &'a [String],
        item_ids: &'a [String],
    }
    let sidecar = serde_json::to_string_pretty(&Sidecar {
        meta,
        num_users: set.num_users,
        num_items: set.num_items,
        user_ids: &set.user_ids.external,
        item_ids: &set.item_ids.external,
    })
    .expect("sidecar serializes");
    let sidecar_path = sidecar_path(path);
    fs::write(&sidecar_path, sidecar).map_err(|source| DataError::Io {
        path: sidecar_path.display().to_string(),
        source,
    })
}

/// Reads a set persisted by [`save_interactions`], restoring the full id
/// space from the sidecar so that users or items absent from this particular
/// split keep their dense indices.
pub fn load_saved_interactions(path: impl AsRef<Path>) -> Result<InteractionSet, DataError> {
    let path = path.as_ref();
    let sidecar_path = sidecar_path(path);
    let sidecar_text = fs::read_to_string(&sidecar_path).map_err(|source| DataError::Io {
        path: sidecar_path.display().to_string(),
        source,
    })?;

    #[derive(Deserialize)]
    struct Sidecar {
        num_users: usize,
        num_items: usize,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
    }
    let sidecar: Sidecar =
        serde_json::from_str(&sidecar_text).map_err(|e| DataError::CorruptSidecar {
            path: sidecar_path.display().to_string(),
            message: e.to_string(),
        })?;

    let mut set = InteractionSet {
        interactions: Vec::new(),
        num_users: sidecar.num_users,
        num_items: sidecar.num_items,
        user_ids: IdMap {
            external: sidecar.user_ids,
            index: HashMap::new(),
        },
        item_ids: IdMap {
            external: sidecar.item_ids,
            index: HashMap::new(),
        },
    };
    set.rebuild_indexes();

    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let malformed = || DataError::MalformedLine {
            line: lineno + 1,
            content: line.to_string(),
        };
        let (user_ext, item_ext) = line.split_once('\t').ok_or_else(malformed)?;
        let user = set.user_ids.dense(user_ext).ok_or_else(malformed)?;
        let item = set.item_ids.dense(item_ext).ok_or_else(malformed)?;
        set.interactions.push(Interaction { user, item });
    }
    Ok(set)
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

/// Synthetic fixtures with planted structure, used by tests and the
/// comparison commands.
pub mod synthetic {
    use super::*;

    /// Shape of a planted block-structure fixture.
    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct BlockFixture {
        pub users: usize,
        pub items: usize,
        pub blocks: usize,
        /// Probability of a user interacting with an item of their block.
        pub density: f64,
        pub seed: u64,
    }

    impl Default for BlockFixture {
        fn default() -> Self {
            BlockFixture {
                users: 50,
                items: 200,
                blocks: 5,
                density: 0.6,
                seed: 17,
            }
        }
    }

    /// Users and items are partitioned into `blocks` groups; each user
    /// interacts with a seeded `density` fraction of their own block's items.
    /// The structure is trivially learnable, so uniformly injected noise is
    /// visible in the loss profile.
    pub fn block_structured(fixture: &BlockFixture) -> InteractionSet {
        let mut rng = ChaCha8Rng::seed_from_u64(fixture.seed);
        let mut user_ids = IdMap::default();
        let mut item_ids = IdMap::default();
        for u in 0..fixture.users {
            user_ids.intern(&format!("u{u}"));
        }
        for i in 0..fixture.items {
            item_ids.intern(&format!("i{i}"));
        }

        let users_per_block = fixture.users.div_ceil(fixture.blocks);
        let items_per_block = fixture.items / fixture.blocks;
        let mut interactions = Vec::new();
        for user in 0..fixture.users {
            let block = user / users_per_block;
            let start = block * items_per_block;
            let end = (start + items_per_block).min(fixture.items);
            let mut any = false;
            for item in start..end {
                if rng.gen_bool(fixture.density) {
                    interactions.push(Interaction { user, item });
                    any = true;
                }
            }
            if !any {
                interactions.push(Interaction { user, item: start });
            }
        }

        InteractionSet {
            interactions,
            num_users: fixture.users,
            num_items: fixture.items,
            user_ids,
            item_ids,
        }
    }
}

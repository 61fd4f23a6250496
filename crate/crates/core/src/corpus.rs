//! Item catalogs, interaction sequences and their preparation: sentence
//! flattening, five-core filtering, chronological leave-one-out splits, JSONL
//! ingestion and a seeded synthetic generator.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// An item and its ordered `(attribute, value)` pairs, e.g.
/// `[("Title", "iPhone"), ("Brand", "Apple")]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub attributes: Vec<(String, String)>,
}

impl ItemRecord {
    pub fn new<K: Into<String>, V: Into<String>>(
        item_id: impl Into<String>,
        attributes: impl IntoIterator<Item = (K, V)>,
    ) -> Self {
        Self {
            item_id: item_id.into(),
            attributes: attributes.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(self.invalid("no attributes"));
        }
        for (k, v) in &self.attributes {
            if k.trim().is_empty() {
                return Err(self.invalid("empty attribute name"));
            }
            if v.trim().is_empty() {
                return Err(self.invalid(&format!("empty value for attribute {k:?}")));
            }
        }
        Ok(())
    }

    fn invalid(&self, reason: &str) -> Error {
        Error::InvalidItem { item_id: self.item_id.clone(), reason: reason.to_string() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Attribute,
    Value,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedText {
    pub segment: Segment,
    pub text: String,
}

/// Flattens an item into `k1 v1 k2 v2 …`, keeping each piece's role.
pub fn flatten_item(item: &ItemRecord) -> Result<Vec<TaggedText>> {
    item.validate()?;
    Ok(item
        .attributes
        .iter()
        .flat_map(|(k, v)| {
            [
                TaggedText { segment: Segment::Attribute, text: k.trim().to_string() },
                TaggedText { segment: Segment::Value, text: v.trim().to_string() },
            ]
        })
        .collect())
}

/// Plain-text form of [`flatten_item`].
pub fn item_sentence(item: &ItemRecord) -> Result<String> {
    Ok(flatten_item(item)?.into_iter().map(|t| t.text).collect::<Vec<_>>().join(" "))
}

/// One user's chronologically ordered interactions within a single domain.
/// `items` index into [`Corpus::items`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user_id: String,
    pub domain: String,
    pub items: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInteraction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub domain: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub items: Vec<ItemRecord>,
    pub sequences: Vec<InteractionSequence>,
    pub domains: Vec<String>,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Groups interactions into per-(domain, user) sequences sorted by
    /// `(timestamp, item_id)`. Items are kept in catalog order.
    pub fn from_parts(items: Vec<ItemRecord>, interactions: &[RawInteraction]) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            item.validate()?;
            if index.insert(item.item_id.clone(), i).is_some() {
                return Err(Error::InvalidItem {
                    item_id: item.item_id.clone(),
                    reason: "duplicate item id".into(),
                });
            }
        }
        let mut grouped: BTreeMap<(String, String), Vec<&RawInteraction>> = BTreeMap::new();
        let mut domain_order: Vec<String> = Vec::new();
        for it in interactions {
            if !index.contains_key(&it.item_id) {
                return Err(Error::InvalidItem {
                    item_id: it.item_id.clone(),
                    reason: "interaction references an item missing from the catalog".into(),
                });
            }
            if !domain_order.contains(&it.domain) {
                domain_order.push(it.domain.clone());
            }
            grouped.entry((it.domain.clone(), it.user_id.clone())).or_default().push(it);
        }
        let mut sequences = Vec::with_capacity(grouped.len());
        for domain in &domain_order {
            for ((d, user), events) in grouped.range((domain.clone(), String::new())..) {
                if d != domain {
                    break;
                }
                let mut events = events.clone();
                events.sort_by(|a, b| (a.timestamp, &a.item_id).cmp(&(b.timestamp, &b.item_id)));
                sequences.push(InteractionSequence {
                    user_id: user.clone(),
                    domain: domain.clone(),
                    items: events.iter().map(|e| index[&e.item_id]).collect(),
                });
            }
        }
        Ok(Self { items, sequences, domains: domain_order, index })
    }

    pub fn item_index(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.items.len()).sum()
    }

    pub fn sequences_in<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = &'a InteractionSequence> + 'a {
        self.sequences.iter().filter(move |s| s.domain == domain)
    }

    /// Catalog indices of items that occur in `domain`, in catalog order.
    pub fn domain_catalog(&self, domain: &str) -> Vec<usize> {
        let used: HashSet<usize> =
            self.sequences_in(domain).flat_map(|s| s.items.iter().copied()).collect();
        (0..self.items.len()).filter(|i| used.contains(i)).collect()
    }

    /// Corpus restricted to the given domains, keeping only referenced items.
    pub fn restrict(&self, domains: &[String]) -> Result<Corpus> {
        for d in domains {
            if !self.domains.contains(d) {
                return Err(Error::Config(format!("unknown domain {d:?}")));
            }
        }
        let interactions: Vec<RawInteraction> = self
            .to_interactions()
            .into_iter()
            .filter(|r| domains.contains(&r.domain))
            .collect();
        let used: HashSet<&str> = interactions.iter().map(|r| r.item_id.as_str()).collect();
        let items = self.items.iter().filter(|i| used.contains(i.item_id.as_str())).cloned().collect();
        Corpus::from_parts(items, &interactions)
    }

    /// Interactions with the position in the sequence as timestamp.
    pub fn to_interactions(&self) -> Vec<RawInteraction> {
        self.sequences
            .iter()
            .flat_map(|s| {
                s.items.iter().enumerate().map(move |(t, &i)| RawInteraction {
                    user_id: s.user_id.clone(),
                    item_id: self.items[i].item_id.clone(),
                    timestamp: t as i64,
                    domain: s.domain.clone(),
                })
            })
            .collect()
    }

    pub fn manifest(&self) -> CorpusManifest {
        let mut domains = Vec::new();
        for d in &self.domains {
            let users = self.sequences_in(d).count();
            let items = self.domain_catalog(d).len();
            let inters: usize = self.sequences_in(d).map(|s| s.items.len()).sum();
            domains.push(DomainStats::new(d, users, items, inters));
        }
        let total = DomainStats::new(
            "all",
            self.sequences.len(),
            self.items.len(),
            self.num_interactions(),
        );
        CorpusManifest { total, domains }
    }

    /// Writes `items.jsonl`, `interactions.jsonl` and `corpus.manifest.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(ITEMS_FILE))?);
        for item in &self.items {
            serde_json::to_writer(&mut w, &ItemLine::from(item))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(INTERACTIONS_FILE))?);
        for r in self.to_interactions() {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        Ok(())
    }

    /// Loads a corpus directory as written by [`Corpus::write_dir`], without
    /// filtering.
    pub fn read_dir(dir: &Path) -> Result<Corpus> {
        let items = read_items(&dir.join(ITEMS_FILE))?;
        let interactions = read_interactions(&dir.join(INTERACTIONS_FILE))?;
        Corpus::from_parts(items, &interactions)
    }

    /// Deterministic digest of the catalog text and sequences.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for item in &self.items {
            h.update(item.item_id.as_bytes());
            for (k, v) in &item.attributes {
                h.update([0u8]);
                h.update(k.as_bytes());
                h.update([1u8]);
                h.update(v.as_bytes());
            }
            h.update([2u8]);
        }
        for s in &self.sequences {
            h.update(s.domain.as_bytes());
            h.update(s.user_id.as_bytes());
            for i in &s.items {
                h.update((*i as u64).to_le_bytes());
            }
        }
        hex_digest(&h.finalize())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub const ITEMS_FILE: &str = "items.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";
pub const MANIFEST_FILE: &str = "corpus.manifest.json";

/// `items.jsonl` line. Attribute values may be a string or a list of strings;
/// lists are joined with single spaces.
#[derive(Serialize, Deserialize)]
struct ItemLine {
    item_id: String,
    attributes: Vec<(String, AttrValue)>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AttrValue {
    One(String),
    Many(Vec<String>),
}

impl From<&ItemRecord> for ItemLine {
    fn from(item: &ItemRecord) -> Self {
        Self {
            item_id: item.item_id.clone(),
            attributes: item
                .attributes
                .iter()
                .map(|(k, v)| (k.clone(), AttrValue::One(v.clone())))
                .collect(),
        }
    }
}

impl From<ItemLine> for ItemRecord {
    fn from(line: ItemLine) -> Self {
        let attributes = line
            .attributes
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    AttrValue::One(s) => s,
                    AttrValue::Many(parts) => parts.join(" "),
                };
                (k, v)
            })
            .collect();
        ItemRecord { item_id: line.item_id, attributes }
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            reason: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn read_items(path: &Path) -> Result<Vec<ItemRecord>> {
    Ok(read_jsonl::<ItemLine>(path)?.into_iter().map(ItemRecord::from).collect())
}

pub fn read_interactions(path: &Path) -> Result<Vec<RawInteraction>> {
    read_jsonl(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub domain: String,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_length: f64,
    pub density: f64,
}

impl DomainStats {
    fn new(domain: &str, users: usize, items: usize, interactions: usize) -> Self {
        let avg_length = if users == 0 { 0.0 } else { interactions as f64 / users as f64 };
        let cells = (users * items) as f64;
        let density = if cells == 0.0 { 0.0 } else { interactions as f64 / cells };
        Self { domain: domain.to_string(), users, items, interactions, avg_length, density }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub total: DomainStats,
    pub domains: Vec<DomainStats>,
}

/// Iteratively drops users (per domain) and items with fewer than
/// `min_interactions` interactions until nothing changes.
pub fn k_core_filter(
    items: Vec<ItemRecord>,
    interactions: Vec<RawInteraction>,
    min_interactions: usize,
) -> Result<Corpus> {
    let mut kept = interactions;
    loop {
        let mut per_user: HashMap<(&str, &str), usize> = HashMap::new();
        let mut per_item: HashMap<&str, usize> = HashMap::new();
        for r in &kept {
            *per_user.entry((&r.domain, &r.user_id)).or_default() += 1;
            *per_item.entry(&r.item_id).or_default() += 1;
        }
        let keep: Vec<bool> = kept
            .iter()
            .map(|r| {
                per_user[&(r.domain.as_str(), r.user_id.as_str())] >= min_interactions
                    && per_item[r.item_id.as_str()] >= min_interactions
            })
            .collect();
        if keep.iter().all(|&k| k) {
            break;
        }
        let mut flags = keep.into_iter();
        kept.retain(|_| flags.next().unwrap());
    }
    if kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let used: HashSet<&str> = kept.iter().map(|r| r.item_id.as_str()).collect();
    let items: Vec<ItemRecord> =
        items.into_iter().filter(|i| used.contains(i.item_id.as_str())).collect();
    Corpus::from_parts(items, &kept)
}

pub fn five_core_filter(items: Vec<ItemRecord>, interactions: Vec<RawInteraction>) -> Result<Corpus> {
    k_core_filter(items, interactions, 5)
}

/// Leave-one-out view of a sequence: the last item is the test target, the
/// second to last the validation target, everything before is training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeaveOneOut<'a> {
    pub train: &'a [usize],
    pub val_target: usize,
    pub test_target: usize,
    full: &'a [usize],
}

impl<'a> LeaveOneOut<'a> {
    /// History used to predict the validation target.
    pub fn val_history(&self) -> &'a [usize] {
        self.train
    }

    /// History used to predict the test target.
    pub fn test_history(&self) -> &'a [usize] {
        &self.full[..self.full.len() - 1]
    }
}

pub fn leave_one_out_split(seq: &InteractionSequence) -> Result<LeaveOneOut<'_>> {
    let n = seq.items.len();
    if n < 3 {
        return Err(Error::Split(n));
    }
    Ok(LeaveOneOut {
        train: &seq.items[..n - 2],
        val_target: seq.items[n - 2],
        test_target: seq.items[n - 1],
        full: &seq.items,
    })
}

/// Parameters of the synthetic corpus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_domains: usize,
    /// Items per domain.
    pub n_items: usize,
    /// Users per domain.
    pub n_users: usize,
    /// Brands shared by every domain.
    pub n_brands: usize,
    /// Categories shared by every domain.
    pub n_categories: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that an interaction follows the user's preferred brand.
    pub purity: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_domains: 1,
            n_items: 50,
            n_users: 100,
            n_brands: 5,
            n_categories: 4,
            min_len: 5,
            max_len: 20,
            purity: 0.85,
            seed: 0,
        }
    }
}

const BRANDS: &[&str] = &[
    "acme", "zenith", "nova", "orion", "vertex", "lumen", "apex", "cobalt", "ember", "falcon",
    "granite", "harbor", "ionic", "jasper", "kestrel", "lotus", "meridian", "nimbus", "onyx",
    "pioneer", "quartz", "raven", "summit", "tundra",
];

const CATEGORIES: &[&str] = &[
    "audio gear", "cables", "lighting", "storage", "tools", "outdoor", "kitchen", "office supplies",
    "garden", "fitness", "travel", "crafts",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "to", "sa", "vel", "dor", "qui", "zan", "pe", "ru", "bex", "ti",
    "mar", "no", "ful", "gri", "ha", "jo",
];

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::SynthSpec(m));
        if self.n_domains == 0 {
            return fail("n_domains must be at least 1".into());
        }
        if self.n_items < 20 || self.n_users < 20 {
            return fail(format!(
                "need at least 20 items and 20 users per domain, got {} and {}",
                self.n_items, self.n_users
            ));
        }
        if self.n_brands == 0 || self.n_brands > BRANDS.len() || self.n_brands > self.n_users {
            return fail(format!("n_brands must be in 1..={}", BRANDS.len().min(self.n_users)));
        }
        if self.n_categories == 0 || self.n_categories > CATEGORIES.len() {
            return fail(format!("n_categories must be in 1..={}", CATEGORIES.len()));
        }
        if self.min_len < 5 || self.max_len > 50 || self.min_len > self.max_len {
            return fail(format!("sequence lengths must satisfy 5 <= min <= max <= 50, got {}..={}", self.min_len, self.max_len));
        }
        if !(0.0..=1.0).contains(&self.purity) {
            return fail(format!("purity {} outside [0, 1]", self.purity));
        }
        Ok(())
    }
}

/// Generates a corpus where each user mostly buys one brand. Brand and
/// category words are shared across domains, title words are domain-specific.
/// Every item is guaranteed at least five interactions and every user at
/// least `min_len`, so five-core filtering leaves the result unchanged.
pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut items = Vec::new();
    let mut interactions = Vec::new();
    for d in 0..spec.n_domains {
        let domain = format!("domain{d}");
        let mut rng = rng::stream(spec.seed, d as u64);
        let words = domain_words(&mut rng, 24);
        let base = items.len();
        let mut by_brand: Vec<Vec<usize>> = vec![Vec::new(); spec.n_brands];
        for i in 0..spec.n_items {
            let brand = i % spec.n_brands;
            let category = rng.random_range(0..spec.n_categories);
            let title: Vec<&str> = words.choose_multiple(&mut rng, 2).map(String::as_str).collect();
            items.push(ItemRecord::new(
                format!("d{d}-item{i:04}"),
                [
                    ("Title", title.join(" ")),
                    ("Brand", BRANDS[brand].to_string()),
                    ("Category", CATEGORIES[category].to_string()),
                ],
            ));
            by_brand[brand].push(i);
        }

        // Users are assigned brands round-robin; each item's five guaranteed
        // interactions go to users of its brand, also round-robin.
        let mut required: Vec<Vec<usize>> = vec![Vec::new(); spec.n_users];
        for (brand, pool) in by_brand.iter().enumerate() {
            let fans: Vec<usize> = (brand..spec.n_users).step_by(spec.n_brands).collect();
            let mut k = 0;
            for &item in pool {
                for _ in 0..5 {
                    required[fans[k % fans.len()]].push(item);
                    k += 1;
                }
            }
        }
        for (u, req) in required.iter_mut().enumerate() {
            let brand = u % spec.n_brands;
            let target = rng.random_range(spec.min_len..=spec.max_len).max(req.len());
            if target > 50 {
                return Err(Error::SynthSpec(format!(
                    "user {u} would need {target} interactions; add users or remove items"
                )));
            }
            let mut seq = std::mem::take(req);
            while seq.len() < target {
                let pool: &[usize] = if rng.random::<f64>() < spec.purity {
                    &by_brand[brand]
                } else {
                    &by_brand[rng.random_range(0..spec.n_brands)]
                };
                let fresh: Vec<usize> = pool.iter().copied().filter(|i| !seq.contains(i)).collect();
                let pick = if fresh.is_empty() {
                    *pool.choose(&mut rng).expect("non-empty brand pool")
                } else {
                    *fresh.choose(&mut rng).expect("non-empty")
                };
                seq.push(pick);
            }
            seq.shuffle(&mut rng);
            for (t, item) in seq.into_iter().enumerate() {
                interactions.push(RawInteraction {
                    user_id: format!("d{d}-user{u:04}"),
                    item_id: items[base + item].item_id.clone(),
                    timestamp: t as i64,
                    domain: domain.clone(),
                });
            }
        }
    }
    Corpus::from_parts(items, &interactions)
}

fn domain_words(rng: &mut rng::Rng, n: usize) -> Vec<String> {
    let mut words: Vec<String> = Vec::with_capacity(n);
    while words.len() < n {
        let parts = rng.random_range(2..=3);
        let w: String = (0..parts).map(|_| *SYLLABLES.choose(rng).expect("syllables")).collect();
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

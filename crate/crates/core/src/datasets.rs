//! Dataset ingestion for Market-1501 / DukeMTMC-reID style trees and
//! identity-balanced (P×K) batch sampling with the positive/negative pair mask.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::LazyLock;

use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};

static MARKET_NAME: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(-?\d+)_c(\d+)s(\d+)_(\d+)_(\d+)\.(jpg|png)$").unwrap());
static DUKE_NAME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(-?\d+)_c(\d+)_f(\d+)\.(jpg|png)$").unwrap());

const IMAGE_EXTENSIONS: [&str; 2] = ["jpg", "png"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    /// Conventional directory names, dataset-style first.
    fn dir_names(self) -> [&'static str; 2] {
        match self {
            Split::Train => ["bounding_box_train", "train"],
            Split::Query => ["query", "query"],
            Split::Gallery => ["bounding_box_test", "gallery"],
        }
    }
}

/// File naming convention of a dataset tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `PPPP_cCsS_FFFFFF_BB.jpg`
    Market,
    /// `PPPP_cC_fFFFFFFF.jpg`
    Duke,
}

impl Layout {
    fn pattern(self) -> &'static Regex {
        match self {
            Layout::Market => &MARKET_NAME,
            Layout::Duke => &DUKE_NAME,
        }
    }

    /// Parse `name` strictly under this layout's grammar.
    pub fn parse(self, name: &str) -> Result<(i32, u32)> {
        parse_with(self.pattern(), name)
    }

    /// Render a filename that parses back to `(person_id, camera_id)`.
    ///
    /// `seq` fills the sequence/frame fields so names stay unique.
    pub fn format(self, person_id: i32, camera_id: u32, seq: u32, ext: &str) -> String {
        let pid = if person_id < 0 {
            format!("{person_id}")
        } else {
            format!("{person_id:04}")
        };
        match self {
            Layout::Market => format!("{pid}_c{camera_id}s1_{seq:06}_00.{ext}"),
            Layout::Duke => format!("{pid}_c{camera_id}_f{seq:07}.{ext}"),
        }
    }
}

impl FromStr for Layout {
    type Err = ReidError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "market" | "market1501" => Ok(Layout::Market),
            "duke" | "dukemtmc" => Ok(Layout::Duke),
            other => Err(ReidError::Config(format!("unknown dataset layout '{other}'"))),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Market => "market",
            Layout::Duke => "duke",
        })
    }
}

fn parse_with(re: &Regex, name: &str) -> Result<(i32, u32)> {
    let caps = re
        .captures(name)
        .ok_or_else(|| ReidError::MalformedFilename(name.to_string()))?;
    let person_id: i32 = caps[1]
        .parse()
        .map_err(|_| ReidError::MalformedFilename(name.to_string()))?;
    let camera: i64 = caps[2]
        .parse()
        .map_err(|_| ReidError::MalformedFilename(name.to_string()))?;
    if camera < 1 || camera > u32::MAX as i64 {
        return Err(ReidError::InvalidCamera {
            name: name.to_string(),
            camera,
        });
    }
    Ok((person_id, camera as u32))
}

/// Parse a dataset image filename in either the Market or the Duke grammar.
///
/// ```
/// use reid_core::datasets::parse_market_filename;
/// assert_eq!(parse_market_filename("0002_c1s1_000451_03.jpg").unwrap(), (2, 1));
/// assert_eq!(parse_market_filename("0702_c8_f0012345.jpg").unwrap(), (702, 8));
/// ```
pub fn parse_market_filename(name: &str) -> Result<(i32, u32)> {
    if MARKET_NAME.is_match(name) {
        parse_with(&MARKET_NAME, name)
    } else {
        parse_with(&DUKE_NAME, name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    /// −1 marks distractors, 0 junk images.
    pub person_id: i32,
    pub camera_id: u32,
    pub split: Split,
}

impl ImageRecord {
    /// Whether the record may serve as a training class example.
    pub fn is_labeled(&self) -> bool {
        self.person_id > 0
    }
}

/// Resolve the directory for `split` under `root`.
pub fn split_dir(root: &Path, split: Split) -> Result<PathBuf> {
    split
        .dir_names()
        .iter()
        .map(|d| root.join(d))
        .find(|p| p.is_dir())
        .ok_or_else(|| ReidError::MissingDirectory(root.join(split.dir_names()[0])))
}

/// Walk the three split directories and turn every image file into a record.
///
/// Records come out ordered by split (train, query, gallery) and then by
/// filename, so two ingests of the same tree are identical.
pub fn ingest(root: &Path, layout: Layout) -> Result<Vec<ImageRecord>> {
    if !root.is_dir() {
        return Err(ReidError::MissingDirectory(root.to_path_buf()));
    }
    let mut records = Vec::new();
    for split in Split::ALL {
        let dir = split_dir(root, split)?;
        let mut names: Vec<(String, PathBuf)> = Vec::new();
        for entry in walkdir::WalkDir::new(&dir).min_depth(1).max_depth(1) {
            let entry = entry.map_err(|e| ReidError::Io(e.into()))?;
            if !entry.file_type().is_file() {
                continue;
            }
            let path = entry.into_path();
            let is_image = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e));
            if !is_image {
                continue;
            }
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| ReidError::MalformedFilename(path.display().to_string()))?
                .to_string();
            names.push((name, path));
        }
        if names.is_empty() {
            return Err(ReidError::EmptySplit(split.as_str()));
        }
        names.sort();
        for (name, path) in names {
            let (person_id, camera_id) = layout.parse(&name)?;
            records.push(ImageRecord {
                path,
                person_id,
                camera_id,
                split,
            });
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub train_images: usize,
    pub query_images: usize,
    pub gallery_images: usize,
    /// Distinct labeled (positive) person ids among train records.
    pub train_identities: usize,
    pub query_identities: usize,
    pub gallery_identities: usize,
    pub distractor_images: usize,
}

impl IngestSummary {
    pub fn of(records: &[ImageRecord]) -> Self {
        let count = |s: Split| records.iter().filter(|r| r.split == s).count();
        let ids = |s: Split| {
            records
                .iter()
                .filter(|r| r.split == s && r.is_labeled())
                .map(|r| r.person_id)
                .collect::<BTreeSet<_>>()
                .len()
        };
        Self {
            train_images: count(Split::Train),
            query_images: count(Split::Query),
            gallery_images: count(Split::Gallery),
            train_identities: ids(Split::Train),
            query_identities: ids(Split::Query),
            gallery_identities: ids(Split::Gallery),
            distractor_images: records.iter().filter(|r| r.person_id == -1).count(),
        }
    }
}

/// Dense class indices `0..n` over the sorted labeled train ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<i32>", into = "Vec<i32>")]
pub struct LabelMap {
    ids: Vec<i32>,
}

impl From<Vec<i32>> for LabelMap {
    fn from(ids: Vec<i32>) -> Self {
        Self::from_ids(ids)
    }
}

impl From<LabelMap> for Vec<i32> {
    fn from(map: LabelMap) -> Self {
        map.ids
    }
}

impl LabelMap {
    pub fn from_records(records: &[ImageRecord]) -> Self {
        let ids: BTreeSet<i32> = records
            .iter()
            .filter(|r| r.split == Split::Train && r.is_labeled())
            .map(|r| r.person_id)
            .collect();
        Self {
            ids: ids.into_iter().collect(),
        }
    }

    pub fn from_ids(mut ids: Vec<i32>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn class_of(&self, person_id: i32) -> Option<usize> {
        self.ids.binary_search(&person_id).ok()
    }

    pub fn person_of(&self, class: usize) -> Option<i32> {
        self.ids.get(class).copied()
    }

    pub fn ids(&self) -> &[i32] {
        &self.ids
    }
}

/// One incremental task: a dataset bound to a head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub num_classes: usize,
    pub root: PathBuf,
    pub layout: Layout,
    pub head_index: usize,
}

impl TaskSpec {
    /// Build the spec from ingested records, counting the train classes.
    pub fn from_records(
        name: impl Into<String>,
        root: impl Into<PathBuf>,
        layout: Layout,
        head_index: usize,
        records: &[ImageRecord],
    ) -> Self {
        Self {
            name: name.into(),
            num_classes: LabelMap::from_records(records).len(),
            root: root.into(),
            layout,
            head_index,
        }
    }
}

/// Consecutive (positive, negative) index pairs into a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMask {
    pub pairs: Vec<(usize, usize)>,
    pub batch_size: usize,
}

impl PairMask {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Check indices and identity constraints against the batch's person ids.
    pub fn validate(&self, person_ids: &[i32]) -> Result<()> {
        if person_ids.len() != self.batch_size {
            return Err(ReidError::InvalidBatchShape(format!(
                "mask built for {} samples, batch has {}",
                self.batch_size,
                person_ids.len()
            )));
        }
        for &(p, n) in &self.pairs {
            if p >= self.batch_size || n >= self.batch_size {
                return Err(ReidError::InvalidBatchShape(format!(
                    "pair ({p}, {n}) out of range for batch of {}",
                    self.batch_size
                )));
            }
            if person_ids[p] == person_ids[n] {
                return Err(ReidError::InvalidBatchShape(format!(
                    "pair ({p}, {n}) shares person id {}",
                    person_ids[p]
                )));
            }
        }
        Ok(())
    }
}

/// Identity-balanced batch sampler: P identities, K consecutive images each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PkSampler {
    pub p: usize,
    pub k: usize,
    /// Identities with fewer than K images are drawn with replacement.
    pub replacement: bool,
}

impl PkSampler {
    pub fn new(p: usize, k: usize) -> Self {
        Self {
            p,
            k,
            replacement: true,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn sample(&self, records: &[ImageRecord], seed: u64) -> Result<(Vec<ImageRecord>, PairMask)> {
        if self.p < 2 {
            return Err(ReidError::InvalidBatchShape(format!(
                "P = {} leaves no negatives; need at least 2 identities per batch",
                self.p
            )));
        }
        if self.k == 0 {
            return Err(ReidError::InvalidBatchShape("K must be positive".into()));
        }
        let mut by_id: BTreeMap<i32, Vec<&ImageRecord>> = BTreeMap::new();
        for r in records.iter().filter(|r| r.split == Split::Train && r.is_labeled()) {
            by_id.entry(r.person_id).or_default().push(r);
        }
        if by_id.len() < self.p {
            return Err(ReidError::InsufficientIdentities {
                needed: self.p,
                available: by_id.len(),
            });
        }
        if !self.replacement {
            if let Some((&pid, imgs)) = by_id.iter().find(|(_, v)| v.len() < self.k) {
                return Err(ReidError::InsufficientInstances {
                    person_id: pid,
                    available: imgs.len(),
                    needed: self.k,
                });
            }
        }

        let mut rng = StdRng::seed_from_u64(seed);
        let ids: Vec<i32> = by_id.keys().copied().collect();
        let chosen: Vec<i32> = ids.choose_multiple(&mut rng, self.p).copied().collect();

        let mut batch = Vec::with_capacity(self.batch_size());
        for pid in &chosen {
            let pool = &by_id[pid];
            if pool.len() >= self.k {
                batch.extend(pool.choose_multiple(&mut rng, self.k).map(|r| (*r).clone()));
            } else {
                for _ in 0..self.k {
                    batch.push((*pool.choose(&mut rng).expect("non-empty pool")).clone());
                }
            }
        }

        // Each identity block is paired with one other block; offsets line up,
        // so consecutive mask entries stay within one identity on both sides.
        let mut pairs = Vec::with_capacity(self.p * (self.k - 1));
        for block in 0..self.p {
            let mut other = rng.random_range(0..self.p - 1);
            if other >= block {
                other += 1;
            }
            for offset in 0..self.k - 1 {
                pairs.push((block * self.k + offset, other * self.k + offset));
            }
        }
        Ok((
            batch,
            PairMask {
                pairs,
                batch_size: self.batch_size(),
            },
        ))
    }
}

/// Derive an independent seed for `stream` from a base seed (splitmix64).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample a P×K batch and its pair mask.
pub fn sample_pk_batch(records: &[ImageRecord], p: usize, k: usize, seed: u64) -> Result<(Vec<ImageRecord>, PairMask)> {
    PkSampler::new(p, k).sample(records, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(pid: i32, n: usize) -> ImageRecord {
        ImageRecord {
            path: PathBuf::from(format!("{pid}_{n}.jpg")),
            person_id: pid,
            camera_id: 1 + (n as u32 % 3),
            split: Split::Train,
        }
    }

    fn records(ids: &[(i32, usize)]) -> Vec<ImageRecord> {
        ids.iter()
            .flat_map(|&(pid, n)| (0..n).map(move |i| rec(pid, i)))
            .collect()
    }

    #[test]
    fn parses_both_grammars() {
        assert_eq!(parse_market_filename("0002_c1s1_000451_03.jpg").unwrap(), (2, 1));
        assert_eq!(parse_market_filename("-1_c3s2_000100_00.jpg").unwrap(), (-1, 3));
        assert_eq!(parse_market_filename("0702_c8_f0012345.jpg").unwrap(), (702, 8));
        assert_eq!(parse_market_filename("0000_c6s4_002427_02.png").unwrap(), (0, 6));
    }

    #[test]
    fn rejects_malformed_names() {
        for bad in [
            "",
            "Thumbs.db",
            "0002_c1s1_000451_03.jpeg",
            "0002_c1_000451.jpg",
            "x002_c1s1_000451_03.jpg",
            "0002_c1s1_000451_03.jpg.bak",
        ] {
            assert!(
                matches!(parse_market_filename(bad), Err(ReidError::MalformedFilename(_))),
                "{bad}"
            );
        }
        assert!(matches!(
            parse_market_filename("0002_c0s1_000451_03.jpg"),
            Err(ReidError::InvalidCamera { .. })
        ));
    }

    #[test]
    fn strict_layout_parsing() {
        assert!(Layout::Duke.parse("0002_c1s1_000451_03.jpg").is_err());
        assert!(Layout::Market.parse("0702_c8_f0012345.jpg").is_err());
    }

    #[test]
    fn pk_batch_shape_and_mask_size() {
        let recs = records(&[(1, 5), (2, 4), (3, 6), (4, 4), (5, 4), (6, 7), (7, 4), (8, 4), (9, 3)]);
        let (batch, mask) = sample_pk_batch(&recs, 8, 4, 42).unwrap();
        assert_eq!(batch.len(), 32);
        assert_eq!(mask.pairs.len(), 24);
        let pids: Vec<i32> = batch.iter().map(|r| r.person_id).collect();
        mask.validate(&pids).unwrap();
    }

    #[test]
    fn two_by_two_mask_is_a_valid_pairing() {
        let recs = records(&[(10, 2), (20, 2)]);
        // Enumerate every pairing allowed by the contract: positives are the
        // slots whose successor shares identity, negatives any other-identity slot.
        for seed in 0..20 {
            let (batch, mask) = sample_pk_batch(&recs, 2, 2, seed).unwrap();
            let pids: Vec<i32> = batch.iter().map(|r| r.person_id).collect();
            let positives: Vec<usize> = (0..3).filter(|&i| pids[i] == pids[i + 1]).collect();
            assert_eq!(positives, vec![0, 2]);
            let mut valid = Vec::new();
            for &a in &[2usize, 3] {
                for &b in &[0usize, 1] {
                    valid.push(vec![(0, a), (2, b)]);
                }
            }
            assert!(valid.contains(&mask.pairs), "{:?}", mask.pairs);
            assert_eq!(mask.pairs, vec![(0, 2), (2, 0)]);
        }
    }

    #[test]
    fn too_few_identities() {
        let recs = records(&[(1, 4)]);
        assert!(matches!(
            sample_pk_batch(&recs, 2, 2, 0),
            Err(ReidError::InsufficientIdentities {
                needed: 2,
                available: 1
            })
        ));
    }

    #[test]
    fn distractors_and_junk_never_sampled() {
        let mut recs = records(&[(1, 2), (2, 2)]);
        recs.extend(records(&[(-1, 10), (0, 10)]));
        for seed in 0..10 {
            let (batch, _) = sample_pk_batch(&recs, 2, 2, seed).unwrap();
            assert!(batch.iter().all(|r| r.person_id > 0));
        }
    }

    #[test]
    fn replacement_can_be_disabled() {
        let recs = records(&[(1, 4), (2, 1)]);
        assert!(sample_pk_batch(&recs, 2, 4, 1).is_ok());
        let strict = PkSampler {
            replacement: false,
            ..PkSampler::new(2, 4)
        };
        assert!(matches!(
            strict.sample(&recs, 1),
            Err(ReidError::InsufficientInstances { person_id: 2, .. })
        ));
    }

    #[test]
    fn label_map_is_dense_and_sorted() {
        let mut recs = records(&[(30, 1), (7, 2), (12, 1)]);
        recs.push(rec(-1, 0));
        recs.push(rec(0, 0));
        let map = LabelMap::from_records(&recs);
        assert_eq!(map.ids(), &[7, 12, 30]);
        assert_eq!(map.class_of(12), Some(1));
        assert_eq!(map.class_of(-1), None);
        assert_eq!(map.person_of(2), Some(30));
    }

    proptest! {
        #[test]
        fn format_then_parse_round_trips(pid in -1i32..100_000, cam in 1u32..10_000, seq in 0u32..999_999, duke in any::<bool>()) {
            let layout = if duke { Layout::Duke } else { Layout::Market };
            let name = layout.format(pid, cam, seq, "jpg");
            prop_assert_eq!(layout.parse(&name).unwrap(), (pid, cam));
            prop_assert_eq!(parse_market_filename(&name).unwrap(), (pid, cam));
        }

        #[test]
        fn batches_hold_p_identities_of_k(p in 2usize..6, k in 1usize..5, seed in any::<u64>(), sizes in prop::collection::vec(1usize..8, 6..10)) {
            let ids: Vec<(i32, usize)> = sizes.iter().enumerate().map(|(i, &n)| (i as i32 + 1, n)).collect();
            let recs = records(&ids);
            let (batch, mask) = sample_pk_batch(&recs, p, k, seed).unwrap();
            prop_assert_eq!(batch.len(), p * k);
            let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
            for r in &batch {
                *counts.entry(r.person_id).or_default() += 1;
            }
            prop_assert_eq!(counts.len(), p);
            prop_assert!(counts.values().all(|&c| c == k));
            prop_assert!(mask.pairs.len() >= p * (k - 1));
            for &(i, j) in &mask.pairs {
                prop_assert!(i < p * k && j < p * k);
                prop_assert_ne!(batch[i].person_id, batch[j].person_id);
                prop_assert_eq!(batch[i].person_id, batch[i + 1].person_id);
            }
            for w in mask.pairs.windows(2) {
                if w[0].0 / k == w[1].0 / k {
                    prop_assert_eq!(batch[w[0].0].person_id, batch[w[1].0].person_id);
                }
            }
        }
    }
}

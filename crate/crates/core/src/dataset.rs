//! Dataset manifests, class catalogs and alignment checks.
//!
//! `manifest.jsonl` holds one `{"id", "class", "split"}` object per line.
//! Class order is the order of first appearance and fixes the classifier's
//! output indexing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{write_atomic, EmbeddingStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    #[serde(rename = "class")]
    pub class_id: String,
    pub split: Split,
}

/// Wire form of a manifest line; `split` is kept as a string so an unknown
/// token is reported as a parse error with its line number.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    id: String,
    class: String,
    split: String,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    items: Vec<ManifestItem>,
    classes: Vec<String>,
    item_index: HashMap<String, usize>,
    class_index: HashMap<String, usize>,
}

impl PartialEq for DatasetManifest {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items && self.classes == other.classes
    }
}

impl DatasetManifest {
    /// Build a manifest from items; classes are taken in first-appearance order.
    pub fn from_items(items: Vec<ManifestItem>) -> Result<Self> {
        let mut item_index = HashMap::with_capacity(items.len());
        let mut class_index = HashMap::new();
        let mut classes = Vec::new();
        for (i, item) in items.iter().enumerate() {
            if item.id.is_empty() {
                return Err(Error::Integrity(format!("item {i} has an empty id")));
            }
            if item.class_id.is_empty() {
                return Err(Error::Integrity(format!("item {:?} has an empty class", item.id)));
            }
            if item_index.insert(item.id.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate item id {:?}", item.id)));
            }
            if !class_index.contains_key(&item.class_id) {
                class_index.insert(item.class_id.clone(), classes.len());
                classes.push(item.class_id.clone());
            }
        }
        Ok(Self {
            items,
            classes,
            item_index,
            class_index,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::read_from(BufReader::new(file))
    }

    /// Parse JSON Lines. Blank lines are ignored.
    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut items = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in r.lines().enumerate() {
            let line_no = n + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawItem = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let split = raw.split.parse::<Split>().map_err(|message| Error::Parse {
                line: line_no,
                message,
            })?;
            if !seen.insert(raw.id.clone()) {
                return Err(Error::Integrity(format!(
                    "duplicate item id {:?} at line {line_no}",
                    raw.id
                )));
            }
            items.push(ManifestItem {
                id: raw.id,
                class_id: raw.class,
                split,
            });
        }
        Self::from_items(items)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), |w| self.write_to(w))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for item in &self.items {
            serde_json::to_writer(&mut *w, item)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn items(&self) -> &[ManifestItem] {
        &self.items
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn item(&self, id: &str) -> Option<&ManifestItem> {
        self.item_index.get(id).map(|&i| &self.items[i])
    }

    pub fn class_of(&self, id: &str) -> Option<&str> {
        self.item(id).map(|it| it.class_id.as_str())
    }

    /// Output-layer index of a class.
    pub fn class_index(&self, class_id: &str) -> Option<usize> {
        self.class_index.get(class_id).copied()
    }

    /// Items of one split, in manifest order.
    pub fn split_view(&self, split: Split) -> Vec<&ManifestItem> {
        self.items.iter().filter(|it| it.split == split).collect()
    }

    /// Check which manifest ids are absent from `store` and which store ids
    /// the manifest does not mention.
    pub fn check_alignment(&self, store: &EmbeddingStore) -> AlignmentReport {
        let missing = self
            .items
            .iter()
            .filter(|it| !store.contains(&it.id))
            .map(|it| it.id.clone())
            .collect();
        let orphans = store
            .ids()
            .iter()
            .filter(|id| !self.item_index.contains_key(id.as_str()))
            .cloned()
            .collect();
        AlignmentReport { missing, orphans }
    }

    /// Alignment of a per-class text store against the class list.
    pub fn check_class_alignment(&self, texts: &EmbeddingStore) -> AlignmentReport {
        let missing = self
            .classes
            .iter()
            .filter(|c| !texts.contains(c))
            .cloned()
            .collect();
        let orphans = texts
            .ids()
            .iter()
            .filter(|id| !self.class_index.contains_key(id.as_str()))
            .cloned()
            .collect();
        AlignmentReport { missing, orphans }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AlignmentReport {
    /// Manifest ids with no vector in the store.
    pub missing: Vec<String>,
    /// Store ids the manifest does not list; usable only as index-only items.
    pub orphans: Vec<String>,
}

impl AlignmentReport {
    pub fn is_aligned(&self) -> bool {
        self.missing.is_empty() && self.orphans.is_empty()
    }
}

/// One description per class, keyed by class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCatalog {
    descriptions: BTreeMap<String, String>,
}

impl ClassCatalog {
    pub fn new(descriptions: BTreeMap<String, String>) -> Result<Self> {
        if let Some((class, _)) = descriptions.iter().find(|(_, d)| d.trim().is_empty()) {
            return Err(Error::Integrity(format!("class {class:?} has an empty description")));
        }
        Ok(Self { descriptions })
    }

    /// Load `descriptions.json`, a single object mapping class id to text.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let descriptions: BTreeMap<String, String> = serde_json::from_str(&text)?;
        Self::new(descriptions)
    }

    pub fn get(&self, class_id: &str) -> Option<&str> {
        self.descriptions.get(class_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }

    /// The catalog must cover exactly the manifest's classes.
    pub fn validate_against(&self, manifest: &DatasetManifest) -> Result<()> {
        let missing: Vec<&str> = manifest
            .classes()
            .iter()
            .filter(|c| !self.descriptions.contains_key(c.as_str()))
            .map(String::as_str)
            .collect();
        let extra: Vec<&str> = self
            .descriptions
            .keys()
            .filter(|c| manifest.class_index(c).is_none())
            .map(String::as_str)
            .collect();
        if missing.is_empty() && extra.is_empty() {
            Ok(())
        } else {
            Err(Error::Alignment(format!(
                "catalog missing classes {missing:?}, unknown classes {extra:?}"
            )))
        }
    }
}

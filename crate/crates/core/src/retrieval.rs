//! Zero-shot classification and the retrieval pipelines.
//!
//! All scores are cosine similarities accumulated in 64-bit. Rankings sort by
//! descending score, with equal scores ordered by the index store's entry
//! order.
//!
//! Pipelines, for a query image `q`:
//!
//! - `visual`: rank index images by cosine to `q`.
//! - `class_text`: zero-shot classify `q` against the class text store, then
//!   rank index images by cosine to the top-1 class's text embedding.
//! - `class_text_rerank`: the `class_text` ranking with its first
//!   `depth` items re-sorted by cosine to `q`; the tail stays as it was,
//!   after the re-sorted block. Every item keeps its class-text score.
//! - `oracle_text`: like `class_text` but with the ground-truth class.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{retrieval_map, EvalReport};
use crate::store::{dot_f64, norm_f64, write_atomic, EmbeddingStore, DEGENERATE_NORM};

pub const DEFAULT_RERANK_DEPTH: usize = 100;

/// Cosine similarity in 64-bit accumulation.
pub fn cosine_score(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = checked_norm(a, "left operand")?;
    let nb = checked_norm(b, "right operand")?;
    Ok(cosine_with_norms(a, na, b, nb))
}

fn checked_norm(v: &[f32], what: &str) -> Result<f64> {
    let n = norm_f64(v);
    if n <= DEGENERATE_NORM {
        return Err(Error::DegenerateVector(what.to_string()));
    }
    Ok(n)
}

fn cosine_with_norms(a: &[f32], na: f64, b: &[f32], nb: f64) -> f64 {
    dot_f64(a, b) / (na * nb)
}

/// Descending score, then ascending tie-break key.
fn rank_order(a: (f64, usize), b: (f64, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Rank every class of `class_texts` by cosine to `query`.
///
/// The first entry is the zero-shot prediction.
pub fn zero_shot_classify(query: &[f32], class_texts: &EmbeddingStore) -> Result<Vec<(String, f64)>> {
    if class_texts.is_empty() {
        return Err(Error::EmptyUniverse("class text store has no entries".into()));
    }
    if query.len() != class_texts.dim() {
        return Err(Error::Shape {
            expected: class_texts.dim(),
            actual: query.len(),
        });
    }
    let nq = checked_norm(query, "query")?;
    let mut scored = class_texts
        .iter()
        .enumerate()
        .map(|(i, (id, v))| {
            let nv = checked_norm(v, id)?;
            Ok((cosine_with_norms(query, nq, v, nv), i))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|&a, &b| rank_order(a, b));
    Ok(scored
        .into_iter()
        .map(|(s, i)| (class_texts.ids()[i].clone(), s))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PipelineMode {
    Visual,
    ClassText,
    ClassTextRerank { depth: usize },
    OracleText,
}

impl PipelineMode {
    pub fn name(&self) -> &'static str {
        match self {
            PipelineMode::Visual => "visual",
            PipelineMode::ClassText => "class_text",
            PipelineMode::ClassTextRerank { .. } => "class_text_rerank",
            PipelineMode::OracleText => "oracle_text",
        }
    }

    pub fn needs_text(&self) -> bool {
        !matches!(self, PipelineMode::Visual)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PipelineMode::ClassTextRerank { depth: 0 } => {
                Err(Error::Config("rerank depth must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineMode {
    type Err = String;

    /// Accepts the snake_case names and the CLI's kebab-case spellings.
    /// `class_text_rerank` gets the default depth.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "visual" => Ok(PipelineMode::Visual),
            "class_text" => Ok(PipelineMode::ClassText),
            "class_text_rerank" => Ok(PipelineMode::ClassTextRerank {
                depth: DEFAULT_RERANK_DEPTH,
            }),
            "oracle" | "oracle_text" => Ok(PipelineMode::OracleText),
            other => Err(format!("unknown pipeline mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    #[serde(rename = "query")]
    pub query_id: String,
    /// `(item id, score)`. Re-ranked lists report class-text scores for every
    /// item, so only the tail after the re-ranked block is non-increasing.
    pub ranking: Vec<(String, f64)>,
}

impl RankedList {
    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.ranking.iter().map(|(id, _)| id.as_str())
    }
}

/// Write ranked lists as JSON Lines, one `{"query", "ranking"}` per line.
pub fn write_rankings(lists: &[RankedList], w: &mut impl Write) -> Result<()> {
    for list in lists {
        serde_json::to_writer(&mut *w, list)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_rankings(lists: &[RankedList], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), |w| write_rankings(lists, w))
}

/// Stores and manifest a pipeline runs over.
#[derive(Debug, Clone, Copy)]
pub struct Corpus<'a> {
    pub queries: &'a EmbeddingStore,
    pub index: &'a EmbeddingStore,
    pub class_texts: Option<&'a EmbeddingStore>,
    pub manifest: &'a DatasetManifest,
}

/// Which index-store entries are searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexSelection {
    /// Manifest items of one split.
    Split(Split),
    /// Manifest items of one split plus store ids the manifest does not list.
    SplitWithOrphans(Split),
    /// Every entry of the index store.
    All,
}

/// A corpus with its index set resolved and norms precomputed.
pub struct Retriever<'a> {
    corpus: Corpus<'a>,
    /// Index store positions, ascending (entry order).
    positions: Vec<usize>,
    norms: Vec<f64>,
}

impl<'a> Retriever<'a> {
    pub fn new(corpus: Corpus<'a>, selection: IndexSelection) -> Result<Self> {
        let dim = corpus.queries.dim();
        if corpus.index.dim() != dim {
            return Err(Error::Shape {
                expected: dim,
                actual: corpus.index.dim(),
            });
        }
        if let Some(t) = corpus.class_texts {
            if t.dim() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    actual: t.dim(),
                });
            }
        }
        let mut positions: Vec<usize> = match selection {
            IndexSelection::All => (0..corpus.index.len()).collect(),
            IndexSelection::Split(split) | IndexSelection::SplitWithOrphans(split) => corpus
                .manifest
                .split_view(split)
                .into_iter()
                .map(|item| {
                    corpus.index.position(&item.id).ok_or_else(|| {
                        Error::Lookup(format!("index item {:?} missing from index store", item.id))
                    })
                })
                .collect::<Result<_>>()?,
        };
        if let IndexSelection::SplitWithOrphans(_) = selection {
            positions.extend(
                corpus
                    .index
                    .ids()
                    .iter()
                    .enumerate()
                    .filter(|(_, id)| corpus.manifest.item(id).is_none())
                    .map(|(p, _)| p),
            );
        }
        positions.sort_unstable();
        positions.dedup();
        let norms = positions
            .iter()
            .map(|&p| checked_norm(corpus.index.vector_at(p), &corpus.index.ids()[p]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            corpus,
            positions,
            norms,
        })
    }

    pub fn index_len(&self) -> usize {
        self.positions.len()
    }

    pub fn index_ids(&self) -> impl Iterator<Item = &str> {
        self.positions.iter().map(|&p| self.corpus.index.ids()[p].as_str())
    }

    fn query_vector(&self, query_id: &str) -> Result<&'a [f32]> {
        self.corpus
            .queries
            .get(query_id)
            .ok_or_else(|| Error::Lookup(format!("query {query_id:?} not in query store")))
    }

    fn class_texts(&self) -> Result<&'a EmbeddingStore> {
        self.corpus
            .class_texts
            .ok_or_else(|| Error::Config("pipeline needs a class text store".into()))
    }

    fn text_vector(&self, class_id: &str) -> Result<&'a [f32]> {
        self.class_texts()?
            .get(class_id)
            .ok_or_else(|| Error::Lookup(format!("class {class_id:?} not in text store")))
    }

    /// `(score, entry position)` for every index item, sorted.
    fn rank_by(&self, probe: &[f32], probe_name: &str) -> Result<Vec<(f64, usize)>> {
        let np = checked_norm(probe, probe_name)?;
        let mut scored: Vec<(f64, usize)> = self
            .positions
            .iter()
            .zip(&self.norms)
            .map(|(&p, &n)| (cosine_with_norms(probe, np, self.corpus.index.vector_at(p), n), p))
            .collect();
        scored.sort_by(|&a, &b| rank_order(a, b));
        Ok(scored)
    }

    /// The zero-shot top-1 class of a query.
    pub fn predicted_class(&self, query_id: &str) -> Result<String> {
        let q = self.query_vector(query_id)?;
        let ranked = zero_shot_classify(q, self.class_texts()?)?;
        Ok(ranked.into_iter().next().expect("non-empty universe").0)
    }

    pub fn retrieve(&self, mode: PipelineMode, query_id: &str) -> Result<RankedList> {
        mode.validate()?;
        let q = self.query_vector(query_id)?;
        let scored = match mode {
            PipelineMode::Visual => self.rank_by(q, query_id)?,
            PipelineMode::ClassText => {
                let class = self.predicted_class(query_id)?;
                self.rank_by(self.text_vector(&class)?, &class)?
            }
            PipelineMode::OracleText => {
                let class = self.corpus.manifest.class_of(query_id).ok_or_else(|| {
                    Error::Lookup(format!("query {query_id:?} has no ground-truth class"))
                })?;
                self.rank_by(self.text_vector(class)?, class)?
            }
            PipelineMode::ClassTextRerank { depth } => {
                let class = self.predicted_class(query_id)?;
                let mut scored = self.rank_by(self.text_vector(&class)?, &class)?;
                let nq = checked_norm(q, query_id)?;
                let block = depth.min(scored.len());
                // Order the block by visual cosine; entries keep their text scores.
                let mut keyed: Vec<((f64, usize), f64)> = scored[..block]
                    .iter()
                    .map(|&(text, p)| {
                        let n = self.norms[self.positions.binary_search(&p).expect("index position")];
                        ((cosine_with_norms(q, nq, self.corpus.index.vector_at(p), n), p), text)
                    })
                    .collect();
                keyed.sort_by(|a, b| rank_order(a.0, b.0));
                for (slot, ((_, p), text)) in scored[..block].iter_mut().zip(keyed) {
                    *slot = (text, p);
                }
                scored
            }
        };
        let ids = self.corpus.index.ids();
        Ok(RankedList {
            query_id: query_id.to_string(),
            ranking: scored.into_iter().map(|(s, p)| (ids[p].clone(), s)).collect(),
        })
    }
}

/// One-shot retrieval for a single query against a split of the index store.
pub fn retrieve(
    mode: PipelineMode,
    query_id: &str,
    corpus: Corpus<'_>,
    index_split: Split,
) -> Result<RankedList> {
    Retriever::new(corpus, IndexSelection::Split(index_split))?.retrieve(mode, query_id)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub query_split: Split,
    pub index_split: Split,
    pub include_orphans: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            query_split: Split::Val,
            index_split: Split::Test,
            include_orphans: false,
        }
    }
}

/// Run a pipeline for every query of the query split and score it.
///
/// Queries are processed in parallel; results keep manifest order.
pub fn run_benchmark(
    mode: PipelineMode,
    corpus: Corpus<'_>,
    cfg: &BenchmarkConfig,
) -> Result<(EvalReport, Vec<RankedList>)> {
    mode.validate()?;
    if mode.needs_text() && corpus.class_texts.is_none() {
        return Err(Error::Config(format!("mode {mode} needs a class text store")));
    }
    let selection = if cfg.include_orphans {
        IndexSelection::SplitWithOrphans(cfg.index_split)
    } else {
        IndexSelection::Split(cfg.index_split)
    };
    let retriever = Retriever::new(corpus, selection)?;
    let queries: Vec<&str> = corpus
        .manifest
        .split_view(cfg.query_split)
        .into_iter()
        .map(|it| it.id.as_str())
        .collect();
    let lists = queries
        .par_iter()
        .map(|q| retriever.retrieve(mode, q))
        .collect::<Result<Vec<_>>>()?;
    let mut report = retrieval_map(&lists, corpus.manifest)?;
    report.mode = mode.name().to_string();
    let mut config = serde_json::json!({
        "query_split": cfg.query_split,
        "index_split": cfg.index_split,
        "include_orphans": cfg.include_orphans,
        "num_queries": queries.len(),
        "num_index": retriever.index_len(),
    });
    if let PipelineMode::ClassTextRerank { depth } = mode {
        config["rerank_depth"] = depth.into();
    }
    report.config = config;
    Ok((report, lists))
}

/// Zero-shot classification over one split: accuracy plus macro mAP using the
/// cosine scores as class scores.
pub fn zero_shot_benchmark(
    images: &EmbeddingStore,
    class_texts: &EmbeddingStore,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<EvalReport> {
    use indexmap::IndexMap;

    let check = manifest.check_class_alignment(class_texts);
    if !check.missing.is_empty() {
        return Err(Error::Alignment(format!(
            "text store lacks classes {:?}",
            check.missing
        )));
    }
    let items = manifest.split_view(split);
    if items.is_empty() {
        return Err(Error::EmptyUniverse(format!("split {split} is empty")));
    }
    let rows = items
        .par_iter()
        .map(|it| {
            let q = images
                .get(&it.id)
                .ok_or_else(|| Error::Lookup(format!("item {:?} not in image store", it.id)))?;
            let ranked = zero_shot_classify(q, class_texts)?;
            let mut by_class = vec![f64::NEG_INFINITY; manifest.num_classes()];
            for (class, s) in &ranked {
                if let Some(ci) = manifest.class_index(class) {
                    by_class[ci] = *s;
                }
            }
            let top = manifest.class_index(&ranked[0].0);
            Ok((it.id.clone(), by_class, top == manifest.class_index(&it.class_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let hits = rows.iter().filter(|r| r.2).count();
    let scores: IndexMap<String, Vec<f64>> = rows.into_iter().map(|(id, s, _)| (id, s)).collect();
    let mut report = crate::metrics::classification_map(&scores, manifest)?;
    report.mode = "zero_shot".into();
    report.accuracy = Some(hits as f64 / items.len() as f64);
    report.config = serde_json::json!({ "split": split, "num_items": items.len() });
    Ok(report)
}

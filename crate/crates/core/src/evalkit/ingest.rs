//! Readers that turn annotation files into a [`BenchmarkDataset`].
//!
//! Field mappings per format:
//!
//! **cirr-like**: `annotations` is one JSON array of
//! `{pairid, reference, target_hard, caption, img_set: {members: [..]}}`.
//! `pairid` becomes the query id, `caption` the relative text, `target_hard` the
//! single target and `img_set.members` the 6-member subset. `gallery` may name a
//! split file `{image_name: relative_path}`; its keys form the gallery and its
//! values the image refs. Without it the gallery is every id the records mention.
//!
//! **circo-like**: `annotations` is one JSON array of
//! `{id, reference_img_id, relative_caption, gt_img_ids: [..]}` (integer or
//! string ids; other fields ignored). `gallery` may name an image-info file
//! `{"images": [{id, file_name}]}`.
//!
//! **fashioniq-like**: `annotations` are caption files named
//! `cap.<category>.<split>.json`, each an array of
//! `{candidate, target, captions: [a, b]}`. The captions are joined as
//! `"a and b"`; the query id is `<category>-<index>`. `gallery` may name
//! `split.<category>.<split>.json` files, each an array of image names.
//!
//! **canonical**: `annotations` is `queries.jsonl` and `gallery` is
//! `gallery.jsonl`, in the shapes of [`CanonicalQuery`] and [`GalleryItem`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{BenchmarkDataset, CanonicalQuery, EvalError, GalleryItem};
use crate::types::{CompositeQuery, GroundTruth};

pub const FASHION_CATEGORIES: [&str; 3] = ["dress", "shirt", "toptee"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    CirrLike,
    CircoLike,
    FashionIqLike,
    Canonical,
}

impl DatasetFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetFormat::CirrLike => "cirr-like",
            DatasetFormat::CircoLike => "circo-like",
            DatasetFormat::FashionIqLike => "fashioniq-like",
            DatasetFormat::Canonical => "canonical",
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cirr-like" => Ok(DatasetFormat::CirrLike),
            "circo-like" => Ok(DatasetFormat::CircoLike),
            "fashioniq-like" => Ok(DatasetFormat::FashionIqLike),
            "canonical" => Ok(DatasetFormat::Canonical),
            other => Err(format!(
                "unknown dataset format {other:?} (expected cirr-like, circo-like, fashioniq-like or canonical)"
            )),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestPaths {
    pub annotations: Vec<PathBuf>,
    pub gallery: Vec<PathBuf>,
}

pub fn ingest(
    format: DatasetFormat,
    name: &str,
    paths: &IngestPaths,
) -> Result<BenchmarkDataset, EvalError> {
    if paths.annotations.is_empty() {
        return Err(EvalError::ParseFailure {
            path: PathBuf::new(),
            line: 0,
            reason: "no annotation file given".into(),
        });
    }
    match format {
        DatasetFormat::CirrLike => cirr(name, paths),
        DatasetFormat::CircoLike => circo(name, paths),
        DatasetFormat::FashionIqLike => fashion(name, paths),
        DatasetFormat::Canonical => canonical(name, paths),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| EvalError::ParseFailure {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::ParseFailure {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

fn parse_failure(path: &Path, line: usize, reason: impl Into<String>) -> EvalError {
    EvalError::ParseFailure {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Gallery from every mentioned id, in sorted order.
fn implied_gallery<'a>(ids: impl IntoIterator<Item = &'a String>) -> Vec<GalleryItem> {
    ids.into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|id| GalleryItem::id_only(id.clone()))
        .collect()
}

#[derive(Deserialize)]
struct CirrImgSet {
    members: Vec<String>,
}

#[derive(Deserialize)]
struct CirrRecord {
    pairid: serde_json::Value,
    reference: String,
    target_hard: String,
    caption: String,
    img_set: CirrImgSet,
}

fn id_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn cirr(name: &str, paths: &IngestPaths) -> Result<BenchmarkDataset, EvalError> {
    let path = &paths.annotations[0];
    let records: Vec<CirrRecord> = read_json(path)?;
    let mut queries = Vec::new();
    let mut gts = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let qid = id_string(&r.pairid)
            .ok_or_else(|| parse_failure(path, 0, format!("record {i}: pairid must be a string or integer")))?;
        queries.push(CompositeQuery {
            query_id: qid.clone(),
            reference_image_id: r.reference.clone(),
            relative_text: r.caption.trim().to_string(),
            reference_captions: Vec::new(),
        });
        let subset: BTreeSet<String> = r.img_set.members.iter().cloned().collect();
        if subset.len() != r.img_set.members.len() {
            return Err(EvalError::MalformedSubset {
                query_id: qid,
                found: subset.len(),
            });
        }
        gts.push(GroundTruth {
            query_id: qid,
            target_ids: BTreeSet::from([r.target_hard.clone()]),
            subset_ids: Some(subset),
            category: None,
        });
    }
    let gallery = match paths.gallery.first() {
        Some(split) => {
            let map: BTreeMap<String, String> = read_json(split)?;
            map.into_iter()
                .map(|(id, rel)| GalleryItem {
                    image_id: id,
                    image_ref: Some(rel),
                    vector: None,
                })
                .collect()
        }
        None => implied_gallery(
            records
                .iter()
                .flat_map(|r| [&r.reference, &r.target_hard].into_iter().chain(&r.img_set.members)),
        ),
    };
    BenchmarkDataset::new(name, queries, gts, gallery)
}

#[derive(Deserialize)]
struct CircoRecord {
    id: serde_json::Value,
    reference_img_id: serde_json::Value,
    relative_caption: String,
    gt_img_ids: Vec<serde_json::Value>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: serde_json::Value,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoInfo {
    images: Vec<CocoImage>,
}

fn circo(name: &str, paths: &IngestPaths) -> Result<BenchmarkDataset, EvalError> {
    let path = &paths.annotations[0];
    let records: Vec<CircoRecord> = read_json(path)?;
    let bad_id = |i: usize| parse_failure(path, 0, format!("record {i}: ids must be strings or integers"));
    let mut queries = Vec::new();
    let mut gts = Vec::new();
    let mut mentioned = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let qid = id_string(&r.id).ok_or_else(|| bad_id(i))?;
        let reference = id_string(&r.reference_img_id).ok_or_else(|| bad_id(i))?;
        let targets = r
            .gt_img_ids
            .iter()
            .map(|v| id_string(v).ok_or_else(|| bad_id(i)))
            .collect::<Result<BTreeSet<_>, _>>()?;
        mentioned.push(reference.clone());
        mentioned.extend(targets.iter().cloned());
        queries.push(CompositeQuery {
            query_id: qid.clone(),
            reference_image_id: reference,
            relative_text: r.relative_caption.trim().to_string(),
            reference_captions: Vec::new(),
        });
        gts.push(GroundTruth {
            query_id: qid,
            target_ids: targets,
            subset_ids: None,
            category: None,
        });
    }
    let gallery = match paths.gallery.first() {
        Some(info_path) => {
            let info: CocoInfo = read_json(info_path)?;
            let mut items = Vec::with_capacity(info.images.len());
            for (i, img) in info.images.into_iter().enumerate() {
                let id = id_string(&img.id).ok_or_else(|| {
                    parse_failure(info_path, 0, format!("image {i}: id must be a string or integer"))
                })?;
                items.push(GalleryItem {
                    image_id: id,
                    image_ref: Some(img.file_name),
                    vector: None,
                });
            }
            items
        }
        None => implied_gallery(&mentioned),
    };
    BenchmarkDataset::new(name, queries, gts, gallery)
}

#[derive(Deserialize)]
struct FashionRecord {
    candidate: String,
    target: String,
    captions: Vec<String>,
}

/// `cap.dress.val.json` → `"dress"`; also accepts `split.` prefixes.
fn fashion_category(path: &Path, prefix: &str) -> Result<String, EvalError> {
    let file = path.file_name().and_then(|f| f.to_str()).unwrap_or_default();
    let parts: Vec<&str> = file.split('.').collect();
    match parts.as_slice() {
        [p, cat, _split, "json"] if *p == prefix && FASHION_CATEGORIES.contains(cat) => {
            Ok(cat.to_string())
        }
        _ => Err(parse_failure(
            path,
            0,
            format!(
                "file name must look like {prefix}.<dress|shirt|toptee>.<split>.json"
            ),
        )),
    }
}

fn fashion(name: &str, paths: &IngestPaths) -> Result<BenchmarkDataset, EvalError> {
    let mut queries = Vec::new();
    let mut gts = Vec::new();
    let mut mentioned = Vec::new();
    for path in &paths.annotations {
        let category = fashion_category(path, "cap")?;
        let records: Vec<FashionRecord> = read_json(path)?;
        for (i, r) in records.iter().enumerate() {
            let caps: Vec<&str> = r
                .captions
                .iter()
                .map(|c| c.trim())
                .filter(|c| !c.is_empty())
                .collect();
            if caps.is_empty() {
                return Err(parse_failure(path, 0, format!("record {i}: no captions")));
            }
            let qid = format!("{category}-{i}");
            queries.push(CompositeQuery {
                query_id: qid.clone(),
                reference_image_id: r.candidate.clone(),
                relative_text: caps.join(" and "),
                reference_captions: Vec::new(),
            });
            gts.push(GroundTruth {
                query_id: qid,
                target_ids: BTreeSet::from([r.target.clone()]),
                subset_ids: None,
                category: Some(category.clone()),
            });
            mentioned.push(r.candidate.clone());
            mentioned.push(r.target.clone());
        }
    }
    let gallery = if paths.gallery.is_empty() {
        implied_gallery(&mentioned)
    } else {
        let mut ids = BTreeSet::new();
        for path in &paths.gallery {
            fashion_category(path, "split")?;
            let names: Vec<String> = read_json(path)?;
            ids.extend(names);
        }
        ids.into_iter().map(GalleryItem::id_only).collect()
    };
    BenchmarkDataset::new(name, queries, gts, gallery)
}

fn canonical(name: &str, paths: &IngestPaths) -> Result<BenchmarkDataset, EvalError> {
    let qpath = &paths.annotations[0];
    let rows: Vec<CanonicalQuery> = read_jsonl(qpath)?;
    let mut queries = Vec::with_capacity(rows.len());
    let mut gts = Vec::with_capacity(rows.len());
    let mut mentioned = Vec::new();
    for r in rows {
        let subset = match r.subset_ids {
            Some(s) => {
                let set: BTreeSet<String> = s.iter().cloned().collect();
                if set.len() != s.len() {
                    return Err(EvalError::MalformedSubset {
                        query_id: r.query_id,
                        found: set.len(),
                    });
                }
                mentioned.extend(set.iter().cloned());
                Some(set)
            }
            None => None,
        };
        mentioned.extend(r.target_ids.iter().cloned());
        gts.push(GroundTruth {
            query_id: r.query_id.clone(),
            target_ids: r.target_ids.into_iter().collect(),
            subset_ids: subset,
            category: r.category,
        });
        queries.push(CompositeQuery {
            query_id: r.query_id,
            reference_image_id: r.reference_image_id,
            relative_text: r.relative_text,
            reference_captions: r.reference_captions,
        });
    }
    let gallery = match paths.gallery.first() {
        Some(g) => read_jsonl(g)?,
        None => implied_gallery(&mentioned),
    };
    BenchmarkDataset::new(name, queries, gts, gallery)
}

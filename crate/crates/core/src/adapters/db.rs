//! File-backed store of trained concept adapters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use tokensplit_tensor::{Real, Tensor};

use crate::adapters::adapter::{AdapterInfo, BlockAdapter, ConceptAdapter, LowRank, Target, Variant};
use crate::container::Container;
use crate::error::{Error, Result};

/// One line of `list-adapters` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterListing {
    pub name: String,
    pub word: String,
    pub variant: Variant,
    pub rank: usize,
    pub blocks: usize,
    pub info: AdapterInfo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredMeta {
    kind: String,
    concepts: Vec<AdapterListing>,
}

const KIND: &str = "adapter-db";

/// Concept name to adapter, ordered by name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterDb<T> {
    concepts: BTreeMap<String, ConceptAdapter<T>>,
}

impl<T: Real> Default for AdapterDb<T> {
    fn default() -> Self {
        AdapterDb {
            concepts: BTreeMap::new(),
        }
    }
}

impl<T: Real> AdapterDb<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn insert(&mut self, adapter: ConceptAdapter<T>, overwrite: bool) -> Result<()> {
        if !overwrite && self.concepts.contains_key(&adapter.name) {
            return Err(Error::ConceptExists(adapter.name));
        }
        self.concepts.insert(adapter.name.clone(), adapter);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ConceptAdapter<T>> {
        self.concepts
            .get(name)
            .ok_or_else(|| Error::ConceptMissing(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Result<ConceptAdapter<T>> {
        self.concepts
            .remove(name)
            .ok_or_else(|| Error::ConceptMissing(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.concepts.keys().map(String::as_str)
    }

    pub fn listing(&self) -> Vec<AdapterListing> {
        self.concepts.values().map(listing).collect()
    }

    pub fn to_container(&self) -> Container<T> {
        let meta = StoredMeta {
            kind: KIND.into(),
            concepts: self.listing(),
        };
        let mut c = Container::new(json!(meta));
        for a in self.concepts.values() {
            for (name, t) in a.named_tensors() {
                c.push(format!("{}/{name}", a.name), t.clone());
            }
        }
        c
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        let meta: StoredMeta = serde_json::from_value(c.meta.clone())?;
        if meta.kind != KIND {
            return Err(Error::Format(format!(
                "expected an adapter database, found `{}`",
                meta.kind
            )));
        }
        let mut db = Self::new();
        for entry in meta.concepts {
            let load = |b: usize, target: Target| -> Result<LowRank<T>> {
                let get = |part: &str| -> Result<Tensor<T>> {
                    Ok(c.require(&format!("{}/b{b}/{}/{part}", entry.name, target.label()))?
                        .clone())
                };
                Ok(LowRank {
                    down: get("down")?,
                    up: get("up")?,
                })
            };
            let blocks = (0..entry.blocks)
                .map(|b| {
                    Ok(BlockAdapter {
                        value: entry
                            .variant
                            .touches(Target::Value)
                            .then(|| load(b, Target::Value))
                            .transpose()?,
                        key: entry
                            .variant
                            .touches(Target::Key)
                            .then(|| load(b, Target::Key))
                            .transpose()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            db.insert(
                ConceptAdapter {
                    name: entry.name,
                    word: entry.word,
                    rank: entry.rank,
                    variant: entry.variant,
                    blocks,
                    info: entry.info,
                },
                false,
            )?;
        }
        Ok(db)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Loads `path` if it exists, otherwise starts empty.
    pub fn open(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::new())
        }
    }
}

fn listing<T>(a: &ConceptAdapter<T>) -> AdapterListing {
    AdapterListing {
        name: a.name.clone(),
        word: a.word.clone(),
        variant: a.variant,
        rank: a.rank,
        blocks: a.blocks.len(),
        info: a.info.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn trained_like(name: &str, variant: Variant, seed: u64) -> ConceptAdapter<f64> {
        let mut a = ConceptAdapter::fresh(name, "square", variant, 3, &ModelConfig::tiny(), seed);
        let mut rng = crate::rng::SplitMix64::new(seed);
        for t in a.tensors_mut() {
            for x in t.data_mut() {
                *x = rng.normal();
            }
        }
        a.info.iterations = 7;
        a.info.final_loss = Some(0.25);
        a
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut db = AdapterDb::new();
        db.insert(trained_like("checker", Variant::Value, 1), false).unwrap();
        db.insert(trained_like("keyed", Variant::KeyValue, 2), false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapters.bin");
        db.save(&path).unwrap();
        let back = AdapterDb::<f64>::load(&path).unwrap();
        assert_eq!(back.len(), 2);
        for name in ["checker", "keyed"] {
            let (a, b) = (db.get(name).unwrap(), back.get(name).unwrap());
            assert_eq!(a.variant, b.variant);
            assert_eq!(a.info, b.info);
            for ((n1, t1), (n2, t2)) in a.named_tensors().iter().zip(b.named_tensors()) {
                assert_eq!(n1, &n2);
                assert!(t1.bit_eq(t2));
            }
        }
    }

    #[test]
    fn collision_needs_overwrite() {
        let mut db = AdapterDb::new();
        db.insert(trained_like("c", Variant::Value, 1), false).unwrap();
        let err = db.insert(trained_like("c", Variant::Value, 2), false).unwrap_err();
        assert!(matches!(err, Error::ConceptExists(ref n) if n == "c"));
        db.insert(trained_like("c", Variant::Value, 2), true).unwrap();
        assert_eq!(db.len(), 1);
    }

    #[test]
    fn listing_reports_variant_and_rank() {
        let mut db = AdapterDb::new();
        db.insert(trained_like("k", Variant::Key, 1), false).unwrap();
        let l = &db.listing()[0];
        assert_eq!(
            (l.name.as_str(), l.variant, l.rank, l.blocks),
            ("k", Variant::Key, 3, 2)
        );
        assert!(matches!(db.get("missing"), Err(Error::ConceptMissing(_))));
    }
}

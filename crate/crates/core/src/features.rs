//! Feature schema, tower input assembly, and inverted-index interaction
//! features (I2IF).
//!
//! Towers consume a [`TowerInput`]: a dense vector plus per-feature sparse id
//! lists in schema declaration order. Sparse ids are canonicalized (sorted)
//! at assembly so pooling order never leaks into results.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datagen::{Example, ItemRecord, UserRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TowerKind {
    User,
    Item,
    Interaction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseFeatureSpec {
    pub name: String,
    pub dim: usize,
    pub tower: TowerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseFeatureSpec {
    pub name: String,
    /// Embedding table rows; ids are hashed mod this.
    pub hash_modulus: usize,
    pub tower: TowerKind,
}

/// Configuration of the I2IF crossing: which sparse feature carries the user
/// query set and which item feature is indexed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct I2ifSpec {
    /// Key into the example's interaction sparse map (the user side).
    pub query_feature: String,
    /// Embedding rows for the intersection id set.
    pub common_modulus: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub dense: Vec<DenseFeatureSpec>,
    pub sparse: Vec<SparseFeatureSpec>,
    /// When set, the interaction tower input gains a computed dense
    /// `[overlap, jaccard]` pair and a sparse intersection id field.
    pub i2if: Option<I2ifSpec>,
}

/// Assembled input for one tower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerInput {
    pub dense: Vec<f64>,
    /// One sorted id list per sparse feature, in schema declaration order.
    pub sparse: Vec<Vec<u64>>,
}

/// Inputs for all three towers of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledInputs {
    pub user: TowerInput,
    pub item: TowerInput,
    pub interaction: TowerInput,
}

/// Raw named features for one side of an example.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureBundle {
    pub dense: Vec<f64>,
    pub sparse: BTreeMap<String, Vec<u64>>,
}

impl FeatureBundle {
    pub fn user_side(ex: &Example) -> Self {
        FeatureBundle {
            dense: ex.user_dense.clone(),
            sparse: ex.user_sparse.clone(),
        }
    }

    pub fn item_side(ex: &Example) -> Self {
        FeatureBundle {
            dense: ex.item_dense.clone(),
            sparse: ex.item_sparse.clone(),
        }
    }

    pub fn interaction_side(ex: &Example) -> Self {
        FeatureBundle {
            dense: Vec::new(),
            sparse: ex.inter_sparse.clone(),
        }
    }

    pub fn from_user_record(u: &UserRecord) -> Self {
        let mut sparse = BTreeMap::new();
        sparse.insert("user_id".to_string(), vec![u.user_id]);
        sparse.insert("engaged_cats".to_string(), u.engaged_cats.clone());
        FeatureBundle {
            dense: u.latent.clone(),
            sparse,
        }
    }

    pub fn from_item_record(it: &ItemRecord) -> Self {
        let mut sparse = BTreeMap::new();
        sparse.insert("item_id".to_string(), vec![it.item_id]);
        sparse.insert("cats".to_string(), it.cats.clone());
        FeatureBundle {
            dense: it.latent.clone(),
            sparse,
        }
    }

    /// Interaction query bundle for serving-side requests.
    pub fn interaction_from_user_record(u: &UserRecord) -> Self {
        let mut sparse = BTreeMap::new();
        sparse.insert("engaged_cats".to_string(), u.engaged_cats.clone());
        FeatureBundle {
            dense: Vec::new(),
            sparse,
        }
    }
}

impl FeatureSchema {
    /// Default schema for the synthetic world: latent vectors as dense
    /// features, id/category sparse features, I2IF over engaged categories.
    pub fn default_for_world(latent_dim: usize) -> Self {
        FeatureSchema {
            dense: vec![
                DenseFeatureSpec {
                    name: "user_latent".into(),
                    dim: latent_dim,
                    tower: TowerKind::User,
                },
                DenseFeatureSpec {
                    name: "item_latent".into(),
                    dim: latent_dim,
                    tower: TowerKind::Item,
                },
            ],
            sparse: vec![
                SparseFeatureSpec {
                    name: "user_id".into(),
                    hash_modulus: 2048,
                    tower: TowerKind::User,
                },
                SparseFeatureSpec {
                    name: "engaged_cats".into(),
                    hash_modulus: 64,
                    tower: TowerKind::User,
                },
                SparseFeatureSpec {
                    name: "item_id".into(),
                    hash_modulus: 8192,
                    tower: TowerKind::Item,
                },
                SparseFeatureSpec {
                    name: "cats".into(),
                    hash_modulus: 64,
                    tower: TowerKind::Item,
                },
            ],
            i2if: Some(I2ifSpec {
                query_feature: "engaged_cats".into(),
                common_modulus: 64,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for d in &self.dense {
            if !names.insert(&d.name) {
                return Err(Error::Config(format!("duplicate feature name '{}'", d.name)));
            }
            if d.dim == 0 {
                return Err(Error::Config(format!("dense feature '{}' has dim 0", d.name)));
            }
        }
        for s in &self.sparse {
            if !names.insert(&s.name) {
                return Err(Error::Config(format!("duplicate feature name '{}'", s.name)));
            }
            if s.hash_modulus == 0 {
                return Err(Error::Config(format!("sparse feature '{}' has modulus 0", s.name)));
            }
        }
        Ok(())
    }

    /// Total dense dim of the raw features declared for a tower.
    fn declared_dense_dim(&self, tower: TowerKind) -> usize {
        self.dense.iter().filter(|d| d.tower == tower).map(|d| d.dim).sum()
    }

    /// Dense dim of the assembled tower input (includes the computed I2IF
    /// pair for the interaction tower).
    pub fn dense_dim(&self, tower: TowerKind) -> usize {
        self.declared_dense_dim(tower)
            + if tower == TowerKind::Interaction && self.i2if.is_some() {
                2
            } else {
                0
            }
    }

    /// Sparse fields of a tower in declaration order: (name, modulus). The
    /// interaction tower gains a trailing computed intersection field.
    pub fn sparse_fields(&self, tower: TowerKind) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = self
            .sparse
            .iter()
            .filter(|s| s.tower == tower)
            .map(|s| (s.name.clone(), s.hash_modulus))
            .collect();
        if tower == TowerKind::Interaction {
            if let Some(i2if) = &self.i2if {
                out.push(("i2if_common".to_string(), i2if.common_modulus));
            }
        }
        out
    }

    /// Sparse fields of the combined user+item input consumed by index-level
    /// interaction towers: user fields then item fields.
    pub fn combined_sparse_fields(&self) -> Vec<(String, usize)> {
        let mut out = self.sparse_fields(TowerKind::User);
        out.extend(self.sparse_fields(TowerKind::Item));
        out
    }

    pub fn combined_dense_dim(&self) -> usize {
        self.dense_dim(TowerKind::User) + self.dense_dim(TowerKind::Item)
    }

    fn side_input(&self, tower: TowerKind, bundle: &FeatureBundle) -> Result<TowerInput> {
        let want = self.declared_dense_dim(tower);
        if bundle.dense.len() != want {
            return Err(Error::dim(format!("{tower:?} dense features"), want, bundle.dense.len()));
        }
        let mut sparse = Vec::new();
        for s in self.sparse.iter().filter(|s| s.tower == tower) {
            let ids = bundle
                .sparse
                .get(&s.name)
                .ok_or_else(|| Error::MissingFeature(s.name.clone()))?;
            let mut ids = ids.clone();
            ids.sort_unstable();
            sparse.push(ids);
        }
        Ok(TowerInput {
            dense: bundle.dense.clone(),
            sparse,
        })
    }

    /// Assembles the user-side tower input.
    pub fn user_input(&self, bundle: &FeatureBundle) -> Result<TowerInput> {
        self.side_input(TowerKind::User, bundle)
    }

    /// Assembles the item-side tower input.
    pub fn item_input(&self, bundle: &FeatureBundle) -> Result<TowerInput> {
        self.side_input(TowerKind::Item, bundle)
    }

    /// Assembles the interaction tower input, including the computed I2IF
    /// dense pair and intersection id field when configured.
    pub fn interaction_input(
        &self,
        bundle: &FeatureBundle,
        item_id: u64,
        i2if: &I2ifIndex,
    ) -> Result<TowerInput> {
        let mut input = self.side_input(TowerKind::Interaction, bundle)?;
        if let Some(spec) = &self.i2if {
            let query = bundle
                .sparse
                .get(&spec.query_feature)
                .ok_or_else(|| Error::MissingFeature(spec.query_feature.clone()))?;
            let query: BTreeSet<u64> = query.iter().copied().collect();
            let (stats, common) = i2if.lookup(&query, item_id)?;
            input.dense.extend_from_slice(&stats);
            input.sparse.push(common);
        }
        Ok(input)
    }

    /// Assembles all three tower inputs for a logged example.
    pub fn assemble_inputs(&self, ex: &Example, i2if: &I2ifIndex) -> Result<AssembledInputs> {
        Ok(AssembledInputs {
            user: self.user_input(&FeatureBundle::user_side(ex))?,
            item: self.item_input(&FeatureBundle::item_side(ex))?,
            interaction: self.interaction_input(
                &FeatureBundle::interaction_side(ex),
                ex.item_id,
                i2if,
            )?,
        })
    }

    /// Combined user+item input for index-level interaction towers: dense
    /// parts concatenated, user sparse fields then item sparse fields.
    pub fn combined_user_item_input(
        &self,
        user: &FeatureBundle,
        item: &FeatureBundle,
    ) -> Result<TowerInput> {
        let u = self.side_input(TowerKind::User, user)?;
        let i = self.side_input(TowerKind::Item, item)?;
        let mut dense = u.dense;
        dense.extend_from_slice(&i.dense);
        let mut sparse = u.sparse;
        sparse.extend(i.sparse);
        Ok(TowerInput { dense, sparse })
    }
}

/// Inverted index payload for I2IF: item id -> category id set. Immutable
/// after build; churn produces a fresh instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct I2ifIndex {
    entries: BTreeMap<u64, BTreeSet<u64>>,
}

impl I2ifIndex {
    /// Builds the index over the live catalog. Idempotent.
    pub fn build(items: &[ItemRecord]) -> Self {
        let entries = items
            .iter()
            .map(|it| (it.item_id, it.cats.iter().copied().collect()))
            .collect();
        I2ifIndex { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, item_id: u64) -> bool {
        self.entries.contains_key(&item_id)
    }

    /// Crosses the user category set with the indexed item categories.
    /// Returns `([overlap, jaccard], sorted intersection ids)`; jaccard is 0
    /// when the union is empty. Unknown items are a staleness signal.
    pub fn lookup(&self, user_cats: &BTreeSet<u64>, item_id: u64) -> Result<([f64; 2], Vec<u64>)> {
        let item_cats = self.entries.get(&item_id).ok_or(Error::UnknownItem(item_id))?;
        let common: Vec<u64> = user_cats.intersection(item_cats).copied().collect();
        let union = user_cats.union(item_cats).count();
        let overlap = common.len() as f64;
        let jaccard = if union == 0 { 0.0 } else { overlap / union as f64 };
        Ok(([overlap, jaccard], common))
    }
}

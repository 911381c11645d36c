//! Malicious behavior taxonomy and the family -> behavior lookup table.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BEHAVIORS: &str = include_str!("../data/behaviors.toml");
pub const DEFAULT_FAMILIES: &str = include_str!("../data/families.toml");

/// Canonical behavior names, indexed by `id - 1`.
pub const CANONICAL_NAMES: [&str; 12] = [
    "Privacy Stealing",
    "SMS/CALL Abuse",
    "Remote Control",
    "Bank/Financial Stealing",
    "Ransom",
    "Accessibility Abuse",
    "Privilege Escalation",
    "Stealthy Download",
    "Aggressive Advertising",
    "Miner",
    "Tricky Behavior",
    "Premium Service Abuse",
];

pub type BehaviorId = u8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KnowledgeError {
    #[error("bad taxonomy: {0}")]
    BadTaxonomy(String),
    #[error("bad family table: {0}")]
    BadFamilyTable(String),
    #[error("unknown family {0:?}")]
    UnknownFamily(Option<String>),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Behavior {
    pub id: BehaviorId,
    pub name: String,
    pub description: String,
}

impl Behavior {
    /// Text substituted for the behavior in class-level screening prompts.
    pub fn prompt_text(&self) -> String {
        format!("{}: {}", self.name, self.description.trim())
    }
}

/// The twelve behaviors, ordered by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    behaviors: Vec<Behavior>,
}

#[derive(Deserialize)]
struct TaxonomyFile {
    behavior: Vec<Behavior>,
}

impl Taxonomy {
    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        Self::parse(&read(path)?)
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_BEHAVIORS).expect("shipped taxonomy is valid")
    }

    pub fn parse(text: &str) -> Result<Self, KnowledgeError> {
        let file: TaxonomyFile =
            toml::from_str(text).map_err(|e| KnowledgeError::BadTaxonomy(e.to_string()))?;
        let mut behaviors = file.behavior;
        if behaviors.len() != CANONICAL_NAMES.len() {
            return Err(KnowledgeError::BadTaxonomy(format!(
                "expected 12 behaviors, found {}",
                behaviors.len()
            )));
        }
        behaviors.sort_by_key(|b| b.id);
        for (pos, b) in behaviors.iter().enumerate() {
            let expected_id = pos as BehaviorId + 1;
            if b.id != expected_id {
                return Err(KnowledgeError::BadTaxonomy(format!(
                    "ids must be unique and cover 1-12; id {expected_id} missing or duplicated"
                )));
            }
            if b.name != CANONICAL_NAMES[pos] {
                return Err(KnowledgeError::BadTaxonomy(format!(
                    "behavior {} is named {:?}, expected {:?}",
                    b.id, b.name, CANONICAL_NAMES[pos]
                )));
            }
            if b.description.trim().is_empty() {
                return Err(KnowledgeError::BadTaxonomy(format!(
                    "behavior {} has an empty description",
                    b.id
                )));
            }
        }
        Ok(Self { behaviors })
    }

    pub fn behaviors(&self) -> &[Behavior] {
        &self.behaviors
    }

    pub fn get(&self, id: BehaviorId) -> Option<&Behavior> {
        id.checked_sub(1).and_then(|i| self.behaviors.get(i as usize))
    }

    pub fn contains(&self, id: BehaviorId) -> bool {
        self.get(id).is_some()
    }

    /// Case-insensitive lookup on the trimmed name.
    pub fn by_name(&self, name: &str) -> Option<&Behavior> {
        let name = name.trim();
        self.behaviors.iter().find(|b| b.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultPolicy {
    #[default]
    AllBehaviors,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FamilyTable {
    /// Keyed by normalized (trimmed, lowercased) family name.
    entries: BTreeMap<String, BTreeSet<BehaviorId>>,
    pub default_policy: DefaultPolicy,
}

#[derive(Deserialize)]
struct FamilyFile {
    #[serde(default)]
    default_policy: DefaultPolicy,
    #[serde(default)]
    families: BTreeMap<String, Vec<BehaviorId>>,
}

fn normalize_family(name: &str) -> String {
    name.trim().to_lowercase()
}

impl FamilyTable {
    pub fn load(path: &Path, taxonomy: &Taxonomy) -> Result<Self, KnowledgeError> {
        Self::parse(&read(path)?, taxonomy)
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_FAMILIES, &Taxonomy::builtin()).expect("shipped family table is valid")
    }

    pub fn parse(text: &str, taxonomy: &Taxonomy) -> Result<Self, KnowledgeError> {
        let file: FamilyFile =
            toml::from_str(text).map_err(|e| KnowledgeError::BadFamilyTable(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for (family, ids) in file.families {
            if ids.is_empty() {
                return Err(KnowledgeError::BadFamilyTable(format!(
                    "family {family:?} maps to no behaviors"
                )));
            }
            if let Some(bad) = ids.iter().find(|id| !taxonomy.contains(**id)) {
                return Err(KnowledgeError::BadFamilyTable(format!(
                    "family {family:?} references unknown behavior id {bad}"
                )));
            }
            let key = normalize_family(&family);
            if entries.insert(key, ids.into_iter().collect()).is_some() {
                return Err(KnowledgeError::BadFamilyTable(format!(
                    "family {family:?} listed twice"
                )));
            }
        }
        Ok(Self {
            entries,
            default_policy: file.default_policy,
        })
    }

    /// Behaviors to probe for a sample of `family`.
    pub fn lookup<'t>(
        &self,
        taxonomy: &'t Taxonomy,
        family: Option<&str>,
    ) -> Result<Vec<&'t Behavior>, KnowledgeError> {
        let mapped = family.and_then(|f| self.entries.get(&normalize_family(f)));
        match (mapped, self.default_policy) {
            (Some(ids), _) => Ok(ids.iter().filter_map(|id| taxonomy.get(*id)).collect()),
            (None, DefaultPolicy::AllBehaviors) => Ok(taxonomy.behaviors().iter().collect()),
            (None, DefaultPolicy::Error) => {
                Err(KnowledgeError::UnknownFamily(family.map(str::to_string)))
            }
        }
    }
}

fn read(path: &Path) -> Result<String, KnowledgeError> {
    fs::read_to_string(path).map_err(|e| KnowledgeError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

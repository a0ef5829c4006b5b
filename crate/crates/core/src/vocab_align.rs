//! Concept expansion of the teacher vocabulary and aggregation of concept
//! probabilities back onto their owner classes.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{shape_err, Error, Result};
use crate::model::Vocabulary;
use crate::numerics::Tensor;

/// Class name to auxiliary concept strings, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConceptMap {
    entries: Vec<(String, Vec<String>)>,
}

impl ConceptMap {
    pub fn new(entries: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut keys = HashSet::new();
        for (k, _) in &entries {
            if !keys.insert(k.as_str()) {
                return Err(Error::Validation(format!("concept map key `{k}` appears twice")));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Vec<String>)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(|(_, c)| c.is_empty())
    }

    pub fn concept_count(&self) -> usize {
        self.entries.iter().map(|(_, c)| c.len()).sum()
    }

    /// Parses the JSON object form. Syntax and type errors carry line and
    /// column; semantic errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("concept file: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks keys against `vocab` and global uniqueness of the expanded list.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let mut seen: HashSet<&str> = vocab.classes().iter().map(String::as_str).collect();
        for (class, concepts) in &self.entries {
            if !vocab.classes().contains(class) {
                return Err(Error::Validation(format!(
                    "concept key `{class}` is not a vocabulary class"
                )));
            }
            for c in concepts {
                if c.trim().is_empty() {
                    return Err(Error::Validation(format!("empty concept under `{class}`")));
                }
                if !seen.insert(c.as_str()) {
                    return Err(Error::Validation(format!(
                        "concept `{c}` under `{class}` duplicates a class or another concept"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Serialize for ConceptMap {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(self.entries.len()))?;
        for (k, v) in &self.entries {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for ConceptMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct OrderedVisitor;

        impl<'de> Visitor<'de> for OrderedVisitor {
            type Value = ConceptMap;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping class names to arrays of concept strings")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<ConceptMap, A::Error> {
                let mut entries: Vec<(String, Vec<String>)> = Vec::new();
                while let Some(key) = map.next_key::<String>()? {
                    if entries.iter().any(|(k, _)| *k == key) {
                        return Err(de::Error::custom(format!("duplicate key `{key}`")));
                    }
                    let concepts: Vec<String> = map.next_value()?;
                    entries.push((key, concepts));
                }
                Ok(ConceptMap { entries })
            }
        }

        d.deserialize_map(OrderedVisitor)
    }
}

/// Original classes followed by their concepts.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedVocabulary {
    classes: Vec<String>,
    owner: Vec<usize>,
    originals: usize,
}

impl ExpandedVocabulary {
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Owner class of every expanded entry.
    pub fn owner(&self) -> &[usize] {
        &self.owner
    }

    /// `N_c`.
    pub fn originals(&self) -> usize {
        self.originals
    }

    /// `n_tot`.
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// The expanded list as a vocabulary sharing `base`'s templates.
    pub fn vocabulary(&self, base: &Vocabulary) -> Result<Vocabulary> {
        base.with_classes(self.classes.clone())
    }
}

pub fn expand_vocabulary(vocab: &Vocabulary, cm: &ConceptMap) -> Result<ExpandedVocabulary> {
    cm.validate(vocab)?;
    let mut classes = vocab.classes().to_vec();
    let mut owner: Vec<usize> = (0..classes.len()).collect();
    for (class, concepts) in cm.entries() {
        let idx = vocab.classes().iter().position(|c| c == class).expect("validated key");
        for c in concepts {
            classes.push(c.clone());
            owner.push(idx);
        }
    }
    Ok(ExpandedVocabulary {
        classes,
        owner,
        originals: vocab.len(),
    })
}

/// Softmax over all `n_tot` entries of the last axis, then sums each owner's
/// group: `[.., n_tot]` logits to `[.., N_c]` probabilities.
pub fn aggregate_concepts(logits: &Tensor, ev: &ExpandedVocabulary) -> Result<Tensor> {
    if logits.rank() == 0 || *logits.shape().last().unwrap() != ev.len() {
        return shape_err(format!(
            "logits {:?} do not end in {} expanded classes",
            logits.shape(),
            ev.len()
        ));
    }
    let probs = logits.softmax(logits.rank() - 1)?;
    let n = ev.originals();
    let mut shape = logits.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    let rows = logits.len() / ev.len();
    let mut out = vec![0.0; rows * n];
    for (src, dst) in probs.rows().zip(out.chunks_mut(n)) {
        for (p, &o) in src.iter().zip(ev.owner()) {
            dst[o] += p;
        }
    }
    Tensor::new(shape, out)
}

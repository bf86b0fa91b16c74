//! Concept dictionary: concepts, their values, synonyms and prompt templates.
//!
//! Node ids are contiguous and ordered first by concept index, then by value
//! index, so node `(k, m)` has id `offset(k) + m`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Placeholder substituted by a value name or synonym inside a template.
pub const PLACEHOLDER: &str = "{}";

pub const DEFAULT_TEMPLATES: [&str; 4] = [
    "an image showing {}",
    "a clinical finding of {}",
    "visible evidence of {}",
    "a medical image with {}",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub name: String,
    pub values: Vec<String>,
    /// Synonyms keyed by value name; values without an entry have none.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub synonyms: BTreeMap<String, Vec<String>>,
}

impl ConceptSpec {
    pub fn new(name: impl Into<String>, values: &[&str]) -> Self {
        ConceptSpec {
            name: name.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
            synonyms: BTreeMap::new(),
        }
    }

    pub fn with_synonyms(mut self, value: &str, synonyms: &[&str]) -> Self {
        self.synonyms
            .insert(value.to_string(), synonyms.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn synonyms_of(&self, m: usize) -> &[String] {
        self.synonyms.get(&self.values[m]).map_or(&[], Vec::as_slice)
    }
}

/// On-disk (TOML) and in-manifest form of a dictionary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaFile {
    #[serde(default = "default_templates")]
    pub templates: Vec<String>,
    pub concepts: Vec<ConceptSpec>,
}

fn default_templates() -> Vec<String> {
    DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct ConceptDictionary {
    concepts: Vec<ConceptSpec>,
    templates: Vec<String>,
    offsets: Vec<usize>,
    nodes: Vec<(usize, usize)>,
}

impl TryFrom<SchemaFile> for ConceptDictionary {
    type Error = Error;

    fn try_from(file: SchemaFile) -> Result<Self> {
        ConceptDictionary::new(file.concepts, file.templates)
    }
}

impl From<ConceptDictionary> for SchemaFile {
    fn from(d: ConceptDictionary) -> Self {
        SchemaFile {
            templates: d.templates,
            concepts: d.concepts,
        }
    }
}

impl ConceptDictionary {
    pub fn new(concepts: Vec<ConceptSpec>, templates: Vec<String>) -> Result<Self> {
        if concepts.is_empty() {
            return Err(Error::Schema("dictionary has no concepts".into()));
        }
        let mut names = HashSet::new();
        for c in &concepts {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate concept name {:?}", c.name)));
            }
            if c.values.len() < 2 {
                return Err(Error::Schema(format!("concept {:?} needs at least 2 values", c.name)));
            }
            let mut values = HashSet::new();
            for v in &c.values {
                if !values.insert(v.as_str()) {
                    return Err(Error::Schema(format!("duplicate value {v:?} in concept {:?}", c.name)));
                }
            }
            if let Some(unknown) = c.synonyms.keys().find(|k| !values.contains(k.as_str())) {
                return Err(Error::Schema(format!(
                    "synonyms given for unknown value {unknown:?} in concept {:?}",
                    c.name
                )));
            }
        }
        for t in &templates {
            validate_template(t)?;
        }
        let mut offsets = Vec::with_capacity(concepts.len());
        let mut nodes = Vec::new();
        for (k, c) in concepts.iter().enumerate() {
            offsets.push(nodes.len());
            nodes.extend((0..c.values.len()).map(|m| (k, m)));
        }
        Ok(ConceptDictionary {
            concepts,
            templates,
            offsets,
            nodes,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: SchemaFile = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        file.try_into()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&SchemaFile::from(self.clone())).expect("schema serializes")
    }

    pub fn concepts(&self) -> &[ConceptSpec] {
        &self.concepts
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    /// Number of concepts `K`.
    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    /// Total node count `M = sum_k M_k`.
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_values(&self, k: usize) -> usize {
        self.concepts[k].values.len()
    }

    pub fn values_per_concept(&self) -> Vec<usize> {
        self.concepts.iter().map(|c| c.values.len()).collect()
    }

    pub fn node_id(&self, k: usize, m: usize) -> Result<usize> {
        if k >= self.concepts.len() || m >= self.concepts[k].values.len() {
            return Err(Error::Lookup(format!("no node for concept {k} value {m}")));
        }
        Ok(self.offsets[k] + m)
    }

    pub fn node(&self, id: usize) -> Result<(usize, usize)> {
        self.nodes
            .get(id)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("node id {id} out of range")))
    }

    /// Node ids belonging to concept `k`.
    pub fn concept_nodes(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k] + self.concepts[k].values.len()
    }

    pub fn concept_of(&self, node: usize) -> usize {
        self.nodes[node].0
    }

    /// Human-readable `concept=value` label for a node.
    pub fn node_label(&self, id: usize) -> String {
        let (k, m) = self.nodes[id];
        format!("{}={}", self.concepts[k].name, self.concepts[k].values[m])
    }

    /// Prompt set for node `(k, m)`: the bare value name, its bare synonyms,
    /// then each template filled with the value name and each synonym.
    /// Order-stable and deduplicated.
    pub fn build_prompts(&self, k: usize, m: usize) -> Result<Vec<String>> {
        self.node_id(k, m)?;
        let concept = &self.concepts[k];
        let mut bases = vec![concept.values[m].clone()];
        bases.extend(concept.synonyms_of(m).iter().cloned());
        let mut prompts = bases.clone();
        for template in &self.templates {
            validate_template(template)?;
            for base in &bases {
                prompts.push(template.replacen(PLACEHOLDER, base, 1));
            }
        }
        let mut seen = HashSet::new();
        prompts.retain(|p| seen.insert(p.clone()));
        Ok(prompts)
    }

    /// SHA-256 over the canonical JSON form; checkpoints refuse to load
    /// against a dictionary with a different hash.
    pub fn schema_hash(&self) -> [u8; 32] {
        let canonical = serde_json::to_vec(&SchemaFile::from(self.clone())).expect("schema serializes");
        Sha256::digest(&canonical).into()
    }
}

fn validate_template(t: &str) -> Result<()> {
    match t.matches(PLACEHOLDER).count() {
        1 => Ok(()),
        n => Err(Error::Schema(format!(
            "template {t:?} must contain exactly one {PLACEHOLDER} placeholder, found {n}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dict(concepts: Vec<ConceptSpec>, templates: &[&str]) -> ConceptDictionary {
        ConceptDictionary::new(concepts, templates.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn bare_value_plus_template() {
        let d = dict(vec![ConceptSpec::new("size", &["small", "large"])], &["a cell that is {}"]);
        assert_eq!(d.build_prompts(0, 1).unwrap(), vec!["large", "a cell that is large"]);
    }

    #[test]
    fn prompt_count_formula() {
        let d = dict(
            vec![ConceptSpec::new("color", &["erythema", "normal"]).with_synonyms("erythema", &["red lesion"])],
            &["a photo of {}", "skin with {}"],
        );
        let prompts = d.build_prompts(0, 0).unwrap();
        // (1 + n_syn) * (1 + |T|)
        assert_eq!(prompts.len(), 2 * 3);
        assert_eq!(prompts[..2], ["erythema".to_string(), "red lesion".to_string()]);
    }

    #[test]
    fn synonym_equal_to_value_is_deduplicated() {
        let plain = dict(vec![ConceptSpec::new("size", &["small", "large"])], &["a {} cell"]);
        let dup = dict(
            vec![ConceptSpec::new("size", &["small", "large"]).with_synonyms("large", &["large"])],
            &["a {} cell"],
        );
        assert_eq!(plain.build_prompts(0, 1).unwrap(), dup.build_prompts(0, 1).unwrap());
    }

    #[test]
    fn template_without_placeholder_is_rejected() {
        let err = ConceptDictionary::new(
            vec![ConceptSpec::new("size", &["small", "large"])],
            vec!["no slot here".into()],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn schema_invariants() {
        assert!(ConceptDictionary::new(vec![ConceptSpec::new("a", &["x"])], vec![]).is_err());
        assert!(ConceptDictionary::new(vec![ConceptSpec::new("a", &["x", "x"])], vec![]).is_err());
        assert!(ConceptDictionary::new(
            vec![ConceptSpec::new("a", &["x", "y"]), ConceptSpec::new("a", &["p", "q"])],
            vec![]
        )
        .is_err());
        assert!(ConceptDictionary::new(
            vec![ConceptSpec::new("a", &["x", "y"]).with_synonyms("z", &["zz"])],
            vec![]
        )
        .is_err());
    }

    #[test]
    fn node_index_round_trips() {
        let d = dict(
            vec![
                ConceptSpec::new("a", &["x", "y"]),
                ConceptSpec::new("b", &["p", "q", "r"]),
                ConceptSpec::new("c", &["u", "v"]),
            ],
            &[],
        );
        assert_eq!(d.num_nodes(), 7);
        for id in 0..d.num_nodes() {
            let (k, m) = d.node(id).unwrap();
            assert_eq!(d.node_id(k, m).unwrap(), id);
        }
        assert_eq!(d.node_id(1, 0).unwrap(), 2);
        assert_eq!(d.concept_nodes(2), 5..7);
        assert!(d.node(7).is_err());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let text = r#"
templates = ["a cell that is {}"]

[[concepts]]
name = "size"
values = ["small", "large"]
synonyms = { large = ["big"] }

[[concepts]]
name = "nucleus"
values = ["round", "lobed"]
"#;
        let d = ConceptDictionary::from_toml(text).unwrap();
        assert_eq!(d.build_prompts(0, 1).unwrap().len(), 4);
        let again = ConceptDictionary::from_toml(&d.to_toml()).unwrap();
        assert_eq!(d, again);
        assert_eq!(d.schema_hash(), again.schema_hash());

        let other = ConceptDictionary::from_toml(&text.replace("lobed", "segmented")).unwrap();
        assert_ne!(d.schema_hash(), other.schema_hash());
        assert!(ConceptDictionary::from_toml(&format!("{text}\nextra = 1")).is_err());
    }

    #[test]
    fn default_templates_apply_when_omitted() {
        let d = ConceptDictionary::from_toml("[[concepts]]\nname = \"a\"\nvalues = [\"x\", \"y\"]\n").unwrap();
        assert_eq!(d.templates().len(), 4);
        assert_eq!(d.build_prompts(0, 0).unwrap().len(), 5);
    }
}

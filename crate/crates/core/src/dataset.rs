//! Labeled datasets and their on-disk layout.
//!
//! A dataset directory holds:
//! - `manifest`: JSON with the concept dictionary, class names, patch grid
//!   shape, split sizes, and (for generated data) the generator settings and
//!   the Bayes-optimal diagnosis accuracy.
//! - `train.records`, `val.records`, `test.records`: one sample per line,
//!   four TAB-separated fields: decimal id, decimal diagnosis label,
//!   comma-separated concept value indices, and the standard base64 encoding
//!   of the `P·d_in` patch values as little-endian IEEE-754 doubles in
//!   row-major order.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{create_dir_all, read_to_string, write_atomic};
use crate::schema::ConceptDictionary;
use crate::synth::SyntheticSpec;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest";
pub const FORMAT_NAME: &str = "dcgnet-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    /// One value index per concept.
    pub concepts: Vec<usize>,
    /// `P×d_in` raw patch features.
    pub patches: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.records", self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub schema: ConceptDictionary,
    pub class_names: Vec<String>,
    pub num_patches: usize,
    pub patch_dim: usize,
    pub splits: SplitSizes,
    #[serde(default)]
    pub bayes_accuracy: Option<f64>,
    #[serde(default)]
    pub generator: Option<SyntheticSpec>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &[Sample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn dictionary(&self) -> &ConceptDictionary {
        &self.manifest.schema
    }

    /// Concept value indices of every training sample.
    pub fn train_concept_labels(&self) -> Vec<Vec<usize>> {
        self.train.iter().map(|s| s.concepts.clone()).collect()
    }

    /// Checks every sample against the manifest and ids for uniqueness.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.num_classes() < 2 {
            return Err(Error::Schema("dataset needs at least 2 classes".into()));
        }
        let mut ids = HashSet::new();
        for name in SplitName::ALL {
            for (i, s) in self.split(name).iter().enumerate() {
                let fail = |msg: String| Error::Format {
                    file: name.file_name(),
                    line: i + 1,
                    msg,
                };
                check_sample(m, s).map_err(fail)?;
                if !ids.insert(s.id) {
                    return Err(fail(format!("sample id {} appears more than once", s.id)));
                }
            }
        }
        Ok(())
    }

    /// Writes the split files, then the manifest, each atomically.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        create_dir_all(dir)?;
        for name in SplitName::ALL {
            let text = format_records(self.split(name));
            write_atomic(&dir.join(name.file_name()), text.as_bytes())?;
        }
        let mut manifest = self.manifest.clone();
        manifest.splits = SplitSizes {
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = read_to_string(&manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            file: MANIFEST_FILE.into(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
            return Err(Error::Format {
                file: MANIFEST_FILE.into(),
                line: 0,
                msg: format!("unsupported dataset format {} v{}", manifest.format, manifest.version),
            });
        }
        let mut splits = Vec::with_capacity(3);
        for name in SplitName::ALL {
            let file = name.file_name();
            let text = read_to_string(&dir.join(&file))?;
            let samples = parse_records(&text, &manifest, &file)?;
            let expected = match name {
                SplitName::Train => manifest.splits.train,
                SplitName::Val => manifest.splits.val,
                SplitName::Test => manifest.splits.test,
            };
            if samples.len() != expected {
                return Err(Error::Format {
                    file,
                    line: samples.len(),
                    msg: format!("expected {expected} records, found {}", samples.len()),
                });
            }
            splits.push(samples);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        let ds = Dataset {
            manifest,
            train,
            val,
            test,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn check_sample(m: &Manifest, s: &Sample) -> std::result::Result<(), String> {
    if s.label >= m.num_classes() {
        return Err(format!("diagnosis label {} out of range for {} classes", s.label, m.num_classes()));
    }
    let dict = &m.schema;
    if s.concepts.len() != dict.num_concepts() {
        return Err(format!("{} concept labels, expected {}", s.concepts.len(), dict.num_concepts()));
    }
    for (k, &a) in s.concepts.iter().enumerate() {
        if a >= dict.num_values(k) {
            return Err(format!("concept {k} value {a} out of range for {} values", dict.num_values(k)));
        }
    }
    if s.patches.shape() != [m.num_patches, m.patch_dim] {
        return Err(format!("patch grid {:?}, expected [{}, {}]", s.patches.shape(), m.num_patches, m.patch_dim));
    }
    if !s.patches.all_finite() {
        return Err("non-finite patch value".into());
    }
    Ok(())
}

pub fn format_records(samples: &[Sample]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    for s in samples {
        bytes.clear();
        for v in s.patches.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let concepts: Vec<String> = s.concepts.iter().map(|a| a.to_string()).collect();
        writeln!(out, "{}\t{}\t{}\t{}", s.id, s.label, concepts.join(","), STANDARD.encode(&bytes)).expect("string write");
    }
    out
}

pub fn parse_records(text: &str, manifest: &Manifest, file: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    let width = manifest.num_patches * manifest.patch_dim;
    for (i, line) in text.split_terminator('\n').enumerate() {
        let lineno = i + 1;
        let err = |msg: String| Error::Format {
            file: file.to_string(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 TAB-separated fields, found {}", fields.len())));
        }
        let id = fields[0].parse::<u64>().map_err(|e| err(format!("bad id {:?}: {e}", fields[0])))?;
        let label = fields[1].parse::<usize>().map_err(|e| err(format!("bad label {:?}: {e}", fields[1])))?;
        let concepts = fields[2]
            .split(',')
            .map(|a| a.parse::<usize>().map_err(|e| err(format!("bad concept value {a:?}: {e}"))))
            .collect::<Result<Vec<usize>>>()?;
        let bytes = STANDARD
            .decode(fields[3])
            .map_err(|e| err(format!("bad patch encoding: {e}")))?;
        if bytes.len() != width * 8 {
            return Err(err(format!("patch payload has {} bytes, expected {}", bytes.len(), width * 8)));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let patches = Tensor::matrix(manifest.num_patches, manifest.patch_dim, data)?;
        let sample = Sample {
            id,
            label,
            concepts,
            patches,
        };
        check_sample(manifest, &sample).map_err(err)?;
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ConceptSpec;

    fn tiny() -> Dataset {
        let dict = ConceptDictionary::new(
            vec![ConceptSpec::new("size", &["small", "large"]), ConceptSpec::new("tone", &["a", "b", "c"])],
            vec![],
        )
        .unwrap();
        let manifest = Manifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            schema: dict,
            class_names: vec!["x".into(), "y".into()],
            num_patches: 2,
            patch_dim: 3,
            splits: SplitSizes { train: 2, val: 1, test: 1 },
            bayes_accuracy: Some(0.75),
            generator: None,
        };
        let s = |id: u64, label: usize, c: [usize; 2], base: f64| Sample {
            id,
            label,
            concepts: c.to_vec(),
            patches: Tensor::matrix(2, 3, (0..6).map(|i| base + i as f64 * 0.1 + 1e-17).collect()).unwrap(),
        };
        Dataset {
            manifest,
            train: vec![s(0, 0, [0, 2], -1.3), s(2, 1, [1, 0], 0.1)],
            val: vec![s(1, 1, [1, 1], 7.25)],
            test: vec![s(3, 0, [0, 0], f64::MIN_POSITIVE)],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        ds.write(dir.path()).unwrap();
        assert_eq!(Dataset::read(dir.path()).unwrap(), ds);
    }

    #[test]
    fn truncated_line_names_split_and_line() {
        let dir = tempfile::tempdir().unwrap();
        tiny().write(dir.path()).unwrap();
        let path = dir.path().join("train.records");
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 10]).unwrap();
        match Dataset::read(dir.path()) {
            Err(Error::Format { file, line, .. }) => assert_eq!((file.as_str(), line), ("train.records", 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_records_are_rejected() {
        let ds = tiny();
        let m = &ds.manifest;
        assert!(parse_records("0\t5\t0,0\tAAAA\n", m, "f").is_err());
        assert!(parse_records("0\t0\t0\tAAAA\n", m, "f").is_err());
        assert!(parse_records("0\t0\t0,3\tAAAA\n", m, "f").is_err());
        assert!(parse_records("0\t0\t0,0\n", m, "f").is_err());
        let mut bad = ds.clone();
        bad.val[0].id = 0;
        assert!(bad.validate().is_err());
        let mut bad = ds;
        bad.test[0].patches.data_mut()[0] = f64::NAN;
        assert!(bad.validate().is_err());
    }
}

//! On-disk model container.
//!
//! A directory holding:
//!
//! | file | content |
//! |---|---|
//! | `manifest.json` | format name, version, [`ModelShape`], parameter modules |
//! | `config.json` | the [`ModelConfig`] used for training |
//! | `vocab.tsv` | `kind<TAB>name` lines, symptoms then herbs |
//! | `labels.tsv` | herb compatibility roles |
//! | `schema.json` | patient attribute encoding |
//! | `schedule.json` | diffusion variance schedule |
//! | `assignment.json` | final soft role assignment |
//! | `globals.json` | cached inference-time herb, symptom and level tensors |
//! | `params/<module>.json` | named parameter tensors of one module |
//!
//! Loading rebuilds the parameter layout from the config and shape, then
//! overwrites every tensor by name; any missing, unknown or mis-shaped tensor
//! is an error.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{score_record, GlobalLeaves, GlobalValues, Model, ModelShape};
use super::ModelConfig;
use crate::autograd::Tape;
use crate::corpus::{HierarchyLabels, PatientProfile, PrescriptionRecord, Role, Vocabulary};
use crate::dmsh::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::eval::{evaluate_rankings, top_k, LongTailGroups, MetricsReport};
use crate::hierarchy::{self, SoftAssignment};
use crate::par::Exec;
use crate::pepp::AttributeSchema;
use crate::tensor::Tensor;

pub const ARTIFACT_FORMAT: &str = "herbrec-artifact";
pub const ARTIFACT_VERSION: u32 = 1;
const PARAMS_FORMAT: &str = "herbrec-params";

/// A fitted model with everything needed for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArtifact {
    pub model: Model,
    pub vocab: Vocabulary,
    pub labels: HierarchyLabels,
    pub assignment: SoftAssignment,
    pub globals: GlobalValues,
}

/// One ranked herb.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub rank: usize,
    pub herb: usize,
    pub name: String,
    pub score: f64,
    pub role: Role,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    shape: ModelShape,
    modules: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamBlob {
    format: String,
    version: u32,
    module: String,
    tensors: Vec<StoredTensor>,
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).map_err(|e| Error::io(p, e))
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let p = dir.join(name);
    fs::read_to_string(&p).map_err(|e| Error::io(p, e))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn bad(message: impl Into<String>) -> Error {
    Error::validation("recommender", message)
}

/// Ranks every herb for each record's symptoms, keeping the top `k`.
pub fn rank_records(model: &Model, globals: &GlobalValues, assignment: &SoftAssignment, records: &[PrescriptionRecord], k: usize) -> Result<Vec<Vec<usize>>> {
    model
        .config
        .exec
        .map(records.len(), |i| scores_with(model, globals, assignment, records[i].profile.as_ref(), &records[i].symptoms).map(|s| top_k(&s, k)))
        .into_iter()
        .collect()
}

fn scores_with(model: &Model, globals: &GlobalValues, assignment: &SoftAssignment, profile: Option<&PatientProfile>, symptoms: &[usize]) -> Result<Vec<f64>> {
    if symptoms.is_empty() {
        return Err(Error::Precondition("at least one symptom is required".into()));
    }
    if let Some(&s) = symptoms.iter().find(|&&s| s >= model.shape.n_symptoms) {
        return Err(Error::Precondition(format!("symptom id {s} outside the vocabulary")));
    }
    let mut tape = Tape::new();
    let leaves = GlobalLeaves::attach(&mut tape, globals);
    let out = score_record(&mut tape, model, &leaves, assignment, profile, symptoms, None)?;
    Ok(tape.value(out.scores).data().to_vec())
}

impl ModelArtifact {
    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.model.schedule
    }

    /// `ŷ` for one patient, one entry per herb.
    pub fn scores(&self, profile: Option<&PatientProfile>, symptoms: &[usize]) -> Result<Vec<f64>> {
        scores_with(&self.model, &self.globals, &self.assignment, profile, symptoms)
    }

    /// Resolves symptom names in the given order, dropping repeats and failing
    /// with the full list of unknown names.
    pub fn resolve_symptoms<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        let mut unknown = Vec::new();
        for n in names {
            match self.vocab.symptoms.get(n.as_ref()) {
                Some(id) => ids.push(id),
                None => unknown.push(n.as_ref().to_string()),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownSymptoms(unknown));
        }
        if ids.is_empty() {
            return Err(Error::Precondition("at least one symptom is required".into()));
        }
        // Order is kept: the sequence encoder is position-aware.
        let mut seen = BTreeSet::new();
        ids.retain(|id| seen.insert(*id));
        Ok(ids)
    }

    /// Role tag shown with a herb: the labelled role when one exists, else
    /// the role cluster the herb falls in.
    pub fn role(&self, herb: usize) -> Role {
        if self.labels.labeled.get(herb).copied().unwrap_or(false) {
            self.labels.role(herb)
        } else {
            hierarchy::role_of(&self.assignment, herb)
        }
    }

    /// Top `k` herbs by score, ties broken by ascending herb index.
    pub fn predict_topk<S: AsRef<str>>(&self, profile: Option<&PatientProfile>, symptoms: &[S], k: usize) -> Result<Vec<Recommendation>> {
        let ids = self.resolve_symptoms(symptoms)?;
        self.predict_topk_ids(profile, &ids, k)
    }

    pub fn predict_topk_ids(&self, profile: Option<&PatientProfile>, symptoms: &[usize], k: usize) -> Result<Vec<Recommendation>> {
        let scores = self.scores(profile, symptoms)?;
        Ok(top_k(&scores, k)
            .into_iter()
            .enumerate()
            .map(|(r, h)| Recommendation { rank: r + 1, herb: h, name: self.vocab.herbs.name(h).to_string(), score: scores[h], role: self.role(h) })
            .collect())
    }

    pub fn rank_records(&self, records: &[PrescriptionRecord], k: usize) -> Result<Vec<Vec<usize>>> {
        rank_records(&self.model, &self.globals, &self.assignment, records, k)
    }

    /// Metrics over `records` at each K, optionally broken down by long-tail group.
    pub fn evaluate(&self, records: &[PrescriptionRecord], ks: &[usize], groups: Option<&LongTailGroups>, exec: Exec) -> Result<MetricsReport> {
        let records: Vec<PrescriptionRecord> = records.iter().filter(|r| !r.symptoms.is_empty() && !r.herbs.is_empty()).cloned().collect();
        if records.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let kmax = ks.iter().copied().max().ok_or_else(|| Error::Precondition("no K values".into()))?;
        let ranked = self.rank_records(&records, kmax)?;
        let truths: Vec<BTreeSet<usize>> = records.iter().map(|r| r.herbs.iter().copied().collect()).collect();
        evaluate_rankings(&ranked, &truths, ks, groups, exec)
    }

    /// Checks that `other` names the same symptoms and herbs in the same order.
    pub fn check_vocabulary(&self, other: &Vocabulary) -> Result<()> {
        if self.vocab.symptoms.names() != other.symptoms.names() || self.vocab.herbs.names() != other.herbs.names() {
            return Err(bad("dataset vocabulary does not match the artifact vocabulary"));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let params = dir.join("params");
        fs::create_dir_all(&params).map_err(|e| Error::io(&params, e))?;
        let store = &self.model.store;
        let mut by_module: BTreeMap<String, Vec<StoredTensor>> = BTreeMap::new();
        for e in store.entries() {
            let (rows, cols) = e.value.shape();
            by_module.entry(e.module.clone()).or_default().push(StoredTensor { name: e.name.clone(), rows, cols, data: e.value.data().to_vec() });
        }
        let manifest = Manifest { format: ARTIFACT_FORMAT.into(), version: ARTIFACT_VERSION, shape: self.model.shape.clone(), modules: by_module.keys().cloned().collect() };
        write(dir, "manifest.json", json(&manifest)?)?;
        write(dir, "config.json", json(&self.model.config)?)?;
        write(dir, "vocab.tsv", self.vocab.to_tsv())?;
        write(dir, "labels.tsv", self.labels.to_text(&self.vocab))?;
        write(dir, "schema.json", json(&self.model.schema)?)?;
        write(dir, "schedule.json", json(&self.model.schedule)?)?;
        write(dir, "assignment.json", json(&self.assignment)?)?;
        write(dir, "globals.json", json(&self.globals)?)?;
        for (module, tensors) in by_module {
            let blob = ParamBlob { format: PARAMS_FORMAT.into(), version: ARTIFACT_VERSION, module: module.clone(), tensors };
            write(&params, &format!("{module}.json"), json(&blob)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&read(dir, "manifest.json")?)?;
        if manifest.format != ARTIFACT_FORMAT {
            return Err(bad(format!("{} is not a model artifact", dir.display())));
        }
        if manifest.version != ARTIFACT_VERSION {
            return Err(bad(format!("artifact version {} is not supported (expected {ARTIFACT_VERSION})", manifest.version)));
        }
        let config: ModelConfig = serde_json::from_str(&read(dir, "config.json")?)?;
        let vocab = Vocabulary::from_tsv(&read(dir, "vocab.tsv")?)?;
        let labels_path = dir.join("labels.tsv");
        let labels = HierarchyLabels::parse(&read(dir, "labels.tsv")?, &labels_path.display().to_string(), &vocab)?;
        let schema: AttributeSchema = serde_json::from_str(&read(dir, "schema.json")?)?;
        let schedule: DiffusionSchedule = serde_json::from_str(&read(dir, "schedule.json")?)?;
        let assignment: SoftAssignment = serde_json::from_str(&read(dir, "assignment.json")?)?;
        let globals: GlobalValues = serde_json::from_str(&read(dir, "globals.json")?)?;
        if vocab.n_symptoms() != manifest.shape.n_symptoms || vocab.n_herbs() != manifest.shape.n_herbs {
            return Err(bad("vocabulary size disagrees with the manifest shape"));
        }
        let mut model = Model::new(config, manifest.shape, schema)?;
        if model.schedule.steps != schedule.steps {
            return Err(bad("stored schedule length disagrees with the config"));
        }
        model.schedule = schedule;
        let mut seen = vec![false; model.store.len()];
        for module in &manifest.modules {
            let blob: ParamBlob = serde_json::from_str(&read(&dir.join("params"), &format!("{module}.json"))?)?;
            if blob.format != PARAMS_FORMAT || blob.version != ARTIFACT_VERSION || &blob.module != module {
                return Err(bad(format!("parameter blob for {module} has the wrong header")));
            }
            for t in blob.tensors {
                let id = model.store.id(&t.name).ok_or_else(|| bad(format!("unknown parameter {}", t.name)))?;
                if model.store.get(id).shape() != (t.rows, t.cols) || t.data.len() != t.rows * t.cols {
                    return Err(bad(format!("parameter {} has the wrong shape", t.name)));
                }
                model.store.set(id, Tensor::from_vec(t.rows, t.cols, t.data));
                seen[id.0] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(bad(format!("parameter {} missing from the artifact", model.store.entries()[i].name)));
        }
        let m = model.shape.n_herbs;
        if assignment.membership.shape() != (m, hierarchy::LEVELS) || globals.herbs.rows() != m || globals.clustered.len() != hierarchy::LEVELS {
            return Err(bad("cached inference tensors disagree with the herb vocabulary"));
        }
        Ok(Self { model, vocab, labels, assignment, globals })
    }
}

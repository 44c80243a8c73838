//! Prescription corpora, knowledge-graph triples, hierarchy labels, and the
//! synthetic corpus generator used for desk-scale verification.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl Gender {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Some(Gender::Male),
            "female" | "f" => Some(Gender::Female),
            "unknown" | "" => Some(Gender::Unknown),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Unknown => "unknown",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Width of one age bucket in years.
pub const AGE_BUCKET_YEARS: f64 = 5.0;

pub fn age_bucket(age_years: f64) -> u32 {
    (age_years / AGE_BUCKET_YEARS).floor() as u32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub gender: Gender,
    pub age_years: f64,
    pub age_bucket: u32,
    pub height_cm: Option<f64>,
    pub weight_kg: Option<f64>,
    pub history: BTreeSet<String>,
}

impl PatientProfile {
    pub fn new(gender: Gender, age_years: f64, height_cm: Option<f64>, weight_kg: Option<f64>, history: BTreeSet<String>) -> Self {
        Self { gender, age_years, age_bucket: age_bucket(age_years), height_cm, weight_kg, history }
    }

    /// Body-mass index, when both height and weight are present.
    pub fn bmi(&self) -> Option<f64> {
        match (self.height_cm, self.weight_kg) {
            (Some(h), Some(w)) if h > 0.0 => Some(w / (h / 100.0).powi(2)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrescriptionRecord {
    pub record_id: String,
    pub profile: Option<PatientProfile>,
    pub symptoms: Vec<usize>,
    pub herbs: Vec<usize>,
}

/// Bijection between names and dense ids, in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameIndex {
    names: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl NameIndex {
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let mut idx = Self::default();
        for n in names {
            if idx.lookup.contains_key(&n) {
                return Err(Error::validation("corpus", format!("duplicate vocabulary entry `{n}`")));
            }
            idx.intern(&n);
        }
        Ok(idx)
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.lookup.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.lookup.insert(name.to_string(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn rebuild(&mut self) {
        self.lookup = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub symptoms: NameIndex,
    pub herbs: NameIndex,
}

impl Vocabulary {
    pub fn n_symptoms(&self) -> usize {
        self.symptoms.len()
    }

    pub fn n_herbs(&self) -> usize {
        self.herbs.len()
    }

    /// `kind<TAB>name` lines, symptoms first, each block in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for n in self.symptoms.names() {
            let _ = writeln!(out, "symptom\t{n}");
        }
        for n in self.herbs.names() {
            let _ = writeln!(out, "herb\t{n}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut symptoms = Vec::new();
        let mut herbs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            match line.split_once('\t') {
                Some(("symptom", n)) => symptoms.push(n.to_string()),
                Some(("herb", n)) => herbs.push(n.to_string()),
                _ => {
                    return Err(Error::Parse { path: "vocab.tsv".into(), line: i + 1, message: "expected `symptom|herb<TAB>name`".into() })
                }
            }
        }
        Ok(Self { symptoms: NameIndex::from_names(symptoms)?, herbs: NameIndex::from_names(herbs)? })
    }

    pub fn rebuild_lookups(&mut self) {
        self.symptoms.rebuild();
        self.herbs.rebuild();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub records: Vec<PrescriptionRecord>,
    pub vocab: Vocabulary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    PublicTsv,
    ClinicalTsv,
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "public_tsv" => Ok(CorpusFormat::PublicTsv),
            "clinical_tsv" => Ok(CorpusFormat::ClinicalTsv),
            other => Err(format!("unknown corpus format `{other}`")),
        }
    }
}

fn split_names(field: &str) -> Vec<&str> {
    field.split(';').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn dedup_ids(names: &[&str], index: &mut NameIndex) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    names.iter().map(|n| index.intern(n)).filter(|id| seen.insert(*id)).collect()
}

fn parse_opt_positive(field: &str, what: &str, path: &str, line: usize) -> Result<Option<f64>> {
    if field.trim().is_empty() {
        return Ok(None);
    }
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::Parse { path: path.into(), line, message: format!("invalid {what} `{field}`") })?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Parse { path: path.into(), line, message: format!("{what} must be positive, got {v}") });
    }
    Ok(Some(v))
}

pub fn load_prescriptions(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prescriptions(&text, format, &path.display().to_string())
}

pub fn parse_prescriptions(text: &str, format: CorpusFormat, source: &str) -> Result<Corpus> {
    let mut vocab = Vocabulary::default();
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        let (record_id, profile, sym_field, herb_field) = match format {
            CorpusFormat::PublicTsv => {
                if fields.len() != 2 {
                    return Err(Error::Parse { path: source.into(), line, message: format!("expected 2 tab-separated fields, found {}", fields.len()) });
                }
                (format!("r{}", records.len()), None, fields[0], fields[1])
            }
            CorpusFormat::ClinicalTsv => {
                if fields.len() != 8 {
                    return Err(Error::Parse { path: source.into(), line, message: format!("expected 8 tab-separated fields, found {}", fields.len()) });
                }
                let gender = Gender::parse(fields[1])
                    .ok_or_else(|| Error::Parse { path: source.into(), line, message: format!("unknown gender `{}`", fields[1]) })?;
                let age: f64 = fields[2]
                    .trim()
                    .parse()
                    .ok()
                    .filter(|a: &f64| *a >= 0.0 && a.is_finite())
                    .ok_or_else(|| Error::Parse { path: source.into(), line, message: format!("invalid age `{}`", fields[2]) })?;
                let height = parse_opt_positive(fields[3], "height", source, line)?;
                let weight = parse_opt_positive(fields[4], "weight", source, line)?;
                let history = split_names(fields[5]).into_iter().map(str::to_string).collect();
                let profile = PatientProfile::new(gender, age, height, weight, history);
                (fields[0].to_string(), Some(profile), fields[6], fields[7])
            }
        };
        let sym_names = split_names(sym_field);
        let herb_names = split_names(herb_field);
        if sym_names.is_empty() {
            return Err(Error::validation("corpus", format!("{source}:{line}: empty symptom field")));
        }
        if herb_names.is_empty() {
            return Err(Error::validation("corpus", format!("{source}:{line}: empty herb field")));
        }
        let symptoms = dedup_ids(&sym_names, &mut vocab.symptoms);
        let herbs = dedup_ids(&herb_names, &mut vocab.herbs);
        records.push(PrescriptionRecord { record_id, profile, symptoms, herbs });
    }
    Ok(Corpus { records, vocab })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn format_prescriptions(corpus: &Corpus, format: CorpusFormat) -> String {
    let mut out = String::new();
    for r in &corpus.records {
        let syms: Vec<&str> = r.symptoms.iter().map(|&s| corpus.vocab.symptoms.name(s)).collect();
        let herbs: Vec<&str> = r.herbs.iter().map(|&h| corpus.vocab.herbs.name(h)).collect();
        match format {
            CorpusFormat::PublicTsv => {
                let _ = writeln!(out, "{}\t{}", syms.join(";"), herbs.join(";"));
            }
            CorpusFormat::ClinicalTsv => {
                let (gender, age, h, w, hist) = match &r.profile {
                    Some(p) => (
                        p.gender.as_str().to_string(),
                        p.age_years.to_string(),
                        fmt_opt(p.height_cm),
                        fmt_opt(p.weight_kg),
                        p.history.iter().cloned().collect::<Vec<_>>().join(";"),
                    ),
                    None => ("unknown".into(), "0".into(), String::new(), String::new(), String::new()),
                };
                let _ = writeln!(out, "{}\t{gender}\t{age}\t{h}\t{w}\t{hist}\t{}\t{}", r.record_id, syms.join(";"), herbs.join(";"));
            }
        }
    }
    out
}

pub fn save_prescriptions(corpus: &Corpus, path: &Path, format: CorpusFormat) -> Result<()> {
    fs::write(path, format_prescriptions(corpus, format)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// Repeat pruning until every surviving pair meets the threshold.
    Fixpoint,
    /// A single pruning pass.
    OnePass,
}

fn item_frequencies(records: &[PrescriptionRecord]) -> (HashMap<usize, usize>, HashMap<usize, usize>) {
    let mut sf = HashMap::new();
    let mut hf = HashMap::new();
    for r in records {
        for &s in &r.symptoms {
            *sf.entry(s).or_insert(0) += 1;
        }
        for &h in &r.herbs {
            *hf.entry(h).or_insert(0) += 1;
        }
    }
    (sf, hf)
}

/// Number of records containing each symptom-herb pair.
pub fn pair_counts(records: &[PrescriptionRecord]) -> HashMap<(usize, usize), usize> {
    let mut counts = HashMap::new();
    for r in records {
        for &s in &r.symptoms {
            for &h in &r.herbs {
                *counts.entry((s, h)).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Prunes symptom-herb pairs seen in fewer than `min_count` records.
///
/// Each pass drops, from every record holding a sub-threshold pair, the member
/// of that pair with the lower corpus frequency (ties drop the herb). Records
/// whose symptom or herb set empties are discarded.
pub fn kernel_filter(records: &[PrescriptionRecord], min_count: usize, mode: KernelMode) -> Result<Vec<PrescriptionRecord>> {
    if min_count == 0 {
        return Err(Error::Precondition("kernel_filter min_count must be >= 1".into()));
    }
    let mut current: Vec<PrescriptionRecord> = records.to_vec();
    loop {
        let counts = pair_counts(&current);
        let (sf, hf) = item_frequencies(&current);
        let mut changed = false;
        let mut next = Vec::with_capacity(current.len());
        for r in &current {
            let mut drop_s = BTreeSet::new();
            let mut drop_h = BTreeSet::new();
            for &s in &r.symptoms {
                for &h in &r.herbs {
                    if counts[&(s, h)] < min_count {
                        if sf[&s] < hf[&h] {
                            drop_s.insert(s);
                        } else {
                            drop_h.insert(h);
                        }
                    }
                }
            }
            if drop_s.is_empty() && drop_h.is_empty() {
                next.push(r.clone());
                continue;
            }
            changed = true;
            let symptoms: Vec<usize> = r.symptoms.iter().copied().filter(|s| !drop_s.contains(s)).collect();
            let herbs: Vec<usize> = r.herbs.iter().copied().filter(|h| !drop_h.contains(h)).collect();
            if !symptoms.is_empty() && !herbs.is_empty() {
                next.push(PrescriptionRecord { symptoms, herbs, ..r.clone() });
            }
        }
        current = next;
        if current.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if !changed || mode == KernelMode::OnePass {
            return Ok(current);
        }
    }
}

pub fn split_dataset(records: &[PrescriptionRecord], train_fraction: f64, seed: u64) -> Result<(Vec<PrescriptionRecord>, Vec<PrescriptionRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Precondition(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
    }
    if records.len() < 2 {
        return Err(Error::Precondition(format!("split needs at least 2 records, got {}", records.len())));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng::rng_for(seed, &[rng::tag("split")]));
    let n_train = (train_fraction * records.len() as f64).round() as usize;
    let train = order[..n_train].iter().map(|&i| records[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, test))
}

/// Undirected weighted co-occurrence graph; edges stored once with `i < j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoOccurrenceGraph {
    pub node_count: usize,
    pub edges: Vec<(usize, usize, usize)>,
    pub threshold: usize,
}

impl CoOccurrenceGraph {
    pub fn from_sets<'a>(node_count: usize, sets: impl Iterator<Item = &'a [usize]>, threshold: usize) -> Self {
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for set in sets {
            for (a, &i) in set.iter().enumerate() {
                for &j in &set[a + 1..] {
                    if i != j {
                        *counts.entry((i.min(j), i.max(j))).or_insert(0) += 1;
                    }
                }
            }
        }
        let edges = counts.into_iter().filter(|&(_, c)| c >= threshold).map(|((i, j), c)| (i, j, c)).collect();
        Self { node_count, edges, threshold }
    }

    pub fn weight(&self, i: usize, j: usize) -> usize {
        let key = (i.min(j), i.max(j));
        self.edges.binary_search_by(|&(a, b, _)| (a, b).cmp(&key)).map(|k| self.edges[k].2).unwrap_or(0)
    }

    /// Directed edge list with both orientations.
    pub fn directed_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edges.len() * 2);
        for &(i, j, _) in &self.edges {
            out.push((i, j));
            out.push((j, i));
        }
        out
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(i, j, _) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }
}

pub fn build_cooccurrence_graphs(train: &[PrescriptionRecord], vocab: &Vocabulary, threshold: usize) -> Result<(CoOccurrenceGraph, CoOccurrenceGraph)> {
    if threshold == 0 {
        return Err(Error::Precondition("co-occurrence threshold must be >= 1".into()));
    }
    let sym = CoOccurrenceGraph::from_sets(vocab.n_symptoms(), train.iter().map(|r| r.symptoms.as_slice()), threshold);
    let herb = CoOccurrenceGraph::from_sets(vocab.n_herbs(), train.iter().map(|r| r.herbs.as_slice()), threshold);
    Ok((sym, herb))
}

/// The entity kinds a knowledge graph may declare.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Herb,
    Prescription,
    Compound,
    Disease,
    Dosage,
    Efficacy,
    Symptom,
    Syndrome,
    Target,
    Pathway,
    Meridian,
    Property,
    Flavor,
    Toxicity,
    Processing,
    Source,
}

impl EntityKind {
    pub const ALL: [EntityKind; 16] = [
        EntityKind::Herb,
        EntityKind::Prescription,
        EntityKind::Compound,
        EntityKind::Disease,
        EntityKind::Dosage,
        EntityKind::Efficacy,
        EntityKind::Symptom,
        EntityKind::Syndrome,
        EntityKind::Target,
        EntityKind::Pathway,
        EntityKind::Meridian,
        EntityKind::Property,
        EntityKind::Flavor,
        EntityKind::Toxicity,
        EntityKind::Processing,
        EntityKind::Source,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Herb => "herb",
            EntityKind::Prescription => "prescription",
            EntityKind::Compound => "compound",
            EntityKind::Disease => "disease",
            EntityKind::Dosage => "dosage",
            EntityKind::Efficacy => "efficacy",
            EntityKind::Symptom => "symptom",
            EntityKind::Syndrome => "syndrome",
            EntityKind::Target => "target",
            EntityKind::Pathway => "pathway",
            EntityKind::Meridian => "meridian",
            EntityKind::Property => "property",
            EntityKind::Flavor => "flavor",
            EntityKind::Toxicity => "toxicity",
            EntityKind::Processing => "processing",
            EntityKind::Source => "source",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub name: String,
    pub kind: EntityKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: String,
    pub name: String,
}

/// Typed triples over dense entity/relation indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub triples: Vec<(usize, usize, usize)>,
    /// Herb vocabulary id -> entity index.
    pub herb_anchor: BTreeMap<usize, usize>,
}

impl KnowledgeGraph {
    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    /// Resolves herb anchors by exact name match against `vocab`.
    pub fn anchor_herbs(&mut self, vocab: &Vocabulary) -> Result<()> {
        let mut anchors = BTreeMap::new();
        for (e, ent) in self.entities.iter().enumerate() {
            if ent.kind != EntityKind::Herb {
                continue;
            }
            if let Some(h) = vocab.herbs.get(&ent.name) {
                if let Some(prev) = anchors.insert(h, e) {
                    return Err(Error::validation(
                        "corpus",
                        format!("herb `{}` anchored by two entities ({} and {})", ent.name, self.entities[prev].id, ent.id),
                    ));
                }
            }
        }
        self.herb_anchor = anchors;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("#entities\n");
        for e in &self.entities {
            let _ = writeln!(out, "{}\t{}\t{}", e.id, e.name, e.kind.as_str());
        }
        out.push_str("#relations\n");
        for r in &self.relations {
            let _ = writeln!(out, "{}\t{}", r.id, r.name);
        }
        out.push_str("#triples\n");
        for &(h, r, t) in &self.triples {
            let _ = writeln!(out, "{}\t{}\t{}", self.entities[h].id, self.relations[r].id, self.entities[t].id);
        }
        out
    }

    pub fn parse(text: &str, source: &str, vocab: Option<&Vocabulary>) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Entities,
            Relations,
            Triples,
        }
        let mut section = Section::None;
        let mut kg = KnowledgeGraph::default();
        let mut ent_index: HashMap<String, usize> = HashMap::new();
        let mut rel_index: HashMap<String, usize> = HashMap::new();
        let parse_err = |line: usize, message: String| Error::Parse { path: source.into(), line, message };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            match raw.trim() {
                "#entities" => {
                    section = Section::Entities;
                    continue;
                }
                "#relations" => {
                    section = Section::Relations;
                    continue;
                }
                "#triples" => {
                    section = Section::Triples;
                    continue;
                }
                _ => {}
            }
            let f: Vec<&str> = raw.split('\t').collect();
            match section {
                Section::None => return Err(parse_err(line, "content before `#entities` header".into())),
                Section::Entities => {
                    if f.len() != 3 {
                        return Err(parse_err(line, format!("entity line needs 3 fields, found {}", f.len())));
                    }
                    let kind = EntityKind::parse(f[2])
                        .ok_or_else(|| Error::validation("corpus", format!("{source}:{line}: unknown entity kind `{}`", f[2])))?;
                    if ent_index.insert(f[0].to_string(), kg.entities.len()).is_some() {
                        return Err(Error::validation("corpus", format!("{source}:{line}: duplicate entity id `{}`", f[0])));
                    }
                    kg.entities.push(Entity { id: f[0].into(), name: f[1].into(), kind });
                }
                Section::Relations => {
                    if f.len() != 2 {
                        return Err(parse_err(line, format!("relation line needs 2 fields, found {}", f.len())));
                    }
                    if rel_index.insert(f[0].to_string(), kg.relations.len()).is_some() {
                        return Err(Error::validation("corpus", format!("{source}:{line}: duplicate relation id `{}`", f[0])));
                    }
                    kg.relations.push(Relation { id: f[0].into(), name: f[1].into() });
                }
                Section::Triples => {
                    if f.len() != 3 {
                        return Err(parse_err(line, format!("triple line needs 3 fields, found {}", f.len())));
                    }
                    let dangling = |what: &str, id: &str| Error::validation("corpus", format!("{source}:{line}: dangling {what} `{id}`"));
                    let h = *ent_index.get(f[0]).ok_or_else(|| dangling("head entity", f[0]))?;
                    let r = *rel_index.get(f[1]).ok_or_else(|| dangling("relation", f[1]))?;
                    let t = *ent_index.get(f[2]).ok_or_else(|| dangling("tail entity", f[2]))?;
                    kg.triples.push((h, r, t));
                }
            }
        }
        if let Some(v) = vocab {
            kg.anchor_herbs(v)?;
        }
        Ok(kg)
    }
}

pub fn load_kg(path: &Path, vocab: Option<&Vocabulary>) -> Result<KnowledgeGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    KnowledgeGraph::parse(&text, &path.display().to_string(), vocab)
}

pub fn save_kg(kg: &KnowledgeGraph, path: &Path) -> Result<()> {
    fs::write(path, kg.to_text()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Monarch,
    Minister,
    AssistantEnvoy,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Monarch, Role::Minister, Role::AssistantEnvoy];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Monarch => "monarch",
            Role::Minister => "minister",
            Role::AssistantEnvoy => "assistant_envoy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Compatibility role per herb; total over the herb vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyLabels {
    pub roles: Vec<Role>,
    /// Herbs whose role came from a labels file rather than the default.
    pub labeled: Vec<bool>,
}

impl HierarchyLabels {
    pub const DEFAULT_ROLE: Role = Role::AssistantEnvoy;

    pub fn unlabeled(n_herbs: usize) -> Self {
        Self { roles: vec![Self::DEFAULT_ROLE; n_herbs], labeled: vec![false; n_herbs] }
    }

    pub fn role(&self, herb: usize) -> Role {
        self.roles[herb]
    }

    pub fn set(&mut self, herb: usize, role: Role) {
        self.roles[herb] = role;
        self.labeled[herb] = true;
    }

    pub fn parse(text: &str, source: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut labels = Self::unlabeled(vocab.n_herbs());
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line = i + 1;
            let (name, role) = raw
                .split_once('\t')
                .ok_or_else(|| Error::Parse { path: source.into(), line, message: "expected `herb_name<TAB>role`".into() })?;
            let role = Role::parse(role.trim())
                .ok_or_else(|| Error::validation("corpus", format!("{source}:{line}: unknown role `{role}`")))?;
            match vocab.herbs.get(name) {
                Some(h) => labels.set(h, role),
                None => log::warn!("{source}:{line}: labelled herb `{name}` is not in the vocabulary; ignored"),
            }
        }
        Ok(labels)
    }

    /// Only explicitly labelled herbs are written.
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for (h, (&role, &lab)) in self.roles.iter().zip(&self.labeled).enumerate() {
            if lab {
                let _ = writeln!(out, "{}\t{}", vocab.herbs.name(h), role.as_str());
            }
        }
        out
    }
}

pub fn load_labels(path: &Path, vocab: &Vocabulary) -> Result<HierarchyLabels> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    HierarchyLabels::parse(&text, &path.display().to_string(), vocab)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_symptoms: usize,
    pub n_herbs: usize,
    pub n_records: usize,
    pub zipf_exponent: f64,
    pub n_syndromes: usize,
    pub symptoms_per_syndrome: usize,
    pub herbs_per_syndrome: usize,
    /// Herbs added per record from the global popularity profile.
    pub extra_herbs: usize,
    /// Maximum unrelated symptoms added per record.
    pub noise_symptoms: usize,
    pub n_compounds: usize,
    pub with_profiles: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_symptoms: 40,
            n_herbs: 50,
            n_records: 1000,
            zipf_exponent: 1.2,
            n_syndromes: 8,
            symptoms_per_syndrome: 3,
            herbs_per_syndrome: 5,
            extra_herbs: 2,
            noise_symptoms: 2,
            n_compounds: 12,
            with_profiles: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(format!("infeasible synthetic config: {m}")));
        if self.n_syndromes == 0 || self.symptoms_per_syndrome == 0 || self.herbs_per_syndrome == 0 || self.n_records == 0 {
            return bad("syndrome, symptom, herb and record counts must be positive".into());
        }
        if self.herbs_per_syndrome > self.n_herbs {
            return bad(format!("herbs_per_syndrome {} > n_herbs {}", self.herbs_per_syndrome, self.n_herbs));
        }
        if self.n_syndromes * self.herbs_per_syndrome > self.n_herbs {
            return bad(format!("{} syndromes x {} herbs exceed {} herbs", self.n_syndromes, self.herbs_per_syndrome, self.n_herbs));
        }
        if self.n_syndromes * self.symptoms_per_syndrome > self.n_symptoms {
            return bad(format!("{} syndromes x {} symptoms exceed {} symptoms", self.n_syndromes, self.symptoms_per_syndrome, self.n_symptoms));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad(format!("zipf exponent must be finite and >= 0, got {}", self.zipf_exponent));
        }
        if self.n_compounds == 0 {
            return bad("n_compounds must be positive".into());
        }
        Ok(())
    }
}

/// One planted symptom-pattern -> herb-template rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSyndrome {
    pub symptoms: Vec<usize>,
    pub herbs: Vec<usize>,
    pub monarch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub kg: KnowledgeGraph,
    pub labels: HierarchyLabels,
    pub syndromes: Vec<PlantedSyndrome>,
}

pub fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (0..n).map(|i| ((i + 1) as f64).powf(-exponent)).collect()
}

fn sample_weighted(weights: &[f64], total: f64, rng: &mut rng::Rng) -> usize {
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Generates a corpus with planted syndrome templates and Zipf herb popularity.
///
/// Syndrome `k` owns the contiguous herb block `[k*h, (k+1)*h)`; the first herb of
/// the block is its monarch, the second its minister, the rest assistant/envoy.
/// Herb ids double as popularity ranks.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = rng::rng_for(seed, &[rng::tag("synth")]);
    let (n, m, k) = (config.n_symptoms, config.n_herbs, config.n_syndromes);

    let mut sym_pool: Vec<usize> = (0..n).collect();
    sym_pool.shuffle(&mut rng);
    let syndromes: Vec<PlantedSyndrome> = (0..k)
        .map(|s| {
            let mut symptoms = sym_pool[s * config.symptoms_per_syndrome..(s + 1) * config.symptoms_per_syndrome].to_vec();
            symptoms.sort_unstable();
            let herbs: Vec<usize> = (s * config.herbs_per_syndrome..(s + 1) * config.herbs_per_syndrome).collect();
            PlantedSyndrome { monarch: herbs[0], symptoms, herbs }
        })
        .collect();

    let mut vocab = Vocabulary::default();
    for i in 0..n {
        vocab.symptoms.intern(&format!("S{i:03}"));
    }
    for i in 0..m {
        vocab.herbs.intern(&format!("H{i:03}"));
    }

    let syn_w = zipf_weights(k, config.zipf_exponent);
    let syn_total: f64 = syn_w.iter().sum();
    let herb_w = zipf_weights(m, config.zipf_exponent);
    let herb_total: f64 = herb_w.iter().sum();
    let histories = ["hypertension", "diabetes", "asthma", "gastritis"];

    let mut records = Vec::with_capacity(config.n_records);
    for r in 0..config.n_records {
        let s = sample_weighted(&syn_w, syn_total, &mut rng);
        let syn = &syndromes[s];
        let profile = config.with_profiles.then(|| {
            let gender = if rng.random::<bool>() { Gender::Male } else { Gender::Female };
            let age = rng.random_range(18..90) as f64;
            let height = (rng.random_range(150.0..190.0f64) * 10.0).round() / 10.0;
            let weight = (rng.random_range(45.0..100.0f64) * 10.0).round() / 10.0;
            let history = histories.iter().filter(|_| rng.random::<f64>() < 0.15).map(|h| h.to_string()).collect();
            PatientProfile::new(gender, age, Some(height), Some(weight), history)
        });

        let mut symptoms: Vec<usize> = syn.symptoms.clone();
        let n_noise = if config.noise_symptoms > 0 { rng.random_range(0..=config.noise_symptoms) } else { 0 };
        for _ in 0..n_noise {
            let x = rng.random_range(0..n);
            if !symptoms.contains(&x) {
                symptoms.push(x);
            }
        }

        // With profiles, the last template herb is reserved for elderly patients.
        let elderly = profile.as_ref().map(|p| p.age_years >= 60.0);
        let mut herbs: Vec<usize> = Vec::new();
        for (pos, &h) in syn.herbs.iter().enumerate() {
            let gated = pos + 1 == syn.herbs.len() && syn.herbs.len() >= 3;
            if gated && elderly == Some(false) {
                continue;
            }
            herbs.push(h);
        }
        for _ in 0..config.extra_herbs {
            let h = sample_weighted(&herb_w, herb_total, &mut rng);
            if !herbs.contains(&h) {
                herbs.push(h);
            }
        }
        for other in &syndromes {
            if other.symptoms.iter().all(|x| symptoms.contains(x)) && !herbs.contains(&other.monarch) {
                herbs.push(other.monarch);
            }
        }
        records.push(PrescriptionRecord { record_id: format!("p{r:05}"), profile, symptoms, herbs });
    }

    let mut labels = HierarchyLabels::unlabeled(m);
    for syn in &syndromes {
        for (pos, &h) in syn.herbs.iter().enumerate() {
            let role = match pos {
                0 => Role::Monarch,
                1 => Role::Minister,
                _ => Role::AssistantEnvoy,
            };
            labels.set(h, role);
        }
    }

    let mut kg = KnowledgeGraph::default();
    for h in 0..m {
        kg.entities.push(Entity { id: format!("herb:{h}"), name: vocab.herbs.name(h).to_string(), kind: EntityKind::Herb });
    }
    let eff0 = kg.entities.len();
    for s in 0..k {
        kg.entities.push(Entity { id: format!("eff:{s}"), name: format!("efficacy_{s}"), kind: EntityKind::Efficacy });
    }
    let dis0 = kg.entities.len();
    for s in 0..k {
        kg.entities.push(Entity { id: format!("dis:{s}"), name: format!("disease_{s}"), kind: EntityKind::Disease });
    }
    let cpd0 = kg.entities.len();
    for c in 0..config.n_compounds {
        kg.entities.push(Entity { id: format!("cpd:{c}"), name: format!("compound_{c}"), kind: EntityKind::Compound });
    }
    for (id, name) in [("r:eff", "has_efficacy"), ("r:treat", "treats"), ("r:cpd", "contains")] {
        kg.relations.push(Relation { id: id.into(), name: name.into() });
    }
    for (s, syn) in syndromes.iter().enumerate() {
        for &h in &syn.herbs {
            kg.triples.push((h, 0, eff0 + s));
            kg.triples.push((h, 2, cpd0 + s % config.n_compounds));
        }
        kg.triples.push((eff0 + s, 1, dis0 + s));
    }
    for h in 0..m {
        let c = rng.random_range(0..config.n_compounds);
        kg.triples.push((h, 2, cpd0 + c));
    }
    kg.anchor_herbs(&vocab)?;

    Ok(SynthCorpus { corpus: Corpus { records, vocab }, kg, labels, syndromes })
}

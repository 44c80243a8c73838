use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use herbrec::corpus::{
    format_prescriptions, kernel_filter, load_kg, load_labels, load_prescriptions, save_kg, save_prescriptions, split_dataset, synth_generate, Corpus,
    CorpusFormat, Gender, HierarchyLabels, KernelMode, KnowledgeGraph, PatientProfile, PrescriptionRecord, Vocabulary,
};
use herbrec::error::{Error, Result};
use herbrec::eval::{ablation_run, herb_frequency, longtail_groups, split_hash, AblationOptions, MetricsReport};
use herbrec::recommender::{fit, EpochLog, ModelArtifact, Phase, Recommendation};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::report::{self, Chart, Series};

fn invalid(message: impl Into<String>) -> Error {
    Error::validation("cli", message)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| invalid(format!("{flag} is required")))
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn json_pretty<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

struct Inputs {
    corpus: Corpus,
    kg: KnowledgeGraph,
    labels: HierarchyLabels,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let corpus = load_prescriptions(required(&cfg.run.dataset, "--dataset")?, cfg.run.format)?;
    let kg = match &cfg.run.kg {
        Some(p) => load_kg(p, Some(&corpus.vocab))?,
        None => {
            log::warn!("no --kg given; knowledge conditioning is empty");
            KnowledgeGraph::default()
        }
    };
    let labels = match &cfg.run.labels {
        Some(p) => load_labels(p, &corpus.vocab)?,
        None => HierarchyLabels::unlabeled(corpus.vocab.n_herbs()),
    };
    Ok(Inputs { corpus, kg, labels })
}

fn filtered(cfg: &RunConfig, records: &[PrescriptionRecord]) -> Result<Vec<PrescriptionRecord>> {
    if cfg.run.kernel_min_count == 0 {
        return Ok(records.to_vec());
    }
    let mode = if cfg.run.kernel_one_pass { KernelMode::OnePass } else { KernelMode::Fixpoint };
    let kept = kernel_filter(records, cfg.run.kernel_min_count, mode)?;
    log::info!("kernel filter kept {} of {} records", kept.len(), records.len());
    Ok(kept)
}

#[derive(Serialize, Deserialize)]
struct PlantedRule {
    symptoms: Vec<String>,
    herbs: Vec<String>,
    monarch: String,
}

#[derive(Serialize, Deserialize)]
struct SynthManifest {
    seed: u64,
    format: CorpusFormat,
    config: herbrec::corpus::SynthConfig,
    files: Vec<String>,
    rules: Vec<PlantedRule>,
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.run.out, "--out")?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let s = synth_generate(&cfg.synth, cfg.model.seed)?;
    let v = &s.corpus.vocab;
    save_prescriptions(&s.corpus, &out.join("corpus.tsv"), cfg.run.format)?;
    save_kg(&s.kg, &out.join("kg.tsv"))?;
    write_file(&out.join("labels.tsv"), s.labels.to_text(v))?;
    let names = |ids: &[usize], idx: &herbrec::corpus::NameIndex| ids.iter().map(|&i| idx.name(i).to_string()).collect::<Vec<_>>();
    let manifest = SynthManifest {
        seed: cfg.model.seed,
        format: cfg.run.format,
        config: cfg.synth.clone(),
        files: vec!["corpus.tsv".into(), "kg.tsv".into(), "labels.tsv".into()],
        rules: s
            .syndromes
            .iter()
            .map(|r| PlantedRule { symptoms: names(&r.symptoms, &v.symptoms), herbs: names(&r.herbs, &v.herbs), monarch: v.herbs.name(r.monarch).to_string() })
            .collect(),
    };
    write_file(&out.join("manifest.json"), json_pretty(&manifest)?)?;
    println!("wrote {} records, {} triples to {}", s.corpus.records.len(), s.kg.triples.len(), out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SplitManifest {
    format: CorpusFormat,
    seed: u64,
    train: usize,
    test: usize,
    hash: String,
}

const SPLIT_DIR: &str = "split";

pub fn train(cfg: &RunConfig) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let dir = required(&cfg.run.artifact, "--artifact")?;
    let records = filtered(cfg, &inputs.corpus.records)?;
    let (train, test) = if cfg.run.train_fraction < 1.0 { split_dataset(&records, cfg.run.train_fraction, cfg.model.seed)? } else { (records, Vec::new()) };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = cfg.run.log.clone().unwrap_or_else(|| dir.join("train_log.jsonl"));
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut io_error = None;
    let (artifact, _) = fit(&train, &inputs.corpus.vocab, &inputs.kg, &inputs.labels, &cfg.model, &mut |entry: &EpochLog| {
        let line = serde_json::to_string(entry).expect("log entries serialize");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(Error::io(&log_path, e));
    }
    artifact.save(dir)?;
    let split = dir.join(SPLIT_DIR);
    let vocab = inputs.corpus.vocab.clone();
    write_file(&split.join("train.tsv"), format_prescriptions(&Corpus { records: train.clone(), vocab: vocab.clone() }, cfg.run.format))?;
    write_file(&split.join("test.tsv"), format_prescriptions(&Corpus { records: test.clone(), vocab }, cfg.run.format))?;
    let manifest = SplitManifest { format: cfg.run.format, seed: cfg.model.seed, train: train.len(), test: test.len(), hash: split_hash(&train, &test) };
    write_file(&split.join("manifest.json"), json_pretty(&manifest)?)?;
    println!("trained on {} records ({} held out); artifact in {}", train.len(), test.len(), dir.display());
    Ok(())
}

/// Re-expresses records in `to`'s ids; names unknown to `to` are a mismatch.
fn remap(records: &[PrescriptionRecord], from: &Vocabulary, to: &Vocabulary) -> Result<Vec<PrescriptionRecord>> {
    let mut unknown = BTreeSet::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let mut map = |ids: &[usize], src: &herbrec::corpus::NameIndex, dst: &herbrec::corpus::NameIndex, kind: &str| -> Vec<usize> {
            ids.iter()
                .filter_map(|&i| {
                    let name = src.name(i);
                    let hit = dst.get(name);
                    if hit.is_none() {
                        unknown.insert(format!("{kind} `{name}`"));
                    }
                    hit
                })
                .collect()
        };
        let symptoms = map(&r.symptoms, &from.symptoms, &to.symptoms, "symptom");
        let herbs = map(&r.herbs, &from.herbs, &to.herbs, "herb");
        out.push(PrescriptionRecord { record_id: r.record_id.clone(), profile: r.profile.clone(), symptoms, herbs });
    }
    if !unknown.is_empty() {
        let list: Vec<String> = unknown.into_iter().collect();
        return Err(invalid(format!("vocabulary mismatch between dataset and artifact; unknown to the artifact: {}", list.join(", "))));
    }
    Ok(out)
}

fn split_records(dir: &Path, which: &str, artifact: &ModelArtifact) -> Result<Option<Vec<PrescriptionRecord>>> {
    let split = dir.join(SPLIT_DIR);
    let manifest_path = split.join("manifest.json");
    if !manifest_path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: SplitManifest = serde_json::from_str(&text)?;
    let c = load_prescriptions(&split.join(format!("{which}.tsv")), m.format)?;
    remap(&c.records, &c.vocab, &artifact.vocab).map(Some)
}

fn evaluation_inputs(cfg: &RunConfig, dir: &Path, artifact: &ModelArtifact) -> Result<(Vec<PrescriptionRecord>, Option<Vec<PrescriptionRecord>>)> {
    let test = match &cfg.run.dataset {
        Some(p) => {
            let c = load_prescriptions(p, cfg.run.format)?;
            remap(&c.records, &c.vocab, &artifact.vocab)?
        }
        None => split_records(dir, "test", artifact)?.ok_or_else(|| invalid("no --dataset given and the artifact has no held-out split"))?,
    };
    Ok((test, split_records(dir, "train", artifact)?))
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let dir = required(&cfg.run.artifact, "--artifact")?;
    let artifact = ModelArtifact::load(dir)?;
    let (test, train) = evaluation_inputs(cfg, dir, &artifact)?;
    let groups = match &train {
        Some(t) => Some(longtail_groups(t, artifact.vocab.n_herbs())?),
        None => {
            log::warn!("no training split in the artifact; skipping long-tail groups");
            None
        }
    };
    let report = artifact.evaluate(&test, &cfg.run.ks, groups.as_ref(), cfg.model.exec)?;
    let out = cfg.run.out.clone().unwrap_or_else(|| dir.join("eval"));
    write_file(&out.join("metrics.json"), json_pretty(&report)?)?;
    write_file(&out.join("metrics.csv"), report.to_csv())?;
    for m in &report.at {
        println!("P@{k}={:.4} R@{k}={:.4} N@{k}={:.4}", m.precision, m.recall, m.ndcg, k = m.k);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
}

pub struct ProfileArgs {
    pub gender: Option<Gender>,
    pub age: Option<f64>,
    pub height: Option<f64>,
    pub weight: Option<f64>,
    pub history: Vec<String>,
}

impl ProfileArgs {
    fn profile(&self) -> Result<Option<PatientProfile>> {
        let any = self.gender.is_some() || self.height.is_some() || self.weight.is_some() || !self.history.is_empty();
        match self.age {
            Some(age) if age.is_finite() && age >= 0.0 => Ok(Some(PatientProfile::new(
                self.gender.unwrap_or(Gender::Unknown),
                age,
                self.height,
                self.weight,
                self.history.iter().cloned().collect(),
            ))),
            Some(age) => Err(invalid(format!("age must be a non-negative number, got {age}"))),
            None if any => Err(invalid("--age is required when other profile fields are given")),
            None => Ok(None),
        }
    }
}

pub fn format_recommendations(recs: &[Recommendation], format: OutputFormat) -> Result<String> {
    Ok(match format {
        OutputFormat::Json => serde_json::to_string_pretty(recs)? + "\n",
        OutputFormat::Text => {
            let mut s = String::from("rank\therb\tscore\trole\n");
            for r in recs {
                s.push_str(&format!("{}\t{}\t{:.6}\t{}\n", r.rank, r.name, r.score, r.role.as_str()));
            }
            s
        }
    })
}

pub fn recommend(cfg: &RunConfig, symptoms: &[String], profile: &ProfileArgs, format: OutputFormat) -> Result<()> {
    let dir = required(&cfg.run.artifact, "--artifact")?;
    let artifact = ModelArtifact::load(dir)?;
    let recs = artifact.predict_topk(profile.profile()?.as_ref(), symptoms, cfg.run.k)?;
    print!("{}", format_recommendations(&recs, format)?);
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let records = filtered(cfg, &inputs.corpus.records)?;
    let opts = AblationOptions { ks: cfg.run.ks.clone(), concurrent: cfg.run.concurrent_variants };
    let table = ablation_run(&records, &inputs.corpus.vocab, &inputs.kg, &inputs.labels, &cfg.model, &cfg.run.variants, &opts)?;
    let out = cfg.run.out.clone().unwrap_or_else(|| PathBuf::from("ablation"));
    write_file(&out.join("ablation.csv"), table.to_csv())?;
    write_file(&out.join("ablation.json"), json_pretty(&table)?)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn frequency_chart(stem: &str, title: &str, counts: &[usize], names: &[String]) -> Chart {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(counts[i]), i));
    let series = Series { name: "frequency".into(), values: order.iter().map(|&i| counts[i] as f64).collect() };
    let index: Vec<String> = order.iter().map(|&i| names[i].clone()).collect();
    Chart {
        stem: stem.into(),
        title: title.into(),
        svg: report::bar_chart(title, "rank by frequency", &series),
        csv: report::series_csv("name", &index, std::slice::from_ref(&series)),
    }
}

fn loss_chart(path: &Path) -> Result<Option<Chart>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let logs: Vec<EpochLog> = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
    let joint: Vec<&EpochLog> = logs.iter().filter(|l| l.phase == Phase::Joint).collect();
    if joint.is_empty() {
        return Ok(None);
    }
    let pick = |name: &str, f: fn(&EpochLog) -> Option<f64>| Series { name: name.into(), values: joint.iter().map(|l| f(l).unwrap_or(f64::NAN)).collect() };
    let series = vec![
        pick("L_p", |l| l.prompt),
        pick("L_BCE", |l| l.bce),
        pick("L_cl", |l| l.contrastive),
        pick("L_TCM_DM", |l| l.diffusion),
        pick("L_result", |l| l.result),
    ];
    let index: Vec<String> = joint.iter().map(|l| l.epoch.to_string()).collect();
    Ok(Some(Chart {
        stem: "loss_curves".into(),
        title: "Training loss components".into(),
        svg: report::line_chart("Training loss components", "epoch", &series),
        csv: report::series_csv("epoch", &index, &series),
    }))
}

fn group_chart(report: &MetricsReport) -> Chart {
    let categories: Vec<String> = report.groups.iter().map(|g| format!("group {}", g.group)).collect();
    let series: Vec<Series> = report.at.iter().enumerate().map(|(j, m)| Series { name: format!("R@{}", m.k), values: report.groups.iter().map(|g| g.at[j].recall).collect() }).collect();
    Chart {
        stem: "group_recall".into(),
        title: "Recall by herb-frequency group (1 = rarest)".into(),
        svg: report::grouped_bar_chart("Recall by herb-frequency group (1 = rarest)", &categories, &series),
        csv: report::series_csv("group", &categories, &series),
    }
}

pub fn report(cfg: &RunConfig) -> Result<()> {
    let dir = required(&cfg.run.artifact, "--artifact")?;
    let artifact = ModelArtifact::load(dir)?;
    let out = cfg.run.out.clone().unwrap_or_else(|| dir.join("report"));
    let mut charts = Vec::new();
    let mut warnings = Vec::new();

    let train = match &cfg.run.dataset {
        Some(p) => {
            let c = load_prescriptions(p, cfg.run.format)?;
            Some(remap(&c.records, &c.vocab, &artifact.vocab)?)
        }
        None => split_records(dir, "train", &artifact)?,
    };
    match &train {
        Some(t) => {
            let v = &artifact.vocab;
            charts.push(frequency_chart("herb_frequency", "Herb frequency", &herb_frequency(t, v.n_herbs()), v.herbs.names()));
            let mut sym = vec![0usize; v.n_symptoms()];
            t.iter().flat_map(|r| &r.symptoms).for_each(|&s| sym[s] += 1);
            charts.push(frequency_chart("symptom_frequency", "Symptom frequency", &sym, v.symptoms.names()));
        }
        None => warnings.push("no training records found; frequency histograms skipped".into()),
    }

    let log_path = cfg.run.log.clone().unwrap_or_else(|| dir.join("train_log.jsonl"));
    match loss_chart(&log_path)? {
        Some(c) => charts.push(c),
        None => warnings.push(format!("no training log at {}; loss curves skipped", log_path.display())),
    }

    match (&train, split_records(dir, "test", &artifact)?) {
        (Some(t), Some(test)) if !test.is_empty() => {
            let groups = longtail_groups(t, artifact.vocab.n_herbs())?;
            let r = artifact.evaluate(&test, &cfg.run.ks, Some(&groups), cfg.model.exec)?;
            charts.push(group_chart(&r));
        }
        _ => warnings.push("no held-out split in the artifact; per-group metrics skipped".into()),
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    report::write_report(&out, &charts, &warnings)?;
    println!("report with {} charts in {}", charts.len(), out.display());
    Ok(())
}

pub fn show_config(cfg: &RunConfig) -> Result<()> {
    print!("{}", json_pretty(&cfg.to_flat())?);
    Ok(())
}

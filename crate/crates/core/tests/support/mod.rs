//! Fixtures shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod grad_cases;
pub mod identities;
pub mod oracles;

use herbrec::corpus::{synth_generate, SynthConfig, SynthCorpus};
use herbrec::par::Exec;
use herbrec::recommender::ModelConfig;

/// Twelve records over 10 symptoms and 15 herbs.
pub fn micro_corpus() -> SynthCorpus {
    let cfg = SynthConfig {
        n_symptoms: 10,
        n_herbs: 15,
        n_records: 12,
        n_syndromes: 3,
        symptoms_per_syndrome: 2,
        herbs_per_syndrome: 4,
        extra_herbs: 1,
        noise_symptoms: 1,
        n_compounds: 4,
        ..SynthConfig::default()
    };
    synth_generate(&cfg, 3).expect("micro corpus")
}

/// A configuration small enough for a few seconds of training.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        batch_size: 4,
        learning_rate: 1e-2,
        syndrome_heads: 2,
        conv_widths: vec![8, 4],
        diffusion_steps: 6,
        encoder_layers: 1,
        encoder_heads: 2,
        max_len: 16,
        pretrain_epochs: 1,
        epochs: 2,
        cooccurrence_threshold: 1,
        exec: Exec::Sequential,
        ..ModelConfig::default()
    }
}

/// Forty records, enough for a non-trivial 9:1 split.
pub fn ablation_corpus() -> SynthCorpus {
    let cfg = SynthConfig {
        n_symptoms: 10,
        n_herbs: 15,
        n_records: 40,
        n_syndromes: 3,
        symptoms_per_syndrome: 2,
        herbs_per_syndrome: 4,
        extra_herbs: 1,
        noise_symptoms: 1,
        n_compounds: 4,
        ..SynthConfig::default()
    };
    synth_generate(&cfg, 5).expect("ablation corpus")
}

/// Checks the header, one row per expected model and metric values in `[0, 1]`.
pub fn validate_ablation_csv(csv: &str, models: &[&str], ks: &[usize]) -> Result<(), String> {
    let mut lines = csv.lines();
    let mut header = vec!["model".to_string()];
    for p in ["P", "R", "N"] {
        header.extend(ks.iter().map(|k| format!("{p}@{k}")));
    }
    let got = lines.next().ok_or("empty CSV")?;
    if got != header.join(",") {
        return Err(format!("header `{got}`"));
    }
    let rows: Vec<&str> = lines.collect();
    if rows.len() != models.len() {
        return Err(format!("{} rows for {} models", rows.len(), models.len()));
    }
    for (row, model) in rows.iter().zip(models) {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != header.len() || fields[0] != *model {
            return Err(format!("malformed row `{row}`"));
        }
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| format!("non-numeric field `{f}`"))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("metric {v} outside [0, 1]"));
            }
        }
    }
    if !csv.ends_with('\n') {
        return Err("missing final newline".into());
    }
    Ok(())
}

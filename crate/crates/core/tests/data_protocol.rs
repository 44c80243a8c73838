//! Corpus preparation: kernel filtering, splitting, age buckets and file round trips.

mod support;

use std::collections::BTreeSet;

use herbrec::corpus::{
    age_bucket, format_prescriptions, kernel_filter, load_kg, load_prescriptions, parse_prescriptions, save_kg, save_prescriptions, split_dataset, synth_generate, CorpusFormat,
    HierarchyLabels, KernelMode, KnowledgeGraph, SynthConfig,
};

use support::oracles;

fn corpus(seed: u64, records: usize) -> herbrec::corpus::SynthCorpus {
    let cfg = SynthConfig { n_records: records, n_symptoms: 30, n_herbs: 40, n_syndromes: 6, noise_symptoms: 3, extra_herbs: 3, ..SynthConfig::default() };
    synth_generate(&cfg, seed).unwrap()
}

#[test]
fn kernel_fixpoint_matches_brute_force() {
    for seed in 0..4 {
        let d = corpus(seed, 200);
        for min_count in [2, 5, 10] {
            let got = kernel_filter(&d.corpus.records, min_count, KernelMode::Fixpoint).unwrap();
            assert_eq!(got, oracles::brute_force_kernel(&d.corpus.records, min_count), "seed {seed} min_count {min_count}");
            assert_eq!(kernel_filter(&got, min_count, KernelMode::Fixpoint).unwrap(), got);
        }
    }
}

#[test]
fn one_pass_stops_early() {
    let d = corpus(1, 200);
    let once = kernel_filter(&d.corpus.records, 10, KernelMode::OnePass).unwrap();
    let fix = kernel_filter(&d.corpus.records, 10, KernelMode::Fixpoint).unwrap();
    assert!(once.len() >= fix.len());
}

#[test]
fn split_is_exactly_nine_to_one() {
    let d = corpus(2, 500);
    let (train, test) = split_dataset(&d.corpus.records, 0.9, 11).unwrap();
    assert_eq!((train.len(), test.len()), (450, 50));
    let ids = |rs: &[herbrec::corpus::PrescriptionRecord]| rs.iter().map(|r| r.record_id.clone()).collect::<BTreeSet<_>>();
    assert!(ids(&train).is_disjoint(&ids(&test)));
    assert_eq!(ids(&train).len() + ids(&test).len(), 500);
    assert_eq!(split_dataset(&d.corpus.records, 0.9, 11).unwrap(), (train, test));
}

#[test]
fn age_buckets_are_five_year_floors() {
    for tenth in 0..1200 {
        let age = tenth as f64 / 10.0;
        assert_eq!(age_bucket(age), (age / 5.0).floor() as u32, "age {age}");
    }
    let c = parse_prescriptions("p1\tmale\t37\t\t\t\tcough\tginger\n", CorpusFormat::ClinicalTsv, "inline").unwrap();
    assert_eq!(c.records[0].profile.as_ref().unwrap().age_bucket, 7);
}

#[test]
fn corpus_round_trips() {
    let d = corpus(3, 120);
    let dir = tempfile::tempdir().unwrap();
    for format in [CorpusFormat::PublicTsv, CorpusFormat::ClinicalTsv] {
        let path = dir.path().join("c.tsv");
        save_prescriptions(&d.corpus, &path, format).unwrap();
        let back = load_prescriptions(&path, format).unwrap();
        assert_eq!(format_prescriptions(&back, format), format_prescriptions(&d.corpus, format));
        let again = parse_prescriptions(&format_prescriptions(&back, format), format, "again").unwrap();
        assert_eq!(again, back);
    }
    let clinical = parse_prescriptions(&format_prescriptions(&d.corpus, CorpusFormat::ClinicalTsv), CorpusFormat::ClinicalTsv, "x").unwrap();
    // The parser numbers names in first-seen order, so compare by name.
    let named = |c: &herbrec::corpus::Corpus| {
        c.records
            .iter()
            .map(|r| {
                let s: Vec<&str> = r.symptoms.iter().map(|&i| c.vocab.symptoms.name(i)).collect();
                let h: Vec<&str> = r.herbs.iter().map(|&i| c.vocab.herbs.name(i)).collect();
                (r.record_id.clone(), r.profile.clone(), s.join(";"), h.join(";"))
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(named(&clinical), named(&d.corpus));
}

#[test]
fn knowledge_graph_and_labels_round_trip() {
    let d = corpus(4, 60);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kg.tsv");
    save_kg(&d.kg, &path).unwrap();
    let back: KnowledgeGraph = load_kg(&path, Some(&d.corpus.vocab)).unwrap();
    assert_eq!(back, d.kg);
    let labels = HierarchyLabels::parse(&d.labels.to_text(&d.corpus.vocab), "labels", &d.corpus.vocab).unwrap();
    assert_eq!(labels, d.labels);
}

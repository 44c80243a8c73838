//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod support;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use herbrec::corpus::{
    age_bucket, format_prescriptions, kernel_filter, load_kg, parse_prescriptions, save_kg, split_dataset, synth_generate, CorpusFormat, HierarchyLabels, KernelMode, SynthConfig,
};
use herbrec::dmsh::{self, DiffusionParam};
use herbrec::eval::{ablation_run, longtail_groups, metrics_at_k, AblationOptions, DEFAULT_KS};
use herbrec::par::Exec;
use herbrec::recommender::{fit, ModelConfig, Variant};
use herbrec::rng::rng_for;
use herbrec::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use support::{grad_cases, identities, oracles};

type Outcome = Result<String, String>;

struct Criterion {
    id: u8,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradients() -> Outcome {
    let cases = grad_cases::all();
    let (mut worst, mut worst_name, mut coords) = (0.0f64, "", 0usize);
    for case in &cases {
        let report = case.run().map_err(|e| format!("{}: {e}", case.name))?;
        coords += report.checked;
        if report.max_rel_error > worst {
            (worst, worst_name) = (report.max_rel_error, case.name);
        }
        check(report.max_rel_error < grad_cases::TOLERANCE, format!("{}: rel {:.3e} at {:?}", case.name, report.max_rel_error, report.worst))?;
    }
    Ok(format!("{} ops, {coords} coords, max rel {worst:.2e} ({worst_name})", cases.len()))
}

fn diffusion() -> Outcome {
    let schedule = dmsh::make_schedule(50, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let mut min_p = 1.0f64;
    for t in [1, 10, 50] {
        let (chained, closed) = oracles::chained_and_closed(&schedule, t, 1.0, 10_000, 7);
        let (d, p) = oracles::ks_two_sample(&chained, &closed);
        check(p > 0.01, format!("t={t}: KS D={d:.4} p={p:.4}"))?;
        min_p = min_p.min(p);
    }
    let x0 = Tensor::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1e-3, -7.25]);
    for t in 1..=50 {
        let xt = dmsh::q_sample(&x0, t, &schedule, &Tensor::zeros(3, 2)).map_err(|e| e.to_string())?;
        let s = schedule.alpha_bar[t - 1].sqrt();
        check(xt.data().iter().zip(x0.data()).all(|(a, b)| a.to_bits() == (s * b).to_bits()), format!("ε=0 not bit-exact at t={t}"))?;
    }
    let mut worst = 0.0f64;
    for param in [DiffusionParam::X0, DiffusionParam::EpsLiteral] {
        let err = oracles::oracle_reconstruction_error(50, param, 5);
        check(err < 1e-3, format!("{param:?}: oracle error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("min KS p {min_p:.3}, ε=0 bit-exact, oracle error {worst:.1e}"))
}

fn metrics() -> Outcome {
    let mut r = rng_for(8, &[]);
    for i in 0..1000 {
        let n = r.random_range(1..40usize);
        let mut ranked: Vec<usize> = (0..n).collect();
        ranked.shuffle(&mut r);
        let truth: BTreeSet<usize> = (0..r.random_range(1..=n)).map(|_| r.random_range(0..n)).collect();
        let k = r.random_range(1..=n + 5);
        let got = metrics_at_k(&ranked, &truth, k).map_err(|e| e.to_string())?;
        check(got == oracles::brute_force_metrics(&ranked, &truth, k), format!("instance {i}: {got:?}"))?;
    }
    let worked = metrics_at_k(&[1, 9, 2, 8, 7], &BTreeSet::from([1, 2]), 5).map_err(|e| e.to_string())?;
    check((worked.ndcg - 0.9197).abs() <= 1e-4, format!("worked NDCG {}", worked.ndcg))?;
    Ok(format!("1000 instances exact, worked NDCG {:.4}", worked.ndcg))
}

fn structure() -> Outcome {
    let n = 1000;
    identities::run(n, identities::fusion_input(), identities::symptom_fusion).map_err(|e| format!("symptom fusion: {e}"))?;
    identities::run(n, identities::composition_input(), identities::monarch_passthrough).map_err(|e| format!("monarch passthrough: {e}"))?;
    identities::run(n, identities::herb_repr_input(), identities::herb_composition).map_err(|e| format!("herb composition: {e}"))?;
    identities::run(n, identities::loss_input(), identities::loss_decomposition).map_err(|e| format!("loss decomposition: {e}"))?;
    Ok(format!("4 identities x {n} cases within {:e}", identities::EXACT))
}

fn overfit() -> Outcome {
    let sc = SynthConfig {
        n_symptoms: 10,
        n_herbs: 15,
        n_records: 20,
        n_syndromes: 3,
        symptoms_per_syndrome: 3,
        herbs_per_syndrome: 5,
        extra_herbs: 1,
        noise_symptoms: 1,
        n_compounds: 4,
        ..SynthConfig::default()
    };
    let d = synth_generate(&sc, 0).map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        dim: 16,
        batch_size: 20,
        learning_rate: 1e-2,
        conv_widths: vec![16, 8],
        diffusion_steps: 10,
        encoder_layers: 1,
        max_len: 24,
        pretrain_epochs: 20,
        epochs: 200,
        cooccurrence_threshold: 1,
        exec: Exec::Sequential,
        ..ModelConfig::default()
    };
    let (a, _) = fit(&d.corpus.records, &d.corpus.vocab, &d.kg, &d.labels, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
    let report = a.evaluate(&d.corpus.records, &DEFAULT_KS, None, Exec::Sequential).map_err(|e| e.to_string())?;
    let recall = report.get(20).ok_or("no @20 row")?.recall;
    check(recall >= 0.95, format!("train R@20 {recall:.3}"))?;
    for s in &d.syndromes {
        let names: Vec<&str> = s.symptoms.iter().map(|&x| d.corpus.vocab.symptoms.name(x)).collect();
        let top = a.predict_topk(None, &names, 5).map_err(|e| e.to_string())?;
        check(top.iter().any(|r| r.herb == s.monarch), format!("monarch {} missing from top 5 for {names:?}", s.monarch))?;
    }
    Ok(format!("train R@20 {recall:.3}, {} monarchs in top 5", d.syndromes.len()))
}

fn longtail() -> Outcome {
    let sc = SynthConfig {
        n_symptoms: 60,
        n_herbs: 100,
        n_records: 5000,
        n_syndromes: 20,
        symptoms_per_syndrome: 3,
        herbs_per_syndrome: 5,
        extra_herbs: 1,
        zipf_exponent: 1.2,
        ..SynthConfig::default()
    };
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..3u64 {
        let d = synth_generate(&sc, seed).map_err(|e| e.to_string())?;
        let (train, test) = split_dataset(&d.corpus.records, 0.9, seed).map_err(|e| e.to_string())?;
        let groups = longtail_groups(&train, 100).map_err(|e| e.to_string())?;
        let mut tail = Vec::new();
        for variant in [Variant::Full, Variant::NoHgsn] {
            let cfg = ModelConfig {
                dim: 16,
                batch_size: 256,
                learning_rate: 5e-3,
                conv_widths: vec![16, 8],
                diffusion_steps: 10,
                encoder_layers: 1,
                max_len: 24,
                pretrain_epochs: 1,
                epochs: 15,
                cooccurrence_threshold: 10,
                variant,
                seed,
                ..ModelConfig::default()
            };
            let (a, _) = fit(&train, &d.corpus.vocab, &d.kg, &d.labels, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
            let r = a.evaluate(&test, &DEFAULT_KS, Some(&groups), Exec::Parallel).map_err(|e| e.to_string())?;
            let g = r.group(1).ok_or("no tail group")?;
            tail.push(g.at.iter().find(|m| m.k == 20).ok_or("no @20 row")?.recall);
        }
        if tail[0] >= tail[1] {
            wins += 1;
        }
        detail.push(format!("seed {seed}: {:.3} vs {:.3}", tail[0], tail[1]));
    }
    let detail = format!("tail R@20 full vs no_hgsn, {}", detail.join("; "));
    check(wins >= 2, format!("{wins}/3 seeds; {detail}"))?;
    Ok(format!("{wins}/3 seeds; {detail}"))
}

fn ablation() -> Outcome {
    let d = support::ablation_corpus();
    let cfg = support::micro_config();
    let run = || {
        ablation_run(&d.corpus.records, &d.corpus.vocab, &d.kg, &d.labels, &cfg, &Variant::ALL, &AblationOptions::default())
            .map(|t| t.to_csv())
            .map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    let names: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
    support::validate_ablation_csv(&a, &names, &DEFAULT_KS)?;
    check(a.as_bytes() == b.as_bytes(), "CSV differs between same-seed runs")?;
    Ok(format!("{} variants, {} bytes identical across runs", names.len(), a.len()))
}

fn data_protocol() -> Outcome {
    let cfg = SynthConfig { n_records: 200, n_symptoms: 30, n_herbs: 40, n_syndromes: 6, noise_symptoms: 3, extra_herbs: 3, ..SynthConfig::default() };
    for seed in 0..3 {
        let d = synth_generate(&cfg, seed).map_err(|e| e.to_string())?;
        for min_count in [2, 5, 10] {
            let got = kernel_filter(&d.corpus.records, min_count, KernelMode::Fixpoint).map_err(|e| e.to_string())?;
            check(got == oracles::brute_force_kernel(&d.corpus.records, min_count), format!("kernel mismatch, seed {seed} min_count {min_count}"))?;
        }
    }
    let d = synth_generate(&SynthConfig { n_records: 500, ..cfg.clone() }, 9).map_err(|e| e.to_string())?;
    let (train, test) = split_dataset(&d.corpus.records, 0.9, 1).map_err(|e| e.to_string())?;
    check((train.len(), test.len()) == (450, 50), format!("split {} / {}", train.len(), test.len()))?;
    let ids: BTreeSet<_> = train.iter().chain(&test).map(|r| &r.record_id).collect();
    check(ids.len() == 500, "split is not a partition")?;
    for tenth in 0..1200 {
        let age = tenth as f64 / 10.0;
        check(age_bucket(age) == (age / 5.0).floor() as u32, format!("age {age}"))?;
    }
    for format in [CorpusFormat::PublicTsv, CorpusFormat::ClinicalTsv] {
        let text = format_prescriptions(&d.corpus, format);
        let back = parse_prescriptions(&text, format, "round-trip").map_err(|e| e.to_string())?;
        check(format_prescriptions(&back, format) == text, format!("{format:?} round trip"))?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("kg.tsv");
    save_kg(&d.kg, &path).map_err(|e| e.to_string())?;
    check(load_kg(&path, Some(&d.corpus.vocab)).map_err(|e| e.to_string())? == d.kg, "KG round trip")?;
    let labels = HierarchyLabels::parse(&d.labels.to_text(&d.corpus.vocab), "labels", &d.corpus.vocab).map_err(|e| e.to_string())?;
    check(labels == d.labels, "label round trip")?;
    Ok("kernel fixpoint exact, split 450/50, age buckets, corpus/KG/label round trips".into())
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "gradient suite", budget: Duration::from_secs(300), run: gradients },
        Criterion { id: 2, name: "diffusion", budget: Duration::from_secs(120), run: diffusion },
        Criterion { id: 3, name: "ranking metrics", budget: Duration::from_secs(30), run: metrics },
        Criterion { id: 4, name: "structural identities", budget: Duration::from_secs(600), run: structure },
        Criterion { id: 5, name: "overfit", budget: Duration::from_secs(600), run: overfit },
        Criterion { id: 6, name: "long tail", budget: Duration::from_secs(1800), run: longtail },
        Criterion { id: 7, name: "ablation harness", budget: Duration::from_secs(600), run: ablation },
        Criterion { id: 8, name: "data protocol", budget: Duration::from_secs(120), run: data_protocol },
    ];
    let filter: Option<u8> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filter.is_none_or(|f| f == c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.budget => Err(format!("over budget {:?}; {detail}", c.budget)),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} [{}] {} ({:.1}s): {detail}", c.id, c.name, elapsed.as_secs_f64());
        failed += usize::from(outcome.is_err());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

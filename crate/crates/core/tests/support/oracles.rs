//! Independent reference implementations the library is checked against.

use std::collections::{BTreeMap, BTreeSet};

use herbrec::corpus::PrescriptionRecord;
use herbrec::dmsh::{self, DiffusionParam, DiffusionSchedule};
use herbrec::eval::MetricsAtK;
use herbrec::rng::rng_for;
use herbrec::tensor::Tensor;

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic two-sided p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = n * m / (n + m);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_survival(lambda))
}

/// `Q(λ) = 2 Σ_{k≥1} (-1)^{k-1} exp(-2 k² λ²)`.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as usize % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Samples of `x_t` for scalar `x0`, by chaining single steps and by the closed form.
pub fn chained_and_closed(schedule: &DiffusionSchedule, t: usize, x0: f64, draws: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng_for(seed, &[1]);
    let mut x = Tensor::filled(draws, 1, x0);
    for s in 1..=t {
        let eps = dmsh::standard_normal(draws, 1, &mut r);
        x = dmsh::q_step(&x, s, schedule, &eps).expect("valid step");
    }
    let mut r = rng_for(seed, &[2]);
    let eps = dmsh::standard_normal(draws, 1, &mut r);
    let closed = dmsh::q_sample(&Tensor::filled(draws, 1, x0), t, schedule, &eps).expect("valid step");
    (x.into_vec(), closed.into_vec())
}

/// Runs the full reverse process from `q_sample(x0, T)` with a denoiser that
/// knows the clean data, returning the largest absolute reconstruction error.
pub fn oracle_reconstruction_error(steps: usize, param: DiffusionParam, seed: u64) -> f64 {
    let schedule = dmsh::make_schedule(steps, 1e-4, 0.02).expect("schedule");
    let n = 512;
    // Two-mode 1-D data.
    let x0 = Tensor::from_vec(n, 1, (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 } + 0.01 * (i as f64).sin()).collect());
    let mut r = rng_for(seed, &[3]);
    let eps = dmsh::standard_normal(n, 1, &mut r);
    let xt = dmsh::q_sample(&x0, steps, &schedule, &eps).expect("valid step");
    let clean = x0.clone();
    let sched = schedule.clone();
    let out = dmsh::p_sample_loop_with(&xt, steps, 0, &schedule, param, &mut r, |x, t| match param {
        DiffusionParam::X0 => clean.clone(),
        DiffusionParam::EpsLiteral => {
            let ab = sched.alpha_bar_at(t);
            x.zip_map(&clean, |xt, c| (xt - ab.sqrt() * c) / (1.0 - ab).sqrt())
        }
    })
    .expect("reverse loop");
    out.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Precision, recall and NDCG recomputed position by position.
pub fn brute_force_metrics(ranked: &[usize], truth: &BTreeSet<usize>, k: usize) -> MetricsAtK {
    let truth: Vec<usize> = truth.iter().copied().collect();
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().enumerate() {
        let rank = pos + 1;
        if rank > k {
            break;
        }
        if truth.contains(item) {
            hits += 1;
            dcg += 1.0 / ((rank + 1) as f64).log2();
        }
    }
    let mut idcg = 0.0;
    for rank in 1..=k {
        if rank > truth.len() {
            break;
        }
        idcg += 1.0 / ((rank + 1) as f64).log2();
    }
    MetricsAtK { k, precision: hits as f64 / k as f64, recall: hits as f64 / truth.len() as f64, ndcg: dcg / idcg }
}

/// Kernel filtering to fixpoint, recounting every pair from scratch each round.
pub fn brute_force_kernel(records: &[PrescriptionRecord], min_count: usize) -> Vec<PrescriptionRecord> {
    let mut current = records.to_vec();
    loop {
        let mut pair: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut sym: BTreeMap<usize, usize> = BTreeMap::new();
        let mut herb: BTreeMap<usize, usize> = BTreeMap::new();
        for r in &current {
            for &s in &r.symptoms {
                *sym.entry(s).or_default() += 1;
                for &h in &r.herbs {
                    *pair.entry((s, h)).or_default() += 1;
                }
            }
            for &h in &r.herbs {
                *herb.entry(h).or_default() += 1;
            }
        }
        let mut next = Vec::new();
        let mut changed = false;
        for r in &current {
            let mut keep_s: Vec<usize> = r.symptoms.clone();
            let mut keep_h: Vec<usize> = r.herbs.clone();
            for &s in &r.symptoms {
                for &h in &r.herbs {
                    if pair[&(s, h)] >= min_count {
                        continue;
                    }
                    changed = true;
                    if sym[&s] < herb[&h] {
                        keep_s.retain(|&x| x != s);
                    } else {
                        keep_h.retain(|&x| x != h);
                    }
                }
            }
            if !keep_s.is_empty() && !keep_h.is_empty() {
                next.push(PrescriptionRecord { symptoms: keep_s, herbs: keep_h, ..r.clone() });
            }
        }
        current = next;
        if !changed || current.is_empty() {
            return current;
        }
    }
}

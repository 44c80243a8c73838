//! Finite-difference checks of every differentiable path, one test per module.

mod support;

use support::grad_cases::{self, GradCase, TOLERANCE};

fn check(cases: Vec<GradCase>) {
    let mut failures = Vec::new();
    for case in &cases {
        let report = case.run().unwrap_or_else(|e| panic!("{}: {e}", case.name));
        assert!(report.checked > 0, "{} checked nothing", case.name);
        eprintln!("{:<40} {:>5} coords  max rel {:.2e}", case.name, report.checked, report.max_rel_error);
        if report.max_rel_error >= TOLERANCE {
            failures.push(format!("{}: {:.3e} at {:?}", case.name, report.max_rel_error, report.worst));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn pepp_paths() {
    check(grad_cases::pepp_cases());
}

#[test]
fn diffusion_paths() {
    check(grad_cases::dmsh_cases());
}

#[test]
fn knowledge_graph_paths() {
    check(grad_cases::kg_cases());
}

#[test]
fn syndrome_path() {
    check(grad_cases::syndrome_cases());
}

#[test]
fn hierarchy_paths() {
    check(grad_cases::hierarchy_cases());
}

#[test]
fn recommendation_and_loss_paths() {
    check(grad_cases::recommender_cases());
}

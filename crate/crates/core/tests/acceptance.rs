//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so every criterion is reported even when an earlier one fails.

mod common;

use common::Outcome;

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let dir = |name: &str| {
        let d = work.path().join(name);
        std::fs::create_dir_all(&d).unwrap();
        d
    };
    let checks: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("geometry", Box::new(common::geometry_oracles)),
        ("gradients", Box::new(common::gradient_suite)),
        ("crf", Box::new(common::crf_suite)),
        ("metrics", Box::new(common::metrics_oracle)),
        ("distillation determinism", Box::new(|| common::distillation_determinism(&dir("distill")))),
        ("parsers", Box::new(common::parser_suite)),
        ("overfit", Box::new(|| common::overfit(&dir("overfit")))),
        ("ablation", Box::new(|| common::ablation(&dir("ablation")))),
    ];
    // optional name filters, e.g. `cargo test --test acceptance -- crf metrics`
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(check)) {
            Ok(o) => o,
            Err(_) => Outcome::new(false, "panicked"),
        };
        println!("{} {name}: {}", if o.ok { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.ok);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

use phhmm_core::replicate::{all_methods, method_name, run_catalog_case};

fn main() {
    let case = std::env::args().nth(1).unwrap_or_else(|| "1.1".into());
    let reps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let (records, summaries) = run_catalog_case(&case, &all_methods(), reps, 50, 25, 20260810).unwrap();
    let failures: Vec<_> = records.iter().filter(|r| r.failed()).collect();
    println!("case {case}, R={reps}, failures: {}", failures.len());
    for f in failures.iter().take(5) {
        println!("  FAIL {} rep {}: {:?}", method_name(f.method), f.replicate, f.error);
    }
    for s in &summaries {
        println!(
            "{:8} acc {:.4} ({:.4})  mu1 {:7.3}  b10 {:7.3}  b11 {:7.3}  mu2 {:6.3}  b20 {:7.3}  b21 {:7.3}",
            method_name(s.method), s.accuracy_mean, s.accuracy_se,
            s.params[0].mean, s.params[1].mean, s.params[2].mean,
            s.params[3].mean, s.params[4].mean, s.params[5].mean,
        );
    }
    let max_dip = records.iter().filter(|r| !r.failed() && !r.max_loglik_dip.is_nan())
        .map(|r| r.max_loglik_dip).fold(0.0_f64, f64::max);
    println!("max loglik dip across EM runs: {max_dip:.3e}");
}

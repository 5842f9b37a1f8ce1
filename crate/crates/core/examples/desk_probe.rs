//! Scratch driver: measure the default desk benchmark's headline numbers.
use gradgate_core::eval::{default_desk_benchmark, run_benchmark};

fn main() {
    let spec = default_desk_benchmark();
    let t0 = std::time::Instant::now();
    let run = run_benchmark(&spec).unwrap();
    println!("elapsed: {:?}", t0.elapsed());
    println!("FPR test mean: {:.4} +- {:.4}", run.fpr_test_mean, run.fpr_test_stderr);
    println!("FPR test stage1-only: {:.4}", run.fpr_test_stage1_only_mean);
    println!("TPR mean: {:.4} +- {:.4}", run.tpr_mean, run.tpr_stderr);
    println!("TPR stage1-only: {:.4}", run.tpr_stage1_only_mean);
    println!("TPR gap: {:.4}", run.tpr_mean - run.tpr_stage1_only_mean);
    for s in &run.per_seed {
        println!(
            "  seed {:>3}: t={:8.3} |S|={} k={} val_bound={:.4} val_stage12={:.4} fpr={:.4} fpr_s1={:.4} tpr={:.4} tpr_s1={:.4}",
            s.seed, s.threshold, s.stage1_val_rejects, s.k, s.fpr_val_bound,
            s.fpr_val_stage12, s.fpr_test, s.fpr_test_stage1_only, s.tpr_avg, s.tpr_avg_stage1_only
        );
    }
    for (attack, tpr) in &run.tpr_per_attack_mean {
        println!("  attack {attack}: TPR {:.4}", tpr);
    }
}

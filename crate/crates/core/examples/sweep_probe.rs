//! Scratch driver: budget sweep and ablation trends on the desk benchmark.
use gradgate_core::eval::{
    ablation, budget_sweep, default_desk_benchmark, run_benchmark, AblationStrategy,
    default_combos,
};

fn main() {
    let spec = default_desk_benchmark();
    let run = run_benchmark(&spec).unwrap();
    println!(
        "base: FPR {:.4} (max seed {:.4}) gap {:.4}",
        run.fpr_test_mean,
        run.per_seed.iter().map(|s| s.fpr_test).fold(0.0, f64::max),
        run.tpr_mean - run.tpr_stage1_only_mean
    );

    let t0 = std::time::Instant::now();
    let points = budget_sweep(&spec, 10, &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10]).unwrap();
    println!("sweep elapsed {:?}", t0.elapsed());
    for p in &points {
        println!(
            "P={:>2} q={:>3} FPR={:.4} TPRmean={:.4} TPRmed={:.4}",
            p.n_directions, p.query_budget, p.fpr_mean, p.tpr_mean, p.tpr_median
        );
    }

    let t0 = std::time::Instant::now();
    let fixed_n = ablation(AblationStrategy::FixedN, &default_combos(AblationStrategy::FixedN), &spec).unwrap();
    let fixed_p = ablation(AblationStrategy::FixedP, &default_combos(AblationStrategy::FixedP), &spec).unwrap();
    println!("ablation elapsed {:?}", t0.elapsed());
    let gain = |cells: &Vec<gradgate_core::eval::AblationCell>| {
        cells.last().unwrap().tpr_mean - cells.first().unwrap().tpr_mean
    };
    for c in &fixed_n.cells {
        println!("fixed-N N={} P={} q={} TPR={:.4} FPR={:.4}", c.n_samples, c.n_directions, c.query_budget, c.tpr_mean, c.fpr_mean);
    }
    for c in &fixed_p.cells {
        println!("fixed-P N={} P={} q={} TPR={:.4} FPR={:.4}", c.n_samples, c.n_directions, c.query_budget, c.tpr_mean, c.fpr_mean);
    }
    println!("fixed-N gain {:.4} vs fixed-P gain {:.4}", gain(&fixed_n.cells), gain(&fixed_p.cells));
}

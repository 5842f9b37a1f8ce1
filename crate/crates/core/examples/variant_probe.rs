//! Scratch driver: search population variants for robust trend margins.
use gradgate_core::eval::{ablation, budget_sweep, default_combos, default_desk_benchmark, run_benchmark, AblationStrategy, BenchmarkSpec};

fn measure(tag: &str, spec: &BenchmarkSpec) {
    let run = run_benchmark(spec).unwrap();
    let fixed_n = ablation(AblationStrategy::FixedN, &default_combos(AblationStrategy::FixedN), spec).unwrap();
    let fixed_p = ablation(AblationStrategy::FixedP, &default_combos(AblationStrategy::FixedP), spec).unwrap();
    let sweep = budget_sweep(spec, 10, &[1, 10]).unwrap();
    let gain = |cells: &Vec<gradgate_core::eval::AblationCell>| {
        cells.last().unwrap().tpr_mean - cells.first().unwrap().tpr_mean
    };
    let fpr_max = run.per_seed.iter().map(|s| s.fpr_test).fold(0.0, f64::max);
    println!(
        "{tag}: FPRm {:.3}/{:.3} gap {:.3} | sweep {:.3}->{:.3} | gains N {:.4} P {:.4} margin {:+.4}",
        run.fpr_test_mean, fpr_max,
        run.tpr_mean - run.tpr_stage1_only_mean,
        sweep[0].tpr_median, sweep[1].tpr_median,
        gain(&fixed_n.cells), gain(&fixed_p.cells),
        gain(&fixed_n.cells) - gain(&fixed_p.cells),
    );
}

fn main() {
    // Sweep inner/outer radius and gradient floor around the current config.
    for (rl, rh, g, pl, ph) in [
        (0.6, 1.8, 4.0, 0.10, 0.45),
        (0.6, 1.8, 5.0, 0.10, 0.45),
        (0.5, 1.8, 4.0, 0.10, 0.45),
        (0.6, 1.6, 4.0, 0.10, 0.45),
        (0.6, 1.8, 4.0, 0.12, 0.45),
        (0.7, 1.8, 4.0, 0.10, 0.45),
        (0.6, 2.0, 4.0, 0.10, 0.45),
        (0.6, 1.8, 4.5, 0.08, 0.42),
    ] {
        let mut b = default_desk_benchmark();
        b.population.malicious.radius_taus = (rl, rh);
        b.population.malicious.min_grad_norm = g;
        b.population.malicious.p_band = (pl, ph);
        measure(&format!("r({rl},{rh}) g{g} p({pl},{ph})"), &b);
    }
}

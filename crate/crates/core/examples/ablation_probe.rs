//! Scratch driver: ablation gains under different sigma values.
use gradgate_core::eval::{ablation, default_combos, default_desk_benchmark, AblationStrategy};

fn main() {
    for sigma in [0.05, 0.10] {
        let mut spec = default_desk_benchmark();
        spec.detector.sigma = sigma;
        let fixed_n = ablation(AblationStrategy::FixedN, &default_combos(AblationStrategy::FixedN), &spec).unwrap();
        let fixed_p = ablation(AblationStrategy::FixedP, &default_combos(AblationStrategy::FixedP), &spec).unwrap();
        let gain = |cells: &Vec<gradgate_core::eval::AblationCell>| {
            cells.last().unwrap().tpr_mean - cells.first().unwrap().tpr_mean
        };
        println!(
            "sigma={sigma}: fixed-N {:.4} -> {:.4} (gain {:.4}); fixed-P {:.4} -> {:.4} (gain {:.4})",
            fixed_n.cells[0].tpr_mean, fixed_n.cells[3].tpr_mean, gain(&fixed_n.cells),
            fixed_p.cells[0].tpr_mean, fixed_p.cells[3].tpr_mean, gain(&fixed_p.cells),
        );
    }
}

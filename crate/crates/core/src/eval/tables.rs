//! Aligned-text table rendering for benchmark results.

use super::{AblationGrid, EvalRun, SweepPoint};

/// Renders an eval run as a method-by-metric table: rows are detector
/// configurations, columns are FPR, per-attack TPR, and the average.
pub fn render_eval_run(run: &EvalRun) -> String {
    let attacks: Vec<&String> = run.tpr_per_attack_mean.keys().collect();
    let mut out = String::new();
    out.push_str(&format!("dataset: {}\n", run.dataset_id));
    out.push_str(&format!(
        "seeds: {:?}   total queries: {}   wall clock: {:.2}s\n",
        run.seeds, run.total_queries_used, run.wall_clock_seconds
    ));

    let mut header = format!("{:<24} {:>10}", "method", "FPR");
    for attack in &attacks {
        header.push_str(&format!(" {:>10}", attack));
    }
    header.push_str(&format!(" {:>10}", "average"));
    out.push_str(&header);
    out.push('\n');

    let mut two_step = format!(
        "{:<24} {:>10}",
        "two-step",
        format_pm(run.fpr_test_mean, run.fpr_test_stderr)
    );
    for attack in &attacks {
        two_step.push_str(&format!(
            " {:>10.3}",
            run.tpr_per_attack_mean.get(*attack).copied().unwrap_or(f64::NAN)
        ));
    }
    two_step.push_str(&format!(" {}", format_pm(run.tpr_mean, run.tpr_stderr)));
    out.push_str(&two_step);
    out.push('\n');

    let mut stage1 = format!(
        "{:<24} {:>10.3}",
        "stage-1 only", run.fpr_test_stage1_only_mean
    );
    for _ in &attacks {
        stage1.push_str(&format!(" {:>10}", "-"));
    }
    stage1.push_str(&format!(" {:>10.3}", run.tpr_stage1_only_mean));
    out.push_str(&stage1);
    out.push('\n');
    out
}

fn format_pm(mean: f64, err: f64) -> String {
    format!("{mean:.3}±{err:.3}")
}

/// Renders the ablation grid as a budget table.
pub fn render_ablation(grid: &AblationGrid) -> String {
    let mut out = String::new();
    out.push_str(&format!("strategy: {:?}\n", grid.strategy));
    out.push_str(&format!(
        "{:>4} {:>4} {:>6} {:>10} {:>10}\n",
        "N", "P", "q", "TPR", "FPR"
    ));
    for cell in &grid.cells {
        out.push_str(&format!(
            "{:>4} {:>4} {:>6} {:>10.3} {:>10.3}\n",
            cell.n_samples, cell.n_directions, cell.query_budget, cell.tpr_mean, cell.fpr_mean
        ));
    }
    out
}

/// Renders a budget sweep as a per-P table.
pub fn render_sweep(points: &[SweepPoint]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>4} {:>6} {:>10} {:>10} {:>10}\n",
        "P", "q", "FPR", "TPR mean", "TPR med"
    ));
    for p in points {
        out.push_str(&format!(
            "{:>4} {:>6} {:>10.3} {:>10.3} {:>10.3}\n",
            p.n_directions, p.query_budget, p.fpr_mean, p.tpr_mean, p.tpr_median
        ));
    }
    out
}

//! Tree-search attack loop.
//!
//! Starting from a root carrying the goal and an empty history, each depth
//! branches every leaf into `b` children, prunes off-topic children, runs the
//! detector-mediated assessment on the rest, then keeps the top `w` leaves by
//! judge score. A degenerate `b = 1, w = 1` tree reproduces the iterative
//! loop exactly.

use crate::error::Result;
use crate::query::Query;

use super::{AttackReport, AttackerModel, DetectorTarget, IterationRecord, JudgeModel, Turn};

/// Tree budgets. Defaults follow the reference tool settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapOptions {
    pub branching: usize,
    pub width: usize,
    pub depth: usize,
}

impl Default for TapOptions {
    fn default() -> Self {
        Self {
            branching: 4,
            width: 10,
            depth: 10,
        }
    }
}

struct Leaf {
    history: Vec<Turn>,
    score: i64,
}

/// Runs the tree-search attack.
pub fn adaptive_tap(
    attacker: &dyn AttackerModel,
    judge: &dyn JudgeModel,
    target: &DetectorTarget<'_>,
    options: TapOptions,
    goal: &Query,
) -> Result<AttackReport> {
    let TapOptions {
        branching,
        width,
        depth,
    } = options;
    if branching == 0 || width == 0 || depth == 0 {
        return Err(crate::error::Error::InvalidInput(
            "branching, width, and depth must all be >= 1".into(),
        ));
    }

    let threshold = target.config.threshold.unwrap_or(f64::INFINITY);
    let mut report = AttackReport {
        success: false,
        final_query: None,
        iterations_used: 0,
        per_iteration: Vec::new(),
        norms_pre: Vec::new(),
        norms_post: Vec::new(),
        percentiles_pre: None,
        percentiles_post: None,
        objective_trace: Vec::new(),
        threshold,
        aborted: None,
    };

    // Root: empty history; the goal seeds the attacker's first proposals.
    let mut leaves = vec![Leaf {
        history: Vec::new(),
        score: 0,
    }];

    'depths: for level in 1..=depth {
        report.iterations_used = level;
        // Branch: at most width * branching children per level.
        let mut children: Vec<(Vec<Turn>, Query)> = Vec::new();
        for leaf in &leaves {
            for branch in 0..branching {
                let prompt = match attacker.propose(&leaf.history, branch) {
                    Ok(p) => p,
                    Err(e) => {
                        report.aborted =
                            Some(format!("attacker failed at depth {level}: {e}"));
                        break 'depths;
                    }
                };
                children.push((leaf.history.clone(), prompt));
            }
        }
        debug_assert!(children.len() <= width * branching);

        // Prune phase 1: drop off-topic prompts.
        children.retain(|(_, prompt)| !judge.off_topic(prompt, goal));
        if children.is_empty() {
            break;
        }

        // Query and assess, detector-mediated.
        let mut assessed: Vec<Leaf> = Vec::with_capacity(children.len());
        for (history, prompt) in children {
            let verdict = match target.detect(&prompt) {
                Ok(v) => v,
                Err(e) => {
                    report.aborted = Some(format!("detection failed at depth {level}: {e}"));
                    break 'depths;
                }
            };
            let response = target.observed_response(&verdict);
            let judged = judge.score(&prompt, &response);

            if let Some(norm) = verdict.grad_norm {
                if level == 1 {
                    report.norms_pre.push(norm);
                }
                if level == depth || judged.jailbroken {
                    report.norms_post.push(norm);
                }
            }
            report.per_iteration.push(IterationRecord {
                iteration: level,
                query_id: prompt.id.clone(),
                f_value: verdict.f_value.value,
                grad_norm: verdict.grad_norm,
                decision: verdict.decision,
                score: judged.score,
                jailbroken: judged.jailbroken,
            });

            if judged.jailbroken {
                report.success = true;
                report.final_query = Some(prompt);
                break 'depths;
            }

            let mut history = history;
            history.push(Turn {
                prompt,
                response,
                score: judged.score,
            });
            assessed.push(Leaf {
                score: judged.score,
                history,
            });
        }

        // Prune phase 2: keep the top `width` leaves by score; stable sort
        // keeps generation order among ties, so pruning is deterministic.
        if assessed.len() > width {
            assessed.sort_by(|a, b| b.score.cmp(&a.score));
            assessed.truncate(width);
        }
        leaves = assessed;
        if leaves.is_empty() {
            break;
        }
    }

    Ok(report.finalize())
}

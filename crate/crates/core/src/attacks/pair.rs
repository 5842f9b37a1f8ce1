//! Iterative conversational attack loop.
//!
//! Each round the attacker proposes a prompt from the conversation history,
//! the detector screens it (rejected prompts are answered with the refusal
//! message, never reaching the model), the judge scores the pair, and the
//! round is appended to the history. Stops on a JAILBROKEN verdict or after
//! K rounds.

use crate::detector::Decision;
use crate::error::Result;
use crate::query::Query;

use super::{AttackReport, AttackerModel, DetectorTarget, IterationRecord, JudgeModel, Turn};

/// Runs the iterative attack for up to `k_iterations` rounds.
pub fn adaptive_pair(
    attacker: &dyn AttackerModel,
    judge: &dyn JudgeModel,
    target: &DetectorTarget<'_>,
    k_iterations: usize,
    _goal: &Query,
) -> Result<AttackReport> {
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
    let mut history: Vec<Turn> = Vec::new();

    for iteration in 1..=k_iterations {
        report.iterations_used = iteration;
        let prompt = match attacker.propose(&history, 0) {
            Ok(p) => p,
            Err(e) => {
                report.aborted = Some(format!("attacker failed at round {iteration}: {e}"));
                break;
            }
        };
        let verdict = match target.detect(&prompt) {
            Ok(v) => v,
            Err(e) => {
                report.aborted = Some(format!("detection failed at round {iteration}: {e}"));
                break;
            }
        };
        let response = target.observed_response(&verdict);
        let judged = judge.score(&prompt, &response);

        if let Some(norm) = verdict.grad_norm {
            if iteration == 1 {
                report.norms_pre.push(norm);
            }
            if iteration == k_iterations || judged.jailbroken {
                report.norms_post.push(norm);
            }
        }
        report.per_iteration.push(IterationRecord {
            iteration,
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
            break;
        }
        debug_assert!(
            verdict.decision == Decision::Pass || response == target.config.refusal_message,
            "rejected prompts must observe the refusal message"
        );
        history.push(Turn {
            prompt,
            response,
            score: judged.score,
        });
    }

    Ok(report.finalize())
}

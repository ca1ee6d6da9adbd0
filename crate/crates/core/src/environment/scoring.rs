//! Utility, heuristic path reward and the frozen answer synthesizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tools::size_from_mask;
use super::{answer_field, field_type, vocabulary, QueryInstance};
use crate::error::{Error, Result};
use crate::policy::Trajectory;
use crate::supernet::{ContainerType, Payload, SupernetGraph, ToolOutput};

/// Structured answer: field name to value.
pub type Answer = BTreeMap<String, String>;

/// Lowercase and collapse internal whitespace.
pub fn canonicalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Stable string identifying an answer up to canonicalization.
pub fn canonical_answer_key(answer: &Answer) -> String {
    let canon: BTreeMap<String, String> = answer.iter().map(|(k, v)| (canonicalize(k), canonicalize(v))).collect();
    canon.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

/// Field-level F1 between canonicalized answer and truth.
pub fn utility(answer: &Answer, truth: &Answer) -> f64 {
    if answer.is_empty() || truth.is_empty() {
        return 0.0;
    }
    let truth: BTreeMap<String, String> = truth.iter().map(|(k, v)| (canonicalize(k), canonicalize(v))).collect();
    let tp = answer
        .iter()
        .filter(|(k, v)| truth.get(&canonicalize(k)) == Some(&canonicalize(v)))
        .count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / answer.len() as f64;
    let recall = tp / truth.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Last-writer-wins aggregation of informative tool outputs.
pub fn synthesize_outputs<'a>(outputs: impl IntoIterator<Item = &'a ToolOutput>) -> Answer {
    let mut answer = Answer::new();
    for out in outputs {
        match &out.payload {
            Payload::Record { fields, .. } => {
                for (k, v) in fields {
                    if field_type(k).is_some() {
                        answer.insert(k.clone(), v.clone());
                    }
                }
            }
            Payload::Image { image } if out.source == ContainerType::Segmentation => {
                let vocab = vocabulary(ContainerType::Segmentation);
                answer.insert(
                    answer_field(ContainerType::Segmentation).to_string(),
                    vocab[size_from_mask(image).min(vocab.len() - 1)].to_string(),
                );
            }
            Payload::Image { .. } | Payload::Empty => {}
        }
    }
    answer
}

pub fn synthesize_answer(traj: &Trajectory) -> Answer {
    synthesize_outputs(traj.steps.iter().filter_map(|s| s.output.as_ref()))
}

/// Weights of the plan-compliance, coherence and brevity components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeuristicSpec {
    pub compliance: f64,
    pub coherence: f64,
    pub brevity: f64,
}

impl Default for HeuristicSpec {
    fn default() -> Self {
        Self {
            compliance: 0.5,
            coherence: 0.2,
            brevity: 0.3,
        }
    }
}

impl HeuristicSpec {
    pub fn validate(&self) -> Result<()> {
        let w = [self.compliance, self.coherence, self.brevity];
        if w.iter().any(|&x| !(x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("heuristic weights must be non-negative and sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeuristicBreakdown {
    pub compliance: f64,
    pub coherence: f64,
    pub brevity: f64,
    pub total: f64,
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Heuristic path reward `R_h` of an executed trajectory.
pub fn heuristic_reward(
    traj: &Trajectory,
    instance: &QueryInstance,
    graph: &SupernetGraph,
    t_max: usize,
    spec: &HeuristicSpec,
) -> HeuristicBreakdown {
    let visited: Vec<ContainerType> = traj
        .steps
        .iter()
        .filter_map(|s| match graph.action(s.action) {
            crate::supernet::Action::Invoke { container, .. } => Some(graph.containers()[*container].ctype),
            crate::supernet::Action::EarlyExit => None,
        })
        .collect();
    let plan = instance.plan_types();
    let mut compliance = lcs_len(&visited, &plan) as f64 / plan.len() as f64;
    if let Some(m) = instance.mandatory {
        if !visited.contains(&m) {
            compliance = 0.0;
        }
    }
    let invocations = visited.len();
    let missing = traj.steps.iter().filter(|s| s.context_missing).count();
    let coherence = if invocations == 0 {
        1.0
    } else {
        1.0 - missing as f64 / invocations as f64
    };
    let brevity = if t_max == 0 {
        0.0
    } else {
        (1.0 - traj.steps.len() as f64 / t_max as f64).max(0.0)
    };
    HeuristicBreakdown {
        compliance,
        coherence,
        brevity,
        total: spec.compliance * compliance + spec.coherence * coherence + spec.brevity * brevity,
    }
}

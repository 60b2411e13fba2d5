//! Synthetic request schedules: which requests run in each step and for how
//! many tokens.

use crate::policy::BatchRequest;
use serde::{Deserialize, Serialize};

/// When requests join the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrival {
    /// Every request is prefilled together in the first step.
    #[default]
    BatchAtOnce,
    /// `cohort` new requests are admitted every `interval` decode steps.
    PerStep { interval: u32, cohort: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub layers: u32,
    pub hidden: usize,
    /// Total requests in the run.
    pub batch: usize,
    pub prefill_tokens: u32,
    /// Decode steps each request runs after its prefill.
    pub decode_steps: u32,
    /// Seconds of compute for one prefill step.
    pub prefill_time: f64,
    /// Seconds of compute for one decode step.
    pub decode_time: f64,
    #[serde(default)]
    pub arrival: Arrival,
    /// Prompt texts, assigned to requests round-robin.
    #[serde(default)]
    pub prompts: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Prefill,
    Decode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduledStep {
    pub seq: u32,
    pub kind: StepKind,
    pub requests: Vec<BatchRequest>,
    pub compute_time: f64,
}

impl ScheduledStep {
    pub fn tokens(&self) -> usize {
        self.requests.first().map_or(0, BatchRequest::tokens)
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0 || self.hidden == 0 || self.batch == 0 || self.prefill_tokens == 0 {
            return Err("layers, hidden, batch and prefill_tokens must be > 0".into());
        }
        if !(self.prefill_time > 0.0 && self.decode_time > 0.0) {
            return Err("step compute times must be > 0".into());
        }
        if let Arrival::PerStep { interval, cohort } = self.arrival {
            if interval == 0 || cohort == 0 {
                return Err("admission interval and cohort must be > 0".into());
            }
        }
        Ok(())
    }

    fn prompt(&self, id: u64) -> String {
        if self.prompts.is_empty() {
            format!("prompt {id}")
        } else {
            self.prompts[id as usize % self.prompts.len()].clone()
        }
    }

    /// The full step sequence. Each step is all prefill or all decode.
    pub fn schedule(&self) -> Vec<ScheduledStep> {
        let (interval, cohort) = match self.arrival {
            Arrival::BatchAtOnce => (u32::MAX, self.batch),
            Arrival::PerStep { interval, cohort } => (interval, cohort),
        };
        let p = self.prefill_tokens;
        let mut steps = Vec::new();
        let mut admitted = 0usize;
        // (id, decode steps done)
        let mut active: Vec<(u64, u32)> = Vec::new();
        let mut since_admission = interval;
        while admitted < self.batch || !active.is_empty() {
            let due = since_admission >= interval || active.is_empty();
            if admitted < self.batch && due {
                let n = cohort.min(self.batch - admitted);
                let ids: Vec<u64> = (admitted as u64..(admitted + n) as u64).collect();
                admitted += n;
                since_admission = 0;
                steps.push(ScheduledStep {
                    seq: steps.len() as u32,
                    kind: StepKind::Prefill,
                    requests: ids
                        .iter()
                        .map(|&id| BatchRequest {
                            id,
                            arrival: id,
                            prompt: self.prompt(id),
                            token_range: (0, p),
                        })
                        .collect(),
                    compute_time: self.prefill_time,
                });
                active.extend(ids.into_iter().map(|id| (id, 0)));
                if self.decode_steps == 0 {
                    active.clear();
                }
                continue;
            }
            for a in &mut active {
                a.1 += 1;
            }
            steps.push(ScheduledStep {
                seq: steps.len() as u32,
                kind: StepKind::Decode,
                requests: active
                    .iter()
                    .map(|&(id, k)| BatchRequest {
                        id,
                        arrival: id,
                        prompt: self.prompt(id),
                        token_range: (p + k - 1, p + k),
                    })
                    .collect(),
                compute_time: self.decode_time,
            });
            active.retain(|&(_, k)| k < self.decode_steps);
            since_admission = since_admission.saturating_add(1);
        }
        steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(arrival: Arrival) -> WorkloadSpec {
        WorkloadSpec {
            layers: 2,
            hidden: 8,
            batch: 4,
            prefill_tokens: 5,
            decode_steps: 3,
            prefill_time: 0.01,
            decode_time: 0.002,
            arrival,
            prompts: vec![],
        }
    }

    #[test]
    fn batch_at_once_is_one_prefill_then_decodes() {
        let s = spec(Arrival::BatchAtOnce).schedule();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0].kind, StepKind::Prefill);
        assert_eq!(s[0].tokens(), 5);
        assert_eq!(s[0].requests.len(), 4);
        for (k, step) in s[1..].iter().enumerate() {
            assert_eq!(step.kind, StepKind::Decode);
            assert_eq!(step.requests[0].token_range, (5 + k as u32, 6 + k as u32));
            assert_eq!(step.compute_time, 0.002);
        }
    }

    #[test]
    fn per_step_admission_staggers_cohorts() {
        let s = spec(Arrival::PerStep { interval: 1, cohort: 2 }).schedule();
        let kinds: Vec<_> = s.iter().map(|x| (x.kind, x.requests.len())).collect();
        assert_eq!(
            kinds,
            [
                (StepKind::Prefill, 2),
                (StepKind::Decode, 2),
                (StepKind::Prefill, 2),
                (StepKind::Decode, 4),
                (StepKind::Decode, 4),
                (StepKind::Decode, 2),
            ]
        );
        // every request decodes exactly decode_steps times
        for id in 0..4u64 {
            let n = s
                .iter()
                .filter(|x| x.kind == StepKind::Decode && x.requests.iter().any(|r| r.id == id))
                .count();
            assert_eq!(n, 3);
        }
        // token ranges of one request never overlap
        let mut ranges: Vec<_> = s
            .iter()
            .flat_map(|x| x.requests.iter().filter(|r| r.id == 3).map(|r| r.token_range))
            .collect();
        ranges.sort();
        assert!(ranges.windows(2).all(|w| w[0].1 <= w[1].0));
    }

    #[test]
    fn steps_are_numbered_consecutively() {
        let s = spec(Arrival::PerStep { interval: 2, cohort: 1 }).schedule();
        assert!(s.iter().enumerate().all(|(i, x)| x.seq == i as u32));
    }

    #[test]
    fn prompts_cycle() {
        let mut w = spec(Arrival::BatchAtOnce);
        w.prompts = vec!["a".into(), "b".into()];
        let s = w.schedule();
        let p: Vec<_> = s[0].requests.iter().map(|r| r.prompt.as_str()).collect();
        assert_eq!(p, ["a", "b", "a", "b"]);
    }
}

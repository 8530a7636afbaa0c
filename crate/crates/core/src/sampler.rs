//! Reverse (denoising) process: unconditional sampling and the labeled-first
//! conditional sampler.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::Serialize;

use crate::denoiser::CleanPredictor;
use crate::error::{Error, Result};
use crate::graph::ClassId;
use crate::nn::Tensor2;
use crate::rng::StreamRng;
use crate::schedule::{draw_routing, LabelState, NoiseSchedule, RoutingDraw};

/// Draws a class index from a probability row by inverse CDF. Always
/// consumes exactly one uniform.
pub fn sample_categorical(row: &[f64], rng: &mut StreamRng) -> ClassId {
    let u: f64 = rng.random::<f64>() * row.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_positive = k;
            acc += p;
            if u < acc {
                return k;
            }
        }
    }
    last_positive
}

/// One reverse transition `t → t-1`. Denoised nodes are copied; masked nodes
/// with `unmask` set receive a class drawn from their `pred` row; the rest
/// stay masked.
pub fn reverse_step(yt: &LabelState, routing: &RoutingDraw, pred: &Tensor2, rng: &mut StreamRng) -> Result<LabelState> {
    let n = yt.num_nodes();
    if yt.t == 0 || routing.t != yt.t {
        return Err(Error::InvalidArgument(format!(
            "routing drawn for t={} applied at t={}",
            routing.t, yt.t
        )));
    }
    if routing.unmask.len() != n || (routing.unmask_count() > 0 && pred.rows() != n) {
        return Err(Error::shape(
            "reverse_step",
            "routing or prediction rows differ from node count",
        ));
    }
    let mut labels = yt.labels.clone();
    for (i, l) in labels.iter_mut().enumerate() {
        if routing.unmask[i] && l.is_none() {
            *l = Some(sample_categorical(pred.row(i), rng));
        }
    }
    Ok(LabelState { t: yt.t - 1, labels })
}

/// Per-step bookkeeping of a reverse trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepTrace {
    pub t: usize,
    /// Nodes still masked at the start of the step.
    pub masked: usize,
    pub budget: usize,
    pub labeled_selected: usize,
    pub unlabeled_selected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    /// The clean state at `t = 0`.
    pub state: LabelState,
    /// Steps in execution order (`t = T … 1`).
    pub trace: Vec<StepTrace>,
    /// The step `t` at which each node left the sink state.
    pub denoised_at: Vec<usize>,
}

impl SampleOutcome {
    pub fn classes(&self) -> Vec<ClassId> {
        self.state
            .labels
            .iter()
            .map(|l| l.expect("sampler returns clean states"))
            .collect()
    }
}

fn finish(state: LabelState, trace: Vec<StepTrace>, denoised_at: Vec<Option<usize>>) -> Result<SampleOutcome> {
    if let Some(i) = state.labels.iter().position(Option::is_none) {
        return Err(Error::Invariant(format!("node {i} still masked at t=0")));
    }
    let denoised_at = denoised_at
        .into_iter()
        .enumerate()
        .map(|(i, d)| d.ok_or_else(|| Error::Invariant(format!("node {i} never denoised"))))
        .collect::<Result<_>>()?;
    Ok(SampleOutcome {
        state,
        trace,
        denoised_at,
    })
}

fn record_transitions(prev: &LabelState, next: &LabelState, denoised_at: &mut [Option<usize>]) -> Result<()> {
    for (i, (a, b)) in prev.labels.iter().zip(&next.labels).enumerate() {
        match (a, b) {
            (None, Some(_)) => {
                if denoised_at[i].is_some() {
                    return Err(Error::Invariant(format!("node {i} denoised twice")));
                }
                denoised_at[i] = Some(prev.t);
            }
            (Some(x), Some(y)) if x != y => {
                return Err(Error::Invariant(format!("denoised node {i} changed label")));
            }
            (Some(_), None) => return Err(Error::Invariant(format!("node {i} re-masked"))),
            _ => {}
        }
    }
    Ok(())
}

/// Samples `Y ~ p_θ(Y | G)` starting from the all-sink state at `T`.
pub fn sample_unconditional<P: CleanPredictor + ?Sized>(
    predictor: &P,
    num_nodes: usize,
    sched: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<SampleOutcome> {
    let mut state = LabelState::all_sink(num_nodes, sched.horizon());
    let mut trace = Vec::with_capacity(sched.horizon());
    let mut denoised_at = vec![None; num_nodes];
    while state.t > 0 {
        let routing = draw_routing(&state, sched, rng)?;
        let selected = routing.unmask_count();
        let pred = if selected > 0 {
            predictor.predict_clean(&state)?
        } else {
            Tensor2::zeros(0, 0)
        };
        let next = reverse_step(&state, &routing, &pred, rng)?;
        record_transitions(&state, &next, &mut denoised_at)?;
        trace.push(StepTrace {
            t: state.t,
            masked: state.masked_count(),
            budget: selected,
            labeled_selected: 0,
            unlabeled_selected: selected,
        });
        state = next;
    }
    finish(state, trace, denoised_at)
}

/// Stochastic rounding of the expected denoise count `masked · λ′`.
fn step_budget(masked: usize, rate: f64, rng: &mut StreamRng) -> usize {
    let expected = masked as f64 * rate;
    let base = expected.floor();
    let extra = rng.random::<f64>() < expected - base;
    (base as usize + usize::from(extra)).min(masked)
}

/// Samples `Y ~ p_θ(Y | G, Y_L)` with the labeled-first strategy: each
/// step's denoising budget goes first to masked labeled nodes (which are set
/// to their observed label), the rest to uniformly chosen masked unlabeled
/// nodes (which draw from the denoiser).
pub fn sample_conditional_labeled_first<P: CleanPredictor + ?Sized>(
    predictor: &P,
    observed: &[Option<ClassId>],
    sched: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<SampleOutcome> {
    sample_conditional_observed(predictor, observed, sched, rng, |_| {})
}

/// As [`sample_conditional_labeled_first`], calling `observer` with every
/// intermediate state (`t = T-1 … 0`).
pub fn sample_conditional_observed<P, F>(
    predictor: &P,
    observed: &[Option<ClassId>],
    sched: &NoiseSchedule,
    rng: &mut StreamRng,
    mut observer: F,
) -> Result<SampleOutcome>
where
    P: CleanPredictor + ?Sized,
    F: FnMut(&LabelState),
{
    let n = observed.len();
    let mut state = LabelState::all_sink(n, sched.horizon());
    let mut trace = Vec::with_capacity(sched.horizon());
    let mut denoised_at = vec![None; n];
    while state.t > 0 {
        let t = state.t;
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for (i, l) in state.labels.iter().enumerate() {
            if l.is_none() {
                if observed[i].is_some() {
                    labeled.push(i);
                } else {
                    unlabeled.push(i);
                }
            }
        }
        let masked = labeled.len() + unlabeled.len();
        let budget = step_budget(masked, sched.denoise_rate(t), rng);
        if t == 1 && budget != masked {
            return Err(Error::Invariant(format!(
                "final step budget {budget} below {masked} masked nodes"
            )));
        }

        labeled.shuffle(rng);
        let take_labeled = budget.min(labeled.len());
        let take_unlabeled = budget - take_labeled;
        let mut chosen_unlabeled: Vec<usize> = index::sample(rng, unlabeled.len(), take_unlabeled)
            .into_iter()
            .map(|k| unlabeled[k])
            .collect();
        chosen_unlabeled.sort_unstable();

        let mut next = LabelState {
            t: t - 1,
            labels: state.labels.clone(),
        };
        for &i in &labeled[..take_labeled] {
            next.labels[i] = observed[i];
        }
        if !chosen_unlabeled.is_empty() {
            let pred = predictor.predict_clean(&state)?;
            if pred.rows() != n {
                return Err(Error::shape(
                    "conditional sampler",
                    "prediction rows differ from node count",
                ));
            }
            for &i in &chosen_unlabeled {
                next.labels[i] = Some(sample_categorical(pred.row(i), rng));
            }
        }
        record_transitions(&state, &next, &mut denoised_at)?;
        trace.push(StepTrace {
            t,
            masked,
            budget,
            labeled_selected: take_labeled,
            unlabeled_selected: take_unlabeled,
        });
        observer(&next);
        state = next;
    }
    finish(state, trace, denoised_at)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::rng::{stream, Stream};
    use crate::schedule::cosine_schedule;

    /// Returns the same distribution for every node.
    struct Constant(Vec<f64>);

    impl CleanPredictor for Constant {
        fn predict_clean(&self, state: &LabelState) -> Result<Tensor2> {
            let c = self.0.len();
            Ok(Tensor2::from_fn(state.num_nodes(), c, |_, k| self.0[k]))
        }
    }

    /// Fails if called.
    struct Unreachable;

    impl CleanPredictor for Unreachable {
        fn predict_clean(&self, _: &LabelState) -> Result<Tensor2> {
            Err(Error::Invariant("predictor called".into()))
        }
    }

    #[test]
    fn categorical_respects_point_mass() {
        let mut rng = stream(1, Stream::Sample);
        for _ in 0..1000 {
            assert_eq!(sample_categorical(&[0.0, 0.0, 1.0, 0.0], &mut rng), 2);
        }
    }

    #[test]
    fn reverse_step_without_unmask_only_decrements() {
        let yt = LabelState {
            t: 4,
            labels: vec![Some(1), None, None],
        };
        let routing = RoutingDraw {
            t: 4,
            denoised: vec![true, false, false],
            keep: vec![true; 3],
            unmask: vec![false; 3],
        };
        let next = reverse_step(&yt, &routing, &Tensor2::zeros(0, 0), &mut stream(0, Stream::Sample)).unwrap();
        assert_eq!(next.t, 3);
        assert_eq!(next.labels, yt.labels);
    }

    #[test]
    fn reverse_step_uniform_row_is_uniform() {
        let n = 100_000;
        let yt = LabelState::all_sink(n, 2);
        let routing = RoutingDraw {
            t: 2,
            denoised: vec![false; n],
            keep: vec![true; n],
            unmask: vec![true; n],
        };
        let pred = Tensor2::from_fn(n, 4, |_, _| 0.25);
        let next = reverse_step(&yt, &routing, &pred, &mut stream(2, Stream::Sample)).unwrap();
        let mut counts = [0usize; 4];
        for l in next.labels {
            counts[l.unwrap()] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 4.0).abs() < 4.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn single_step_horizon_denoises_everything() {
        let s = cosine_schedule(1).unwrap();
        let out = sample_unconditional(&Constant(vec![0.5, 0.5]), 30, &s, &mut stream(3, Stream::Sample)).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace[0].budget, 30);
        assert!(out.denoised_at.iter().all(|&t| t == 1));
    }

    #[test]
    fn fully_observed_conditioning_never_calls_predictor() {
        let s = cosine_schedule(20).unwrap();
        let observed: Vec<Option<usize>> = (0..40).map(|i| Some(i % 3)).collect();
        let out = sample_conditional_labeled_first(&Unreachable, &observed, &s, &mut stream(4, Stream::EStep)).unwrap();
        assert_eq!(out.state.labels, observed);
        let total: usize = out.trace.iter().map(|s| s.budget).sum();
        assert_eq!(total, 40);
    }

    #[test]
    fn labeled_nodes_are_served_first() {
        let s = cosine_schedule(30).unwrap();
        let observed: Vec<Option<usize>> = (0..200).map(|i| if i < 50 { Some(1) } else { None }).collect();
        let out =
            sample_conditional_labeled_first(&Constant(vec![1.0, 0.0]), &observed, &s, &mut stream(5, Stream::EStep))
                .unwrap();
        let mut labeled_left = 50;
        for step in &out.trace {
            assert_eq!(step.labeled_selected + step.unlabeled_selected, step.budget);
            if step.unlabeled_selected > 0 {
                assert_eq!(step.labeled_selected, labeled_left);
            }
            labeled_left -= step.labeled_selected;
        }
        assert_eq!(labeled_left, 0);
        assert!(out.classes()[50..].iter().all(|&c| c == 0));
    }

    #[test]
    fn unconditional_pair_distribution_is_independent() {
        let s = cosine_schedule(2).unwrap();
        let draws = 20_000;
        let mut rng = stream(6, Stream::Sample);
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..draws {
            let out = sample_unconditional(&Constant(vec![0.7, 0.3]), 2, &s, &mut rng).unwrap();
            *counts.entry(out.classes()).or_default() += 1;
        }
        let p = [0.7, 0.3];
        let mut tv = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                let emp = *counts.get(&vec![a, b]).unwrap_or(&0) as f64 / draws as f64;
                tv += (emp - p[a] * p[b]).abs();
            }
        }
        assert!(tv / 2.0 < 0.02, "{tv}");
    }
}

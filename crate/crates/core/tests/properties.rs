use proptest::prelude::*;

use redisc_core::denoiser::CleanPredictor;
use redisc_core::em::{selection_probabilities, PriorityMode, PriorityQueue};
use redisc_core::graph::{Adjacency, ClassId};
use redisc_core::metrics::{node_accuracy, subgraph_accuracy};
use redisc_core::nn::Tensor2;
use redisc_core::rng::{stream, Stream};
use redisc_core::sampler::{sample_conditional_observed, sample_unconditional};
use redisc_core::schedule::{cosine_schedule, forward_mask, LabelState};

fn graph_and_labels(
    max_nodes: usize,
    classes: usize,
) -> impl Strategy<Value = (Adjacency, Vec<ClassId>, Vec<ClassId>)> {
    (2..max_nodes).prop_flat_map(move |n| {
        (
            prop::collection::vec((0..n as u32, 0..n as u32), 0..3 * n),
            prop::collection::vec(0..classes, n),
            prop::collection::vec(0..classes, n),
        )
            .prop_map(move |(edges, truth, pred)| {
                let edges = edges.into_iter().filter(|(a, b)| a != b);
                (Adjacency::from_undirected(n, edges).unwrap(), truth, pred)
            })
    })
}

struct Uniform(usize);

impl CleanPredictor for Uniform {
    fn predict_clean(&self, state: &LabelState) -> redisc_core::Result<Tensor2> {
        Ok(Tensor2::from_fn(state.num_nodes(), self.0, |_, _| 1.0 / self.0 as f64))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn subgraph_accuracy_never_exceeds_node_accuracy((adj, truth, pred) in graph_and_labels(30, 3)) {
        let truth: Vec<_> = truth.into_iter().map(Some).collect();
        let idx: Vec<u32> = (0..pred.len() as u32).collect();
        let node = node_accuracy(&pred, &truth, &idx).unwrap();
        let sub = subgraph_accuracy(&pred, &truth, &adj, &idx).unwrap();
        prop_assert!(sub <= node);
        prop_assert!((0.0..=1.0).contains(&sub));
    }

    #[test]
    fn accuracies_are_invariant_to_class_relabeling(
        (adj, truth, pred) in graph_and_labels(30, 4),
        perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let idx: Vec<u32> = (0..pred.len() as u32).collect();
        let wrap = |v: &[ClassId]| v.iter().map(|&c| Some(c)).collect::<Vec<_>>();
        let relabel = |v: &[ClassId]| v.iter().map(|&c| perm[c]).collect::<Vec<_>>();
        let (t1, p1) = (wrap(&truth), pred.clone());
        let (t2, p2) = (wrap(&relabel(&truth)), relabel(&pred));
        prop_assert_eq!(node_accuracy(&p1, &t1, &idx).unwrap(), node_accuracy(&p2, &t2, &idx).unwrap());
        prop_assert_eq!(
            subgraph_accuracy(&p1, &t1, &adj, &idx).unwrap(),
            subgraph_accuracy(&p2, &t2, &adj, &idx).unwrap()
        );
    }

    #[test]
    fn cosine_schedule_invariants(horizon in 1usize..300) {
        let s = cosine_schedule(horizon).unwrap();
        prop_assert_eq!(s.alpha(0), 1.0);
        prop_assert_eq!(s.alpha(horizon), 0.0);
        prop_assert!(s.alphas().windows(2).all(|w| w[1] < w[0]));
        prop_assert_eq!(s.denoise_rate(1), 1.0);
        for t in 1..=horizon {
            let r = s.denoise_rate(t);
            prop_assert!(r > 0.0 && r <= 1.0, "rate {} at t={}", r, t);
        }
    }

    #[test]
    fn forward_mask_only_hides_labels(
        y0 in prop::collection::vec(0usize..5, 1..60),
        horizon in 1usize..50,
        t_frac in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let s = cosine_schedule(horizon).unwrap();
        let t = ((t_frac * horizon as f64) as usize).clamp(1, horizon);
        let yt = forward_mask(&y0, t, &s, &mut stream(seed, Stream::MStep)).unwrap();
        prop_assert_eq!(yt.t, t);
        for (l, &c) in yt.labels.iter().zip(&y0) {
            prop_assert!(l.is_none() || *l == Some(c));
        }
        if t == horizon {
            prop_assert_eq!(yt.masked_count(), y0.len());
        }
    }

    #[test]
    fn conditional_samples_respect_observed_labels(
        observed in prop::collection::vec(prop::option::of(0usize..3), 1..40),
        horizon in 1usize..30,
        seed in any::<u64>(),
    ) {
        let s = cosine_schedule(horizon).unwrap();
        let n = observed.len();
        let mut rng = stream(seed, Stream::EStep);
        let mut prev = LabelState::all_sink(n, horizon);
        let mut transitions = vec![0usize; n];
        let mut changed = false;
        let out = sample_conditional_observed(&Uniform(3), &observed, &s, &mut rng, |st| {
            for (i, count) in transitions.iter_mut().enumerate() {
                match (prev.labels[i], st.labels[i]) {
                    (None, Some(_)) => *count += 1,
                    (Some(a), b) if b != Some(a) => changed = true,
                    _ => {}
                }
            }
            prev = st.clone();
        }).unwrap();
        prop_assert!(!changed);
        prop_assert!(transitions.iter().all(|&k| k == 1));
        prop_assert_eq!(out.trace.len(), horizon);
        let classes = out.classes();
        for (o, c) in observed.iter().zip(&classes) {
            if let Some(o) = o {
                prop_assert_eq!(o, c);
            }
        }
        let total: usize = out.trace.iter().map(|t| t.labeled_selected + t.unlabeled_selected).sum();
        prop_assert_eq!(total, n);
    }

    #[test]
    fn unconditional_samples_denoise_every_node_once(n in 1usize..50, horizon in 1usize..30, seed in any::<u64>()) {
        let s = cosine_schedule(horizon).unwrap();
        let out = sample_unconditional(&Uniform(2), n, &s, &mut stream(seed, Stream::Sample)).unwrap();
        prop_assert!(out.state.is_clean());
        prop_assert_eq!(out.state.t, 0);
        prop_assert!(out.denoised_at.iter().all(|&d| (1..=horizon).contains(&d)));
        let per_step: usize = out.trace.iter().map(|t| t.budget).sum();
        prop_assert_eq!(per_step, n);
    }

    #[test]
    fn queue_is_bounded_and_evicts_oldest(capacity in 1usize..20, priorities in prop::collection::vec(0.0f64..1.0, 0..60)) {
        let mut q = PriorityQueue::new(capacity).unwrap();
        for (k, &p) in priorities.iter().enumerate() {
            let evicted = q.push(vec![k], p);
            prop_assert!(q.len() <= capacity);
            match evicted {
                Some(e) => prop_assert_eq!(e.inserted as usize, k - capacity),
                None => prop_assert!(k < capacity),
            }
        }
        let kept = priorities.len().min(capacity);
        prop_assert_eq!(q.len(), kept);
        let expected: Vec<f64> = priorities[priorities.len() - kept..].to_vec();
        prop_assert_eq!(q.priorities(), expected);
    }

    #[test]
    fn selection_probabilities_are_a_distribution_ordered_by_priority(
        priorities in prop::collection::vec(0.0f64..1.0, 1..30),
        tau in 0.01f64..2.0,
        power in any::<bool>(),
    ) {
        let mode = if power { PriorityMode::Power } else { PriorityMode::Softmax };
        let p = selection_probabilities(&priorities, tau, mode);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        for i in 0..p.len() {
            for j in 0..p.len() {
                if priorities[i] > priorities[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }
}

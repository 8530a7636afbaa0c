//! Masking schedule, forward corruption and routing draws of the absorbing
//! (sink-state) label diffusion.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::ClassId;
use crate::rng::StreamRng;

/// Offset of the cosine schedule.
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;

/// `alpha[t]` is the probability a label is still intact at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    lambda_prime: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from `alpha[0..=T]`, which must start at 1, end at 0
    /// and strictly decrease.
    pub fn from_alpha(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        let horizon = alpha.len() - 1;
        if alpha[0] != 1.0 || alpha[horizon] != 0.0 {
            return Err(Error::InvalidArgument(
                "alpha must run from exactly 1 to exactly 0".into(),
            ));
        }
        if let Some(t) = (1..=horizon).find(|&t| alpha[t] >= alpha[t - 1]) {
            return Err(Error::InvalidArgument(format!(
                "alpha not strictly decreasing at t={t}"
            )));
        }
        let beta = (1..=horizon).map(|t| alpha[t] / alpha[t - 1]).collect();
        let lambda_prime = (1..=horizon)
            .map(|t| (alpha[t - 1] - alpha[t]) / (1.0 - alpha[t]))
            .collect();
        Ok(Self {
            alpha,
            beta,
            lambda_prime,
        })
    }

    pub fn horizon(&self) -> usize {
        self.alpha.len() - 1
    }

    /// Probability a clean label survives to step `t` (`t ∈ [0, T]`).
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// Per-step survival `alpha[t] / alpha[t-1]`, `t ∈ [1, T]`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// Probability that a node still masked at step `t` is denoised when
    /// moving to `t-1`: `(alpha[t-1] - alpha[t]) / (1 - alpha[t])`, `t ∈ [1, T]`.
    pub fn denoise_rate(&self, t: usize) -> f64 {
        self.lambda_prime[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.horizon() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [0, {}]",
                self.horizon()
            )));
        }
        Ok(())
    }
}

/// Cosine schedule with the given offset; `alpha[T]` is pinned to exactly 0.
pub fn cosine_schedule_with_offset(horizon: usize, offset: f64) -> Result<NoiseSchedule> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    let f = |t: usize| {
        let x = (t as f64 / horizon as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let mut alpha: Vec<f64> = (0..=horizon).map(|t| f(t) / f0).collect();
    alpha[0] = 1.0;
    alpha[horizon] = 0.0;
    NoiseSchedule::from_alpha(alpha)
}

pub fn cosine_schedule(horizon: usize) -> Result<NoiseSchedule> {
    cosine_schedule_with_offset(horizon, DEFAULT_COSINE_OFFSET)
}

/// Node labels at one diffusion step; `None` is the sink (masked) state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelState {
    pub t: usize,
    pub labels: Vec<Option<ClassId>>,
}

impl LabelState {
    pub fn all_sink(num_nodes: usize, t: usize) -> Self {
        Self {
            t,
            labels: vec![None; num_nodes],
        }
    }

    pub fn clean(labels: &[ClassId]) -> Self {
        Self {
            t: 0,
            labels: labels.iter().map(|&c| Some(c)).collect(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn masked_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn is_clean(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    /// The labels of a fully denoised state.
    pub fn to_classes(&self) -> Result<Vec<ClassId>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::Invariant(format!("node {i} still masked at t={}", self.t))))
            .collect()
    }
}

/// Masks each node independently, keeping its label with probability `alpha[t]`.
pub fn forward_mask(y0: &[ClassId], t: usize, sched: &NoiseSchedule, rng: &mut StreamRng) -> Result<LabelState> {
    sched.check_step(t)?;
    let keep = sched.alpha(t);
    let labels = y0
        .iter()
        .map(|&c| if rng.random::<f64>() < keep { Some(c) } else { None })
        .collect();
    Ok(LabelState { t, labels })
}

/// Routing indicators for the move from step `t` to `t-1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingDraw {
    pub t: usize,
    /// `b`: node is already denoised.
    pub denoised: Vec<bool>,
    /// `v`: keep the current value; always set for denoised nodes.
    pub keep: Vec<bool>,
    /// `v′`: a masked node is denoised at this step. Always false for denoised nodes.
    pub unmask: Vec<bool>,
}

impl RoutingDraw {
    pub fn unmask_count(&self) -> usize {
        self.unmask.iter().filter(|&&u| u).count()
    }
}

/// Draws `v′ ~ Bernoulli(λ′)` for each masked node; denoised nodes consume no
/// randomness.
pub fn draw_routing(state: &LabelState, sched: &NoiseSchedule, rng: &mut StreamRng) -> Result<RoutingDraw> {
    let t = state.t;
    if t == 0 || t > sched.horizon() {
        return Err(Error::InvalidArgument(format!(
            "routing needs t in [1, {}], got {t}",
            sched.horizon()
        )));
    }
    let rate = sched.denoise_rate(t);
    let denoised: Vec<bool> = state.labels.iter().map(Option::is_some).collect();
    let unmask = denoised.iter().map(|&b| !b && rng.random::<f64>() < rate).collect();
    Ok(RoutingDraw {
        t,
        keep: vec![true; denoised.len()],
        denoised,
        unmask,
    })
}

/// Per-node loss weights `λ′·(1 − b)` and the masked (active) node set.
pub fn loss_weight_and_mask(yt: &LabelState, sched: &NoiseSchedule) -> Result<(Vec<f64>, Vec<usize>)> {
    let t = yt.t;
    if t == 0 || t > sched.horizon() {
        return Err(Error::InvalidArgument(format!(
            "loss weights need t in [1, {}], got {t}",
            sched.horizon()
        )));
    }
    let rate = sched.denoise_rate(t);
    let mut weights = vec![0.0; yt.num_nodes()];
    let mut active = Vec::new();
    for (i, l) in yt.labels.iter().enumerate() {
        if l.is_none() {
            weights[i] = rate;
            active.push(i);
        }
    }
    Ok((weights, active))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn cosine_endpoints_are_exact() {
        for horizon in 1..=512 {
            let s = cosine_schedule(horizon).unwrap();
            assert_eq!(s.alpha(0), 1.0);
            assert_eq!(s.alpha(horizon), 0.0);
            assert!(s.alphas().windows(2).all(|w| w[1] < w[0]), "T={horizon}");
            assert_eq!(s.denoise_rate(1), 1.0);
            assert_eq!(s.denoise_rate(horizon), s.alpha(horizon - 1));
            for t in 1..=horizon {
                let r = s.denoise_rate(t);
                assert!(r > 0.0 && r <= 1.0);
            }
        }
    }

    #[test]
    fn denoise_rates_match_closed_form() {
        let s = cosine_schedule(4).unwrap();
        let g = |t: f64| ((t / 4.0 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let alpha = |t: usize| if t == 4 { 0.0 } else { g(t as f64) / g(0.0) };
        for t in 1..=4 {
            let expected = (alpha(t - 1) - alpha(t)) / (1.0 - alpha(t));
            assert!((s.denoise_rate(t) - expected).abs() < 1e-12);
            assert!((s.beta(t) - alpha(t) / alpha(t - 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_mask_endpoints() {
        let s = cosine_schedule(10).unwrap();
        let y0: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let mut rng = stream(3, Stream::MStep);
        assert_eq!(forward_mask(&y0, 0, &s, &mut rng).unwrap(), LabelState::clean(&y0));
        assert_eq!(forward_mask(&y0, 10, &s, &mut rng).unwrap().masked_count(), 50);
        assert!(forward_mask(&y0, 11, &s, &mut rng).is_err());
    }

    #[test]
    fn forward_mask_count_concentrates() {
        let s = NoiseSchedule::from_alpha(vec![1.0, 0.5, 0.0]).unwrap();
        let y0 = vec![0usize; 10_000];
        let masked = forward_mask(&y0, 1, &s, &mut stream(9, Stream::MStep))
            .unwrap()
            .masked_count();
        assert!((4800..=5200).contains(&masked), "{masked}");
    }

    #[test]
    fn routing_without_masked_nodes_consumes_no_randomness() {
        let s = cosine_schedule(5).unwrap();
        let state = LabelState {
            t: 3,
            labels: vec![Some(1); 20],
        };
        let mut rng = stream(4, Stream::EStep);
        let before = rng.clone();
        let r = draw_routing(&state, &s, &mut rng).unwrap();
        assert!(r.denoised.iter().all(|&b| b));
        assert_eq!(r.unmask_count(), 0);
        assert_eq!(rng, before);
    }

    #[test]
    fn routing_at_first_step_unmasks_everything() {
        let s = cosine_schedule(5).unwrap();
        let state = LabelState::all_sink(100, 1);
        let r = draw_routing(&state, &s, &mut stream(4, Stream::EStep)).unwrap();
        assert_eq!(r.unmask_count(), 100);
    }

    #[test]
    fn routing_unmask_rate_concentrates() {
        let s = cosine_schedule(8).unwrap();
        let t = 6;
        let p = s.denoise_rate(t);
        let n = 100_000;
        let r = draw_routing(&LabelState::all_sink(n, t), &s, &mut stream(5, Stream::EStep)).unwrap();
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((r.unmask_count() as f64 - n as f64 * p).abs() < 4.0 * sigma);
    }

    #[test]
    fn loss_weights_follow_mask() {
        let s = cosine_schedule(6).unwrap();
        let all = LabelState::all_sink(4, 6);
        let (w, active) = loss_weight_and_mask(&all, &s).unwrap();
        assert_eq!(active, vec![0, 1, 2, 3]);
        assert!(w.iter().all(|&x| x == s.alpha(5)));

        let none = LabelState {
            t: 2,
            labels: vec![Some(0); 4],
        };
        let (w, active) = loss_weight_and_mask(&none, &s).unwrap();
        assert!(active.is_empty());
        assert!(w.iter().all(|&x| x == 0.0));
    }
}

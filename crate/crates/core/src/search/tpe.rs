//! Tree-structured Parzen estimator over independent categorical and bounded
//! continuous dimensions.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "kind")]
pub enum Dim {
    /// Choice among `n` options, encoded as the index `0..n`.
    Categorical { n: usize },
    /// A real value in `[0, 1]`.
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Space {
    pub dims: Vec<Dim>,
}

impl Space {
    pub fn new(dims: Vec<Dim>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::contract("search space has no dimensions"));
        }
        if dims.iter().any(|d| matches!(d, Dim::Categorical { n: 0 })) {
            return Err(Error::contract("categorical dimension with no options"));
        }
        Ok(Space { dims })
    }

    pub fn sample_uniform(&self, rng: &mut Rng) -> Vec<f64> {
        self.dims
            .iter()
            .map(|d| match *d {
                Dim::Categorical { n } => rng.random_range(0..n) as f64,
                Dim::Unit => rng.random_range(0.0..=1.0),
            })
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims.len()
            && self.dims.iter().zip(x).all(|(d, &v)| match *d {
                Dim::Categorical { n } => v >= 0.0 && v.fract() == 0.0 && (v as usize) < n,
                Dim::Unit => (0.0..=1.0).contains(&v),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct TpeConfig {
    /// Quantile of observed scores that separates good from bad trials.
    pub gamma: f64,
    /// Samples drawn from the good density per suggestion.
    pub n_candidates: usize,
    /// Observations required before the density model replaces uniform sampling.
    pub startup: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            gamma: 0.25,
            n_candidates: 24,
            startup: 10,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if self.n_candidates == 0 {
            return Err(Error::Config("n_candidates must be positive".into()));
        }
        Ok(())
    }
}

/// One evaluated point; lower scores are better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub score: f64,
}

/// Largest kernel bandwidth on the unit interval.
const MAX_BANDWIDTH: f64 = 1.0;

/// Smallest bandwidth for a density fitted to `n` points: the interval width
/// divided by `min(100, n + 1)`. Without this floor a cluster of near-equal
/// observations shrinks the kernels until the search stops moving.
fn min_bandwidth(n: usize) -> f64 {
    1.0 / ((n + 1).min(100) as f64)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Mixture of Gaussians truncated to `[0, 1]`, one per observation with a
/// common bandwidth from Scott's rule (floored by [`min_bandwidth`]), plus a
/// uniform prior component.
struct UnitKde {
    centres: Vec<f64>,
    sigma: f64,
    /// Probability mass of each truncated kernel inside the interval.
    mass: Vec<f64>,
}

impl UnitKde {
    fn fit(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let sigma = if values.len() < 2 {
            MAX_BANDWIDTH
        } else {
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var.sqrt() * n.powf(-0.2)).clamp(min_bandwidth(values.len()), MAX_BANDWIDTH)
        };
        let mass = values
            .iter()
            .map(|&c| normal_cdf((1.0 - c) / sigma) - normal_cdf(-c / sigma))
            .collect();
        UnitKde {
            centres: values.to_vec(),
            sigma,
            mass,
        }
    }

    fn weight(&self) -> f64 {
        1.0 / (self.centres.len() as f64 + 1.0)
    }

    fn pdf(&self, x: f64) -> f64 {
        let w = self.weight();
        let s = self.sigma;
        let kernels: f64 = self
            .centres
            .iter()
            .zip(&self.mass)
            .map(|(&c, &m)| {
                let z = (x - c) / s;
                (-0.5 * z * z).exp() / (s * (std::f64::consts::TAU).sqrt() * m)
            })
            .sum();
        w * (1.0 + kernels)
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        let pick = rng.random_range(0..=self.centres.len());
        if pick == self.centres.len() {
            return rng.random_range(0.0..=1.0);
        }
        let c = self.centres[pick];
        loop {
            let z: f64 = StandardNormal.sample(rng);
            let x = c + self.sigma * z;
            if (0.0..=1.0).contains(&x) {
                return x;
            }
        }
    }
}

/// Smoothed frequencies with one pseudo-count per option.
struct CategoricalDensity {
    probs: Vec<f64>,
}

impl CategoricalDensity {
    fn fit(values: &[f64], n: usize) -> Self {
        let mut counts = vec![1.0; n];
        for &v in values {
            counts[v as usize] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        CategoricalDensity {
            probs: counts.into_iter().map(|c| c / total).collect(),
        }
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i as f64;
            }
        }
        (self.probs.len() - 1) as f64
    }
}

enum Density {
    Cat(CategoricalDensity),
    Cont(UnitKde),
}

impl Density {
    fn fit(dim: Dim, values: &[f64]) -> Self {
        match dim {
            Dim::Categorical { n } => Density::Cat(CategoricalDensity::fit(values, n)),
            Dim::Unit => Density::Cont(UnitKde::fit(values)),
        }
    }

    fn log_pdf(&self, x: f64) -> f64 {
        match self {
            Density::Cat(c) => c.probs[x as usize].ln(),
            Density::Cont(k) => k.pdf(x).ln(),
        }
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            Density::Cat(c) => c.sample(rng),
            Density::Cont(k) => k.sample(rng),
        }
    }
}

/// Splits observations into the best `max(1, ceil(gamma * n))` and the rest,
/// ordering equal scores by position in the history.
pub fn split_good_bad(history: &[Observation], gamma: f64) -> (Vec<&Observation>, Vec<&Observation>) {
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| history[a].score.total_cmp(&history[b].score).then(a.cmp(&b)));
    let n = history.len();
    let mut n_good = ((gamma * n as f64).ceil() as usize).max(1);
    if n >= 2 {
        n_good = n_good.min(n - 1);
    }
    let good = order[..n_good.min(n)].iter().map(|&i| &history[i]).collect();
    let bad = order[n_good.min(n)..].iter().map(|&i| &history[i]).collect();
    (good, bad)
}

/// Proposes the next point to evaluate. Until `config.startup` observations
/// exist (and while fewer than two exist) the proposal is uniform; afterwards
/// it is the candidate drawn from the good density that maximizes the ratio of
/// good to bad density.
pub fn tpe_suggest(history: &[Observation], space: &Space, config: &TpeConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    config.validate()?;
    if space.dims.is_empty() {
        return Err(Error::contract("search space has no dimensions"));
    }
    if let Some(o) = history.iter().find(|o| !space.contains(&o.x)) {
        return Err(Error::contract(format!("observation {:?} lies outside the space", o.x)));
    }
    if history.iter().any(|o| !o.score.is_finite()) {
        return Err(Error::NonFinite("observation score".into()));
    }
    if history.len() < config.startup.max(2) {
        return Ok(space.sample_uniform(rng));
    }
    let (good, bad) = split_good_bad(history, config.gamma);
    let models: Vec<(Density, Density)> = space
        .dims
        .iter()
        .enumerate()
        .map(|(j, &dim)| {
            let gv: Vec<f64> = good.iter().map(|o| o.x[j]).collect();
            let bv: Vec<f64> = bad.iter().map(|o| o.x[j]).collect();
            (Density::fit(dim, &gv), Density::fit(dim, &bv))
        })
        .collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..config.n_candidates {
        let x: Vec<f64> = models.iter().map(|(l, _)| l.sample(rng)).collect();
        let score: f64 = models
            .iter()
            .zip(&x)
            .map(|((l, g), &v)| l.log_pdf(v) - g.log_pdf(v))
            .sum();
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, x));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// Sequential minimization of `f` for `trials` evaluations.
pub fn minimize<F>(f: F, space: &Space, config: &TpeConfig, trials: usize, rng: &mut Rng) -> Result<Vec<Observation>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut history = Vec::with_capacity(trials);
    for _ in 0..trials {
        let x = tpe_suggest(&history, space, config, rng)?;
        let score = f(&x);
        history.push(Observation { x, score });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn kde_integrates_to_one() {
        let k = UnitKde::fit(&[0.0, 0.1, 0.95]);
        let steps = 20000;
        let integral: f64 = (0..steps).map(|i| k.pdf((i as f64 + 0.5) / steps as f64)).sum::<f64>() / steps as f64;
        assert!((integral - 1.0).abs() < 1e-3, "{integral}");
    }

    #[test]
    fn split_respects_quantile_and_ties() {
        let h: Vec<Observation> = [3.0, 1.0, 1.0, 2.0, 5.0, 4.0, 0.5, 9.0]
            .iter()
            .map(|&s| Observation { x: vec![0.0], score: s })
            .collect();
        let (g, b) = split_good_bad(&h, 0.25);
        assert_eq!(g.len(), 2);
        assert_eq!(b.len(), 6);
        assert_eq!(g[0].score, 0.5);
        assert!(std::ptr::eq(g[1], &h[1]));
    }

    #[test]
    fn startup_is_uniform_and_bounded() {
        let space = Space::new(vec![Dim::Categorical { n: 3 }, Dim::Unit, Dim::Unit]).unwrap();
        let mut r = rng::stream(0, &[]);
        let one = vec![Observation { x: vec![1.0, 0.5, 0.5], score: 0.0 }];
        let a = tpe_suggest(&one, &space, &TpeConfig::default(), &mut r.clone()).unwrap();
        assert_eq!(a, space.sample_uniform(&mut r));
        let hist = minimize(|x| x[1] + x[2], &space, &TpeConfig::default(), 40, &mut r).unwrap();
        assert!(hist.iter().all(|o| space.contains(&o.x)));
        assert!(Space::new(vec![]).is_err());
    }
}

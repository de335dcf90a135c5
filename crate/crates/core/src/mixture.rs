//! Dataset mixing for multi-task training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, Protocol, SyntheticExample};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Square-root-of-size weighting.
    Balanced,
    /// Proportional to size, as if all datasets were concatenated.
    Uniform,
}

impl SamplerMode {
    pub const ALL: [SamplerMode; 2] = [SamplerMode::Balanced, SamplerMode::Uniform];

    pub fn name(self) -> &'static str {
        match self {
            SamplerMode::Balanced => "balanced",
            SamplerMode::Uniform => "uniform",
        }
    }
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown sampler mode {s:?} (expected balanced or uniform)"))
    }
}

/// `p_d = w_d * sqrt(S_d) / sum_i w_i * sqrt(S_i)`.
pub fn mixture_weights(sizes: &[usize], overrides: &[f64]) -> Result<Vec<f64>> {
    if sizes.len() != overrides.len() {
        return Err(Error::Contract(format!("{} sizes but {} overrides", sizes.len(), overrides.len())));
    }
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Contract(format!("dataset {i} has size 0")));
    }
    if let Some(w) = overrides.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::Contract(format!("weight override {w} must be positive")));
    }
    let raw: Vec<f64> = sizes.iter().zip(overrides).map(|(&s, w)| w * (s as f64).sqrt()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// `p_d = S_d / sum_i S_i`.
pub fn uniform_mode(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() || sizes.iter().all(|&s| s == 0) {
        return Err(Error::Contract("no examples to sample from".into()));
    }
    let total: usize = sizes.iter().sum();
    Ok(sizes.iter().map(|&s| s as f64 / total as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSchedule {
    pub names: Vec<String>,
    pub sizes: Vec<usize>,
    pub overrides: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl MixtureSchedule {
    pub fn new(datasets: &[DatasetSpec], mode: SamplerMode) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Contract("mixture needs at least one dataset".into()));
        }
        let sizes: Vec<usize> = datasets.iter().map(DatasetSpec::size).collect();
        let overrides: Vec<f64> = datasets.iter().map(|d| d.weight_override).collect();
        let probabilities = match mode {
            SamplerMode::Balanced => mixture_weights(&sizes, &overrides)?,
            SamplerMode::Uniform => uniform_mode(&sizes)?,
        };
        Ok(Self {
            names: datasets.iter().map(|d| d.name.clone()).collect(),
            sizes,
            overrides,
            probabilities,
        })
    }

    /// Inverse-CDF draw of a dataset index.
    pub fn draw(&self, rng: &mut SplitMix64) -> usize {
        let u = rng.next_f64();
        let mut acc = 0.0;
        for (i, p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probabilities.len() - 1
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub dataset: &'a DatasetSpec,
    pub example: &'a SyntheticExample,
    pub template_idx: usize,
}

/// A dataset by the schedule, an example uniformly within it, and a
/// template uniformly from that task's set.
pub fn next_sample<'a>(schedule: &MixtureSchedule, protocol: &'a Protocol, rng: &mut SplitMix64) -> Result<Sample<'a>> {
    let name = &schedule.names[schedule.draw(rng)];
    let dataset = protocol.find(name)?;
    if dataset.examples.is_empty() {
        return Err(Error::Contract(format!("dataset {name} has no training examples")));
    }
    let example = &dataset.examples[rng.below(dataset.examples.len())];
    let templates = protocol.templates_for(dataset.task_kind);
    let template_idx = rng.below(templates.len().max(1));
    Ok(Sample { dataset, example, template_idx })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_protocol, ProtocolConfig};
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn square_root_weighting() {
        let p = mixture_weights(&[1, 4, 9], &[1.0; 3]).unwrap();
        assert_eq!(p, vec![1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]);
        assert_eq!(mixture_weights(&[7, 7], &[1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        assert!(close(&mixture_weights(&[4, 4], &[0.5, 1.0]).unwrap(), &[1.0 / 3.0, 2.0 / 3.0], 1e-15));
        assert!(mixture_weights(&[3, 0], &[1.0, 1.0]).is_err());
        assert!(mixture_weights(&[3, 1], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn size_proportional_weighting() {
        assert_eq!(uniform_mode(&[1, 4, 9]).unwrap(), vec![1.0 / 14.0, 4.0 / 14.0, 9.0 / 14.0]);
        assert_eq!(uniform_mode(&[5, 5]).unwrap(), vec![0.5, 0.5]);
        assert_ne!(uniform_mode(&[1, 4]).unwrap(), mixture_weights(&[1, 4], &[1.0, 1.0]).unwrap());
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_are_scale_free(
            sizes in proptest::collection::vec(1usize..5000, 1..8),
            c in 1usize..50,
        ) {
            let ones = vec![1.0; sizes.len()];
            let p = mixture_weights(&sizes, &ones).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            let scaled: Vec<usize> = sizes.iter().map(|s| s * c).collect();
            prop_assert!(close(&p, &mixture_weights(&scaled, &ones).unwrap(), 1e-15));
        }

        #[test]
        fn growing_one_dataset_takes_share_from_the_rest(
            sizes in proptest::collection::vec(1usize..5000, 2..8),
            pick in 0usize..8,
            extra in 1usize..5000,
        ) {
            let i = pick % sizes.len();
            let ones = vec![1.0; sizes.len()];
            let before = mixture_weights(&sizes, &ones).unwrap();
            let mut grown = sizes.clone();
            grown[i] += extra;
            let after = mixture_weights(&grown, &ones).unwrap();
            for j in 0..sizes.len() {
                if j == i {
                    prop_assert!(after[j] > before[j]);
                } else {
                    prop_assert!(after[j] < before[j]);
                }
            }
        }
    }

    fn monte_carlo(probabilities: Vec<f64>, draws: usize, seed: u64) -> Vec<f64> {
        let n = probabilities.len();
        let s = MixtureSchedule { names: vec![String::new(); n], sizes: vec![1; n], overrides: vec![1.0; n], probabilities };
        let mut rng = SplitMix64::new(seed);
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            counts[s.draw(&mut rng)] += 1;
        }
        counts.iter().map(|&c| c as f64 / draws as f64).collect()
    }

    #[test]
    fn empirical_frequencies_track_probabilities() {
        let p = mixture_weights(&[1, 4, 9], &[1.0; 3]).unwrap();
        assert!(close(&monte_carlo(p.clone(), 60_000, 17), &p, 0.01));
        assert_eq!(monte_carlo(vec![1.0], 100, 1), vec![1.0]);
    }

    #[test]
    fn samples_are_deterministic_and_templates_uniform() {
        let protocol = build_protocol(3, &ProtocolConfig::default());
        let schedule = MixtureSchedule::new(&protocol.held_in, SamplerMode::Balanced).unwrap();
        let draw = |seed| {
            let mut rng = SplitMix64::new(seed);
            (0..50)
                .map(|_| {
                    let s = next_sample(&schedule, &protocol, &mut rng).unwrap();
                    (s.dataset.name.clone(), s.example.example_hash, s.template_idx)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));

        let only_vqa: Vec<DatasetSpec> = protocol.held_in.iter().filter(|d| d.name == "synth-vqa-A").cloned().collect();
        let schedule = MixtureSchedule::new(&only_vqa, SamplerMode::Balanced).unwrap();
        let n_templates = protocol.templates_for(only_vqa[0].task_kind).len();
        let mut counts = vec![0usize; n_templates];
        let mut rng = SplitMix64::new(9);
        for _ in 0..10_000 {
            let s = next_sample(&schedule, &protocol, &mut rng).unwrap();
            assert_eq!(s.dataset.name, "synth-vqa-A");
            counts[s.template_idx] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0 / n_templates as f64).abs() <= 0.02);
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a skip schedule was specified.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipDescriptor {
    Full,
    Interval(usize),
    Explicit,
}

/// The steps at which the noise prediction is treated as random. Outside
/// this set the sampler uses the plain network output and the moment
/// recursion drops the noise variance and covariance terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipSchedule {
    num_steps: usize,
    member: Vec<bool>,
    descriptor: SkipDescriptor,
}

impl SkipSchedule {
    pub fn full(num_steps: usize) -> Self {
        let mut member = vec![true; num_steps + 1];
        member[0] = false;
        Self { num_steps, member, descriptor: SkipDescriptor::Full }
    }

    /// Every `interval`-th step counted down from `T`; intervals 0 and 1 both
    /// mean the full grid.
    pub fn interval(interval: usize, num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidArgument("skip schedule over an empty grid".into()));
        }
        if interval <= 1 {
            return Ok(Self::full(num_steps));
        }
        let mut member = vec![false; num_steps + 1];
        let mut t = num_steps;
        loop {
            member[t] = true;
            if t <= interval {
                break;
            }
            t -= interval;
        }
        Ok(Self { num_steps, member, descriptor: SkipDescriptor::Interval(interval) })
    }

    pub fn explicit(steps: &[usize], num_steps: usize) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidArgument("skip schedule must be nonempty".into()));
        }
        let mut member = vec![false; num_steps + 1];
        for &t in steps {
            if t == 0 || t > num_steps {
                return Err(Error::StepOutOfRange { t, min: 1, max: num_steps });
            }
            member[t] = true;
        }
        Ok(Self { num_steps, member, descriptor: SkipDescriptor::Explicit })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn contains(&self, t: usize) -> bool {
        self.member.get(t).copied().unwrap_or(false)
    }

    /// Member steps in descending order.
    pub fn steps(&self) -> Vec<usize> {
        (1..=self.num_steps).rev().filter(|&t| self.member[t]).collect()
    }

    pub fn len(&self) -> usize {
        self.member.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn descriptor(&self) -> &SkipDescriptor {
        &self.descriptor
    }

    /// Short label used in CSV rows: `full`, `interval-4` or `explicit-<n>`.
    pub fn describe(&self) -> String {
        match self.descriptor {
            SkipDescriptor::Full => "full".into(),
            SkipDescriptor::Interval(k) => format!("interval-{k}"),
            SkipDescriptor::Explicit => format!("explicit-{}", self.len()),
        }
    }
}

//! Central finite-difference check of analytic gradients.
//!
//! The checker perturbs one stored value at a time, reads back the value the
//! storage type actually holds, divides by that realized step and does all of
//! its own arithmetic in `f64`. A perturbation that flips any ReLU (reported
//! through [`Probe::pattern`]) is retried with a step ten times smaller, up to
//! `kink_retries` times; coordinates that keep crossing a kink are skipped.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Step relative to the coordinate magnitude.
    pub rel_step: f64,
    /// Lower bound on the step.
    pub min_step: f64,
    /// Coordinates sampled per parameter group; `0` checks all of them.
    pub coords_per_group: usize,
    /// Gradients smaller than this are compared in absolute terms.
    pub abs_floor: f64,
    pub kink_retries: u32,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            rel_step: 1e-3,
            min_step: 1e-4,
            coords_per_group: 24,
            abs_floor: 1e-5,
            kink_retries: 3,
            seed: 0,
        }
    }
}

/// One scalar evaluation of the function under test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub loss: f64,
    /// Digest of every ReLU's on/off state; differs when a kink was crossed.
    pub pattern: u64,
}

/// A function of named parameter groups with an analytic gradient.
pub trait Differentiable {
    fn group_names(&self) -> Vec<String>;
    fn group_len(&self, group: usize) -> usize;
    fn get(&self, group: usize, index: usize) -> f64;
    /// Stores `value`, rounded to whatever the storage type holds.
    fn set(&mut self, group: usize, index: usize, value: f64);
    fn evaluate(&self) -> Probe;
    /// Analytic gradient, one vector per group.
    fn gradient(&self) -> Vec<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub group: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst: Option<CoordCheck>,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    /// Worst relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// Coordinates with a non-finite analytic or numeric value.
    pub non_finite: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_error < tolerance
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn gradcheck<D: Differentiable>(model: &mut D, config: &GradCheckConfig) -> GradCheckReport {
    let analytic = model.gradient();
    let base = model.evaluate();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport::default();

    for (g, name) in model.group_names().into_iter().enumerate() {
        let len = model.group_len(g);
        let indices: Vec<usize> = if config.coords_per_group == 0 || config.coords_per_group >= len {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, config.coords_per_group).into_vec();
            v.sort_unstable();
            v
        };
        let mut group = GroupReport {
            name: name.clone(),
            ..Default::default()
        };
        for i in indices {
            let orig = model.get(g, i);
            let mut step = (config.rel_step * orig.abs()).max(config.min_step);
            let mut numeric = None;
            for _ in 0..=config.kink_retries {
                model.set(g, i, orig + step);
                let plus = model.get(g, i);
                let fp = model.evaluate();
                model.set(g, i, orig - step);
                let minus = model.get(g, i);
                let fm = model.evaluate();
                model.set(g, i, orig);
                if fp.pattern == base.pattern && fm.pattern == base.pattern {
                    numeric = Some((fp.loss - fm.loss) / (plus - minus));
                    break;
                }
                step /= 10.0;
            }
            let Some(numeric) = numeric else {
                group.skipped_kinks += 1;
                continue;
            };

            let a = analytic[g][i];
            let check = CoordCheck {
                group: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, config.abs_floor),
            };
            if !a.is_finite() || !numeric.is_finite() {
                report.non_finite.push(check);
                continue;
            }
            group.checked += 1;
            report.max_rel_error = report.max_rel_error.max(check.rel_error);
            if group.worst.as_ref().is_none_or(|w| check.rel_error > w.rel_error) {
                group.worst = Some(check);
            }
        }
        report.groups.push(group);
    }
    report
}

/// FNV-1a over a stream of booleans; used to fingerprint ReLU states.
#[derive(Clone, Copy, Debug)]
pub struct PatternHasher(u64);

impl Default for PatternHasher {
    fn default() -> Self {
        PatternHasher(0xcbf2_9ce4_8422_2325)
    }
}

impl PatternHasher {
    pub fn push(&mut self, bit: bool) {
        self.0 ^= bit as u64 + 1;
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
    }

    pub fn push_positive<T: Scalar>(&mut self, xs: &[T]) {
        for &x in xs {
            self.push(x > T::ZERO);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

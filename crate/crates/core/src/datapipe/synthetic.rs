use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Labels, Split, Stay, TaskKind, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::grouping::GroupingScheme;

const AR_COEF: f64 = 0.9;
const TARGET_PREVALENCE: f64 = 0.10;
const PREVALENCE_RANGE: (f64, f64) = (0.05, 0.15);
const CALIBRATION_STEPS: usize = 200;

/// Parameters of the group-structured generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_stays: usize,
    /// Maximum stay length; lengths are drawn from `[ceil(T/2), T]`.
    pub t: usize,
    pub k: usize,
    pub feats_per_group: usize,
    pub missing_rate: f64,
    pub task: TaskKind,
    /// Groups whose interaction drives the label; all groups when `None`.
    pub signal_groups: Option<Vec<usize>>,
    /// Std of the readout noise, relative to the unit-variance latent.
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(
        seed: u64,
        n_stays: usize,
        t: usize,
        k: usize,
        feats_per_group: usize,
        missing_rate: f64,
        task: TaskKind,
    ) -> Self {
        Self { seed, n_stays, t, k, feats_per_group, missing_rate, task, signal_groups: None, noise: 0.3 }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic: {m}")));
        if self.n_stays < 3 || self.t == 0 || self.k == 0 {
            return bad("need n_stays >= 3 and positive T and K");
        }
        if self.feats_per_group < 2 {
            return bad("each group needs at least 2 features");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)");
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return bad("noise must be nonnegative");
        }
        if self.task == TaskKind::Multiclass {
            return bad("multiclass labels are not generated");
        }
        if let Some(sg) = &self.signal_groups {
            if sg.is_empty() || sg.iter().any(|&g| g >= self.k) {
                return bad("signal_groups must name existing groups");
            }
        }
        Ok(())
    }
}

/// One readout `scale * (f(z) + noise) + offset` of a group's latent pair.
#[derive(Clone, Copy)]
enum Readout {
    First,
    Second,
    Mix(f64, f64),
    Square(bool),
}

impl Readout {
    fn eval(self, z: (f64, f64)) -> f64 {
        match self {
            Readout::First => z.0,
            Readout::Second => z.1,
            Readout::Mix(a, b) => a * z.0 + b * z.1,
            Readout::Square(first) => {
                let v = if first { z.0 } else { z.1 };
                (v * v - 1.0) / std::f64::consts::SQRT_2
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Threshold `tau` on `sigmoid(score)` found by bisection so that the share
/// of scores above it is near the target prevalence.
fn calibrate(scores: &[f64]) -> Result<f64> {
    let frac = |tau: f64| scores.iter().filter(|&&s| sigmoid(s) > tau).count() as f64 / scores.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = (f64::INFINITY, 0.5);
    for _ in 0..CALIBRATION_STEPS {
        let mid = 0.5 * (lo + hi);
        let p = frac(mid);
        if (p - TARGET_PREVALENCE).abs() < best.0 {
            best = ((p - TARGET_PREVALENCE).abs(), mid);
        }
        if p > TARGET_PREVALENCE {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = frac(best.1);
    if !(PREVALENCE_RANGE.0..=PREVALENCE_RANGE.1).contains(&p) {
        return Err(Error::Data(format!("prevalence calibration failed: best threshold gives {p:.4} positives")));
    }
    Ok(best.1)
}

/// Generates stays whose label depends on a product of two latent factors
/// within each signal group, observed only through noisy, rescaled readouts.
/// Returns the dataset (with the true grouping attached) and the grouping.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(TimeSeriesDataset, GroupingScheme)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, f) = (spec.k, spec.feats_per_group);
    let d = k * f;

    // features of group g occupy slots g*f .. (g+1)*f before shuffling
    let mut readouts = Vec::with_capacity(d);
    let mut scales = Vec::with_capacity(d);
    for _ in 0..k {
        for j in 0..f {
            readouts.push(match j {
                0 => Readout::First,
                1 => Readout::Second,
                _ if j % 3 == 1 => Readout::Square(rng.gen_bool(0.5)),
                _ => {
                    let a: f64 = rng.gen_range(-1.0..1.0);
                    let b: f64 = rng.gen_range(-1.0..1.0);
                    let n = (a * a + b * b).sqrt().max(1e-3);
                    Readout::Mix(a / n, b / n)
                }
            });
            scales.push((rng.gen_range(-2.0f64..2.0).exp(), rng.gen_range(-10.0..10.0)));
        }
    }
    let mut column_of: Vec<usize> = (0..d).collect();
    column_of.shuffle(&mut rng);
    let signal: Vec<bool> = match &spec.signal_groups {
        Some(sg) => (0..k).map(|g| sg.contains(&g)).collect(),
        None => vec![true; k],
    };
    let coef: Vec<f64> = signal.iter().map(|&s| if s { rng.gen_range(1.0..1.5) } else { 0.0 }).collect();

    let min_len = spec.t.div_ceil(2).max(1);
    let mut stays = Vec::with_capacity(spec.n_stays);
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(spec.n_stays);
    let innovation = (1.0 - AR_COEF * AR_COEF).sqrt();
    for s in 0..spec.n_stays {
        let len = rng.gen_range(min_len..=spec.t);
        let mut z: Vec<(f64, f64)> = (0..k).map(|_| (rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
        let mut x = vec![f64::NAN; len * d];
        let mut observed = vec![false; len * d];
        let mut step_scores = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 {
                for zg in z.iter_mut() {
                    let e0: f64 = rng.sample(StandardNormal);
                    let e1: f64 = rng.sample(StandardNormal);
                    *zg = (AR_COEF * zg.0 + innovation * e0, AR_COEF * zg.1 + innovation * e1);
                }
            }
            step_scores.push((0..k).map(|g| coef[g] * z[g].0 * z[g].1).sum::<f64>());
            for slot in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                let (scale, offset) = scales[slot];
                let v = scale * (readouts[slot].eval(z[slot / f]) + spec.noise * noise) + offset;
                let keep = rng.gen::<f64>() >= spec.missing_rate;
                let i = t * d + column_of[slot];
                if keep {
                    x[i] = v;
                    observed[i] = true;
                }
            }
        }
        scores.push(step_scores);
        stays.push(Stay { id: format!("stay{s:05}"), x, observed, labels: Labels::PerStay(0.0), split: Split::Train });
    }

    match spec.task {
        TaskKind::OnlineBinary => {
            let flat: Vec<f64> = scores.iter().flatten().copied().collect();
            let tau = calibrate(&flat)?;
            for (stay, sc) in stays.iter_mut().zip(&scores) {
                stay.labels = Labels::PerStep {
                    values: sc.iter().map(|&v| (sigmoid(v) > tau) as u8 as f64).collect(),
                    valid: vec![true; sc.len()],
                };
            }
        }
        TaskKind::PerStayBinary => {
            let means: Vec<f64> = scores.iter().map(|sc| sc.iter().sum::<f64>() / sc.len() as f64).collect();
            let tau = calibrate(&means)?;
            for (stay, m) in stays.iter_mut().zip(&means) {
                stay.labels = Labels::PerStay((sigmoid(*m) > tau) as u8 as f64);
            }
        }
        TaskKind::Regression => {
            for (stay, sc) in stays.iter_mut().zip(&scores) {
                let m = sc.iter().sum::<f64>() / sc.len() as f64;
                stay.labels = Labels::PerStay((48.0 + 24.0 * m).max(0.0));
            }
        }
        TaskKind::Multiclass => unreachable!("rejected by validate"),
    }

    let n = spec.n_stays;
    let n_val = ((n as f64 * 0.15).round() as usize).max(1);
    let n_test = n_val;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for (rank, &i) in order.iter().enumerate() {
        stays[i].split = if rank < n - n_val - n_test {
            Split::Train
        } else if rank < n - n_test {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut feature_names = vec![String::new(); d];
    let mut groups: Vec<(String, Vec<usize>)> = (0..k).map(|g| (format!("group{g}"), Vec::with_capacity(f))).collect();
    for slot in 0..d {
        let (g, j) = (slot / f, slot % f);
        feature_names[column_of[slot]] = format!("g{g}_f{j}");
        groups[g].1.push(column_of[slot]);
    }
    let scheme = GroupingScheme::new("true", groups);
    let ds = TimeSeriesDataset { stays, feature_names, grouping: Some(scheme.clone()), step_hours: 1.0, scaler: None };
    ds.validate()?;
    Ok((ds, scheme))
}

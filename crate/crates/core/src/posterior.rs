//! Scalar quantities of interest from a final analysis ensemble: perfusion
//! samples, Gaussian kernel density estimates and range probabilities.

use statrs::function::erf::erfc;

use crate::enkf::VoxelPosterior;
use crate::error::{Error, Result};

/// Evaluation points of the default density grid.
pub const DEFAULT_GRID_POINTS: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    values: Vec<f64>,
}

impl SampleSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySamples);
        }
        if let Some(&v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::DomainError(v));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }

    /// Unbiased sample variance; zero for a single sample.
    pub fn variance(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64
    }

    /// Fraction of samples in `[lo, hi)`.
    pub fn empirical_probability(&self, lo: f64, hi: f64) -> f64 {
        let hits = self.values.iter().filter(|&&v| v >= lo && v < hi).count();
        hits as f64 / self.len() as f64
    }

    fn sorted(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        v
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Normal-reference bandwidth `0.9·min(σ̂, IQR/1.34)·N^(−1/5)`. Falls back
/// to σ̂ when the IQR vanishes; zero only for constant data.
pub fn silverman_bandwidth(samples: &SampleSet) -> f64 {
    let sd = samples.variance().sqrt();
    let sorted = samples.sorted();
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = match iqr / 1.34 {
        r if r > 0.0 => sd.min(r),
        _ => sd,
    };
    0.9 * spread * (samples.len() as f64).powf(-0.2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Functional {
    /// `k(0)`
    PointEvalAt0,
    /// `max_t k(t)`
    MaxOverT,
}

/// Per-member functional divided by the density `rho`.
pub fn extract_samples(post: &VoxelPosterior, functional: Functional, rho: f64) -> Result<SampleSet> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::NonpositiveDensity(rho));
    }
    let ens = &post.ensemble;
    let values = match functional {
        Functional::PointEvalAt0 => ens.values_at(0).into_iter().map(|v| v / rho).collect(),
        Functional::MaxOverT => (0..ens.size())
            .map(|m| {
                let k = ens.member(m);
                k.values().iter().copied().fold(f64::NEG_INFINITY, f64::max) / rho
            })
            .collect(),
    };
    SampleSet::new(values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub grid_points: Vec<f64>,
    pub pdf_values: Vec<f64>,
    pub bandwidth: f64,
    /// Constant input: all mass sits at `grid_points[0]` and `pdf_values`
    /// is empty.
    pub point_mass: bool,
}

impl DensityEstimate {
    /// Trapezoidal integral of the tabulated density.
    pub fn integral(&self) -> f64 {
        if self.point_mass {
            return 1.0;
        }
        self.grid_points
            .windows(2)
            .zip(self.pdf_values.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }
}

/// Gaussian-kernel density estimate with Silverman bandwidth. `grid_points`
/// defaults to 512 points over `[min − 3h, max + 3h]`.
pub fn kde(samples: &SampleSet, grid_points: Option<&[f64]>) -> Result<DensityEstimate> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let h = silverman_bandwidth(samples);
    if !(h > 0.0) {
        return Ok(DensityEstimate {
            grid_points: vec![samples.values[0]],
            pdf_values: Vec::new(),
            bandwidth: 0.0,
            point_mass: true,
        });
    }
    let grid = match grid_points {
        Some(g) => g.to_vec(),
        None => {
            let lo = samples.values.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
            let hi = samples.values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
            let step = (hi - lo) / (DEFAULT_GRID_POINTS - 1) as f64;
            (0..DEFAULT_GRID_POINTS).map(|i| lo + step * i as f64).collect()
        }
    };
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let pdf_values = grid
        .iter()
        .map(|x| {
            norm * samples
                .values
                .iter()
                .map(|v| (-0.5 * ((x - v) / h).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    Ok(DensityEstimate {
        grid_points: grid,
        pdf_values,
        bandwidth: h,
        point_mass: false,
    })
}

/// Kernel density estimate CDF, evaluated analytically.
#[derive(Debug, Clone)]
pub struct KdeCdf {
    values: Vec<f64>,
    bandwidth: f64,
}

impl KdeCdf {
    pub fn new(samples: &SampleSet) -> Self {
        Self {
            values: samples.values.clone(),
            bandwidth: silverman_bandwidth(samples),
        }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// `F(x)`; for constant samples a right-continuous step.
    pub fn eval(&self, x: f64) -> f64 {
        if x == f64::NEG_INFINITY {
            return 0.0;
        }
        if x == f64::INFINITY {
            return 1.0;
        }
        let n = self.values.len() as f64;
        if self.bandwidth == 0.0 {
            return self.values.iter().filter(|&&v| v <= x).count() as f64 / n;
        }
        let scale = self.bandwidth * std::f64::consts::SQRT_2;
        let s: f64 = self
            .values
            .iter()
            .map(|v| 0.5 * erfc(-(x - v) / scale))
            .sum();
        (s / n).clamp(0.0, 1.0)
    }

    /// `F(x⁻)`; differs from `eval` only for constant samples.
    pub fn eval_left(&self, x: f64) -> f64 {
        if self.bandwidth == 0.0 && x.is_finite() {
            let n = self.values.len() as f64;
            return self.values.iter().filter(|&&v| v < x).count() as f64 / n;
        }
        self.eval(x)
    }

    /// `P[lo, hi) = F(hi⁻) − F(lo⁻)`.
    pub fn probability(&self, lo: f64, hi: f64) -> Result<f64> {
        if lo.is_nan() || hi.is_nan() || !(lo < hi) {
            return Err(Error::InvalidInterval { lo, hi });
        }
        Ok((self.eval_left(hi) - self.eval_left(lo)).max(0.0))
    }
}

/// KDE probability of `[lo, hi)`; use infinities for open ends.
pub fn range_probability(samples: &SampleSet, lo: f64, hi: f64) -> Result<f64> {
    KdeCdf::new(samples).probability(lo, hi)
}

/// Variance of the smoothed distribution: population variance plus `h²`.
pub fn kde_variance(samples: &SampleSet) -> f64 {
    let n = samples.len() as f64;
    let h = silverman_bandwidth(samples);
    samples.variance() * (n - 1.0) / n + h * h
}

/// Interval bounds for the low / mid / high perfusion probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub low: f64,
    pub mid_lo: f64,
    pub mid_hi: f64,
    pub high: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            low: 10.0,
            mid_lo: 20.0,
            mid_hi: 40.0,
            high: 50.0,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.low <= self.mid_lo && self.mid_lo < self.mid_hi && self.mid_hi <= self.high;
        if !ok || [self.low, self.mid_lo, self.mid_hi, self.high].iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("unordered thresholds {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfusionSummary {
    pub mean_p: f64,
    pub var_p: f64,
    /// `P(p < low)`
    pub prob_low: f64,
    /// `P(mid_lo ≤ p < mid_hi)`
    pub prob_mid: f64,
    /// `P(p ≥ high)`
    pub prob_high: f64,
}

pub fn summarize_samples(samples: &SampleSet, thresholds: Thresholds) -> Result<PerfusionSummary> {
    thresholds.validate()?;
    let cdf = KdeCdf::new(samples);
    Ok(PerfusionSummary {
        mean_p: samples.mean(),
        var_p: samples.variance(),
        prob_low: cdf.probability(f64::NEG_INFINITY, thresholds.low)?,
        prob_mid: cdf.probability(thresholds.mid_lo, thresholds.mid_hi)?,
        prob_high: cdf.probability(thresholds.high, f64::INFINITY)?,
    })
}

/// Moments and range probabilities of the perfusion `k(0)/ρ`.
pub fn summarize_voxel(post: &VoxelPosterior, rho: f64, thresholds: Thresholds) -> Result<PerfusionSummary> {
    let samples = extract_samples(post, Functional::PointEvalAt0, rho)?;
    summarize_samples(&samples, thresholds)
}

/// Sum of absolute increments.
pub fn total_variation(values: &[f64]) -> f64 {
    values.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn normal_samples(n: usize, mean: f64, sd: f64, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mean, sd).unwrap();
        SampleSet::new((0..n).map(|_| d.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn rejects_empty_and_nonfinite() {
        assert_eq!(SampleSet::new(vec![]), Err(Error::EmptySamples));
        assert!(SampleSet::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn standard_normal_density_at_zero() {
        let s = normal_samples(100_000, 0.0, 1.0, 1);
        let d = kde(&s, Some(&[0.0])).unwrap();
        let expected = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((d.pdf_values[0] / expected - 1.0).abs() < 0.05);
    }

    #[test]
    fn two_point_symmetry() {
        let s = SampleSet::new(vec![-1.0, 1.0]).unwrap();
        let xs = [0.3, 0.9, 1.7, 2.5];
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        let a = kde(&s, Some(&xs)).unwrap();
        let b = kde(&s, Some(&neg)).unwrap();
        for (p, q) in a.pdf_values.iter().zip(&b.pdf_values) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_samples_are_point_mass() {
        let s = SampleSet::new(vec![5.0; 10]).unwrap();
        assert!(kde(&s, None).unwrap().point_mass);
        assert!((range_probability(&s, 4.0, 6.0).unwrap() - 1.0).abs() < 1e-3);
        assert_eq!(range_probability(&s, 5.0, 6.0).unwrap(), 1.0);
        assert_eq!(range_probability(&s, 4.0, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn default_grid_integrates_to_one() {
        let s = normal_samples(2000, 3.0, 0.5, 2);
        let d = kde(&s, None).unwrap();
        assert_eq!(d.grid_points.len(), DEFAULT_GRID_POINTS);
        assert!(d.pdf_values.iter().all(|&p| p >= 0.0));
        assert!((d.integral() - 1.0).abs() < 0.01);
    }

    #[test]
    fn total_mass_and_invalid_interval() {
        let s = normal_samples(500, 0.0, 1.0, 3);
        let p = range_probability(&s, f64::NEG_INFINITY, f64::INFINITY).unwrap();
        assert!((p - 1.0).abs() < 1e-9);
        assert_eq!(
            range_probability(&s, 2.0, 1.0),
            Err(Error::InvalidInterval { lo: 2.0, hi: 1.0 })
        );
    }

    #[test]
    fn uniform_grid_matches_empirical_cdf() {
        let s = SampleSet::new((1..=100).map(f64::from).collect()).unwrap();
        let p = range_probability(&s, f64::NEG_INFINITY, 50.5).unwrap();
        let e = s.empirical_probability(f64::NEG_INFINITY, 50.5);
        assert!((p - e).abs() < 0.02);
    }

    #[test]
    fn summaries_of_concentrated_ensembles() {
        let low = summarize_samples(&normal_samples(1000, 5.0, 0.1, 4), Thresholds::default()).unwrap();
        assert!(low.prob_low > 0.999 && low.prob_mid < 1e-6 && low.prob_high < 1e-6);
        let high = summarize_samples(&normal_samples(1000, 60.0, 0.1, 5), Thresholds::default()).unwrap();
        assert!(high.prob_high > 0.999 && high.prob_low < 1e-6);
        let mid = summarize_samples(&normal_samples(10_000, 30.0, 2.0, 6), Thresholds::default()).unwrap();
        let expected = 0.5 * (erfc(-5.0 / 2f64.sqrt()) - erfc(5.0 / 2f64.sqrt()));
        assert!((mid.prob_mid - expected).abs() < 0.02);
        assert!(mid.prob_low + mid.prob_mid + mid.prob_high <= 1.0 + 1e-9);
    }

    #[test]
    fn bandwidth_rule() {
        // IQR of 1..=5 is 2, sd is √2.5
        let s = SampleSet::new(vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let expected = 0.9 * (2.0 / 1.34f64).min(2.5f64.sqrt()) * 5f64.powf(-0.2);
        assert!((silverman_bandwidth(&s) - expected).abs() < 1e-14);
    }

    #[test]
    fn total_variation_of_steps() {
        assert_eq!(total_variation(&[0.0, 1.0, -1.0, -1.0]), 3.0);
        assert_eq!(total_variation(&[2.0]), 0.0);
    }
}

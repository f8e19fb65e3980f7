//! Standardized (mean 0, variance 1) noise families with their densities,
//! scores and score derivatives.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::numeric::INV_SQRT_2PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Normal,
    /// Equal mixture of N(+-1/sqrt 2, 1/2).
    Mix2,
    /// Equal mixture of N(+-sqrt(2/3), 1/3).
    Mix3,
    /// Logistic with scale sqrt(3)/pi.
    Logistic,
    /// Student t with 4 degrees of freedom divided by sqrt 2.
    T4,
}

pub const ALL_FAMILIES: [NoiseFamily; 5] = [
    NoiseFamily::Normal,
    NoiseFamily::Mix2,
    NoiseFamily::Mix3,
    NoiseFamily::Logistic,
    NoiseFamily::T4,
];

const LIPSCHITZ_GRID_POINTS: usize = 100_001;
const LIPSCHITZ_GRID_HALF_WIDTH: f64 = 20.0;

fn logistic_scale() -> f64 {
    3f64.sqrt() / PI
}

/// (component offset, component variance) of the symmetric two-point mixtures.
fn mixture_params(fam: NoiseFamily) -> Option<(f64, f64)> {
    match fam {
        NoiseFamily::Mix2 => Some((1.0 / SQRT_2, 0.5)),
        NoiseFamily::Mix3 => Some(((2.0f64 / 3.0).sqrt(), 1.0 / 3.0)),
        _ => None,
    }
}

impl NoiseFamily {
    pub fn name(self) -> &'static str {
        match self {
            NoiseFamily::Normal => "normal",
            NoiseFamily::Mix2 => "mix2",
            NoiseFamily::Mix3 => "mix3",
            NoiseFamily::Logistic => "logistic",
            NoiseFamily::T4 => "t4",
        }
    }

    pub fn log_density(self, e: f64) -> f64 {
        match self {
            NoiseFamily::Normal => INV_SQRT_2PI.ln() - 0.5 * e * e,
            NoiseFamily::Mix2 | NoiseFamily::Mix3 => {
                let (mu, v) = mixture_params(self).unwrap();
                // log(0.5 (N(e; mu, v) + N(e; -mu, v))) via log-cosh
                let a = mu * e / v;
                let log_cosh = a.abs() + (-2.0 * a.abs()).exp().ln_1p() - std::f64::consts::LN_2;
                INV_SQRT_2PI.ln() - 0.5 * v.ln() - (e * e + mu * mu) / (2.0 * v) + log_cosh
            }
            NoiseFamily::Logistic => {
                let s = logistic_scale();
                let t = -(e / s).abs();
                t - s.ln() - 2.0 * t.exp().ln_1p()
            }
            NoiseFamily::T4 => {
                // T density (3/8)(1 + t^2/4)^(-5/2), rescaled by sqrt 2
                (SQRT_2 * 3.0 / 8.0).ln() - 2.5 * (0.5 * e * e).ln_1p()
            }
        }
    }

    pub fn density(self, e: f64) -> f64 {
        self.log_density(e).exp()
    }

    /// Derivative of the log-density.
    pub fn score(self, e: f64) -> f64 {
        match self {
            NoiseFamily::Normal => -e,
            NoiseFamily::Mix2 | NoiseFamily::Mix3 => {
                let (mu, v) = mixture_params(self).unwrap();
                (-e + mu * (mu * e / v).tanh()) / v
            }
            NoiseFamily::Logistic => {
                let s = logistic_scale();
                -(e / (2.0 * s)).tanh() / s
            }
            NoiseFamily::T4 => -5.0 * e / (2.0 + e * e),
        }
    }

    pub fn score_derivative(self, e: f64) -> f64 {
        match self {
            NoiseFamily::Normal => -1.0,
            NoiseFamily::Mix2 | NoiseFamily::Mix3 => {
                let (mu, v) = mixture_params(self).unwrap();
                let sech = 1.0 / (mu * e / v).cosh();
                -1.0 / v + mu * mu / (v * v) * sech * sech
            }
            NoiseFamily::Logistic => {
                let s = logistic_scale();
                let sech = 1.0 / (e / (2.0 * s)).cosh();
                -sech * sech / (2.0 * s * s)
            }
            NoiseFamily::T4 => {
                let q = 2.0 + e * e;
                -5.0 * (2.0 - e * e) / (q * q)
            }
        }
    }

    /// sup |score'|. Closed form for the normal and logistic families, and a
    /// maximisation over an odd, symmetric grid on [-20, 20] otherwise.
    pub fn lipschitz_constant(self) -> f64 {
        match self {
            NoiseFamily::Normal => 1.0,
            NoiseFamily::Logistic => {
                let s = logistic_scale();
                1.0 / (2.0 * s * s)
            }
            _ => self.lipschitz_on_grid(LIPSCHITZ_GRID_POINTS),
        }
    }

    /// Grid maximisation of |score'| with `points` nodes on [-20, 20].
    pub fn lipschitz_on_grid(self, points: usize) -> f64 {
        let step = 2.0 * LIPSCHITZ_GRID_HALF_WIDTH / (points - 1) as f64;
        (0..points)
            .map(|k| self.score_derivative(-LIPSCHITZ_GRID_HALF_WIDTH + step * k as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            NoiseFamily::Normal => rng.sample(StandardNormal),
            NoiseFamily::Mix2 | NoiseFamily::Mix3 => {
                let (mu, v) = mixture_params(self).unwrap();
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let g: f64 = rng.sample(StandardNormal);
                sign * mu + v.sqrt() * g
            }
            NoiseFamily::Logistic => {
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                logistic_scale() * (u / (1.0 - u)).ln()
            }
            NoiseFamily::T4 => {
                let t = StudentT::new(4.0).expect("valid degrees of freedom");
                t.sample(rng) / SQRT_2
            }
        }
    }

    pub fn sample(self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.draw(&mut rng)).collect()
    }
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_FAMILIES
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown noise family `{s}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{integrate_real_line, mean, population_variance};

    #[test]
    fn densities_are_standardized() {
        for fam in ALL_FAMILIES {
            let mass = integrate_real_line(|e| fam.density(e), 1e-12).unwrap();
            let m1 = integrate_real_line(|e| e * fam.density(e), 1e-12).unwrap();
            let m2 = integrate_real_line(|e| e * e * fam.density(e), 1e-12).unwrap();
            assert!((mass - 1.0).abs() < 1e-8, "{fam}: mass {mass}");
            assert!(m1.abs() < 1e-8, "{fam}: mean {m1}");
            assert!((m2 - 1.0).abs() < 1e-8, "{fam}: var {m2}");
        }
    }

    #[test]
    fn score_matches_numeric_log_density_derivative() {
        let h = 1e-5;
        for fam in ALL_FAMILIES {
            for k in 0..=240 {
                let e = -6.0 + 0.05 * k as f64;
                let fd = (fam.log_density(e + h) - fam.log_density(e - h)) / (2.0 * h);
                assert!((fd - fam.score(e)).abs() < 1e-8, "{fam} at {e}: {fd} vs {}", fam.score(e));
                let fd2 = (fam.score(e + h) - fam.score(e - h)) / (2.0 * h);
                assert!((fd2 - fam.score_derivative(e)).abs() < 1e-6, "{fam} deriv at {e}");
            }
        }
    }

    #[test]
    fn scores_are_odd() {
        for fam in ALL_FAMILIES {
            for k in 0..100 {
                let e = 0.07 * k as f64;
                assert_eq!(fam.score(-e), -fam.score(e), "{fam} at {e}");
            }
        }
    }

    #[test]
    fn named_score_values() {
        assert_eq!(NoiseFamily::Normal.score(1.0), -1.0);
        assert_eq!(NoiseFamily::Logistic.score(0.0), 0.0);
        // t4 oracle: p(e) ~ (1 + e^2/2)^(-5/2) => score = -5e / (2 + e^2)
        let oracle = -2.5 * (1.0 / (1.0 + 0.5)) * 1.0;
        assert!((NoiseFamily::T4.score(1.0) - oracle).abs() < 1e-10);
    }

    #[test]
    fn lipschitz_constants() {
        assert_eq!(NoiseFamily::Normal.lipschitz_constant(), 1.0);
        let c = NoiseFamily::Logistic.lipschitz_constant();
        assert!((c - PI * PI / 6.0).abs() < 1e-12);
        // mixtures: sup |rho'| = max(1/v, mu^2/v^2 - 1/v), attained at 0 or in the tails
        let mix3 = NoiseFamily::Mix3.lipschitz_constant();
        assert!((mix3 - 3.0).abs() < 1e-9, "{mix3}");
        let refined = NoiseFamily::Mix3.lipschitz_on_grid(200_001);
        assert!((refined - mix3).abs() < 1e-6);
        assert!((NoiseFamily::Mix2.lipschitz_constant() - 2.0).abs() < 1e-6);
        assert!((NoiseFamily::T4.lipschitz_constant() - 2.5).abs() < 1e-9);
    }

    #[test]
    fn fisher_information_finite_and_stable() {
        for fam in ALL_FAMILIES {
            let coarse = integrate_real_line(|e| fam.score(e).powi(2) * fam.density(e), 1e-8).unwrap();
            let fine = integrate_real_line(|e| fam.score(e).powi(2) * fam.density(e), 1e-12).unwrap();
            assert!(coarse.is_finite() && (coarse - fine).abs() < 1e-7);
        }
    }

    #[test]
    fn normal_sample_variance() {
        let draws = NoiseFamily::Normal.sample(1_000_000, 11);
        let v = population_variance(&draws);
        assert!((0.99..=1.01).contains(&v), "{v}");
    }

    #[test]
    fn samples_have_unit_variance() {
        for fam in ALL_FAMILIES {
            let draws = fam.sample(200_000, 5);
            assert!(mean(&draws).abs() < 0.02, "{fam}");
            assert!((population_variance(&draws) - 1.0).abs() < 0.05, "{fam}");
        }
    }

    #[test]
    fn mix2_has_flat_top_and_mix3_is_bimodal() {
        // offset equal to component sd: the density is flat to fourth order at 0
        assert!(NoiseFamily::Mix2.score_derivative(0.0).abs() < 1e-12);
        let draws = NoiseFamily::Mix2.sample(400_000, 3);
        let m4 = draws.iter().map(|e| e.powi(4)).sum::<f64>() / draws.len() as f64;
        assert!((m4 - 2.5).abs() < 0.05, "{m4}");

        let draws = NoiseFamily::Mix3.sample(200_000, 3);
        let mut hist = [0usize; 60];
        for e in draws {
            let b = ((e + 3.0) / 0.1).floor();
            if (0.0..60.0).contains(&b) {
                hist[b as usize] += 1;
            }
        }
        let right = (30..60).max_by_key(|&b| hist[b]).unwrap();
        let centre = -3.0 + 0.1 * right as f64 + 0.05;
        assert!(centre > 0.4 && centre < 1.0, "{centre}");
        assert!(hist[30] < hist[right]);
    }

    #[test]
    fn sampling_is_reproducible() {
        for fam in ALL_FAMILIES {
            assert_eq!(fam.sample(100, 42), fam.sample(100, 42));
        }
    }
}

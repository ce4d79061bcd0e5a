//! Synthetic instance generators: uniform, clustered, explosion, implosion.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GeldError, Result};
use crate::tsp::{MetricMode, Point, TspInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Uniform,
    Clustered,
    Explosion,
    Implosion,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Uniform, Pattern::Clustered, Pattern::Explosion, Pattern::Implosion];

    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Uniform => "uniform",
            Pattern::Clustered => "clustered",
            Pattern::Explosion => "explosion",
            Pattern::Implosion => "implosion",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pattern {
    type Err = GeldError;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| GeldError::Argument(format!("unknown pattern `{s}`")))
    }
}

/// Knobs of the non-uniform patterns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub min_clusters: usize,
    pub max_clusters: usize,
    pub cluster_sigma: f64,
    /// Radius of the disc that explosion empties and implosion contracts.
    pub radius: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self { min_clusters: 3, max_clusters: 8, cluster_sigma: 0.05, radius: 0.3 }
    }
}

fn uniform_point(rng: &mut impl Rng) -> Point {
    [rng.random::<f64>(), rng.random::<f64>()]
}

/// Largest `t` with `c + t·u` still inside the unit square.
fn ray_exit(c: Point, u: Point) -> f64 {
    let mut t = f64::INFINITY;
    for a in 0..2 {
        if u[a] > 0.0 {
            t = t.min((1.0 - c[a]) / u[a]);
        } else if u[a] < 0.0 {
            t = t.min(-c[a] / u[a]);
        }
    }
    t
}

fn explode(p: Point, c: Point, r: f64) -> Option<Point> {
    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
    let d = dx.hypot(dy);
    if d >= r {
        return Some(p);
    }
    if d == 0.0 {
        return None;
    }
    let u = [dx / d, dy / d];
    let t_max = ray_exit(c, u);
    if t_max <= r {
        return None;
    }
    // [0, r) maps linearly onto (r, t_max]
    let t = t_max - (t_max - r) * (d / r);
    let q = [(c[0] + t * u[0]).clamp(0.0, 1.0), (c[1] + t * u[1]).clamp(0.0, 1.0)];
    ((q[0] - c[0]).hypot(q[1] - c[1]) >= r).then_some(q)
}

fn one_instance(pattern: Pattern, n: usize, g: &GeneratorParams, rng: &mut ChaCha8Rng) -> Result<Vec<Point>> {
    Ok(match pattern {
        Pattern::Uniform => (0..n).map(|_| uniform_point(rng)).collect(),
        Pattern::Clustered => {
            let k = rng.random_range(g.min_clusters..=g.max_clusters);
            let centers: Vec<Point> = (0..k).map(|_| uniform_point(rng)).collect();
            let noise = Normal::new(0.0, g.cluster_sigma)
                .map_err(|e| GeldError::Argument(format!("cluster sigma: {e}")))?;
            (0..n)
                .map(|_| {
                    let c = centers[rng.random_range(0..k)];
                    [
                        (c[0] + noise.sample(rng)).clamp(0.0, 1.0),
                        (c[1] + noise.sample(rng)).clamp(0.0, 1.0),
                    ]
                })
                .collect()
        }
        Pattern::Explosion => {
            let c = uniform_point(rng);
            (0..n)
                .map(|_| loop {
                    let p = uniform_point(rng);
                    if let Some(q) = explode(p, c, g.radius) {
                        break q;
                    }
                })
                .collect()
        }
        Pattern::Implosion => {
            let c = uniform_point(rng);
            (0..n)
                .map(|_| {
                    let p = uniform_point(rng);
                    if (p[0] - c[0]).hypot(p[1] - c[1]) < g.radius {
                        [c[0] + 0.5 * (p[0] - c[0]), c[1] + 0.5 * (p[1] - c[1])]
                    } else {
                        p
                    }
                })
                .collect()
        }
    })
}

/// `count` instances of `n` nodes, fully determined by the arguments.
pub fn generate_instances_with(
    pattern: Pattern,
    n: usize,
    count: usize,
    seed: u64,
    params: &GeneratorParams,
) -> Result<Vec<TspInstance>> {
    if n < 4 {
        return Err(GeldError::Argument(format!("instances need at least 4 nodes, got {n}")));
    }
    if params.min_clusters == 0 || params.min_clusters > params.max_clusters {
        return Err(GeldError::Argument("cluster count range is empty".into()));
    }
    if !(params.radius > 0.0 && params.radius < 1.0) {
        return Err(GeldError::Argument(format!("radius {} outside (0, 1)", params.radius)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let coords = one_instance(pattern, n, params, &mut rng)?;
            TspInstance::new(format!("{pattern}-{n}-s{seed}-{i:04}"), coords, MetricMode::ContinuousEuclid)
        })
        .collect()
}

pub fn generate_instances(pattern: Pattern, n: usize, count: usize, seed: u64) -> Result<Vec<TspInstance>> {
    generate_instances_with(pattern, n, count, seed, &GeneratorParams::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_in_unit_square() {
        for p in Pattern::ALL {
            let a = generate_instances(p, 50, 3, 11).unwrap();
            assert_eq!(a, generate_instances(p, 50, 3, 11).unwrap());
            assert_ne!(a[0].coords(), generate_instances(p, 50, 3, 12).unwrap()[0].coords());
            for inst in &a {
                assert!(inst.coords().iter().all(|q| (0.0..=1.0).contains(&q[0]) && (0.0..=1.0).contains(&q[1])));
            }
        }
    }

    #[test]
    fn uniform_means_near_half() {
        let inst = &generate_instances(Pattern::Uniform, 10_000, 1, 3).unwrap()[0];
        for a in 0..2 {
            let m = inst.coords().iter().map(|p| p[a]).sum::<f64>() / 10_000.0;
            assert!((0.48..=0.52).contains(&m), "mean {m}");
        }
    }

    #[test]
    fn explosion_leaves_disc_empty() {
        // replay the generator's rng to recover the centre
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = uniform_point(&mut rng);
            let inst = &generate_instances(Pattern::Explosion, 500, 1, seed).unwrap()[0];
            for p in inst.coords() {
                assert!((p[0] - c[0]).hypot(p[1] - c[1]) >= 0.3);
            }
        }
    }

    #[test]
    fn implosion_contracts_disc() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = uniform_point(&mut rng);
        let inst = &generate_instances(Pattern::Implosion, 2000, 1, 5).unwrap()[0];
        let inner = inst.coords().iter().filter(|p| (p[0] - c[0]).hypot(p[1] - c[1]) < 0.15).count();
        let outer = inst.coords().iter().filter(|p| {
            let d = (p[0] - c[0]).hypot(p[1] - c[1]);
            (0.15..0.3).contains(&d)
        });
        // the inner half-radius disc collects the whole R-disc
        assert!(inner > 0 && outer.count() == 0);
    }

    #[test]
    fn pattern_names_parse() {
        for p in Pattern::ALL {
            assert_eq!(p.to_string().parse::<Pattern>().unwrap(), p);
        }
        assert!("gaussian".parse::<Pattern>().is_err());
        assert!(generate_instances(Pattern::Uniform, 3, 1, 0).is_err());
    }
}

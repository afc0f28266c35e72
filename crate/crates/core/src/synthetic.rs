//! Seeded low-rank rating generators for tests, benchmarks and demos.

use std::collections::HashSet;
use std::io::{self, Write};

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::RatingTriple;
use crate::model::{dot, FlatVector};

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub rank: usize,
    /// Number of observed cells; every user and every item gets at least one.
    pub num_entries: usize,
    /// Ground-truth factors are drawn from `U[0, factor_hi)`.
    pub factor_hi: f64,
    /// Optional affine map `offset + scale * <y_u, y_i>` before noise.
    pub offset: f64,
    pub scale: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_std: f64,
    /// Round to integers and clamp into `[lo, hi]`, as star ratings.
    pub star_range: Option<(f64, f64)>,
    pub seed: u64,
}

impl LowRankSpec {
    /// Noiseless `<y_u, y_i>` with `U[0, 1)` factors.
    pub fn noiseless(num_users: usize, num_items: usize, rank: usize, density: f64, seed: u64) -> Self {
        Self {
            num_users,
            num_items,
            rank,
            num_entries: (density * num_users as f64 * num_items as f64).round() as usize,
            factor_hi: 1.0,
            offset: 0.0,
            scale: 1.0,
            noise_std: 0.0,
            star_range: None,
            seed,
        }
    }

    /// 1-5 star ratings over `num_users x num_items` with `num_entries`
    /// observations, e.g. the 6,040 x 3,952 / 1,000,209 MovieLens-1M shape.
    pub fn star_ratings(num_users: usize, num_items: usize, num_entries: usize, seed: u64) -> Self {
        Self {
            num_users,
            num_items,
            rank: 8,
            num_entries,
            factor_hi: 1.0,
            offset: 1.6,
            scale: 1.0,
            noise_std: 0.8,
            star_range: Some((1.0, 5.0)),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LowRankData {
    /// Sorted by `(user, item)`.
    pub triples: Vec<RatingTriple>,
    pub truth: FlatVector,
}

/// # Panics
/// If `num_entries` exceeds the number of cells or is smaller than
/// `max(num_users, num_items)` (coverage needs one entry per row and column).
pub fn low_rank(spec: &LowRankSpec) -> LowRankData {
    let (nu, ni, f) = (spec.num_users, spec.num_items, spec.rank);
    assert!(spec.num_entries <= nu * ni, "more entries than cells");
    assert!(spec.num_entries >= nu.max(ni), "too few entries to cover every row and column");

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let factor = Uniform::new(0.0, spec.factor_hi);
    let values = (0..(nu + ni) * f).map(|_| factor.sample(&mut rng)).collect();
    let truth = FlatVector::from_values(values, nu, ni, f).expect("sized above");

    let mut cells: HashSet<(usize, usize)> = HashSet::with_capacity(spec.num_entries);
    let mut order = Vec::with_capacity(spec.num_entries);
    let mut add = |cell: (usize, usize), order: &mut Vec<(usize, usize)>| {
        if cells.insert(cell) {
            order.push(cell);
        }
    };
    // Pair user k with item k (mod), then cover whichever side is longer.
    for k in 0..nu.max(ni) {
        let u = if k < nu { k } else { rng.gen_range(0..nu) };
        let i = if k < ni { k } else { rng.gen_range(0..ni) };
        add((u, i), &mut order);
    }
    while order.len() < spec.num_entries {
        add((rng.gen_range(0..nu), rng.gen_range(0..ni)), &mut order);
    }
    order.sort_unstable();

    let noise = (spec.noise_std > 0.0).then(|| rand_distr_normal(spec.noise_std));
    let triples = order
        .into_iter()
        .map(|(u, i)| {
            let mut r = spec.offset + spec.scale * dot(truth.user(u), truth.item(i));
            if let Some(sample) = &noise {
                r += sample(&mut rng);
            }
            if let Some((lo, hi)) = spec.star_range {
                r = r.round().clamp(lo, hi);
            }
            RatingTriple::new(u, i, r)
        })
        .collect();
    LowRankData { triples, truth }
}

/// Box-Muller normal sampler.
fn rand_distr_normal(std_dev: f64) -> impl Fn(&mut ChaCha8Rng) -> f64 {
    move |rng: &mut ChaCha8Rng| {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        std_dev * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Writes `user<sep>item<sep>rating` lines with ids shifted by `id_base`.
pub fn write_triples<W: Write>(mut out: W, triples: &[RatingTriple], separator: &str, id_base: u64) -> io::Result<()> {
    for t in triples {
        writeln!(
            out,
            "{}{sep}{}{sep}{}",
            t.user as u64 + id_base,
            t.item as u64 + id_base,
            t.rating,
            sep = separator
        )?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_rows_and_columns() {
        let spec = LowRankSpec::noiseless(50, 30, 3, 0.1, 1);
        let data = low_rank(&spec);
        assert_eq!(data.triples.len(), 150);
        let users: HashSet<_> = data.triples.iter().map(|t| t.user).collect();
        let items: HashSet<_> = data.triples.iter().map(|t| t.item).collect();
        assert_eq!((users.len(), items.len()), (50, 30));
        let t = data.triples[7];
        assert_eq!(t.rating, dot(data.truth.user(t.user), data.truth.item(t.item)));
    }

    #[test]
    fn star_ratings_are_integers_in_range() {
        let data = low_rank(&LowRankSpec::star_ratings(40, 25, 300, 2));
        assert!(data.triples.iter().all(|t| t.rating.fract() == 0.0 && (1.0..=5.0).contains(&t.rating)));
    }

    #[test]
    fn deterministic() {
        let spec = LowRankSpec::star_ratings(20, 20, 100, 3);
        assert_eq!(low_rank(&spec).triples, low_rank(&spec).triples);
    }

    #[test]
    fn full_matrix() {
        let data = low_rank(&LowRankSpec::noiseless(2, 2, 1, 1.0, 4));
        assert_eq!(data.triples.len(), 4);
    }
}

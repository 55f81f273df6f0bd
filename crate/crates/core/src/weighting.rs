//! Integer repetition weights from OT potentials.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightAssignment {
    pub ids: Vec<String>,
    pub weights: Vec<u64>,
    pub repetition: u64,
    pub potentials: Vec<f64>,
}

/// How the total repetition budget `R` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum RepetitionMode {
    /// `R = N + M`: as many training steps as candidates plus targets.
    FullMatch,
    /// `R = ceil(p * N)`.
    Fraction(f64),
}

/// Repetition budget for `n` candidates and `m` targets. The caller raises it
/// to the selection size if it falls below.
pub fn default_repetition(n: u64, m: u64, mode: RepetitionMode) -> u64 {
    match mode {
        RepetitionMode::FullMatch => n + m,
        RepetitionMode::Fraction(p) => {
            let x = p * n as f64;
            // 0.005 * 10000 is 50.00000000000001 in binary; don't round that up
            let r = x.round();
            if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
                r as u64
            } else {
                x.ceil() as u64
            }
        }
    }
}

/// Integer weights, each at least 1, summing to `repetition`.
///
/// Benefit is `max(phi) - phi_i + delta` (lower potential = more useful);
/// the `repetition - S` extra copies are shared in proportion to benefit and
/// rounded by largest remainder, ties going to higher benefit and then to the
/// lower index.
pub fn assign_weights(ids: &[String], potentials: &[f64], repetition: u64) -> Result<WeightAssignment> {
    let s = potentials.len();
    if s == 0 {
        return Err(Error::InvalidArgument("cannot weight an empty selection".into()));
    }
    if ids.len() != s {
        return Err(Error::shape("weight ids", s, ids.len()));
    }
    if let Some(p) = potentials.iter().find(|p| !p.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite potential {p}")));
    }
    if repetition < s as u64 {
        return Err(Error::InvalidArgument(format!(
            "repetition budget {repetition} is below the selection size {s}"
        )));
    }
    let max = potentials.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = potentials.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    let delta = if range > 0.0 { 1e-9 * range } else { 1.0 };
    let benefit: Vec<f64> = potentials.iter().map(|p| (max - p) + delta).collect();
    let total: f64 = benefit.iter().sum();

    let extra = repetition - s as u64;
    let mut weights = vec![1u64; s];
    let mut remainders = Vec::with_capacity(s);
    let mut assigned = 0u64;
    for (i, b) in benefit.iter().enumerate() {
        let share = extra as f64 * b / total;
        let whole = share.floor();
        weights[i] += whole as u64;
        assigned += whole as u64;
        remainders.push((share - whole, i));
    }
    // floor() of the shares can overshoot only through rounding; guard anyway
    let left = extra.saturating_sub(assigned) as usize;
    remainders.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then(benefit[y.1].total_cmp(&benefit[x.1]))
            .then(x.1.cmp(&y.1))
    });
    for &(_, i) in remainders.iter().cycle().take(left) {
        weights[i] += 1;
    }
    debug_assert_eq!(weights.iter().sum::<u64>(), repetition);
    Ok(WeightAssignment {
        ids: ids.to_vec(),
        weights,
        repetition,
        potentials: potentials.to_vec(),
    })
}

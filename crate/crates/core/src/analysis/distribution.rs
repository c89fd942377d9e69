//! Loss-distribution analyses over sampled anchor posteriors: cumulative loss
//! curves, hardest-sample loss shares across focusing parameters, and posterior
//! histograms.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{focal_with, Class, LossSample};

/// Sampled `(y, p_t)` pairs; `p_t` is clamped into the open unit interval.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionDump {
    samples: Vec<LossSample>,
}

#[derive(Serialize, Deserialize)]
struct DumpRow {
    y: i32,
    p_t: f64,
}

impl PredictionDump {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, y: Class, p_t: f64) -> Result<()> {
        self.samples.push(LossSample::from_posterior(y, p_t)?);
        Ok(())
    }

    pub fn samples(&self) -> &[LossSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn filtered(&self, class: Option<Class>) -> Vec<&LossSample> {
        self.samples
            .iter()
            .filter(|s| class.is_none_or(|c| s.y() == c))
            .collect()
    }

    /// Writes CSV with header `y,p_t`; `y` is `1` or `-1`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = headerless(path)?;
        w.write_record(["y", "p_t"])?;
        for s in &self.samples {
            w.serialize(DumpRow {
                y: s.y().sign() as i32,
                p_t: s.p_t(),
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        if r.headers()?.iter().collect::<Vec<_>>() != ["y", "p_t"] {
            return Err(Error::parse(path, "dump header must be `y,p_t`"));
        }
        let mut dump = PredictionDump::new();
        for (i, row) in r.deserialize::<DumpRow>().enumerate() {
            let row = row?;
            let y = Class::from_sign(row.y)
                .map_err(|e| Error::parse(path, format!("row {}: {e}", i + 1)))?;
            dump.push(y, row.p_t)
                .map_err(|e| Error::parse(path, format!("row {}: {e}", i + 1)))?;
        }
        Ok(dump)
    }
}

/// Writer whose header is written explicitly, so empty tables keep it.
fn headerless(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::WriterBuilder::new().has_headers(false).from_path(path)?)
}

/// Desk-scale stand-in for a trained detector's anchor outputs: negatives with
/// `p_t ~ Beta(a_neg, 1)` (mostly easy), positives with `p_t ~ Beta(2, 2)`.
pub fn synthetic_dump(n_neg: usize, n_pos: usize, a_neg: f64, seed: u64) -> Result<PredictionDump> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let neg = Beta::new(a_neg, 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    let pos = Beta::new(2.0, 2.0).map_err(|e| Error::Domain(e.to_string()))?;
    let mut dump = PredictionDump::new();
    for _ in 0..n_neg {
        dump.push(Class::Negative, neg.sample(&mut rng))?;
    }
    for _ in 0..n_pos {
        dump.push(Class::Positive, pos.sample(&mut rng))?;
    }
    Ok(dump)
}

/// Cumulative share of total loss: `x[k]` is the fraction of samples taken in
/// ascending loss order, `y[k]` the fraction of loss they carry.
#[derive(Clone, Debug, PartialEq)]
pub struct CdfCurve {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl CdfCurve {
    /// Writes CSV with header `x,y`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y"])?;
        for (x, y) in self.x.iter().zip(&self.y) {
            w.write_record([x.to_string(), y.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Per-sample focal losses at `gamma`, sorted ascending.
fn sorted_losses(samples: &[&LossSample], gamma: f64) -> Result<Vec<f64>> {
    let mut losses = samples
        .iter()
        .map(|s| focal_with(s, gamma, 1.0))
        .collect::<Result<Vec<f64>>>()?;
    losses.sort_by(f64::total_cmp);
    Ok(losses)
}

/// Normalized cumulative loss of the samples of `class` (all when `None`).
pub fn loss_cdf(dump: &PredictionDump, gamma: f64, class: Option<Class>) -> Result<CdfCurve> {
    let samples = dump.filtered(class);
    if samples.is_empty() {
        return Err(Error::Domain(format!("no samples of class {class:?} in the dump")));
    }
    let losses = sorted_losses(&samples, gamma)?;
    let total: f64 = losses.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Domain(format!("loss vanishes for every sample at gamma {gamma}")));
    }
    let n = losses.len();
    let mut acc = 0.0;
    let mut y = Vec::with_capacity(n);
    for l in &losses {
        acc += l;
        y.push(acc / total);
    }
    Ok(CdfCurve {
        x: (1..=n).map(|k| k as f64 / n as f64).collect(),
        y,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub gamma: f64,
    /// Fraction of hardest samples, e.g. `0.1`.
    pub k: f64,
    /// Share of total loss carried by the `ceil(k * n)` highest-loss samples.
    pub share: f64,
}

pub const SWEEP_FRACTIONS: [f64; 3] = [0.01, 0.10, 0.20];

/// Hardest-`k` loss shares for every `gamma` and `k`.
pub fn gamma_sweep(
    dump: &PredictionDump,
    gammas: &[f64],
    ks: &[f64],
    class: Option<Class>,
) -> Result<Vec<SweepRow>> {
    let samples = dump.filtered(class);
    if samples.is_empty() {
        return Err(Error::Domain("gamma sweep over an empty dump".into()));
    }
    if let Some(k) = ks.iter().find(|k| !(**k > 0.0 && **k <= 1.0)) {
        return Err(Error::Domain(format!("hard fraction {k} outside (0, 1]")));
    }
    let n = samples.len();
    let mut rows = Vec::new();
    for &gamma in gammas {
        let losses = sorted_losses(&samples, gamma)?;
        let total: f64 = losses.iter().sum();
        for &k in ks {
            let m = ((k * n as f64).ceil() as usize).clamp(1, n);
            let hard: f64 = losses[n - m..].iter().sum();
            let share = if total > 0.0 { hard / total } else { m as f64 / n as f64 };
            rows.push(SweepRow { gamma, k, share });
        }
    }
    Ok(rows)
}

/// Writes sweep rows as CSV with header `gamma,k,share`.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = headerless(path)?;
    w.write_record(["gamma", "k", "share"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Uniform histogram over `[0, 1]`; the last bin is closed on the right.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Index of the most populated bin; the lowest such bin on ties.
    pub fn peak_bin(&self) -> Option<usize> {
        let max = *self.counts.iter().max()?;
        if max == 0 {
            return None;
        }
        self.counts.iter().position(|&c| c == max)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Writes CSV with header `bin_lo,bin_hi,count`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_lo", "bin_hi", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record([
                self.edges[i].to_string(),
                self.edges[i + 1].to_string(),
                c.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn posterior_histogram(scores: &[f64], bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::Domain(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let mut counts = vec![0; bins];
    for &s in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Domain(format!("score {s} outside [0, 1]")));
        }
        counts[((s * bins as f64) as usize).min(bins - 1)] += 1;
    }
    Ok(Histogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dump(values: &[(Class, f64)]) -> PredictionDump {
        let mut d = PredictionDump::new();
        for &(c, p) in values {
            d.push(c, p).unwrap();
        }
        d
    }

    #[test]
    fn equal_samples_give_the_diagonal() {
        let d = dump(&[(Class::Negative, 0.7); 8]);
        let c = loss_cdf(&d, 2.0, None).unwrap();
        for (x, y) in c.x.iter().zip(&c.y) {
            assert!((x - y).abs() < 1e-12);
        }
        let one = loss_cdf(&dump(&[(Class::Positive, 0.3)]), 1.0, None).unwrap();
        assert_eq!((one.x.clone(), one.y.clone()), (vec![1.0], vec![1.0]));
        assert!(loss_cdf(&d, 0.0, Some(Class::Positive)).is_err());
    }

    #[test]
    fn hard_sample_share_grows_with_gamma() {
        let d = dump(&[(Class::Negative, 0.6), (Class::Negative, 0.99)]);
        let share = |g: f64| {
            let hard = focal_with(&d.samples()[0], g, 1.0).unwrap();
            let easy = focal_with(&d.samples()[1], g, 1.0).unwrap();
            hard / (hard + easy)
        };
        assert!(share(2.0) > share(0.0));
        let rows = gamma_sweep(&d, &[0.0, 2.0], &[0.5], None).unwrap();
        assert!((rows[0].share - share(0.0)).abs() < 1e-12);
        assert!((rows[1].share - share(2.0)).abs() < 1e-12);
    }

    #[test]
    fn uniform_dump_shares_equal_k() {
        let d = dump(&[(Class::Negative, 0.8); 100]);
        for r in gamma_sweep(&d, &[0.0, 1.0, 5.0], &SWEEP_FRACTIONS, None).unwrap() {
            assert!((r.share - r.k).abs() < 1e-12);
        }
    }

    #[test]
    fn histogram_edges_and_mass() {
        let h = posterior_histogram(&[], 10).unwrap();
        assert_eq!(h.total(), 0);
        assert_eq!(h.peak_bin(), None);
        let h = posterior_histogram(&[1.0, 1.0, 0.0, 0.55], 10).unwrap();
        assert_eq!(h.counts[9], 2);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[5], 1);
        assert_eq!(h.peak_bin(), Some(9));
        assert!(posterior_histogram(&[0.5], 1).is_err());
    }

    #[test]
    fn dump_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.csv");
        let d = synthetic_dump(50, 5, 8.0, 3).unwrap();
        d.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("y,p_t\n"));
        assert_eq!(PredictionDump::read_csv(&path).unwrap(), d);
    }

    proptest! {
        #[test]
        fn cdf_is_monotone_and_ends_at_one(
            ps in prop::collection::vec(0.001f64..0.999, 1..200),
            gamma in 0.0f64..5.0,
        ) {
            let d = dump(&ps.iter().map(|&p| (Class::Negative, p)).collect::<Vec<_>>());
            let c = loss_cdf(&d, gamma, None).unwrap();
            prop_assert!(c.y.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!((c.y.last().unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn shares_are_bounded_and_grow_with_gamma(
            ps in prop::collection::vec(0.001f64..0.999, 10..200),
        ) {
            let d = dump(&ps.iter().map(|&p| (Class::Negative, p)).collect::<Vec<_>>());
            let rows = gamma_sweep(&d, &[0.0, 0.5, 1.0, 2.0], &SWEEP_FRACTIONS, None).unwrap();
            for r in &rows {
                prop_assert!(r.share >= r.k - 1e-12 && r.share <= 1.0 + 1e-12);
            }
            for k in 0..SWEEP_FRACTIONS.len() {
                let per_gamma: Vec<f64> = rows.iter().skip(k).step_by(SWEEP_FRACTIONS.len()).map(|r| r.share).collect();
                prop_assert!(per_gamma.windows(2).all(|w| w[1] >= w[0] - 1e-12));
            }
        }

        #[test]
        fn histogram_conserves_mass(
            ps in prop::collection::vec(0.0f64..=1.0, 0..300),
            bins in 2usize..50,
        ) {
            prop_assert_eq!(posterior_histogram(&ps, bins).unwrap().total(), ps.len());
        }
    }
}

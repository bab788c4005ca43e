//! Training-curve CSVs and their aggregation across seeds.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::p2p_sac::CurvePoint;

pub const SEED_HEADER: [&str; 5] = ["steps", "reward", "success", "crash", "gate_mean"];
pub const CURVE_HEADER: [&str; 9] =
    ["steps", "rew_mean", "rew_lo", "rew_hi", "suc_mean", "suc_lo", "suc_hi", "crash_rate", "gate_mean"];

/// Mean and `mean ± std` envelopes across seeds at one step. The deviation is the population
/// value (divide by the number of seeds), so a single seed has a zero-width band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub steps: u64,
    pub rew_mean: f64,
    pub rew_lo: f64,
    pub rew_hi: f64,
    pub suc_mean: f64,
    pub suc_lo: f64,
    pub suc_hi: f64,
    pub crash_rate: f64,
    pub gate_mean: f64,
}

pub fn write_seed_curve<W: Write>(points: &[CurvePoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SEED_HEADER)?;
    for p in points {
        out.write_record([
            p.steps.to_string(),
            p.reward.to_string(),
            p.success.to_string(),
            p.crash.to_string(),
            p.gate_mean.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_seed_curve<R: Read>(r: R) -> Result<Vec<CurvePoint>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != SEED_HEADER {
        return Err(Error::Config(format!("unexpected curve header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|e| Error::Config(format!("curve field {:?}: {e}", &rec[i])))
        };
        let steps = rec[0].parse::<u64>().map_err(|e| Error::Config(format!("curve steps: {e}")))?;
        out.push(CurvePoint { steps, reward: f(1)?, success: f(2)?, crash: f(3)?, gate_mean: f(4)? });
    }
    Ok(out)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Rows are matched by position; every seed must report the same step sequence.
pub fn aggregate(seeds: &[Vec<CurvePoint>]) -> Result<Vec<CurveRow>> {
    let first = seeds.first().ok_or_else(|| Error::MismatchedGrids("no seed curves".into()))?;
    for (k, s) in seeds.iter().enumerate() {
        let same = s.len() == first.len() && s.iter().zip(first).all(|(a, b)| a.steps == b.steps);
        if !same {
            return Err(Error::MismatchedGrids(format!("seed curve {k} has a different step grid")));
        }
    }
    let rows = (0..first.len())
        .map(|i| {
            let col = |f: fn(&CurvePoint) -> f64| seeds.iter().map(|s| f(&s[i])).collect::<Vec<f64>>();
            let (rm, rs) = mean_std(&col(|p| p.reward));
            let (sm, ss) = mean_std(&col(|p| p.success));
            let (cm, _) = mean_std(&col(|p| p.crash));
            let (gm, _) = mean_std(&col(|p| p.gate_mean));
            CurveRow {
                steps: first[i].steps,
                rew_mean: rm,
                rew_lo: rm - rs,
                rew_hi: rm + rs,
                suc_mean: sm,
                suc_lo: sm - ss,
                suc_hi: sm + ss,
                crash_rate: cm,
                gate_mean: gm,
            }
        })
        .collect();
    Ok(rows)
}

pub fn write_curves<W: Write>(rows: &[CurveRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CURVE_HEADER)?;
    for r in rows {
        let mut rec = vec![r.steps.to_string()];
        rec.extend(
            [r.rew_mean, r.rew_lo, r.rew_hi, r.suc_mean, r.suc_lo, r.suc_hi, r.crash_rate, r.gate_mean]
                .iter()
                .map(f64::to_string),
        );
        out.write_record(rec)?;
    }
    out.flush()?;
    Ok(())
}

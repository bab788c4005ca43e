//! Aggregates per-seed curves into mean and ±1 std envelopes, from a run directory or from
//! synthetic curves when none is given.
//!
//!     cargo run --example seed_envelopes -- [runs_dir]

use std::path::PathBuf;

use pripg::harness::run::export_curves;
use pripg::harness::{aggregate, write_curves};
use pripg::p2p_sac::{stream, CurvePoint};
use pripg::Result;
use rand::Rng;

fn main() -> Result<()> {
    if let Some(dir) = std::env::args().nth(1).map(PathBuf::from) {
        for (algo, rows) in export_curves(&dir)? {
            let last = rows.last().expect("export writes at least one row");
            println!("{algo}: {} rows, final success {:.2} ± {:.2}", rows.len(), last.suc_mean, last.suc_hi - last.suc_mean);
        }
        return Ok(());
    }
    let mut rng = stream(5, 0);
    let seeds: Vec<Vec<CurvePoint>> = (0..5)
        .map(|_| {
            (1..=8)
                .map(|k| {
                    let progress = k as f64 / 8.0;
                    CurvePoint {
                        steps: k * 25_000,
                        reward: -800.0 * (1.0 - progress) + rng.random_range(-40.0..40.0),
                        success: (progress + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0),
                        crash: (1.0 - progress).clamp(0.0, 1.0),
                        gate_mean: 0.5,
                    }
                })
                .collect()
        })
        .collect();
    write_curves(&aggregate(&seeds)?, std::io::stdout())
}

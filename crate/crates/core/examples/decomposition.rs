//! Evaluates the anchor on a random aliased buffer, splits it into the gated regularizer and
//! a parameter-free variance term, and checks the bound on the regularizer.
//!
//!     cargo run --example decomposition -- [seed]

use pripg::harness::verify::spread_policy;
use pripg::p2p_sac::stream;
use pripg::theorem_oracle::{bound_check, random_slices, stats, verify_decomposition};
use pripg::Result;

fn main() -> Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let beta_f = 10.0;
    let slices = random_slices(&mut stream(seed, 13), 4, 5, 0.7);
    for (j, sl) in slices.iter().enumerate() {
        let st = stats(sl);
        println!("slice {j}: {} planner actions, mean gate {:.3}, spread {:.4}", sl.len(), st.m_bar, st.v_tilde);
    }
    let policy = spread_policy(seed);
    let rep = verify_decomposition(&policy, &slices, beta_f)?;
    println!("anchor {:.6} = regularizer {:.6} + constant {:.6}", rep.anchor, rep.regularizer, rep.constant);
    println!("loss gap {:.2e}, gradient gap {:.2e}", rep.loss_gap, rep.grad_gap);
    let b = bound_check(&policy, &slices, beta_f)?;
    println!("regularizer {:.6} <= bound {:.6}", b.regularizer, b.bound);
    Ok(())
}

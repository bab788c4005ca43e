//! Writes an agent to the checkpoint container, reads it back, and shows that a truncated
//! file is rejected with the offset where reading failed.
//!
//!     cargo run --example checkpoint_roundtrip

use pripg::harness::{agent_checkpoint, agent_from_checkpoint, Checkpoint, TrainingMeta};
use pripg::p2p_sac::{stream, Agent, AgentConfig};
use pripg::Result;

fn main() -> Result<()> {
    let cfg = AgentConfig { hidden: vec![64, 64], ..AgentConfig::default() };
    let agent = Agent::<f32>::new(cfg.clone(), &mut stream(0, 0))?;
    let meta = TrainingMeta { step: 123_456_789_012, beta: 10.0, mature: true };
    let bytes = agent_checkpoint(&agent, meta).encode()?;
    println!("encoded {} bytes", bytes.len());

    let (back, meta_back) = agent_from_checkpoint::<f32>(&cfg, &Checkpoint::decode(&bytes)?)?;
    println!("parameters identical: {}, step {}", back == agent, meta_back.step);

    match Checkpoint::decode(&bytes[..bytes.len() / 3]) {
        Err(e) => println!("truncated: {e}"),
        Ok(_) => println!("truncated file decoded unexpectedly"),
    }
    Ok(())
}

//! Time training steps at the default desk-scale configuration.

use std::time::Instant;

use slotcomp::scenegen::{Dataset, GenConfig};
use slotcomp::trainer::{train, TrainConfig, TrainState};

fn main() -> slotcomp::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let cfg = TrainConfig::default();
    let data = Dataset::in_memory(&GenConfig::default(), 256, 0, "train")?;
    let mut state = TrainState::new(&cfg)?;
    println!("{} parameters", state.model.store.num_scalars());
    let start = Instant::now();
    train(&mut state, &data, steps, |s, l| {
        println!("step {} total {:.4} diff {:.4} recon {:.4} prior {:.5} reg {:.5} ({:.2}s)", s.step, l.total, l.diff, l.recon, l.prior, l.reg, start.elapsed().as_secs_f64());
        Ok(())
    })?;
    println!("{:.3} s/step", start.elapsed().as_secs_f64() / steps as f64);
    Ok(())
}

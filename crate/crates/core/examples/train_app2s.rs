//! Train the full model for a few epochs and evaluate it on held-out classes.
//!
//! `cargo run --release --example train_app2s -- [epochs]`

use std::ops::ControlFlow;

use app2s::episodes::{generate_synthetic, ClassSplit, SyntheticDatasetCfg};
use app2s::netmods::{Arch, Variant};
use app2s::seeding::Stream;
use app2s::train::*;

fn main() -> Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let ds = generate_synthetic(&SyntheticDatasetCfg::default())?;
    let split = ClassSplit::new(ds.n_classes);
    let cfg = TrainConfig {
        ablation: Variant::App2s.ablation(),
        epochs,
        lr: 0.01,
        temperature: 0.1,
        val_tasks: 20,
        ..TrainConfig::default()
    };
    let state = TrainState::new(Arch::desk(ds.dim), &cfg)?;
    println!("{} trainable scalars", state.model.params.n_trainable_scalars());
    let state = train(&ds, &split, &cfg, state, &mut |s| {
        let rows = &s.history[s.history.len() - cfg.tasks_per_epoch..];
        let loss = rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
        println!("epoch {}: loss {loss:.4}, best val {:.4}", s.epoch - 1, s.best_val);
        Ok(ControlFlow::Continue(()))
    })?;
    let spec = cfg.episode_spec(0).for_stream(Stream::EvalEpisode);
    let report = evaluate(&ds, &split.test, &state.best, &spec, 1, 200, cfg.temperature)?;
    println!("test accuracy {:.4} +- {:.4}", report.mean_accuracy, report.half_width);
    Ok(())
}

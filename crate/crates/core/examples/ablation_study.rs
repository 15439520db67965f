//! Every ablation variant trained and evaluated on well separated classes.

use std::ops::ControlFlow;

use app2s::episodes::{generate_synthetic, ClassSplit, SyntheticDatasetCfg};
use app2s::netmods::{Arch, Variant};
use app2s::seeding::Stream;
use app2s::train::*;

fn main() -> Result<()> {
    let ds = generate_synthetic(&SyntheticDatasetCfg {
        within_spread: 0.25,
        ..SyntheticDatasetCfg::default()
    })?;
    let split = ClassSplit::new(ds.n_classes);
    println!("{:<16} {:>8} {:>8}", "variant", "accuracy", "+-");
    for v in Variant::ALL {
        let cfg = TrainConfig {
            ablation: v.ablation(),
            epochs: 2,
            lr: 0.01,
            temperature: 0.1,
            val_tasks: 20,
            ..TrainConfig::default()
        };
        let state = train(&ds, &split, &cfg, TrainState::new(Arch::desk(ds.dim), &cfg)?, &mut |_| Ok(ControlFlow::Continue(())))?;
        let spec = cfg.episode_spec(0).for_stream(Stream::EvalEpisode);
        let r = evaluate(&ds, &split.test, &state.best, &spec, 1, 100, cfg.temperature)?;
        println!("{:<16} {:>8.4} {:>8.4}", v.name(), r.mean_accuracy, r.half_width);
    }
    Ok(())
}

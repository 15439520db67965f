//! Accuracy as 0 to 4 outliers are injected into every support class, for
//! the full model, the prototype classifier and the Euclidean variant.

use std::ops::ControlFlow;

use app2s::episodes::{generate_synthetic, ClassSplit, SyntheticDatasetCfg};
use app2s::netmods::{Arch, Model, Variant};
use app2s::seeding::Stream;
use app2s::train::*;

fn main() -> Result<()> {
    let ds = generate_synthetic(&SyntheticDatasetCfg::default())?;
    let split = ClassSplit::new(ds.n_classes);
    let mut models: Vec<(String, Model)> = Vec::new();
    for v in [Variant::App2s, Variant::Prototype, Variant::EuclideanAp2s] {
        let cfg = TrainConfig {
            ablation: v.ablation(),
            epochs: 2,
            lr: 0.01,
            temperature: 0.1,
            val_tasks: 20,
            ..TrainConfig::default()
        };
        let state = train(&ds, &split, &cfg, TrainState::new(Arch::desk(ds.dim), &cfg)?, &mut |_| Ok(ControlFlow::Continue(())))?;
        eprintln!("trained {}", v.name());
        models.push((v.name().into(), state.best));
    }
    let refs: Vec<(String, &Model)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
    let spec = TrainConfig::default().episode_spec(0).for_stream(Stream::EvalEpisode);
    let rows = run_robustness(&ds, &split.test, &refs, &spec, &[0, 1, 2, 3, 4], 100, 0.1)?;
    print!("{}", robustness_csv(&rows));
    Ok(())
}

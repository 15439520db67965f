//! Generate a clustered dataset on the ball, round-trip it through the file
//! format and draw a 5-way 5-shot episode with two outliers per class.

use app2s::episodes::*;

fn main() -> Result<()> {
    let cfg = SyntheticDatasetCfg::default();
    let ds = generate_synthetic(&cfg)?;
    println!("{} samples, {} classes, {}x{} patches of width {}", ds.len(), ds.n_classes, ds.grid_h, ds.grid_w, ds.dim);

    let path = std::env::temp_dir().join("app2s_example_dataset.bin");
    save_features(&path, &ds)?;
    let loaded = load_features(&path, &cfg.ball)?;
    println!("reloaded {} samples from {}", loaded.len(), path.display());

    let split = ClassSplit::new(ds.n_classes);
    println!("classes: {} train, {} val, {} test", split.train.len(), split.val.len(), split.test.len());
    let spec = EpisodeSpec {
        n_way: 5,
        k_shot: 5,
        n_query: 3,
        n_outliers: 2,
        seed: 7,
    };
    let ep = sample_episode(&loaded, &split.train, &spec, 0)?;
    println!("episode classes {:?}", ep.classes);
    for class in 0..ep.n_way {
        let row = &ep.support[class * ep.k_total..(class + 1) * ep.k_total];
        let sources: Vec<String> = row
            .iter()
            .map(|s| if s.is_outlier { format!("{}*", s.source_class) } else { s.source_class.to_string() })
            .collect();
        println!("  support {class}: {}", sources.join(" "));
    }
    println!("{} queries, labels {:?}", ep.query.len(), ep.query_labels());
    Ok(())
}

//! Point-to-set bounds, Hausdorff distances and a weighted point-to-set
//! distance between two small feature maps.

use app2s::geometry::{BallConfig, PoincareVec};
use app2s::metrics::*;

fn main() -> Result<()> {
    let cfg = BallConfig::with_curvature(0.5)?;
    let pts = |v: &[[f64; 2]]| -> Vec<PoincareVec> { v.iter().map(|p| PoincareVec::new(p.to_vec(), &cfg).unwrap()).collect() };
    let q = pts(&[[0.1, 0.0], [0.2, 0.1]]);
    let s1 = pts(&[[0.1, 0.05], [0.3, 0.1]]);
    let s2 = pts(&[[-0.6, 0.2], [-0.5, -0.3]]);

    let m = pairwise_matrix(&FeatureMap::new(q.clone(), 1, 2, &cfg)?, &FeatureMap::new(s1.clone(), 1, 2, &cfg)?, &cfg)?;
    println!("pairwise distances {:?}", m.flat());
    println!("p2s min / max to s1: {:.4} / {:.4}", p2s_min(&q[0], &s1, &cfg)?, p2s_max(&q[0], &s1, &cfg)?);
    println!("hausdorff q->s1 {:.4}, q<->s1 {:.4}", hausdorff_one_sided(&q, &s1, &cfg)?, hausdorff_bidirectional(&q, &s1, &cfg)?);

    // two support samples; the far one gets a low score
    let d = [hausdorff_bidirectional(&q, &s1, &cfg)?, hausdorff_bidirectional(&q, &s2, &cfg)?];
    let uniform = weighted_p2s(&d, &RelationWeights::uniform(2)?)?;
    let adaptive = weighted_p2s(&d, &RelationWeights::from_scores(&[2.0, -2.0])?)?;
    println!("set distances {d:?}: uniform {uniform:.4}, adaptive {adaptive:.4}");
    Ok(())
}

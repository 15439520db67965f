//! Möbius addition, geodesic distance, Klein averaging and the tangent maps.

use app2s::geometry::*;

fn main() -> Result<()> {
    let cfg = BallConfig::with_curvature(0.7)?;
    let x = PoincareVec::new(vec![0.3, -0.2], &cfg)?;
    let y = PoincareVec::new(vec![-0.5, 0.4], &cfg)?;

    let s = mobius_add(&x, &y, &cfg)?;
    println!("x (+) y          = {:?}", s.coords());
    println!("d(x, y)          = {:.6}", geodesic_distance(&x, &y, &cfg)?);
    println!("euclidean 2|x-y| = {:.6}", 2.0 * norm(&[0.8, -0.6]));

    let mid = einstein_midpoint(&[x.clone(), y.clone()], &cfg)?;
    println!("midpoint         = {:?}", mid.coords());
    println!("d(x, m), d(y, m) = {:.6}, {:.6}", geodesic_distance(&x, &mid, &cfg)?, geodesic_distance(&y, &mid, &cfg)?);

    let v = log_map(&x, &y, &cfg)?;
    let back = exp_map(&x, &v, &cfg)?;
    println!("log_x(y)         = {:?}", v.vec);
    println!("exp_x(log_x(y))  = {:?}", back.coords());
    println!("lambda_x |v|     = {:.6}", conformal_factor(&x, &cfg) * norm(&v.vec));

    let far = clip_to_ball(&[3.0, 4.0], &cfg);
    println!("clipped norm     = {:.6} (radius {:.6})", norm(&far), cfg.radius());
    Ok(())
}

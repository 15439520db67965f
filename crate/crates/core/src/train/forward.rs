//! Forward pass of one episode, from raw patches to the cross-entropy loss.

use super::Result;
use crate::autodiff::{Tape, Tensor, Var};
use crate::diffgeo::{self, Manifold};
use crate::episodes::Episode;
use crate::metrics::{adaptive_p2s, s2s_learned_batch};
use crate::netmods::{self, Bound, ForwardCtx, Model};

/// Intermediate values of one episode forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeForward {
    /// Mean cross-entropy, `1 x 1`.
    pub loss: Var,
    /// `n_query x n_way`, equal to `-distance / temperature`.
    pub logits: Var,
    /// Point-to-set (or prototype) distances, `n_query x n_way`.
    pub distances: Var,
    /// Set-to-set distance per (query, class) row and support sample column,
    /// `(n_query * n_way) x k_total`. Absent for the prototype classifier.
    pub s2s: Option<Var>,
    /// Weights matching `s2s`.
    pub weights: Option<Var>,
}

/// Runs the model selected by `model.ablation` on one episode.
pub fn forward_episode(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    ctx: &mut ForwardCtx,
    ep: &Episode,
    temperature: f64,
) -> Result<EpisodeForward> {
    let xs = tape.constant(ep.support_tensor());
    let xq = tape.constant(ep.query_tensor());
    let s = netmods::encode(tape, model, bound, xs)?;
    let q = netmods::encode(tape, model, bound, xq)?;
    let labels = ep.query_labels();
    if !model.ablation.use_p2s {
        let distances = prototype_distances(tape, s, q, ep, model.manifold())?;
        return finish(tape, distances, None, None, &labels, temperature);
    }

    let manifold = model.manifold();
    let hw = ep.hw();
    let (n, k, nq) = (ep.n_way, ep.k_total, ep.query.len());
    let samples = n * k;

    // every query patch against every support patch
    let pw = diffgeo::pairwise(tape, q, s, manifold)?;
    let cols = samples * hw;
    let mut index = Vec::with_capacity(nq * samples * hw * hw);
    for qi in 0..nq {
        for m in 0..samples {
            for h in 0..hw {
                let row = (qi * hw + h) * cols + m * hw;
                index.extend(row..row + hw);
            }
        }
    }
    let flat = tape.gather(pw, index, nq * samples, hw * hw)?;
    let d = s2s_learned_batch(tape, model, bound, ctx, flat)?;
    let d = tape.reshape(d, nq * n, k)?;

    let weights = if model.ablation.use_fphi {
        relation_weights(tape, model, bound, ctx, s, q, ep)?
    } else {
        tape.constant(Tensor::filled(nq * n, k, 1.0 / k as f64))
    };
    let p2s = adaptive_p2s(tape, d, weights)?;
    let distances = tape.reshape(p2s, nq, n)?;
    finish(tape, distances, Some(d), Some(weights), &labels, temperature)
}

fn finish(
    tape: &mut Tape,
    distances: Var,
    s2s: Option<Var>,
    weights: Option<Var>,
    labels: &[usize],
    temperature: f64,
) -> Result<EpisodeForward> {
    let logits = tape.scale(distances, -1.0 / temperature);
    let loss = tape.cross_entropy(logits, labels)?;
    Ok(EpisodeForward {
        loss,
        logits,
        distances,
        s2s,
        weights,
    })
}

/// Weights of every support sample for every query, `(n_query * n_way) x k`.
///
/// For each query the support set is projected to the tangent space at the
/// query's patch midpoint, optionally refined jointly, summarised per class,
/// and scored by the relation generator. The relation generator runs once on
/// all queries stacked, treating each (query, class) pair as one group.
fn relation_weights(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    ctx: &mut ForwardCtx,
    s: Var,
    q: Var,
    ep: &Episode,
) -> Result<Var> {
    let manifold = model.manifold();
    let hw = ep.hw();
    let (n, k, nq) = (ep.n_way, ep.k_total, ep.query.len());
    let means = diffgeo::midpoint_groups(tape, q, hw, manifold)?;
    let positions = if model.ablation.use_fomega {
        Some(netmods::tiled_positions(tape, &model.arch, n * k)?)
    } else {
        None
    };
    let mut tangents = Vec::with_capacity(nq);
    let mut signatures = Vec::with_capacity(nq);
    for qi in 0..nq {
        let mean = tape.slice_rows(means, qi, 1)?;
        let tangent = netmods::project_support(tape, s, mean, manifold)?;
        let refined = match positions {
            Some(pos) => netmods::refine(tape, model, bound, tangent, pos)?,
            None => tangent,
        };
        signatures.push(netmods::class_signature(tape, refined, n, k, hw)?);
        tangents.push(tangent);
    }
    let tangent = tape.concat_rows(&tangents)?;
    let signature = tape.concat_rows(&signatures)?;
    Ok(netmods::relation_scores(tape, model, bound, ctx, tangent, signature, nq * n, k)?)
}

/// Distances from each query's patch midpoint to the class prototypes, the
/// midpoints of the per-sample patch midpoints of each support class.
fn prototype_distances(tape: &mut Tape, s: Var, q: Var, ep: &Episode, manifold: Manifold) -> Result<Var> {
    let hw = ep.hw();
    let query_points = diffgeo::midpoint_groups(tape, q, hw, manifold)?;
    let sample_points = diffgeo::midpoint_groups(tape, s, hw, manifold)?;
    let prototypes = diffgeo::midpoint_groups(tape, sample_points, ep.k_total, manifold)?;
    Ok(diffgeo::pairwise(tape, query_points, prototypes, manifold)?)
}

/// Index of the smallest distance in every row.
pub fn argmin_rows(distances: &Tensor) -> Vec<usize> {
    (0..distances.rows())
        .map(|r| {
            let row = distances.row_slice(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode predictions and the loss for one episode.
pub fn predict(model: &Model, ep: &Episode, temperature: f64) -> Result<(Vec<usize>, f64)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut ctx = ForwardCtx::eval();
    let out = forward_episode(&mut tape, model, &bound, &mut ctx, ep, temperature)?;
    Ok((argmin_rows(tape.value(out.distances)), tape.scalar(out.loss)))
}

/// Nearest-prototype labels using `model`'s encoder, whatever its switches.
pub fn prototype_baseline(ep: &Episode, model: &Model) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xs = tape.constant(ep.support_tensor());
    let xq = tape.constant(ep.query_tensor());
    let s = netmods::encode(&mut tape, model, &bound, xs)?;
    let q = netmods::encode(&mut tape, model, &bound, xq)?;
    let d = prototype_distances(&mut tape, s, q, ep, model.manifold())?;
    Ok(argmin_rows(tape.value(d)))
}

//! Style voting.
//!
//! Every pixel `p2` is a voter with weight `1 − M̂[p2]` taken from a decoder
//! stage's auxiliary mask, and gives pixel `p1` the score `V[p1,p2]`, the
//! cosine similarity of their style features. The voting map is
//!
//! ```text
//! S[p1] = Σ_p2 (1 − M̂[p2]) · V[p1,p2]                 (style only)
//! S[p1] = Σ_p2 (1 − M̂[p2]) · Wsem[p1,p2] · V[p1,p2]   (semantic-guided)
//! ```
//!
//! so pixels styled like the predicted-harmonious majority score high.

use crate::autograd::{avg_pool, Graph, Var};
use crate::error::{Error, Result};
use crate::style::normalized_pixels;
use crate::tensor::Tensor;

/// Voter mass below which the normalized score map is all zeros.
pub const MASS_EPS: f64 = 1e-8;

/// Pairwise cosine similarity of `[1,C,h,w]` pixel features, as `[n,n]`.
pub fn style_similarity_matrix(graph: &mut Graph, features: Var) -> Result<Var> {
    let rows = normalized_pixels(graph, features)?;
    let cols = graph.transpose(rows)?;
    graph.matmul(rows, cols)
}

/// Raw voting map `[1,1,h,w]` from similarity `[n,n]` and aux mask `[1,1,h,w]`.
pub fn vote(graph: &mut Graph, similarity: Var, aux_mask: Var, semantic: Option<Var>) -> Result<Var> {
    let ms = graph.shape(aux_mask).to_vec();
    if ms.len() != 4 || ms[0] != 1 || ms[1] != 1 {
        return Err(Error::shape("vote", "aux mask", format!("expected [1,1,h,w], got {ms:?}")));
    }
    let n = ms[2] * ms[3];
    if graph.shape(similarity) != [n, n] {
        return Err(Error::shape(
            "vote",
            "similarity",
            format!("expected [{n},{n}] for a {}x{} mask, got {:?}", ms[2], ms[3], graph.shape(similarity)),
        ));
    }
    let weighted = match semantic {
        Some(sem) => {
            if graph.shape(sem) != [n, n] {
                return Err(Error::shape("vote", "semantic", format!("expected [{n},{n}], got {:?}", graph.shape(sem))));
            }
            graph.mul(sem, similarity)?
        }
        None => similarity,
    };
    let voters = graph.one_minus(aux_mask);
    let voters = graph.reshape(voters, &[n, 1])?;
    let scores = graph.matmul(weighted, voters)?;
    graph.reshape(scores, &ms)
}

/// Divide a raw voting map by the voter mass `Σ(1 − M̂)`; zeros when the
/// mass vanishes.
pub fn normalize_score_map(graph: &mut Graph, scores: Var, aux_mask: Var) -> Result<Var> {
    let voters = graph.one_minus(aux_mask);
    let mass = graph.sum(voters);
    if graph.value(mass).item() > MASS_EPS {
        graph.div_scalar(scores, mass)
    } else {
        Ok(graph.scale(scores, 0.0))
    }
}

/// One-hot label features `[L,H,W]` average-pooled by `factor` → `[L,h,w]`.
pub fn semantic_features(labels: &[u8], height: usize, width: usize, num_classes: usize, factor: usize) -> Result<Tensor> {
    if labels.len() != height * width {
        return Err(Error::shape("semantic_features", "labels", format!("{} labels for {height}x{width}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::invalid("semantic_features", format!("label {bad} >= {num_classes} classes")));
    }
    let hw = height * width;
    let mut onehot = vec![0.0; num_classes * hw];
    for (p, &l) in labels.iter().enumerate() {
        onehot[l as usize * hw + p] = 1.0;
    }
    let t = Tensor::new([1, num_classes, height, width], onehot)?;
    let pooled = avg_pool(&t, factor)?;
    let s = pooled.shape().to_vec();
    pooled.reshape([s[1], s[2], s[3]])
}

/// Pairwise cosine similarity of `[Cs,h,w]` semantic features → `[n,n]`.
pub fn semantic_similarity_matrix(features: &Tensor) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::shape("semantic_similarity_matrix", "rank", format!("expected [C,h,w], got {s:?}")));
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone().reshape([1, s[0], s[1], s[2]])?);
    let v = style_similarity_matrix(&mut g, f)?;
    Ok(g.value(v).clone())
}

/// Voting in one call on plain tensors: features `[C,h,w]`, mask `[h,w]`.
pub fn vote_tensors(features: &Tensor, aux_mask: &Tensor, semantic: Option<&Tensor>, normalize: bool) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::shape("vote_tensors", "features", format!("expected [C,h,w], got {s:?}")));
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone().reshape([1, s[0], s[1], s[2]])?);
    let m = g.constant(aux_mask.clone().reshape([1, 1, s[1], s[2]])?);
    let sem = semantic.map(|t| g.constant(t.clone()));
    let v = style_similarity_matrix(&mut g, f)?;
    let mut out = vote(&mut g, v, m, sem)?;
    if normalize {
        out = normalize_score_map(&mut g, out, m)?;
    }
    g.value(out).clone().reshape([s[1], s[2]])
}

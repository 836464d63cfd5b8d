//! Spatial, channel and frame attention.
//!
//! Spatial attention turns a residual tap `L` (`R × D`, one row per spatial
//! position) into a descriptor through `M = softmax(W_s2 · tanh(W_s1 · Lᵀ))`
//! and `M · L`. Channel and frame attention are the same sigmoid-gated
//! weighted average, applied to the three region vectors of a frame and to
//! the frame vectors of a video respectively.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the `h` hop outputs of spatial attention are collapsed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopAggregation {
    /// Mean over hops; the descriptor keeps length `D`.
    #[default]
    Mean,
    /// Hops laid end to end; length `h · D`.
    Concat,
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialOutput {
    /// `1 × D` (mean) or `1 × h·D` (concat).
    pub vector: Var,
    /// `‖M Mᵀ − I‖_F`.
    pub penalty: Var,
    /// The `h × R` attention matrix.
    pub weights: Var,
}

/// Reshapes a `D × H × W` region tap into `L` (`R × D`) and its transpose.
fn tap_matrices(g: &mut Graph, tap: Var) -> Result<(Var, Var)> {
    let s = g.shape(tap).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("spatial_attention", &s, &[0, 0, 0]));
    }
    let (d, r) = (s[0], s[1] * s[2]);
    let lt = g.reshape(tap, &[d, r])?;
    let l = g.transpose(lt)?;
    Ok((l, lt))
}

pub fn spatial_attention(
    g: &mut Graph,
    tap: Var,
    ws1: Var,
    ws2: Var,
    aggregation: HopAggregation,
) -> Result<SpatialOutput> {
    let (l, lt) = tap_matrices(g, tap)?;
    let a = g.matmul(ws1, lt)?;
    let a = g.tanh(a)?;
    let s = g.matmul(ws2, a)?;
    let m = g.softmax_rows(s)?;
    let hops = g.matmul(m, l)?;
    let vector = match aggregation {
        HopAggregation::Mean => g.mean_rows(hops)?,
        HopAggregation::Concat => {
            let n = g.value(hops).numel();
            g.reshape(hops, &[1, n])?
        }
    };
    let penalty = frobenius_penalty(g, m)?;
    Ok(SpatialOutput {
        vector,
        penalty,
        weights: m,
    })
}

/// Plain column mean of `L`: the spatial descriptor without attention.
pub fn spatial_mean(g: &mut Graph, tap: Var) -> Result<Var> {
    let (l, _) = tap_matrices(g, tap)?;
    g.mean_rows(l)
}

/// `‖M Mᵀ − I‖_F` for an `h × R` matrix `M`.
pub fn frobenius_penalty(g: &mut Graph, m: Var) -> Result<Var> {
    let h = g.shape(m)[0];
    let mt = g.transpose(m)?;
    let mm = g.matmul(m, mt)?;
    let eye = g.constant(Tensor::identity(h));
    let diff = g.sub(mm, eye)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    g.sqrt(total)
}

#[derive(Clone, Debug)]
pub struct GatedAverage {
    /// `1 × l`.
    pub output: Var,
    /// One `1 × 1` gate per input, in input order.
    pub gates: Vec<Var>,
}

/// `Σ αᵢ fᵢ / Σ αᵢ` with `αᵢ = σ(wᵀ relu(Wᵀ fᵢ))`.
///
/// `w_mat` is `l × r` and `w_vec` is `r × 1`; every item is `1 × l`. The
/// reduction runs in slice order.
pub fn gated_average(g: &mut Graph, items: &[Var], w_mat: Var, w_vec: Var) -> Result<GatedAverage> {
    if items.is_empty() {
        return Err(Error::Input("attention over zero inputs".into()));
    }
    let mut gates = Vec::with_capacity(items.len());
    for &f in items {
        let hidden = g.matmul(f, w_mat)?;
        let hidden = g.relu(hidden)?;
        let score = g.matmul(hidden, w_vec)?;
        gates.push(g.sigmoid(score)?);
    }
    let alphas = g.concat(&gates)?;
    let stacked = g.stack_rows(items)?;
    let num = g.matmul(alphas, stacked)?;
    let den = g.sum(alphas);
    let output = g.div_scalar(num, den)?;
    Ok(GatedAverage { output, gates })
}

/// Channel attention over the face, eyes and mouth vectors.
pub fn channel_attention(
    g: &mut Graph,
    regions: [Var; 3],
    w_mat: Var,
    w_vec: Var,
) -> Result<GatedAverage> {
    let l = g.shape(regions[0]).to_vec();
    for &r in &regions[1..] {
        if g.shape(r) != l.as_slice() {
            return Err(Error::shape("channel_attention", &l, g.shape(r)));
        }
    }
    gated_average(g, &regions, w_mat, w_vec)
}

/// Frame attention over the per-frame vectors of one video.
pub fn frame_attention(
    g: &mut Graph,
    frames: &[Var],
    w_mat: Var,
    w_vec: Var,
) -> Result<GatedAverage> {
    if frames.is_empty() {
        return Err(Error::Input(
            "frame attention needs at least one frame".into(),
        ));
    }
    gated_average(g, frames, w_mat, w_vec)
}

/// Unweighted mean of `1 × l` rows.
pub fn plain_mean(g: &mut Graph, items: &[Var]) -> Result<Var> {
    let stacked = g.stack_rows(items)?;
    g.mean_rows(stacked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use approx::assert_abs_diff_eq;

    fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn zero_ws2_gives_column_mean() {
        let mut rng = Rng::new(5);
        let mut g = Graph::new();
        let tap = g.constant(randn(&mut rng, &[4, 3, 3]));
        let ws1 = g.constant(randn(&mut rng, &[6, 4]));
        let ws2 = g.constant(Tensor::zeros(&[2, 6]));
        let out = spatial_attention(&mut g, tap, ws1, ws2, HopAggregation::Mean).unwrap();
        for v in g.value(out.weights).data() {
            assert_abs_diff_eq!(*v, 1.0 / 9.0, epsilon = 1e-15);
        }
        let mean = spatial_mean(&mut g, tap).unwrap();
        assert!(g.value(out.vector).max_abs_diff(g.value(mean)) < 1e-14);
    }

    #[test]
    fn single_position_tap() {
        let mut rng = Rng::new(6);
        let mut g = Graph::new();
        let tap = g.constant(randn(&mut rng, &[5, 1, 1]));
        let ws1 = g.constant(randn(&mut rng, &[3, 5]));
        let ws2 = g.constant(randn(&mut rng, &[2, 3]));
        let out = spatial_attention(&mut g, tap, ws1, ws2, HopAggregation::Mean).unwrap();
        assert_eq!(g.value(out.weights).data(), &[1.0, 1.0]);
        assert!(
            g.value(out.vector)
                .max_abs_diff(&g.value(tap).clone().reshape(&[1, 5]).unwrap())
                < 1e-15
        );
        // J₂ − I₂ has two unit off-diagonal entries
        assert_abs_diff_eq!(g.value(out.penalty).data()[0], 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn forced_matrix_penalty_is_sqrt2() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let p = frobenius_penalty(&mut g, m).unwrap();
        assert_eq!(g.value(p).data()[0], 2f64.sqrt());
        let m = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let p = frobenius_penalty(&mut g, m).unwrap();
        assert_eq!(g.value(p).data()[0], 0.0);
    }

    #[test]
    fn concat_aggregation_keeps_every_hop() {
        let mut rng = Rng::new(8);
        let mut g = Graph::new();
        let tap = g.constant(randn(&mut rng, &[4, 2, 2]));
        let ws1 = g.constant(randn(&mut rng, &[3, 4]));
        let ws2 = g.constant(randn(&mut rng, &[2, 3]));
        let out = spatial_attention(&mut g, tap, ws1, ws2, HopAggregation::Concat).unwrap();
        assert_eq!(g.shape(out.vector), &[1, 8]);
    }

    #[test]
    fn zero_gate_vector_gives_plain_mean() {
        let mut rng = Rng::new(9);
        let mut g = Graph::new();
        let f: Vec<Var> = (0..3)
            .map(|_| g.constant(randn(&mut rng, &[1, 5])))
            .collect();
        let w_mat = g.constant(randn(&mut rng, &[5, 4]));
        let w_vec = g.constant(Tensor::zeros(&[4, 1]));
        let out = channel_attention(&mut g, [f[0], f[1], f[2]], w_mat, w_vec).unwrap();
        for &a in &out.gates {
            assert_eq!(g.value(a).data()[0], 0.5);
        }
        let mean = plain_mean(&mut g, &f).unwrap();
        assert!(g.value(out.output).max_abs_diff(g.value(mean)) < 1e-15);
    }

    #[test]
    fn identical_inputs_pass_through() {
        let mut rng = Rng::new(10);
        let mut g = Graph::new();
        let v = randn(&mut rng, &[1, 6]);
        let f: Vec<Var> = (0..3).map(|_| g.constant(v.clone())).collect();
        let w_mat = g.constant(randn(&mut rng, &[6, 4]));
        let w_vec = g.constant(randn(&mut rng, &[4, 1]));
        let out = channel_attention(&mut g, [f[0], f[1], f[2]], w_mat, w_vec).unwrap();
        assert!(g.value(out.output).max_abs_diff(&v) < 1e-14);
    }

    #[test]
    fn single_frame_is_returned_unchanged() {
        let mut rng = Rng::new(11);
        let mut g = Graph::new();
        let v = randn(&mut rng, &[1, 6]);
        let f = g.constant(v.clone());
        let w_mat = g.constant(randn(&mut rng, &[6, 4]));
        let w_vec = g.constant(randn(&mut rng, &[4, 1]));
        let out = frame_attention(&mut g, &[f], w_mat, w_vec).unwrap();
        assert!(g.value(out.output).max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn empty_frame_list_rejected() {
        let mut g = Graph::new();
        let w_mat = g.constant(Tensor::zeros(&[6, 4]));
        let w_vec = g.constant(Tensor::zeros(&[4, 1]));
        assert!(matches!(
            frame_attention(&mut g, &[], w_mat, w_vec),
            Err(Error::Input(_))
        ));
    }
}

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{
    cls_similarity, standard_normal, object_cross_attention, object_self_attention,
    scene_cross_attention, scene_self_attention_with_similarity, AttentionParams, SceneTokens,
};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-6;

/// Tokenwise two-layer perceptron with a tanh-approximated GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Mlp {
    pub fn random(rng: &mut impl Rng, dim: usize, hidden: usize) -> Self {
        let mut m = |r: usize, c: usize| {
            let scale = 1.0 / (r as f64).sqrt();
            Array2::from_shape_fn((r, c), |_| scale * standard_normal(rng))
        };
        Mlp {
            w1: m(dim, hidden),
            b1: Array1::zeros(hidden),
            w2: m(hidden, dim),
            b2: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Mlp {
            w1: Array2::zeros((dim, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, dim)),
            b2: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let ok = x.ncols() == self.w1.nrows()
            && self.b1.len() == self.w1.ncols()
            && self.w2.nrows() == self.w1.ncols()
            && self.b2.len() == self.w2.ncols();
        if !ok {
            return Err(Error::invalid("MLP shapes do not line up"));
        }
        let h = (x.dot(&self.w1) + &self.b1).mapv(gelu);
        Ok(h.dot(&self.w2) + &self.b2)
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Per-row normalization to zero mean and unit variance, no affine terms.
pub fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub self_attention: AttentionParams,
    pub object_cross: AttentionParams,
    pub scene_cross: AttentionParams,
    pub mlp: Mlp,
}

impl BlockParams {
    pub fn random(rng: &mut impl Rng, dim: usize, feature_dim: usize, heads: usize) -> Self {
        BlockParams {
            self_attention: AttentionParams::random(rng, dim, dim, heads),
            object_cross: AttentionParams::random(rng, dim, feature_dim, heads),
            scene_cross: AttentionParams::random(rng, dim, feature_dim, heads),
            mlp: Mlp::random(rng, dim, 2 * dim),
        }
    }

    pub fn zeros(dim: usize, feature_dim: usize, heads: usize) -> Self {
        BlockParams {
            self_attention: AttentionParams::zeros(dim, dim, heads),
            object_cross: AttentionParams::zeros(dim, feature_dim, heads),
            scene_cross: AttentionParams::zeros(dim, feature_dim, heads),
            mlp: Mlp::zeros(dim, 2 * dim),
        }
    }
}

fn normed(scene: &SceneTokens) -> SceneTokens {
    scene.with_stacked(&layer_norm(&scene.stacked()))
}

fn residual(x: &SceneTokens, update: &SceneTokens) -> SceneTokens {
    x.with_stacked(&(x.stacked() + update.stacked()))
}

/// One transformer block. Even indices use object-level self-attention, odd
/// indices scene-level; then object cross-attention, scene cross-attention and
/// the MLP, each pre-normalized with a residual connection.
pub fn dit_block(
    scene: &SceneTokens,
    per_object_features: &[Array2<f64>],
    scene_features: &Array2<f64>,
    params: &BlockParams,
    block_index: usize,
) -> Result<SceneTokens> {
    scene.validate()?;
    let mut x = scene.clone();

    let attn = if block_index % 2 == 0 {
        object_self_attention(&normed(&x), &params.self_attention)?
    } else {
        let sim = cls_similarity(&x, params.self_attention.tau)?;
        scene_self_attention_with_similarity(&normed(&x), &params.self_attention, &sim)?.0
    };
    x = residual(&x, &attn);

    let cross = object_cross_attention(&normed(&x), per_object_features, &params.object_cross)?;
    x = residual(&x, &cross);

    let cross = scene_cross_attention(&normed(&x), scene_features, &params.scene_cross)?;
    x = residual(&x, &cross);

    let stacked = x.stacked();
    let out = stacked.clone() + params.mlp.forward(&layer_norm(&stacked))?;
    Ok(x.with_stacked(&out))
}

#[cfg(test)]
mod tests {
    use super::super::random_scene;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feats(rng: &mut ChaCha8Rng, n: usize, rows: usize, dim: usize) -> Vec<Array2<f64>> {
        (0..n)
            .map(|_| Array2::from_shape_fn((rows, dim), |_| standard_normal(rng)))
            .collect()
    }

    #[test]
    fn zero_block_is_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let scene = random_scene(&mut r, 3, 4, 8);
        let f = feats(&mut r, 3, 5, 6);
        let g = feats(&mut r, 1, 7, 6).remove(0);
        let p = BlockParams::zeros(8, 6, 2);
        for idx in 0..2 {
            let out = dit_block(&scene, &f, &g, &p, idx).unwrap();
            assert_eq!(out, scene);
        }
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let scene = random_scene(&mut r, 4, 3, 8);
        let f = feats(&mut r, 4, 5, 6);
        let g = feats(&mut r, 1, 7, 6).remove(0);
        let p = BlockParams::random(&mut r, 8, 6, 2);
        let order = [3, 1, 0, 2];
        let pf: Vec<_> = order.iter().map(|&i| f[i].clone()).collect();
        for idx in 0..2 {
            let a = dit_block(&scene, &f, &g, &p, idx).unwrap().permuted(&order);
            let b = dit_block(&scene.permuted(&order), &pf, &g, &p, idx).unwrap();
            let diff = (a.stacked() - b.stacked()).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(diff < 1e-12, "block {idx}: {diff}");
        }
    }

    #[test]
    fn layer_norm_rows() {
        let x = Array2::from_shape_vec((2, 4), vec![1.0, 2.0, 3.0, 4.0, -5.0, 5.0, -5.0, 5.0]).unwrap();
        let y = layer_norm(&x);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}

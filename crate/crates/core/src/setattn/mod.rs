//! Set-aware attention over per-object token sets.
//!
//! Every object contributes a token matrix plus one CLS token; attention runs
//! over the sequence `[tokens; cls]`. Object-level attention is block-diagonal
//! per object. Scene-level attention spans all objects and adds
//! `log(s_ij + ε)` to every logit from an object-`i` query to an object-`j`
//! key, where `s_ij = σ(τ·cos(c_i, c_j))` compares CLS tokens.

mod block;
mod head;
mod sets;

pub use block::{dit_block, layer_norm, BlockParams, Mlp};
pub use head::{
    head_similarity, pairwise_accuracy, similarity_bce_loss, synthetic_clusters,
    train_similarity_head, HeadGradient, SimilarityHead, SimilarityScene, BCE_CLAMP,
};
pub use sets::{discover_sets, UnionFind};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub object_id: u32,
    /// `L × D` object tokens.
    pub tokens: Array2<f64>,
    pub cls: Array1<f64>,
}

impl TokenSet {
    pub fn dim(&self) -> usize {
        self.cls.len()
    }

    /// `(L + 1) × D` sequence with the CLS token last.
    pub fn sequence(&self) -> Array2<f64> {
        let cls = self.cls.view().insert_axis(Axis(0));
        concatenate(Axis(0), &[self.tokens.view(), cls]).expect("matching widths")
    }

    fn from_sequence(object_id: u32, seq: ArrayView2<f64>) -> TokenSet {
        let l = seq.nrows() - 1;
        TokenSet {
            object_id,
            tokens: seq.slice(s![..l, ..]).to_owned(),
            cls: seq.row(l).to_owned(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneTokens {
    objects: Vec<TokenSet>,
}

impl SceneTokens {
    pub fn new(objects: Vec<TokenSet>) -> Result<Self> {
        let scene = SceneTokens { objects };
        scene.validate()?;
        Ok(scene)
    }

    pub fn objects(&self) -> &[TokenSet] {
        &self.objects
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.objects[0].dim()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.objects.first() else {
            return Err(Error::invalid("scene needs at least one object"));
        };
        let d = first.dim();
        for (i, o) in self.objects.iter().enumerate() {
            if o.tokens.ncols() != d || o.cls.len() != d {
                return Err(Error::invalid(format!("object {i} has width != {d}")));
            }
            let finite = o.tokens.iter().chain(o.cls.iter()).all(|x| x.is_finite());
            if !finite {
                return Err(Error::invalid(format!("object {i} has non-finite entries")));
            }
            if self.objects[..i].iter().any(|p| p.object_id == o.object_id) {
                return Err(Error::invalid(format!("duplicate object id {}", o.object_id)));
            }
        }
        Ok(())
    }

    fn sequence_lengths(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.tokens.nrows() + 1).collect()
    }

    /// All sequences stacked in object order.
    pub fn stacked(&self) -> Array2<f64> {
        let seqs: Vec<Array2<f64>> = self.objects.iter().map(TokenSet::sequence).collect();
        let views: Vec<_> = seqs.iter().map(|a| a.view()).collect();
        concatenate(Axis(0), &views).expect("shared width")
    }

    /// Rebuilds a scene with this layout from stacked rows.
    pub fn with_stacked(&self, rows: &Array2<f64>) -> SceneTokens {
        let mut start = 0;
        let objects = self
            .objects
            .iter()
            .zip(self.sequence_lengths())
            .map(|(o, len)| {
                let t = TokenSet::from_sequence(o.object_id, rows.slice(s![start..start + len, ..]));
                start += len;
                t
            })
            .collect();
        SceneTokens { objects }
    }

    pub fn permuted(&self, order: &[usize]) -> SceneTokens {
        SceneTokens {
            objects: order.iter().map(|&i| self.objects[i].clone()).collect(),
        }
    }

    pub fn map_objects(&self, f: impl FnMut(&TokenSet) -> Result<TokenSet>) -> Result<SceneTokens> {
        Ok(SceneTokens {
            objects: self.objects.iter().map(f).collect::<Result<_>>()?,
        })
    }
}

/// Random scene with `tokens_per_object` tokens of width `dim` per object.
pub fn random_scene(rng: &mut impl Rng, objects: usize, tokens_per_object: usize, dim: usize) -> SceneTokens {
    let objects = (0..objects)
        .map(|i| TokenSet {
            object_id: i as u32,
            tokens: Array2::from_shape_fn((tokens_per_object, dim), |_| standard_normal(rng)),
            cls: Array1::from_shape_fn(dim, |_| standard_normal(rng)),
        })
        .collect();
    SceneTokens { objects }
}

/// Multi-head projections. `wk`/`wv` map the key width (which may differ from
/// the query width in cross-attention) to the model width.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub heads: usize,
    /// Temperature of the CLS similarity score.
    pub tau: f64,
    /// Offset inside the logarithmic similarity bias.
    pub epsilon: f64,
}

impl AttentionParams {
    pub fn random(rng: &mut impl Rng, dim: usize, key_dim: usize, heads: usize) -> Self {
        let d = crate::defaults::defaults();
        let mut m = |r: usize, c: usize| {
            let scale = 1.0 / (r as f64).sqrt();
            Array2::from_shape_fn((r, c), |_| scale * standard_normal(rng))
        };
        AttentionParams {
            wq: m(dim, dim),
            wk: m(key_dim, dim),
            wv: m(key_dim, dim),
            wo: m(dim, dim),
            heads,
            tau: d.attention.tau,
            epsilon: d.attention.epsilon,
        }
    }

    pub fn zeros(dim: usize, key_dim: usize, heads: usize) -> Self {
        let d = crate::defaults::defaults();
        AttentionParams {
            wq: Array2::zeros((dim, dim)),
            wk: Array2::zeros((key_dim, dim)),
            wv: Array2::zeros((key_dim, dim)),
            wo: Array2::zeros((dim, dim)),
            heads,
            tau: d.attention.tau,
            epsilon: d.attention.epsilon,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn key_dim(&self) -> usize {
        self.wk.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let ok = self.wq.ncols() == d
            && self.wk.ncols() == d
            && self.wv.ncols() == d
            && self.wv.nrows() == self.wk.nrows()
            && self.wo.dim() == (d, d);
        if !ok {
            return Err(Error::invalid("inconsistent attention projection shapes"));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::invalid(format!("width {d} not divisible by {} heads", self.heads)));
        }
        if !self.tau.is_finite() {
            return Err(Error::invalid("tau must be finite"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Pairwise CLS similarity `s_ij = σ(τ·cos(c_i, c_j))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix(pub Array2<f64>);

impl SimilarityMatrix {
    pub fn uniform(n: usize, value: f64) -> Self {
        SimilarityMatrix(Array2::from_elem((n, n), value))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub(crate) fn standard_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn normalized(v: &Array1<f64>, what: &str) -> Result<Array1<f64>> {
    let n = v.dot(v).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate(format!("{what} has zero or non-finite norm")));
    }
    Ok(v / n)
}

pub fn cls_similarity(scene: &SceneTokens, tau: f64) -> Result<SimilarityMatrix> {
    let unit: Vec<Array1<f64>> = scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| normalized(&o.cls, &format!("CLS token of object {i}")))
        .collect::<Result<_>>()?;
    let n = unit.len();
    let mut s = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = sigmoid(tau * unit[i].dot(&unit[j]));
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    Ok(SimilarityMatrix(s))
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
}

/// Attention output plus the per-head weight matrices.
pub struct AttentionOutput {
    pub output: Array2<f64>,
    pub weights: Vec<Array2<f64>>,
}

/// `softmax(Q·Kᵀ/√d_h + bias)·V` per head, concatenated and projected by `wo`.
pub fn multi_head_attention(
    params: &AttentionParams,
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    bias: Option<&Array2<f64>>,
) -> Result<AttentionOutput> {
    params.validate()?;
    if queries.ncols() != params.dim() {
        return Err(Error::invalid(format!(
            "query width {} does not match model width {}",
            queries.ncols(),
            params.dim()
        )));
    }
    if keys.ncols() != params.key_dim() {
        return Err(Error::invalid(format!(
            "key width {} does not match projection width {}",
            keys.ncols(),
            params.key_dim()
        )));
    }
    if keys.nrows() == 0 {
        return Err(Error::invalid("attention needs at least one key"));
    }
    if let Some(b) = bias {
        if b.dim() != (queries.nrows(), keys.nrows()) {
            return Err(Error::invalid("bias shape does not match query/key counts"));
        }
    }
    let q = queries.dot(&params.wq);
    let k = keys.dot(&params.wk);
    let v = keys.dot(&params.wv);
    let dh = params.dim() / params.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Array2::zeros((queries.nrows(), params.dim()));
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut logits = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        if let Some(b) = bias {
            logits += b;
        }
        softmax_rows(&mut logits);
        concat.slice_mut(cols).assign(&logits.dot(&v.slice(cols)));
        weights.push(logits);
    }
    Ok(AttentionOutput {
        output: concat.dot(&params.wo),
        weights,
    })
}

fn check_width(scene: &SceneTokens, params: &AttentionParams) -> Result<()> {
    scene.validate()?;
    if scene.dim() != params.dim() {
        return Err(Error::invalid(format!(
            "token width {} does not match model width {}",
            scene.dim(),
            params.dim()
        )));
    }
    Ok(())
}

/// Self-attention restricted to each object's own sequence.
pub fn object_self_attention(scene: &SceneTokens, params: &AttentionParams) -> Result<SceneTokens> {
    check_width(scene, params)?;
    scene.map_objects(|o| {
        let seq = o.sequence();
        let out = multi_head_attention(params, &seq, &seq, None)?.output;
        Ok(TokenSet::from_sequence(o.object_id, out.view()))
    })
}

/// Token-level bias `log(s_ij + ε)` expanded over the stacked sequences.
pub fn similarity_bias(scene: &SceneTokens, sim: &SimilarityMatrix, epsilon: f64) -> Result<Array2<f64>> {
    let n = scene.len();
    if sim.0.dim() != (n, n) {
        return Err(Error::invalid(format!("similarity matrix is not {n}x{n}")));
    }
    let owner: Vec<usize> = scene
        .sequence_lengths()
        .iter()
        .enumerate()
        .flat_map(|(i, &len)| std::iter::repeat_n(i, len))
        .collect();
    let log_s = sim.0.mapv(|x| (x + epsilon).ln());
    Ok(Array2::from_shape_fn((owner.len(), owner.len()), |(p, q)| {
        log_s[[owner[p], owner[q]]]
    }))
}

/// Scene attention under an explicit similarity matrix; also returns weights.
pub fn scene_self_attention_with_similarity(
    scene: &SceneTokens,
    params: &AttentionParams,
    sim: &SimilarityMatrix,
) -> Result<(SceneTokens, Vec<Array2<f64>>)> {
    check_width(scene, params)?;
    let bias = similarity_bias(scene, sim, params.epsilon)?;
    let x = scene.stacked();
    let out = multi_head_attention(params, &x, &x, Some(&bias))?;
    Ok((scene.with_stacked(&out.output), out.weights))
}

/// Scene attention without any similarity bias.
pub fn scene_self_attention_unbiased(scene: &SceneTokens, params: &AttentionParams) -> Result<SceneTokens> {
    check_width(scene, params)?;
    let x = scene.stacked();
    let out = multi_head_attention(params, &x, &x, None)?;
    Ok(scene.with_stacked(&out.output))
}

/// Scene attention biased by the similarity of the scene's own CLS tokens.
pub fn scene_self_attention(scene: &SceneTokens, params: &AttentionParams) -> Result<SceneTokens> {
    let sim = cls_similarity(scene, params.tau)?;
    Ok(scene_self_attention_with_similarity(scene, params, &sim)?.0)
}

pub fn object_cross_attention(
    scene: &SceneTokens,
    per_object_features: &[Array2<f64>],
    params: &AttentionParams,
) -> Result<SceneTokens> {
    check_width(scene, params)?;
    if per_object_features.len() != scene.len() {
        return Err(Error::invalid(format!(
            "{} feature matrices for {} objects",
            per_object_features.len(),
            scene.len()
        )));
    }
    let mut i = 0;
    scene.map_objects(|o| {
        let out = multi_head_attention(params, &o.sequence(), &per_object_features[i], None)?.output;
        i += 1;
        Ok(TokenSet::from_sequence(o.object_id, out.view()))
    })
}

pub fn scene_cross_attention(
    scene: &SceneTokens,
    scene_features: &Array2<f64>,
    params: &AttentionParams,
) -> Result<SceneTokens> {
    check_width(scene, params)?;
    let out = multi_head_attention(params, &scene.stacked(), scene_features, None)?.output;
    Ok(scene.with_stacked(&out))
}

/// Mean over instances of cross-attention from shared tokens to each
/// instance's features.
pub fn set_averaged_cross_attention(
    shared_tokens: &Array2<f64>,
    per_instance_features: &[Array2<f64>],
    params: &AttentionParams,
) -> Result<Array2<f64>> {
    if per_instance_features.is_empty() {
        return Err(Error::invalid("set-averaged cross-attention needs at least one instance"));
    }
    let mut acc = Array2::zeros((shared_tokens.nrows(), params.dim()));
    for f in per_instance_features {
        acc += &multi_head_attention(params, shared_tokens, f, None)?.output;
    }
    Ok(acc / per_instance_features.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn scene_diff(a: &SceneTokens, b: &SceneTokens) -> f64 {
        max_abs_diff(&a.stacked(), &b.stacked())
    }

    fn randn(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| standard_normal(r))
    }

    #[test]
    fn cls_similarity_closed_forms() {
        let mk = |cls: Vec<Array1<f64>>| {
            SceneTokens::new(
                cls.into_iter()
                    .enumerate()
                    .map(|(i, c)| TokenSet {
                        object_id: i as u32,
                        tokens: Array2::zeros((1, 2)),
                        cls: c,
                    })
                    .collect(),
            )
            .unwrap()
        };
        let same = mk(vec![Array1::from(vec![1.0, 2.0]), Array1::from(vec![2.0, 4.0])]);
        let s = cls_similarity(&same, 1.0).unwrap();
        assert!((s.0[[0, 1]] - 0.731_058_578_630_005).abs() < 1e-12);
        assert!((s.0[[0, 0]] - 0.731_058_578_630_005).abs() < 1e-12);
        let ortho = mk(vec![Array1::from(vec![1.0, 0.0]), Array1::from(vec![0.0, 3.0])]);
        for tau in [0.1, 1.0, 7.0] {
            assert_eq!(cls_similarity(&ortho, tau).unwrap().0[[0, 1]], 0.5);
        }
        let opposite = mk(vec![Array1::from(vec![1.0, -1.0]), Array1::from(vec![-1.0, 1.0])]);
        assert!((cls_similarity(&opposite, 2.0).unwrap().0[[1, 0]] - 0.119_202_922_022_118).abs() < 1e-12);
        let zero = mk(vec![Array1::from(vec![0.0, 0.0]), Array1::from(vec![1.0, 0.0])]);
        assert!(matches!(cls_similarity(&zero, 1.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn single_object_self_attention_is_plain_attention() {
        let mut r = rng(1);
        let scene = random_scene(&mut r, 1, 5, 8);
        let p = AttentionParams::random(&mut r, 8, 8, 2);
        let out = object_self_attention(&scene, &p).unwrap();
        let seq = scene.objects()[0].sequence();
        let direct = multi_head_attention(&p, &seq, &seq, None).unwrap().output;
        assert_eq!(out.stacked(), direct);
    }

    #[test]
    fn object_attention_equals_per_block_calls() {
        let mut r = rng(2);
        let scene = random_scene(&mut r, 3, 4, 8);
        let p = AttentionParams::random(&mut r, 8, 8, 4);
        let out = object_self_attention(&scene, &p).unwrap();
        for (o, got) in scene.objects().iter().zip(out.objects()) {
            let seq = o.sequence();
            let want = multi_head_attention(&p, &seq, &seq, None).unwrap().output;
            assert_eq!(got.sequence(), want);
        }
    }

    #[test]
    fn object_attention_isolated_from_other_objects() {
        let mut r = rng(3);
        let scene = random_scene(&mut r, 2, 4, 6);
        let p = AttentionParams::random(&mut r, 6, 6, 3);
        let mut altered = scene.clone();
        altered.objects[1].tokens = randn(&mut r, 4, 6) * 50.0;
        altered.objects[1].cls = Array1::from_elem(6, -3.0);
        let a = object_self_attention(&scene, &p).unwrap();
        let b = object_self_attention(&altered, &p).unwrap();
        assert_eq!(a.objects()[0], b.objects()[0]);
    }

    #[test]
    fn uniform_similarity_reproduces_unbiased_attention() {
        let mut r = rng(4);
        let mut scene = random_scene(&mut r, 3, 3, 8);
        let shared = scene.objects[0].cls.clone();
        for o in &mut scene.objects {
            o.cls = shared.clone();
        }
        let p = AttentionParams::random(&mut r, 8, 8, 2);
        let biased = scene_self_attention(&scene, &p).unwrap();
        let plain = scene_self_attention_unbiased(&scene, &p).unwrap();
        assert!(scene_diff(&biased, &plain) < 1e-9);
    }

    #[test]
    fn single_object_scene_attention_matches_object_attention() {
        let mut r = rng(5);
        let scene = random_scene(&mut r, 1, 6, 8);
        let p = AttentionParams::random(&mut r, 8, 8, 2);
        let a = scene_self_attention(&scene, &p).unwrap();
        let b = object_self_attention(&scene, &p).unwrap();
        assert!(scene_diff(&a, &b) < 1e-9);
    }

    #[test]
    fn suppressed_pair_receives_less_attention() {
        let mut r = rng(6);
        let scene = random_scene(&mut r, 3, 3, 8);
        let p = AttentionParams::random(&mut r, 8, 8, 2);
        let mut low = SimilarityMatrix::uniform(3, 0.9);
        low.0[[0, 1]] = 1.0;
        low.0[[0, 2]] = 1e-9;
        let mut equal = low.clone();
        equal.0[[0, 2]] = 1.0;
        let (_, w_low) = scene_self_attention_with_similarity(&scene, &p, &low).unwrap();
        let (_, w_eq) = scene_self_attention_with_similarity(&scene, &p, &equal).unwrap();
        // object 0 rows 0..4, object 2 columns 8..12
        for h in 0..2 {
            let a: f64 = w_low[h].slice(s![0..4, 8..12]).sum();
            let b: f64 = w_eq[h].slice(s![0..4, 8..12]).sum();
            assert!(a < b);
        }
    }

    #[test]
    fn rows_are_stochastic() {
        let mut r = rng(7);
        let scene = random_scene(&mut r, 4, 2, 8);
        let p = AttentionParams::random(&mut r, 8, 8, 4);
        let sim = cls_similarity(&scene, 1.0).unwrap();
        let (_, w) = scene_self_attention_with_similarity(&scene, &p, &sim).unwrap();
        for m in &w {
            for row in m.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_feature_token_broadcasts_value() {
        let mut r = rng(8);
        let scene = random_scene(&mut r, 2, 3, 4);
        let p = AttentionParams::random(&mut r, 4, 5, 2);
        let feats = vec![randn(&mut r, 1, 5), randn(&mut r, 1, 5)];
        let out = object_cross_attention(&scene, &feats, &p).unwrap();
        for (o, f) in out.objects().iter().zip(&feats) {
            let expected = f.dot(&p.wv).dot(&p.wo);
            for row in o.sequence().rows() {
                for (a, b) in row.iter().zip(expected.row(0)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        let out = scene_cross_attention(&scene, &feats[0], &p).unwrap();
        let expected = feats[0].dot(&p.wv).dot(&p.wo);
        for row in out.stacked().rows() {
            for (a, b) in row.iter().zip(expected.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_isolation_and_oracle() {
        let mut r = rng(9);
        let scene = random_scene(&mut r, 3, 3, 6);
        let p = AttentionParams::random(&mut r, 6, 4, 3);
        let feats: Vec<_> = (0..3).map(|_| randn(&mut r, 5, 4)).collect();
        let out = object_cross_attention(&scene, &feats, &p).unwrap();
        let mut swapped = feats.clone();
        swapped[2] = randn(&mut r, 7, 4);
        let out2 = object_cross_attention(&scene, &swapped, &p).unwrap();
        assert_eq!(out.objects()[0], out2.objects()[0]);
        assert_eq!(out.objects()[1], out2.objects()[1]);
        for (i, o) in scene.objects().iter().enumerate() {
            let want = multi_head_attention(&p, &o.sequence(), &feats[i], None).unwrap().output;
            assert_eq!(out.objects()[i].sequence(), want);
        }
        assert!(object_cross_attention(&scene, &feats[..2], &p).is_err());
    }

    #[test]
    fn scene_cross_attention_commutes_with_permutation() {
        let mut r = rng(10);
        let scene = random_scene(&mut r, 4, 2, 6);
        let p = AttentionParams::random(&mut r, 6, 6, 2);
        let f = randn(&mut r, 9, 6);
        let order = [2, 0, 3, 1];
        let a = scene_cross_attention(&scene, &f, &p).unwrap().permuted(&order);
        let b = scene_cross_attention(&scene.permuted(&order), &f, &p).unwrap();
        assert!(scene_diff(&a, &b) < 1e-12);
        for (i, o) in scene.objects().iter().enumerate() {
            let want = multi_head_attention(&p, &o.sequence(), &f, None).unwrap().output;
            let got = scene_cross_attention(&scene, &f, &p).unwrap();
            assert!(max_abs_diff(&got.objects()[i].sequence(), &want) < 1e-12);
        }
    }

    #[test]
    fn set_average_cases() {
        let mut r = rng(11);
        let p = AttentionParams::random(&mut r, 4, 3, 2);
        let shared = randn(&mut r, 5, 4);
        let f1 = randn(&mut r, 6, 3);
        let f2 = randn(&mut r, 2, 3);
        let one = set_averaged_cross_attention(&shared, std::slice::from_ref(&f1), &p).unwrap();
        let direct = multi_head_attention(&p, &shared, &f1, None).unwrap().output;
        assert_eq!(one, direct);
        let triple = set_averaged_cross_attention(&shared, &[f1.clone(), f1.clone(), f1.clone()], &p).unwrap();
        assert!(max_abs_diff(&triple, &direct) < 1e-12);
        let pair = set_averaged_cross_attention(&shared, &[f1.clone(), f2.clone()], &p).unwrap();
        let other = multi_head_attention(&p, &shared, &f2, None).unwrap().output;
        assert!(max_abs_diff(&pair, &((direct + other) * 0.5)) < 1e-12);
        assert!(set_averaged_cross_attention(&shared, &[], &p).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut r = rng(12);
        let scene = random_scene(&mut r, 2, 2, 6);
        let p = AttentionParams::random(&mut r, 8, 8, 2);
        assert!(object_self_attention(&scene, &p).is_err());
        let bad_heads = AttentionParams::random(&mut r, 6, 6, 4);
        assert!(scene_self_attention(&scene, &bad_heads).is_err());
        let dup = SceneTokens::new(vec![scene.objects()[0].clone(), scene.objects()[0].clone()]);
        assert!(dup.is_err());
        assert!(SceneTokens::new(vec![]).is_err());
    }
}

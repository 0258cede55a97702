use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{normalized, sigmoid, standard_normal};
use crate::error::{Error, Result};

/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// `z = W2·tanh(W1·x + b1) + b2`; similarity is `σ(cos(z_a, z_b) / τ_c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityHead {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub tau_c: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradient {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl HeadGradient {
    fn zeros_like(head: &SimilarityHead) -> Self {
        HeadGradient {
            w1: Array2::zeros(head.w1.raw_dim()),
            b1: Array1::zeros(head.b1.raw_dim()),
            w2: Array2::zeros(head.w2.raw_dim()),
            b2: Array1::zeros(head.b2.raw_dim()),
        }
    }

    /// Parameter groups in a fixed order: `w1`, `b1`, `w2`, `b2`.
    pub fn groups(&self) -> [Vec<f64>; 4] {
        [
            self.w1.iter().copied().collect(),
            self.b1.to_vec(),
            self.w2.iter().copied().collect(),
            self.b2.to_vec(),
        ]
    }
}

struct Forward {
    hidden: Array1<f64>,
    z: Array1<f64>,
}

impl SimilarityHead {
    pub fn random(rng: &mut impl Rng, dim: usize, tau_c: f64) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let mut m = || Array2::from_shape_fn((dim, dim), |_| scale * standard_normal(rng));
        let w1 = m();
        let w2 = m();
        SimilarityHead {
            w1,
            b1: Array1::zeros(dim),
            w2,
            b2: Array1::zeros(dim),
            tau_c,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w1.nrows();
        let ok = self.w1.ncols() == d
            && self.b1.len() == d
            && self.w2.dim() == (d, d)
            && self.b2.len() == d;
        if !ok {
            return Err(Error::invalid("similarity head expects square D x D layers"));
        }
        if !(self.tau_c > 0.0 && self.tau_c.is_finite()) {
            return Err(Error::invalid("tau_c must be positive"));
        }
        Ok(())
    }

    /// Number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Mutable access to parameter `k` in `HeadGradient::groups` order.
    pub fn parameter_mut(&mut self, mut k: usize) -> &mut f64 {
        if k < self.w1.len() {
            return self.w1.iter_mut().nth(k).expect("in range");
        }
        k -= self.w1.len();
        if k < self.b1.len() {
            return &mut self.b1[k];
        }
        k -= self.b1.len();
        if k < self.w2.len() {
            return self.w2.iter_mut().nth(k).expect("in range");
        }
        k -= self.w2.len();
        &mut self.b2[k]
    }

    fn forward(&self, x: &Array1<f64>) -> Forward {
        let hidden = (self.w1.dot(x) + &self.b1).mapv(f64::tanh);
        let z = self.w2.dot(&hidden) + &self.b2;
        Forward { hidden, z }
    }

    pub fn embed(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        self.validate()?;
        check_input(x, self.dim())?;
        Ok(self.forward(x).z)
    }

    /// Full `n × n` predicted similarity matrix, diagonal included.
    pub fn predict(&self, cls: &[Array1<f64>]) -> Result<Array2<f64>> {
        self.validate()?;
        let unit = cls
            .iter()
            .map(|c| {
                check_input(c, self.dim())?;
                normalized(&self.forward(c).z, "head embedding")
            })
            .collect::<Result<Vec<_>>>()?;
        let n = unit.len();
        Ok(Array2::from_shape_fn((n, n), |(i, j)| {
            sigmoid(unit[i].dot(&unit[j]) / self.tau_c)
        }))
    }

    /// Pairwise BCE of one scene with its analytic gradient.
    pub fn loss_and_gradient(&self, scene: &SimilarityScene) -> Result<(f64, HeadGradient)> {
        self.validate()?;
        scene.validate()?;
        let n = scene.cls.len();
        let mut fwd = Vec::with_capacity(n);
        let mut unit = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        for c in &scene.cls {
            check_input(c, self.dim())?;
            let f = self.forward(c);
            let norm = f.z.dot(&f.z).sqrt();
            unit.push(normalized(&f.z, "head embedding")?);
            norms.push(norm);
            fwd.push(f);
        }

        let pairs = (n * (n - 1)) as f64;
        let max_logit = ((1.0 - BCE_CLAMP) / BCE_CLAMP).ln();
        let mut loss = 0.0;
        let mut d_unit: Vec<Array1<f64>> = vec![Array1::zeros(self.dim()); n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let y = scene.labels[[i, j]];
                // BCE in logit form keeps ln(1 - p) accurate when p is near 1
                let z = unit[i].dot(&unit[j]) / self.tau_c;
                let zc = z.clamp(-max_logit, max_logit);
                loss += y * softplus(-zc) + (1.0 - y) * softplus(zc);
                if z != zc {
                    continue;
                }
                let p = sigmoid(z);
                let g = (p - y) / (pairs * self.tau_c);
                d_unit[i].scaled_add(g, &unit[j]);
                d_unit[j].scaled_add(g, &unit[i]);
            }
        }

        let mut grad = HeadGradient::zeros_like(self);
        for i in 0..n {
            let u = &unit[i];
            let dz = (&d_unit[i] - &(u * u.dot(&d_unit[i]))) / norms[i];
            let h = &fwd[i].hidden;
            grad.w2 += &outer(&dz, h);
            grad.b2 += &dz;
            let da = self.w2.t().dot(&dz) * h.mapv(|v| 1.0 - v * v);
            grad.w1 += &outer(&da, &scene.cls[i]);
            grad.b1 += &da;
        }
        Ok((loss / pairs, grad))
    }

    /// Mean scene loss over a dataset and its gradient.
    pub fn dataset_loss_and_gradient(&self, data: &[SimilarityScene]) -> Result<(f64, HeadGradient)> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let mut total = 0.0;
        let mut grad = HeadGradient::zeros_like(self);
        for scene in data {
            let (l, g) = self.loss_and_gradient(scene)?;
            total += l;
            grad.w1 += &g.w1;
            grad.b1 += &g.b1;
            grad.w2 += &g.w2;
            grad.b2 += &g.b2;
        }
        let k = 1.0 / data.len() as f64;
        grad.w1 *= k;
        grad.b1 *= k;
        grad.w2 *= k;
        grad.b2 *= k;
        Ok((total * k, grad))
    }

    fn stepped(&self, grad: &HeadGradient, step: f64) -> SimilarityHead {
        SimilarityHead {
            w1: &self.w1 - &(&grad.w1 * step),
            b1: &self.b1 - &(&grad.b1 * step),
            w2: &self.w2 - &(&grad.w2 * step),
            b2: &self.b2 - &(&grad.b2 * step),
            tau_c: self.tau_c,
        }
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

fn check_input(x: &Array1<f64>, dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::invalid(format!("CLS width {} does not match head width {dim}", x.len())));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("CLS token has non-finite entries"));
    }
    Ok(())
}

pub fn head_similarity(head: &SimilarityHead, a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    let p = head.predict(&[a.clone(), b.clone()])?;
    Ok(p[[0, 1]])
}

fn check_pair_matrices(pred: &Array2<f64>, labels: &Array2<f64>) -> Result<usize> {
    let n = pred.nrows();
    if pred.ncols() != n || labels.dim() != (n, n) {
        return Err(Error::invalid("prediction and label matrices must be matching squares"));
    }
    if n < 2 {
        return Err(Error::invalid("need at least two objects to form a pair"));
    }
    if !pred.iter().all(|p| p.is_finite()) {
        return Err(Error::invalid("predictions must be finite"));
    }
    if !labels.iter().all(|y| (0.0..=1.0).contains(y)) {
        return Err(Error::invalid("labels must lie in [0, 1]"));
    }
    Ok(n)
}

/// `ln(1 + e^x)` without overflow or cancellation.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over ordered pairs `i != j`.
pub fn similarity_bce_loss(pred: &Array2<f64>, labels: &Array2<f64>) -> Result<f64> {
    let n = check_pair_matrices(pred, labels)?;
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let p = pred[[i, j]].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                let y = labels[[i, j]];
                sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
        }
    }
    Ok(sum / (n * (n - 1)) as f64)
}

/// Fraction of ordered pairs `i != j` whose thresholded prediction matches the label.
pub fn pairwise_accuracy(pred: &Array2<f64>, labels: &Array2<f64>, threshold: f64) -> Result<f64> {
    let n = check_pair_matrices(pred, labels)?;
    let mut hits = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i != j && (pred[[i, j]] >= threshold) == (labels[[i, j]] >= 0.5) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (n * (n - 1)) as f64)
}

/// CLS tokens of one scene with pairwise same-set labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityScene {
    pub cls: Vec<Array1<f64>>,
    pub labels: Array2<f64>,
}

impl SimilarityScene {
    pub fn validate(&self) -> Result<()> {
        let n = self.cls.len();
        if n < 2 {
            return Err(Error::invalid("a training scene needs at least two objects"));
        }
        if self.labels.dim() != (n, n) {
            return Err(Error::invalid("label matrix does not match object count"));
        }
        if !self.labels.iter().all(|y| (0.0..=1.0).contains(y)) {
            return Err(Error::invalid("labels must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Full-batch gradient descent with backtracking. The loss never increases
/// between epochs; the returned history holds the loss before each epoch and
/// after the last one.
pub fn train_similarity_head(
    head: &SimilarityHead,
    data: &[SimilarityScene],
    epochs: usize,
    learning_rate: f64,
) -> Result<(SimilarityHead, Vec<f64>)> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let mut current = head.clone();
    let (mut loss, mut grad) = current.dataset_loss_and_gradient(data)?;
    let mut history = vec![loss];
    let mut step = learning_rate;
    for _ in 0..epochs {
        let mut accepted = false;
        for _ in 0..40 {
            let trial = current.stepped(&grad, step);
            match trial.dataset_loss_and_gradient(data) {
                Ok((l, g)) if l <= loss => {
                    current = trial;
                    loss = l;
                    grad = g;
                    accepted = true;
                    break;
                }
                Ok(_) | Err(Error::Degenerate(_)) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        history.push(loss);
        if !accepted {
            break;
        }
        step = (step * 1.5).min(learning_rate * 64.0);
    }
    Ok((current, history))
}

/// Scenes whose CLS tokens are noisy copies of shared cluster centers.
/// Objects in the same cluster are labelled as one set.
pub fn synthetic_clusters(
    seed: u64,
    scenes: usize,
    objects_per_scene: usize,
    dim: usize,
    clusters: usize,
    noise: f64,
) -> Result<Vec<SimilarityScene>> {
    if objects_per_scene < 2 || clusters == 0 || dim == 0 {
        return Err(Error::invalid("need >= 2 objects, >= 1 cluster and positive width"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Array1<f64>> = (0..clusters)
        .map(|_| {
            let v: Array1<f64> = Array1::from_shape_fn(dim, |_| standard_normal(&mut rng));
            let n = v.dot(&v).sqrt();
            v / n
        })
        .collect();
    Ok((0..scenes)
        .map(|_| {
            let ids: Vec<usize> = (0..objects_per_scene).map(|_| rng.random_range(0..clusters)).collect();
            let cls = ids
                .iter()
                .map(|&c| {
                    let eps = Array1::from_shape_fn(dim, |_| noise * standard_normal(&mut rng));
                    &centers[c] + &eps
                })
                .collect();
            let labels = Array2::from_shape_fn((objects_per_scene, objects_per_scene), |(i, j)| {
                f64::from(u8::from(ids[i] == ids[j]))
            });
            SimilarityScene { cls, labels }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_predictions_give_ln2() {
        let pred = Array2::from_elem((4, 4), 0.5);
        let labels = Array2::from_shape_fn((4, 4), |(i, j)| f64::from(u8::from((i + j) % 2 == 0)));
        let l = similarity_bce_loss(&pred, &labels).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn clamping_keeps_loss_finite() {
        let pred = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let labels = Array2::from_shape_vec((2, 2), vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let l = similarity_bce_loss(&pred, &labels).unwrap();
        assert!((l - (-(BCE_CLAMP.ln()))).abs() < 1e-9);
    }

    #[test]
    fn diagonal_is_ignored() {
        let mut pred = Array2::from_elem((3, 3), 0.9);
        let labels = Array2::from_elem((3, 3), 1.0);
        let a = similarity_bce_loss(&pred, &labels).unwrap();
        pred.diag_mut().fill(0.0);
        assert_eq!(a, similarity_bce_loss(&pred, &labels).unwrap());
    }

    #[test]
    fn head_similarity_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = SimilarityHead::random(&mut rng, 6, 0.5);
        let a = Array1::from_shape_fn(6, |_| standard_normal(&mut rng));
        let b = Array1::from_shape_fn(6, |_| standard_normal(&mut rng));
        let ab = head_similarity(&head, &a, &b).unwrap();
        let ba = head_similarity(&head, &b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-15);
        assert!(ab > 0.0 && ab < 1.0);
        let aa = head_similarity(&head, &a, &a).unwrap();
        assert!((aa - sigmoid(1.0 / 0.5)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = SimilarityHead::random(&mut rng, 4, 0.5);
        let data = synthetic_clusters(5, 1, 4, 4, 2, 0.3).unwrap();
        let (_, g) = head.loss_and_gradient(&data[0]).unwrap();
        let flat: Vec<f64> = g.groups().concat();
        let h = 1e-6;
        for k in 0..head.parameter_count() {
            let mut plus = head.clone();
            *plus.parameter_mut(k) += h;
            let mut minus = head.clone();
            *minus.parameter_mut(k) -= h;
            let fd = (plus.loss_and_gradient(&data[0]).unwrap().0
                - minus.loss_and_gradient(&data[0]).unwrap().0)
                / (2.0 * h);
            assert!((fd - flat[k]).abs() < 1e-7 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", flat[k]);
        }
    }

    #[test]
    fn training_never_increases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let head = SimilarityHead::random(&mut rng, 8, 0.07);
        let data = synthetic_clusters(7, 20, 5, 8, 4, 0.05).unwrap();
        let (_, history) = train_similarity_head(&head, &data, 30, 0.5).unwrap();
        for w in history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(history.last() < history.first());
    }

    #[test]
    fn zero_embedding_is_degenerate() {
        let mut head = SimilarityHead::random(&mut ChaCha8Rng::seed_from_u64(0), 3, 0.1);
        head.w2.fill(0.0);
        let x = Array1::from(vec![1.0, 2.0, 3.0]);
        assert!(matches!(head_similarity(&head, &x, &x), Err(Error::Degenerate(_))));
    }
}

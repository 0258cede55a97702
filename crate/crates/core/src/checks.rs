//! Self-checks run by the `gradcheck` and `attn-check` commands: finite
//! difference comparisons for the hand-written gradients and the invariants
//! of set-aware attention.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PointCloud, Pose};
use crate::layout::{correspondence_signature, layout_loss, layout_loss_gradient};
use crate::metrics::SCHEMA_VERSION;
use crate::setattn::{
    dit_block, multi_head_attention, object_self_attention, random_scene, scene_self_attention,
    scene_self_attention_unbiased, scene_self_attention_with_similarity, similarity_bias, standard_normal,
    AttentionParams, BlockParams, SceneTokens, SimilarityHead, SimilarityMatrix, SimilarityScene,
};

/// Analytic gradients are scaled by this factor when corruption is requested.
const CORRUPTION: f64 = 1.01;
/// Attempts per requested trial before giving up on finding stable layout instances.
const MAX_ATTEMPTS_PER_TRIAL: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Deliberately perturb the analytic gradients; the report must then fail.
    pub corrupt: bool,
}

impl GradcheckOptions {
    pub fn from_defaults() -> Self {
        let g = &crate::defaults().gradcheck;
        GradcheckOptions {
            seed: g.seed,
            trials: g.trials,
            step: g.step,
            tolerance: g.tolerance,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub trials: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub furnset_schema: u32,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Layout instances skipped because a nearest-neighbor assignment changed within one step.
    pub layout_excluded: usize,
    pub groups: Vec<GroupError>,
    pub passed: bool,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(1e-8);
    diff / scale
}

struct Tally {
    names: Vec<&'static str>,
    worst: Vec<f64>,
    trials: usize,
}

impl Tally {
    fn new(names: Vec<&'static str>) -> Self {
        let worst = vec![0.0; names.len()];
        Tally { names, worst, trials: 0 }
    }

    fn record(&mut self, errors: &[f64]) {
        for (w, &e) in self.worst.iter_mut().zip(errors) {
            // NaN must not hide behind max
            *w = if e.is_nan() { f64::INFINITY } else { w.max(e) };
        }
        self.trials += 1;
    }

    fn groups(&self, tolerance: f64) -> Vec<GroupError> {
        self.names
            .iter()
            .zip(&self.worst)
            .map(|(name, &e)| GroupError {
                group: (*name).to_string(),
                trials: self.trials,
                max_relative_error: e,
                passed: self.trials > 0 && e < tolerance,
            })
            .collect()
    }
}

fn check_camera() -> CameraIntrinsics {
    let d = &crate::defaults().scene;
    CameraIntrinsics::from_fov(d.width, d.height, d.fov_degrees.to_radians()).expect("default camera is valid")
}

fn uniform_cloud(rng: &mut ChaCha8Rng, n: usize, center: [f64; 3], half: f64) -> PointCloud {
    let pts = (0..n)
        .map(|_| std::array::from_fn(|i| center[i] + rng.random_range(-half..half)))
        .collect();
    PointCloud::new(pts).expect("finite points")
}

fn layout_trial(
    rng: &mut ChaCha8Rng,
    camera: &CameraIntrinsics,
    opts: &GradcheckOptions,
    lambdas: (f64, f64),
) -> Result<Option<[f64; 3]>> {
    let (l1, l2) = lambdas;
    let (n_object, n_surface) = (rng.random_range(8..24), rng.random_range(10..30));
    let object = uniform_cloud(rng, n_object, [0.0; 3], 0.5);
    let surface = uniform_cloud(rng, n_surface, [0.0, 0.0, 4.0], 0.6);
    let pose = Pose::new(
        [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(3.7..4.3)],
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        rng.random_range(0.7..1.4),
    )?;
    let base = pose.as_array();
    let signature = correspondence_signature(&object, &surface, &pose, camera, l1, l2)?;
    let mut numeric = [0.0; 5];
    for i in 0..5 {
        let mut f = [0.0; 2];
        for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut p = base;
            p[i] += sign * opts.step;
            let probe = Pose::from_array(p);
            if correspondence_signature(&object, &surface, &probe, camera, l1, l2)? != signature {
                return Ok(None);
            }
            f[slot] = layout_loss(&object, &surface, &probe, camera, l1, l2)?;
        }
        numeric[i] = (f[0] - f[1]) / (2.0 * opts.step);
    }
    let mut analytic = layout_loss_gradient(&object, &surface, &pose, camera, l1, l2)?;
    if opts.corrupt {
        analytic.iter_mut().for_each(|g| *g *= CORRUPTION);
    }
    Ok(Some([
        relative_error(&analytic[0..3], &numeric[0..3]),
        relative_error(&analytic[3..4], &numeric[3..4]),
        relative_error(&analytic[4..5], &numeric[4..5]),
    ]))
}

fn head_trial(rng: &mut ChaCha8Rng, opts: &GradcheckOptions, tau_c: f64) -> Result<[f64; 4]> {
    let dim = rng.random_range(3..7);
    let n = rng.random_range(2..6);
    let mut head = SimilarityHead::random(rng, dim, tau_c);
    // biases start at zero; move them so the whole parameter vector is generic
    head.b1.mapv_inplace(|_| 0.3 * standard_normal(rng));
    head.b2.mapv_inplace(|_| 0.3 * standard_normal(rng));
    let cls = (0..n)
        .map(|_| ndarray::Array1::from_shape_fn(dim, |_| standard_normal(rng)))
        .collect();
    let mut labels = Array2::<f64>::eye(n);
    for i in 0..n {
        for j in i + 1..n {
            let y = f64::from(u8::from(rng.random_bool(0.5)));
            labels[[i, j]] = y;
            labels[[j, i]] = y;
        }
    }
    let scene = SimilarityScene { cls, labels };
    let (_, grad) = head.loss_and_gradient(&scene)?;
    let mut numeric = Vec::with_capacity(head.parameter_count());
    for k in 0..head.parameter_count() {
        let original = *head.parameter_mut(k);
        *head.parameter_mut(k) = original + opts.step;
        let up = head.loss_and_gradient(&scene)?.0;
        *head.parameter_mut(k) = original - opts.step;
        let down = head.loss_and_gradient(&scene)?.0;
        *head.parameter_mut(k) = original;
        numeric.push((up - down) / (2.0 * opts.step));
    }
    let mut errors = [0.0; 4];
    let mut offset = 0;
    for (g, analytic) in grad.groups().into_iter().enumerate() {
        let analytic: Vec<f64> = analytic
            .into_iter()
            .map(|a| if opts.corrupt { a * CORRUPTION } else { a })
            .collect();
        errors[g] = relative_error(&analytic, &numeric[offset..offset + analytic.len()]);
        offset += analytic.len();
    }
    Ok(errors)
}

/// Compares the layout and similarity-head gradients against central
/// differences over `trials` seeded instances each.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.trials == 0 {
        return Err(Error::invalid("gradcheck needs at least one trial"));
    }
    if !(opts.step > 0.0 && opts.step.is_finite()) || !(opts.tolerance > 0.0) {
        return Err(Error::invalid("step and tolerance must be positive"));
    }
    let defaults = crate::defaults();
    let lambdas = (defaults.layout.lambda1, defaults.layout.lambda2);
    let camera = check_camera();

    let mut layout = Tally::new(vec!["layout.translation", "layout.yaw", "layout.scale"]);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut excluded = 0;
    let mut attempts = 0;
    while layout.trials < opts.trials && attempts < opts.trials * MAX_ATTEMPTS_PER_TRIAL {
        attempts += 1;
        match layout_trial(&mut rng, &camera, opts, lambdas)? {
            Some(errors) => layout.record(&errors),
            None => excluded += 1,
        }
    }

    let mut head = Tally::new(vec!["head.w1", "head.b1", "head.w2", "head.b2"]);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_4ead);
    for _ in 0..opts.trials {
        head.record(&head_trial(&mut rng, opts, defaults.attention.tau_c)?);
    }

    let mut groups = layout.groups(opts.tolerance);
    if layout.trials < opts.trials {
        groups.iter_mut().for_each(|g| g.passed = false);
    }
    groups.extend(head.groups(opts.tolerance));
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradcheckReport {
        furnset_schema: SCHEMA_VERSION,
        seed: opts.seed,
        step: opts.step,
        tolerance: opts.tolerance,
        layout_excluded: excluded,
        groups,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionOptions {
    pub seeds: Vec<u64>,
    pub scene_sizes: Vec<usize>,
    pub tokens_per_object: usize,
    pub dim: usize,
    pub heads: usize,
    /// Negate the similarity bias; monotonicity must then fail.
    pub flip_bias_sign: bool,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions {
            seeds: vec![0, 1, 2],
            scene_sizes: vec![1, 2, 3, 5, 8],
            tokens_per_object: 3,
            dim: 8,
            heads: 2,
            flip_bias_sign: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantResult {
    pub invariant: String,
    pub cases: usize,
    /// Largest deviation seen; for monotonicity, the largest decrease in attention mass.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub furnset_schema: u32,
    pub invariants: Vec<InvariantResult>,
    pub passed: bool,
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, x| if x.is_nan() { f64::INFINITY } else { m.max(x.abs()) })
}

fn scene_weights(
    scene: &SceneTokens,
    params: &AttentionParams,
    sim: &SimilarityMatrix,
    flip: bool,
) -> Result<Vec<Array2<f64>>> {
    if !flip {
        return Ok(scene_self_attention_with_similarity(scene, params, sim)?.1);
    }
    let bias = -similarity_bias(scene, sim, params.epsilon)?;
    let x = scene.stacked();
    Ok(multi_head_attention(params, &x, &x, Some(&bias))?.weights)
}

struct Invariant {
    name: &'static str,
    tolerance: f64,
    /// Monotonicity passes only on a strict increase.
    strict: bool,
    cases: usize,
    worst: f64,
}

impl Invariant {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Invariant {
            name,
            tolerance,
            strict: false,
            cases: 0,
            worst: 0.0,
        }
    }

    fn observe(&mut self, value: f64) {
        self.cases += 1;
        self.worst = if value.is_nan() { f64::INFINITY } else { self.worst.max(value) };
    }

    fn result(&self) -> InvariantResult {
        let passed = if self.strict {
            self.worst < self.tolerance
        } else {
            self.worst <= self.tolerance
        };
        InvariantResult {
            invariant: self.name.to_string(),
            cases: self.cases,
            worst: self.worst,
            tolerance: self.tolerance,
            passed,
        }
    }
}

/// Evaluates the set-aware attention invariants on seeded random scenes.
pub fn attention_suite(opts: &AttentionOptions) -> Result<AttentionReport> {
    if opts.seeds.is_empty() || opts.scene_sizes.is_empty() || opts.scene_sizes.contains(&0) {
        return Err(Error::invalid("attention suite needs seeds and positive scene sizes"));
    }
    let mut rows = Invariant::new("row_sums", 1e-6);
    let mut uniform = Invariant::new("uniform_bias_equivalence", 1e-9);
    let mut isolation = Invariant::new("object_isolation", 0.0);
    let mut monotone = Invariant::new("bias_monotonicity", 0.0);
    monotone.strict = true;
    monotone.worst = f64::NEG_INFINITY;
    let mut perm_scene = Invariant::new("scene_attention_equivariance", 1e-9);
    let mut perm_block = Invariant::new("dit_block_equivariance", 1e-9);

    let (t, d, h) = (opts.tokens_per_object, opts.dim, opts.heads);
    let attention_tau = crate::defaults().attention.tau;
    for &seed in &opts.seeds {
        for &n in &opts.scene_sizes {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000).wrapping_add(n as u64));
            let scene = random_scene(&mut rng, n, t, d);
            let params = AttentionParams::random(&mut rng, d, d, h);

            let sim = crate::setattn::cls_similarity(&scene, attention_tau)?;
            for w in scene_weights(&scene, &params, &sim, opts.flip_bias_sign)? {
                for row in w.rows() {
                    rows.observe((row.sum() - 1.0).abs());
                }
            }

            let level = rng.random_range(0.05..1.0);
            let biased = scene_self_attention_with_similarity(&scene, &params, &SimilarityMatrix::uniform(n, level))?.0;
            let plain = scene_self_attention_unbiased(&scene, &params)?;
            uniform.observe(max_abs_diff(&biased.stacked(), &plain.stacked()));

            let isolated = object_self_attention(&scene, &params)?;
            let keep = rng.random_range(0..n);
            let mut others = scene.objects().to_vec();
            for (i, o) in others.iter_mut().enumerate() {
                if i != keep {
                    o.tokens.mapv_inplace(|v| 40.0 * v + 3.0);
                    o.cls.mapv_inplace(|v| -v);
                }
            }
            let moved = object_self_attention(&SceneTokens::new(others)?, &params)?;
            let alone = multi_head_attention(&params, &scene.objects()[keep].sequence(), &scene.objects()[keep].sequence(), None)?
                .output;
            let a = isolated.objects()[keep].sequence();
            let b = moved.objects()[keep].sequence();
            isolation.observe(max_abs_diff(&a, &b).max(max_abs_diff(&a, &alone)));

            if n >= 2 {
                let (i, j) = (0, n - 1);
                let base = SimilarityMatrix::uniform(n, 0.5);
                let mut raised = base.clone();
                raised.0[[i, j]] = 0.9;
                raised.0[[j, i]] = 0.9;
                let span = t + 1;
                let before = scene_weights(&scene, &params, &base, opts.flip_bias_sign)?;
                let after = scene_weights(&scene, &params, &raised, opts.flip_bias_sign)?;
                for (wb, wa) in before.iter().zip(&after) {
                    let block = s![i * span..(i + 1) * span, j * span..(j + 1) * span];
                    monotone.observe(wb.slice(block).sum() - wa.slice(block).sum());
                }
            }

            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let a = scene_self_attention(&scene, &params)?.permuted(&order);
            let b = scene_self_attention(&scene.permuted(&order), &params)?;
            perm_scene.observe(max_abs_diff(&a.stacked(), &b.stacked()));

            let fdim = d - 2;
            let features: Vec<Array2<f64>> = (0..n)
                .map(|_| Array2::from_shape_fn((t + 2, fdim), |_| standard_normal(&mut rng)))
                .collect();
            let scene_features = Array2::from_shape_fn((2 * t, fdim), |_| standard_normal(&mut rng));
            let block = BlockParams::random(&mut rng, d, fdim, h);
            let permuted_features: Vec<Array2<f64>> = order.iter().map(|&k| features[k].clone()).collect();
            for index in 0..2 {
                let a = dit_block(&scene, &features, &scene_features, &block, index)?.permuted(&order);
                let b = dit_block(&scene.permuted(&order), &permuted_features, &scene_features, &block, index)?;
                perm_block.observe(max_abs_diff(&a.stacked(), &b.stacked()));
            }
        }
    }
    if monotone.cases == 0 {
        monotone.worst = 0.0;
        monotone.strict = false;
    }

    let invariants: Vec<InvariantResult> = [rows, uniform, isolation, monotone, perm_scene, perm_block]
        .iter()
        .map(Invariant::result)
        .collect();
    let passed = invariants.iter().all(|r| r.passed);
    Ok(AttentionReport {
        furnset_schema: SCHEMA_VERSION,
        invariants,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(trials: usize) -> GradcheckOptions {
        GradcheckOptions {
            trials,
            ..GradcheckOptions::from_defaults()
        }
    }

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn gradients_agree_on_a_few_trials() {
        let report = gradcheck(&quick(10)).unwrap();
        assert!(report.passed, "{report:#?}");
        assert_eq!(report.groups.len(), 7);
    }

    #[test]
    fn corrupted_gradients_are_caught() {
        let report = gradcheck(&GradcheckOptions {
            corrupt: true,
            ..quick(5)
        })
        .unwrap();
        assert!(!report.passed);
        assert!(report.groups.iter().all(|g| !g.passed));
    }

    #[test]
    fn zero_trials_is_a_usage_error() {
        assert!(matches!(gradcheck(&quick(0)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn attention_invariants_hold() {
        let report = attention_suite(&AttentionOptions::default()).unwrap();
        assert!(report.passed, "{report:#?}");
        assert!(report.invariants.iter().all(|r| r.cases > 0));
    }

    #[test]
    fn flipped_bias_breaks_monotonicity_only() {
        let report = attention_suite(&AttentionOptions {
            flip_bias_sign: true,
            ..AttentionOptions::default()
        })
        .unwrap();
        assert!(!report.passed);
        for r in &report.invariants {
            assert_eq!(r.passed, r.invariant != "bias_monotonicity", "{r:?}");
        }
    }

    #[test]
    fn single_object_scenes_pass() {
        let report = attention_suite(&AttentionOptions {
            scene_sizes: vec![1],
            ..AttentionOptions::default()
        })
        .unwrap();
        assert!(report.passed, "{report:#?}");
    }
}

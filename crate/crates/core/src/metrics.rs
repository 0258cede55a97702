//! Chamfer distance and F-Score at scene and object granularity.
//!
//! Chamfer distance is the sum of both directional means of squared
//! nearest-neighbor distances. F-Score is reported as a percentage.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_pose, Pixel, PointCloud, Pose};
use crate::scenegen::SceneSpec;
use crate::spatial::KdTree;

pub const SCHEMA_VERSION: u32 = 1;

/// Squared distance from each point of `from` to its nearest neighbor in `to`.
pub fn nearest_squared<const K: usize>(from: &[[f64; K]], to: &KdTree<K>) -> Vec<f64> {
    from.iter()
        .map(|p| to.nearest(p).map_or(f64::INFINITY, |(_, d)| d))
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    // fixed left-to-right order keeps sums reproducible
    values.iter().sum::<f64>() / values.len() as f64
}

fn chamfer_generic<const K: usize>(p: &[[f64; K]], q: &[[f64; K]]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::invalid("chamfer distance needs two non-empty point sets"));
    }
    let tp = KdTree::build(p);
    let tq = KdTree::build(q);
    Ok(mean(&nearest_squared(p, &tq)) + mean(&nearest_squared(q, &tp)))
}

pub fn chamfer3(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    chamfer_generic(p.points(), q.points())
}

pub fn chamfer2(p: &[Pixel], q: &[Pixel]) -> Result<f64> {
    chamfer_generic(p, q)
}

fn fraction_within(d2: &[f64], tau: f64) -> f64 {
    let t2 = tau * tau;
    d2.iter().filter(|&&d| d <= t2).count() as f64 / d2.len() as f64
}

fn harmonic(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// F-Score in percent: precision is the share of `p` within `tau` of `q`,
/// recall the share of `q` within `tau` of `p`.
pub fn fscore(p: &PointCloud, q: &PointCloud, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("F-Score threshold must be positive, got {tau}")));
    }
    p.require_nonempty("first")?;
    q.require_nonempty("second")?;
    let tp = KdTree::build(p.points());
    let tq = KdTree::build(q.points());
    let precision = 100.0 * fraction_within(&nearest_squared(p.points(), &tq), tau);
    let recall = 100.0 * fraction_within(&nearest_squared(q.points(), &tp), tau);
    Ok(harmonic(precision, recall))
}

/// Quadratic-time reference implementations.
pub mod brute {
    use super::*;
    use crate::spatial::squared_distance;

    fn directional<const K: usize>(from: &[[f64; K]], to: &[[f64; K]]) -> Vec<f64> {
        from.iter()
            .map(|a| {
                to.iter()
                    .map(|b| squared_distance(a, b))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    fn chamfer<const K: usize>(p: &[[f64; K]], q: &[[f64; K]]) -> Result<f64> {
        if p.is_empty() || q.is_empty() {
            return Err(Error::invalid("chamfer distance needs two non-empty point sets"));
        }
        Ok(mean(&directional(p, q)) + mean(&directional(q, p)))
    }

    pub fn chamfer3(p: &PointCloud, q: &PointCloud) -> Result<f64> {
        chamfer(p.points(), q.points())
    }

    pub fn chamfer2(p: &[Pixel], q: &[Pixel]) -> Result<f64> {
        chamfer(p, q)
    }

    pub fn fscore(p: &PointCloud, q: &PointCloud, tau: f64) -> Result<f64> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!("F-Score threshold must be positive, got {tau}")));
        }
        p.require_nonempty("first")?;
        q.require_nonempty("second")?;
        let precision = 100.0 * fraction_within(&directional(p.points(), q.points()), tau);
        let recall = 100.0 * fraction_within(&directional(q.points(), p.points()), tau);
        Ok(harmonic(precision, recall))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub furnset_schema: u32,
    pub cd_s: f64,
    pub cd_o: f64,
    pub fscore_s: f64,
    pub fscore_o: f64,
    pub cd_o_repeated: Option<f64>,
    pub fscore_o_repeated: Option<f64>,
}

impl MetricReport {
    /// Fixed-width table using the usual benchmark column names.
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>, prec: usize| match v {
            Some(x) => format!("{x:.prec$}"),
            None => "-".to_string(),
        };
        format!(
            "{:>10} {:>10} {:>10} {:>10} {:>12} {:>12}\n{:>10.4} {:>10.4} {:>10.2} {:>10.2} {:>12} {:>12}\n",
            "CD-S",
            "CD-O",
            "F-Score-S",
            "F-Score-O",
            "CD-O(rep)",
            "F-O(rep)",
            self.cd_s,
            self.cd_o,
            self.fscore_s,
            self.fscore_o,
            opt(self.cd_o_repeated, 4),
            opt(self.fscore_o_repeated, 2),
        )
    }
}

/// Metrics over clouds already expressed in a common frame.
///
/// Scene metrics normalize both unions by the ground-truth scene diagonal;
/// each object pair is normalized by its ground-truth object diagonal.
pub fn evaluate_clouds(
    predicted: &[PointCloud],
    truth: &[PointCloud],
    set_ids: &[usize],
    tau: f64,
) -> Result<MetricReport> {
    if predicted.len() != truth.len() || truth.len() != set_ids.len() {
        return Err(Error::invalid(format!(
            "object count mismatch: {} predicted, {} ground truth, {} set labels",
            predicted.len(),
            truth.len(),
            set_ids.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("scene has no objects"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("F-Score threshold must be positive, got {tau}")));
    }

    let truth_scene = PointCloud::concat(truth);
    let pred_scene = PointCloud::concat(predicted);
    let diag = truth_scene.bbox_diagonal();
    if diag <= 0.0 {
        return Err(Error::Degenerate("ground-truth scene has zero extent".into()));
    }
    let (ts, ps) = (truth_scene.scaled(1.0 / diag), pred_scene.scaled(1.0 / diag));
    let cd_s = chamfer3(&ps, &ts)?;
    let fscore_s = fscore(&ps, &ts, tau)?;

    let per_object: Vec<(f64, f64)> = predicted
        .par_iter()
        .zip(truth.par_iter())
        .map(|(p, t)| {
            let d = t.bbox_diagonal();
            let norm = if d > 0.0 { 1.0 / d } else { 1.0 };
            let (p, t) = (p.scaled(norm), t.scaled(norm));
            Ok((chamfer3(&p, &t)?, fscore(&p, &t, tau)?))
        })
        .collect::<Result<_>>()?;

    let avg = |idx: &[usize]| -> (f64, f64) {
        let n = idx.len() as f64;
        let cd = idx.iter().map(|&i| per_object[i].0).sum::<f64>() / n;
        let f = idx.iter().map(|&i| per_object[i].1).sum::<f64>() / n;
        (cd, f)
    };
    let all: Vec<usize> = (0..truth.len()).collect();
    let (cd_o, fscore_o) = avg(&all);

    let repeated: Vec<usize> = (0..truth.len())
        .filter(|&i| set_ids.iter().filter(|&&s| s == set_ids[i]).count() >= 2)
        .collect();
    let (cd_o_repeated, fscore_o_repeated) = if repeated.is_empty() {
        (None, None)
    } else {
        let (c, f) = avg(&repeated);
        (Some(c), Some(f))
    };

    Ok(MetricReport {
        furnset_schema: SCHEMA_VERSION,
        cd_s,
        cd_o,
        fscore_s,
        fscore_o,
        cd_o_repeated,
        fscore_o_repeated,
    })
}

/// Scores predicted `(canonical cloud, world pose)` pairs against a scene's
/// ground truth; objects correspond by index.
pub fn evaluate_scene(
    predicted: &[(PointCloud, Pose)],
    truth: &SceneSpec,
    tau: f64,
) -> Result<MetricReport> {
    if predicted.len() != truth.objects.len() {
        return Err(Error::invalid(format!(
            "{} predicted objects for a scene with {}",
            predicted.len(),
            truth.objects.len()
        )));
    }
    let pred: Vec<PointCloud> = predicted
        .iter()
        .map(|(c, p)| apply_pose(p, c))
        .collect::<Result<_>>()?;
    let gt = truth.world_clouds()?;
    let sets: Vec<usize> = truth.objects.iter().map(|o| o.set_id).collect();
    evaluate_clouds(&pred, &gt, &sets, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn chamfer_examples() {
        let p = cloud(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
        assert_eq!(chamfer3(&p, &p).unwrap(), 0.0);
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer3(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer2(&[[0.0, 0.0]], &[[3.0, 4.0]]).unwrap(), 50.0);
        assert_eq!(chamfer2(&[[1.5, 2.5]], &[[1.5, 2.5]]).unwrap(), 0.0);
        assert!(chamfer3(&a, &PointCloud::default()).is_err());
        assert!(chamfer2(&[], &[[0.0, 0.0]]).is_err());
    }

    #[test]
    fn fscore_examples() {
        let p = cloud(&[[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]]);
        assert_eq!(fscore(&p, &p, 0.1).unwrap(), 100.0);
        let far = cloud(&[[1.0, 0.0, 0.0], [1.5, 0.0, 0.0]]);
        assert_eq!(fscore(&p, &far.scaled(10.0), 0.05).unwrap(), 0.0);
        assert!(fscore(&p, &p, 0.0).is_err());
        assert!(fscore(&p, &p, -1.0).is_err());
    }

    #[test]
    fn fscore_half_precision_full_recall() {
        // P: two points on Q, two points 5 away. Q: two points, both covered.
        let q = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let p = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 5.0, 0.0], [1.0, 5.0, 0.0]]);
        // counting: precision 2/4, recall 2/2
        let expected = 2.0 * 50.0 * 100.0 / 150.0;
        assert!((fscore(&p, &q, 0.1).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 66.666_666_666_666_67).abs() < 1e-9);
    }

    #[test]
    fn evaluate_clouds_identity_and_absent_repeats() {
        let a = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let b = cloud(&[[3.0, 0.0, 0.0], [3.0, 1.0, 1.0]]);
        let r = evaluate_clouds(&[a.clone(), b.clone()], &[a, b], &[0, 1], 0.1).unwrap();
        assert_eq!((r.cd_s, r.cd_o, r.fscore_s, r.fscore_o), (0.0, 0.0, 100.0, 100.0));
        assert_eq!(r.cd_o_repeated, None);
        assert_eq!(r.fscore_o_repeated, None);
    }

    #[test]
    fn evaluate_clouds_rejects_mismatch() {
        let a = cloud(&[[0.0; 3]]);
        assert!(evaluate_clouds(&[a.clone()], &[a.clone(), a], &[0, 0], 0.1).is_err());
    }

    #[test]
    fn report_json_is_flat() {
        let r = MetricReport {
            furnset_schema: 1,
            cd_s: 0.5,
            cd_o: 0.25,
            fscore_s: 90.0,
            fscore_o: 80.0,
            cd_o_repeated: None,
            fscore_o_repeated: Some(70.0),
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let obj = v.as_object().unwrap();
        assert_eq!(obj.len(), 7);
        assert!(obj["cd_o_repeated"].is_null());
        assert!(r.table().contains("F-Score-S"));
    }

    fn pts(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
        prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..max)
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_and_permutation_invariant(p in pts(60), q in pts(60)) {
            let (a, b) = (cloud(&p), cloud(&q));
            let ab = chamfer3(&a, &b).unwrap();
            prop_assert!((ab - chamfer3(&b, &a).unwrap()).abs() < 1e-12);
            let mut rev = p.clone();
            rev.reverse();
            prop_assert!((ab - chamfer3(&cloud(&rev), &b).unwrap()).abs() < 1e-12);
            prop_assert!((ab - brute::chamfer3(&a, &b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn fscore_monotone_in_tau(p in pts(40), q in pts(40), t1 in 0.01f64..1.0, dt in 0.0f64..1.0) {
            let (a, b) = (cloud(&p), cloud(&q));
            let f1 = fscore(&a, &b, t1).unwrap();
            let f2 = fscore(&a, &b, t1 + dt).unwrap();
            prop_assert!(f2 >= f1);
            prop_assert!((0.0..=100.0).contains(&f1));
        }

        #[test]
        fn chamfer_zero_iff_same_set(p in pts(30), extra in prop::array::uniform3(2.0f64..3.0)) {
            let a = cloud(&p);
            let mut shuffled = p.clone();
            shuffled.rotate_left(p.len() / 2);
            shuffled.extend_from_slice(&p[..1]);
            prop_assert_eq!(chamfer3(&a, &cloud(&shuffled)).unwrap(), 0.0);
            let mut plus = p.clone();
            plus.push(extra);
            prop_assert!(chamfer3(&a, &cloud(&plus)).unwrap() > 0.0);
        }
    }
}

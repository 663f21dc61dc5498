//! Error metrics between an estimated flow field and its ground truth.
//!
//! All statistics run over the jointly valid entries only, so a solver that
//! marks unreliable rays invalid is scored on what it actually claims.

use std::fmt;

use crate::error::{Error, Result};
use crate::flowfield::FlowField;

/// Entries whose ground-truth magnitude is at or below this floor (mm) are
/// excluded from the relative-error mean; the ratio is meaningless there.
pub const REL_FLOOR: f64 = 1e-6;

/// Accuracy summary of an estimate against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Mean absolute error per component (X, Y, Z), mm.
    pub mae: [f64; 3],
    /// Root-mean-square error per component (X, Y, Z), mm.
    pub rmse: [f64; 3],
    /// Mean of |est - gt| / |gt| over entries with |gt| > [`REL_FLOOR`], in
    /// percent.
    pub mean_rel_err: f64,
    /// Mean Euclidean error |est - gt|, mm.
    pub endpoint_err: f64,
    /// Jointly valid entries the means run over.
    pub compared: usize,
    /// Subset of those that passed the relative-error floor.
    pub rel_compared: usize,
}

/// Compare two fields of identical layout entry by entry.
///
/// Errors if the layouts differ or no entry is valid in both fields (an
/// empty mean would silently report perfect accuracy).
pub fn mae_rmse(est: &FlowField, truth: &FlowField) -> Result<Metrics> {
    if est.layout != truth.layout {
        return Err(Error::DimensionMismatch(format!(
            "flow layouts differ: {:?} vs {:?}",
            est.layout, truth.layout
        )));
    }
    let mut abs = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut rel = 0.0f64;
    let mut epe = 0.0f64;
    let mut compared = 0usize;
    let mut rel_compared = 0usize;
    for i in 0..est.len() {
        if !(est.is_valid(i) && truth.is_valid(i)) {
            continue;
        }
        let d = est.get(i).sub(&truth.get(i));
        abs[0] += d.x.abs();
        abs[1] += d.y.abs();
        abs[2] += d.z.abs();
        sq[0] += d.x * d.x;
        sq[1] += d.y * d.y;
        sq[2] += d.z * d.z;
        let dist = d.norm();
        epe += dist;
        let mag = truth.get(i).norm();
        if mag > REL_FLOOR {
            rel += dist / mag;
            rel_compared += 1;
        }
        compared += 1;
    }
    if compared == 0 {
        return Err(Error::invalid("no jointly valid entries to compare"));
    }
    let n = compared as f64;
    Ok(Metrics {
        mae: abs.map(|a| a / n),
        rmse: sq.map(|s| (s / n).sqrt()),
        mean_rel_err: if rel_compared > 0 {
            100.0 * rel / rel_compared as f64
        } else {
            0.0
        },
        endpoint_err: epe / n,
        compared,
        rel_compared,
    })
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "MAE  (mm)  X {:.6}  Y {:.6}  Z {:.6}",
            self.mae[0], self.mae[1], self.mae[2]
        )?;
        writeln!(
            f,
            "RMSE (mm)  X {:.6}  Y {:.6}  Z {:.6}",
            self.rmse[0], self.rmse[1], self.rmse[2]
        )?;
        writeln!(
            f,
            "rel error  {:.3} %  ({} of {} entries)",
            self.mean_rel_err, self.rel_compared, self.compared
        )?;
        write!(
            f,
            "endpoint   {:.6} mm  ({} entries)",
            self.endpoint_err, self.compared
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MotionVector;
    use crate::testutil::rand_stream;

    fn random_field(dims: [usize; 2], seed: u64) -> FlowField {
        let mut next = rand_stream(seed);
        let mut f = FlowField::central_view(dims);
        for i in 0..f.len() {
            f.set(i, MotionVector::new(next(), next(), next()), true, 1.0);
        }
        f
    }

    #[test]
    fn identical_fields_are_zero() {
        let f = random_field([12, 9], 3);
        let m = mae_rmse(&f, &f).unwrap();
        assert_eq!(m.mae, [0.0; 3]);
        assert_eq!(m.rmse, [0.0; 3]);
        assert_eq!(m.mean_rel_err, 0.0);
        assert_eq!(m.endpoint_err, 0.0);
        assert_eq!(m.compared, 12 * 9);
    }

    #[test]
    fn constant_offset_isolates_component() {
        let truth = random_field([10, 10], 5);
        let mut est = truth.clone();
        for i in 0..est.len() {
            let v = est.get(i).add(&MotionVector::new(0.1, 0.0, 0.0));
            est.set_vector(i, v);
        }
        let m = mae_rmse(&est, &truth).unwrap();
        assert!((m.mae[0] - 0.1).abs() < 1e-12);
        assert!(m.mae[1].abs() < 1e-12 && m.mae[2].abs() < 1e-12);
        assert!((m.rmse[0] - 0.1).abs() < 1e-12);
        assert!((m.endpoint_err - 0.1).abs() < 1e-12);
    }

    #[test]
    fn random_pair_matches_recomputation() {
        let truth = random_field([16, 11], 7);
        let est = random_field([16, 11], 8);
        let m = mae_rmse(&est, &truth).unwrap();

        // independent pass: reversed order, separate accumulators
        let n = truth.len();
        let mut mae_x = 0.0;
        let mut rel = 0.0;
        let mut nrel = 0usize;
        for i in (0..n).rev() {
            let d = est.get(i).sub(&truth.get(i));
            mae_x += d.x.abs();
            let mag = truth.get(i).norm();
            if mag > REL_FLOOR {
                rel += d.norm() / mag;
                nrel += 1;
            }
        }
        assert!((m.mae[0] - mae_x / n as f64).abs() < 1e-12);
        assert!((m.mean_rel_err - 100.0 * rel / nrel as f64).abs() < 1e-9);
        assert_eq!(m.rel_compared, nrel);
    }

    #[test]
    fn invalid_entry_removes_exactly_its_contribution() {
        let truth = random_field([9, 9], 11);
        let est = random_field([9, 9], 12);
        let k = 40;

        let mut est_masked = est.clone();
        est_masked.invalidate(k);
        let m_est = mae_rmse(&est_masked, &truth).unwrap();

        // masking the same entry on the truth side must give the same result
        let mut truth_masked = truth.clone();
        truth_masked.invalidate(k);
        let m_truth = mae_rmse(&est, &truth_masked).unwrap();
        assert_eq!(m_est, m_truth);
        assert_eq!(m_est.compared, 80);

        // and the masked mean must equal a direct mean that skips entry k
        let mut mae_y = 0.0;
        for i in 0..est.len() {
            if i != k {
                mae_y += (est.get(i).y - truth.get(i).y).abs();
            }
        }
        assert!((m_est.mae[1] - mae_y / 80.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_layouts_error() {
        let a = random_field([8, 8], 1);
        let b = random_field([8, 9], 1);
        assert!(mae_rmse(&a, &b).is_err());
        let c = FlowField::full_ray([3, 3, 8, 8]);
        assert!(mae_rmse(&a, &c).is_err());
    }

    #[test]
    fn all_invalid_errors() {
        let mut a = random_field([4, 4], 2);
        let b = random_field([4, 4], 3);
        for i in 0..a.len() {
            a.invalidate(i);
        }
        assert!(mae_rmse(&a, &b).is_err());
    }
}

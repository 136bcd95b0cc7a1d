//! Plain-slice numeric kernels shared by the tape and the evaluation code.

use crate::{Error, Result};

pub fn validate_temperature(temperature: f64) -> Result<()> {
    if temperature.is_finite() && temperature > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "temperature must be a positive finite number, got {temperature}"
        )))
    }
}

fn validate_logits(z: &[f64]) -> Result<()> {
    if z.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "softmax needs at least two classes, got {}",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(())
}

/// `softmax(z / T)`, computed with the maximum subtracted first.
pub fn softmax_with_temperature(z: &[f64], temperature: f64) -> Result<Vec<f64>> {
    validate_temperature(temperature)?;
    validate_logits(z)?;
    let mut out = vec![0.0; z.len()];
    softmax_row(z, temperature, &mut out);
    Ok(out)
}

/// `log softmax(z / T)` without forming the probabilities.
pub fn log_softmax_with_temperature(z: &[f64], temperature: f64) -> Result<Vec<f64>> {
    validate_temperature(temperature)?;
    validate_logits(z)?;
    let mut out = vec![0.0; z.len()];
    log_softmax_row(z, temperature, &mut out);
    Ok(out)
}

pub(crate) fn softmax_row(z: &[f64], temperature: f64, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = ((v - max) / temperature).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn log_softmax_row(z: &[f64], temperature: f64, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = z
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max) / temperature - log_total;
    }
}

/// Column sums of a row-per-instance probability matrix.
pub fn sum_over_instances(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or(Error::EmptyBag)?;
    let mut total = vec![0.0; first.len()];
    for row in rows {
        if row.len() != total.len() {
            return Err(Error::ShapeMismatch {
                context: "sum_over_instances".into(),
                expected: vec![total.len()],
                actual: vec![row.len()],
            });
        }
        for (t, v) in total.iter_mut().zip(row) {
            *t += v;
        }
    }
    Ok(total)
}

/// Index of the largest entry; the lowest index wins exact ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn one_hot_index(target: &[f64]) -> Option<usize> {
    let mut hot = None;
    for (i, &t) in target.iter().enumerate() {
        if t == 1.0 {
            if hot.is_some() {
                return None;
            }
            hot = Some(i);
        } else if t != 0.0 {
            return None;
        }
    }
    hot
}

/// `-sum_c target_c * log_probs_c` for an exactly one-hot target.
pub fn cross_entropy(target: &[f64], log_probs: &[f64]) -> Result<f64> {
    if target.len() != log_probs.len() {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy".into(),
            expected: vec![target.len()],
            actual: vec![log_probs.len()],
        });
    }
    let hot = one_hot_index(target).ok_or_else(|| Error::NotOneHot(target.to_vec()))?;
    Ok(-log_probs[hot])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn uniform_logits_give_uniform_distribution() {
        let p = softmax_with_temperature(&[0.0, 0.0, 0.0], 0.1).unwrap();
        assert!(close(&p, &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn low_temperature_two_class() {
        // exp(10) / (exp(10) + 1) evaluated at 40 digits
        let p = softmax_with_temperature(&[1.0, 0.0], 0.1).unwrap();
        assert!(close(&p, &[0.9999546021312976, 4.539786870243439e-5], 1e-7));
    }

    #[test]
    fn unit_temperature_three_class() {
        let p = softmax_with_temperature(&[2.0, 1.0, 0.0], 1.0).unwrap();
        assert!(close(&p, &[0.66524, 0.24473, 0.09003], 1e-5));
    }

    #[test]
    fn large_scaled_logits_do_not_overflow() {
        let p = softmax_with_temperature(&[1000.0, -1000.0, 0.0], 0.1).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_eq!(argmax(&p), 0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_temperature_and_nan() {
        assert!(matches!(
            softmax_with_temperature(&[0.0, 1.0], 0.0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(softmax_with_temperature(&[0.0, 1.0], -1.0).is_err());
        assert!(matches!(
            softmax_with_temperature(&[f64::NAN, 1.0], 1.0),
            Err(Error::NonFinite(_))
        ));
        assert!(log_softmax_with_temperature(&[0.0, 1.0], f64::NAN).is_err());
    }

    #[test]
    fn log_softmax_values() {
        let l = log_softmax_with_temperature(&[0.0, 0.0], 1.0).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!(close(&l, &[-ln2, -ln2], 1e-15));
        let l = log_softmax_with_temperature(&[1.0, 0.0], 0.1).unwrap();
        assert!(close(&l, &[-4.54e-5, -10.0000454], 1e-6));
    }

    #[test]
    fn instance_sums() {
        let hard = sum_over_instances(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(hard, vec![2.0, 0.0, 0.0]);
        let soft = sum_over_instances(&[vec![0.4, 0.5, 0.1], vec![0.4, 0.1, 0.5]]).unwrap();
        assert!(close(&soft, &[0.8, 0.6, 0.6], 1e-15));
        assert_eq!(
            sum_over_instances(&[vec![0.2, 0.8]]).unwrap(),
            vec![0.2, 0.8]
        );
        assert!(matches!(sum_over_instances(&[]), Err(Error::EmptyBag)));
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(
            cross_entropy(&[1.0, 0.0, 0.0], &[0.0, -30.0, -30.0]).unwrap(),
            0.0
        );
        let uniform = [-(3f64.ln()); 3];
        assert!((cross_entropy(&[0.0, 1.0, 0.0], &uniform).unwrap() - 3f64.ln()).abs() < 1e-15);
        let lp = log_softmax_with_temperature(&[0.0, 1.0], 0.1).unwrap();
        let ce = cross_entropy(&[1.0, 0.0], &lp).unwrap();
        assert!((ce - 10.000045398899217).abs() < 1e-9);
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], &[-0.7, -0.7]),
            Err(Error::NotOneHot(_))
        ));
        assert!(cross_entropy(&[1.0, 1.0], &[-0.7, -0.7]).is_err());
        assert!(cross_entropy(&[0.0, 0.0], &[-0.7, -0.7]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    #[test]
    fn sharpening_bound_at_margin_two_and_a_half() {
        for c in 2..=10usize {
            let mut z = vec![0.0; c];
            z[0] = 2.5;
            let p = softmax_with_temperature(&z, 0.1).unwrap();
            let bound = 1.0 - (c as f64 - 1.0) * (-25.0f64).exp();
            assert!(p[0] >= bound - 1e-12);
            assert!(p[0] > 1.0 - 1.3e-10);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(
            z in prop::collection::vec(-50.0f64..50.0, 2..12),
            t in 0.05f64..5.0,
        ) {
            let p = softmax_with_temperature(&z, t).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn argmax_is_temperature_invariant(
            z in prop::collection::vec(-20.0f64..20.0, 2..12),
            t in 0.01f64..10.0,
        ) {
            let p = softmax_with_temperature(&z, t).unwrap();
            prop_assert_eq!(argmax(&p), argmax(&z));
        }

        #[test]
        fn log_softmax_exponentiates_to_softmax(
            z in prop::collection::vec(-20.0f64..20.0, 2..12),
            t in 0.05f64..5.0,
        ) {
            let p = softmax_with_temperature(&z, t).unwrap();
            let l = log_softmax_with_temperature(&z, t).unwrap();
            let total: f64 = l.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
            for (a, b) in p.iter().zip(&l) {
                prop_assert!((a - b.exp()).abs() < 1e-10);
            }
        }

        #[test]
        fn max_component_respects_margin_bound(
            rest in prop::collection::vec(-5.0f64..0.0, 1..10),
            margin in 2.5f64..6.0,
        ) {
            let top = rest.iter().copied().fold(f64::NEG_INFINITY, f64::max) + margin;
            let mut z = vec![top];
            z.extend(&rest);
            let p = softmax_with_temperature(&z, 0.1).unwrap();
            let bound = 1.0 - (z.len() as f64 - 1.0) * (-margin / 0.1).exp();
            prop_assert!(p[0] >= bound - 1e-15);
        }
    }
}

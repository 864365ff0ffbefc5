//! Training objectives with their analytic gradients.

use super::NetError;

/// Margin contrastive loss over `(distance, label)` pairs, `label = 1` for
/// aligned pairs. Returns the loss and `dL/dD` per pair.
pub fn contrastive_loss(pairs: &[(f64, u8)], margin: f64) -> Result<(f64, Vec<f64>), NetError> {
    if pairs.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pairs.len());
    for &(d, y) in pairs {
        if y == 1 {
            loss += d * d;
            grad.push(d / n);
        } else {
            let gap = (margin - d).max(0.0);
            loss += gap * gap;
            grad.push(-gap / n);
        }
    }
    Ok((loss / (2.0 * n), grad))
}

/// Gradient of the Euclidean distance `|a - b|` with respect to `a`; the
/// gradient with respect to `b` is its negation. Zero at coincidence.
pub fn distance_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if d == 0.0 {
        return (0.0, vec![0.0; a.len()]);
    }
    (d, diff.into_iter().map(|v| v / d).collect())
}

struct Moments {
    mx: f64,
    my: f64,
    vx: f64,
    vy: f64,
    cov: f64,
}

fn moments(x: &[f64], y: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut m = Moments {
        mx,
        my,
        vx: 0.0,
        vy: 0.0,
        cov: 0.0,
    };
    for (a, b) in x.iter().zip(y) {
        m.vx += (a - mx) * (a - mx);
        m.vy += (b - my) * (b - my);
        m.cov += (a - mx) * (b - my);
    }
    m.vx /= n;
    m.vy /= n;
    m.cov /= n;
    m
}

fn check_lengths(x: &[f64], y: &[f64]) -> Result<(), NetError> {
    if x.len() != y.len() {
        return Err(NetError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(NetError::DegenerateBatch("need at least two samples".into()));
    }
    Ok(())
}

/// Concordance correlation coefficient with population moments.
/// Identical constant sequences count as perfect agreement.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64, NetError> {
    check_lengths(x, y)?;
    let m = moments(x, y);
    let den = m.vx + m.vy + (m.mx - m.my).powi(2);
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * m.cov / den)
}

/// `1 - ccc(truth, pred)` and its gradient with respect to `pred`.
pub fn ccc_loss(truth: &[f64], pred: &[f64]) -> Result<(f64, Vec<f64>), NetError> {
    check_lengths(truth, pred)?;
    let n = truth.len() as f64;
    let m = moments(truth, pred);
    let num = 2.0 * m.cov;
    let den = m.vx + m.vy + (m.mx - m.my).powi(2);
    if den == 0.0 {
        return Err(NetError::DegenerateBatch("zero variance and zero mean gap".into()));
    }
    let grad = truth
        .iter()
        .zip(pred)
        .map(|(&x, &y)| {
            let dnum = 2.0 * (x - m.mx) / n;
            let dden = 2.0 * (y - m.my) / n - 2.0 * (m.mx - m.my) / n;
            -(dnum * den - num * dden) / (den * den)
        })
        .collect();
    Ok((1.0 - num / den, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrastive_examples() {
        assert_eq!(contrastive_loss(&[(0.0, 1)], 1.0).unwrap().0, 0.0);
        assert_eq!(contrastive_loss(&[(1.0, 0)], 1.0).unwrap().0, 0.0);
        assert_eq!(contrastive_loss(&[(3.5, 0)], 1.0).unwrap().0, 0.0);
        let l = contrastive_loss(&[(0.5, 1), (0.2, 0)], 1.0).unwrap().0;
        assert!((l - 0.2225).abs() < 1e-15);
        assert!(matches!(contrastive_loss(&[], 1.0), Err(NetError::EmptyBatch)));
    }

    #[test]
    fn ccc_examples() {
        assert_eq!(ccc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert!((ccc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(ccc(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ccc(&[4.0, 4.0], &[4.0, 4.0]).unwrap(), 1.0);
        assert!(matches!(ccc(&[1.0, 2.0], &[1.0]), Err(NetError::LengthMismatch(2, 1))));
    }

    #[test]
    fn gradients_match_differences() {
        let pairs = [(0.3, 1u8), (0.7, 0), (1.4, 0), (0.9, 1)];
        let (_, g) = contrastive_loss(&pairs, 1.0).unwrap();
        let h = 1e-6;
        for i in 0..pairs.len() {
            let mut p = pairs;
            p[i].0 += h;
            let mut m = pairs;
            m[i].0 -= h;
            let num = (contrastive_loss(&p, 1.0).unwrap().0 - contrastive_loss(&m, 1.0).unwrap().0) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-8);
        }

        let x = [1.0, 2.5, 3.0, 4.5, 2.0];
        let y = [1.2, 2.0, 3.3, 3.9, 2.8];
        let (_, g) = ccc_loss(&x, &y).unwrap();
        for i in 0..y.len() {
            let mut p = y;
            p[i] += h;
            let mut m = y;
            m[i] -= h;
            let num = (ccc_loss(&x, &p).unwrap().0 - ccc_loss(&x, &m).unwrap().0) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-8);
        }
    }
}

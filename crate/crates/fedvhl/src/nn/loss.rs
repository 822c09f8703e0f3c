use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Mean softmax cross-entropy over the batch.
///
/// Returns the loss and its gradient at the logits, `(softmax - onehot) / n`.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, width) = logits.dim();
    if n == 0 {
        return Err(Error::InvalidInput("cross_entropy needs at least one row".into()));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            site: "cross_entropy labels".into(),
            expected: format!("{n} labels"),
            actual: format!("{}", labels.len()),
        });
    }
    if let Some((row, &bad)) = labels.iter().enumerate().find(|(_, &l)| l >= width) {
        return Err(Error::InvalidInput(format!(
            "label {bad} at row {row} out of range for {width} logits"
        )));
    }

    let mut grad = Array2::zeros((n, width));
    let mut loss = 0.0;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite {
                what: "logits".into(),
                index: i,
            });
        }
        let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[labels[i]];
        for (j, &x) in row.iter().enumerate() {
            grad[[i, j]] = (x - lse).exp() / n as f64;
        }
        grad[[i, labels[i]]] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// Supervised contrastive loss over L2-normalized feature rows.
///
/// Anchors are the non-frozen rows with at least one positive (same label,
/// different row); anchors without positives are skipped. Frozen rows still
/// participate as positives and in every denominator, but their gradient is
/// exactly zero, which is what detaching them from the graph would produce.
pub fn supcon_loss(
    features: ArrayView2<f64>,
    labels: &[usize],
    temperature: f64,
    frozen: &[bool],
) -> Result<(f64, Array2<f64>)> {
    let (n, d) = features.dim();
    if n < 2 {
        return Err(Error::InvalidInput("supcon_loss needs at least two rows".into()));
    }
    if labels.len() != n || frozen.len() != n {
        return Err(Error::ShapeMismatch {
            site: "supcon_loss labels/frozen".into(),
            expected: format!("{n} entries"),
            actual: format!("{} labels / {} frozen", labels.len(), frozen.len()),
        });
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidInput("temperature must be positive".into()));
    }

    let mut norms = vec![0.0; n];
    let mut z = features.to_owned();
    for (i, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
        let r = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !r.is_finite() {
            return Err(Error::NonFinite {
                what: "feature row".into(),
                index: i,
            });
        }
        if r == 0.0 {
            return Err(Error::DegenerateFeature { row: i });
        }
        row.mapv_inplace(|v| v / r);
        norms[i] = r;
    }

    // Positives per row; anchors are non-frozen rows with at least one.
    let positives: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect()
        })
        .collect();
    let anchors: Vec<usize> = (0..n)
        .filter(|&i| !frozen[i] && !positives[i].is_empty())
        .collect();
    if anchors.is_empty() {
        return Err(Error::NoAnchor(if frozen.iter().all(|&f| f) {
            "every row is frozen".into()
        } else {
            "no unfrozen row has a positive".into()
        }));
    }

    let sim = z.dot(&z.t());
    let inv_a = 1.0 / anchors.len() as f64;
    let mut loss = 0.0;
    let mut g = Array2::zeros((n, n));
    for &i in &anchors {
        // Stable softmax over j != i at temperature tau.
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i {
                max = max.max(sim[[i, j]] / temperature);
            }
        }
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (sim[[i, j]] / temperature - max).exp();
            }
        }
        let lse = max + denom.ln();
        let inv_p = 1.0 / positives[i].len() as f64;
        for &p in &positives[i] {
            loss += inv_a * inv_p * (lse - sim[[i, p]] / temperature);
        }
        for j in 0..n {
            if j != i {
                let q = (sim[[i, j]] / temperature - lse).exp();
                let pos = if labels[j] == labels[i] { inv_p } else { 0.0 };
                g[[i, j]] = inv_a * (q - pos);
            }
        }
    }

    // dL/dZ = (G + G^T) Z / tau, then back through the normalization.
    let dz = (&g + &g.t()).dot(&z) / temperature;
    let mut grad = Array2::zeros((n, d));
    for i in 0..n {
        if frozen[i] {
            continue;
        }
        let dzi = dz.row(i);
        let zi = z.row(i);
        let radial = dzi.dot(&zi);
        for k in 0..d {
            grad[[i, k]] = (dzi[k] - radial * zi[k]) / norms[i];
        }
    }
    Ok((loss, grad))
}

//! Binary cross-entropy on logits.

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean BCE over the batch and its gradient with respect to each logit.
pub fn bce_with_logits(logits: &[f32], targets: &[f32]) -> (f64, Vec<f32>) {
    assert_eq!(logits.len(), targets.len(), "logit/target length mismatch");
    let n = logits.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(targets) {
        let (z64, y64) = (z as f64, y as f64);
        loss += z64.max(0.0) - z64 * y64 + (-z64.abs()).exp().ln_1p();
        grad.push(((sigmoid(z) as f64 - y64) / n) as f32);
    }
    (loss / n, grad)
}

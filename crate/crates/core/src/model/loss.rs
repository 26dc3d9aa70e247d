use super::ClassWeighting;

/// Lower clamp on `p_t` inside the logarithm.
pub const P_FLOOR: f64 = 1e-12;

pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// `-alpha_t (1 - p_t)^gamma ln p_t` with `p_t = probs[label]`.
pub fn focal_loss(probs: [f64; 2], label: usize, alpha_t: f64, gamma: f64) -> f64 {
    let pt = probs[label].max(P_FLOOR);
    -alpha_t * (1.0 - probs[label]).max(0.0).powf(gamma) * pt.ln()
}

/// Gradient of [`focal_loss`] with respect to the two logits that produced
/// `probs` through a softmax.
pub fn focal_loss_grad(probs: [f64; 2], label: usize, alpha_t: f64, gamma: f64) -> [f64; 2] {
    let p = probs[label];
    // 1 - p_t, taken from the other entry to keep precision near p_t = 1.
    let q = probs[1 - label];
    if q <= 0.0 {
        return [0.0, 0.0];
    }
    // dL/dz_c = c * (1[c == label] - p_c), c = -alpha (q^g - g q^(g-1) p ln p).
    let log_term = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * p * p.max(P_FLOOR).ln() };
    let c = -alpha_t * (q.powf(gamma) - log_term);
    let mut g = [0.0; 2];
    for (k, gk) in g.iter_mut().enumerate() {
        *gk = c * ((k == label) as u8 as f64 - probs[k]);
    }
    g
}

/// Per-class `alpha_t` from label counts `[negatives, positives]`.
///
/// Inverse frequencies rescaled to mean 1; uniform when a class is absent.
pub fn class_weights(counts: [usize; 2], policy: ClassWeighting) -> [f64; 2] {
    match policy {
        ClassWeighting::Uniform => [1.0, 1.0],
        ClassWeighting::InverseFrequency => {
            if counts[0] == 0 || counts[1] == 0 {
                return [1.0, 1.0];
            }
            let n = (counts[0] + counts[1]) as f64;
            let inv = [n / counts[0] as f64, n / counts[1] as f64];
            let mean = (inv[0] + inv[1]) / 2.0;
            [inv[0] / mean, inv[1] / mean]
        }
    }
}

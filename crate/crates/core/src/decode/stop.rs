use log::warn;
use serde::{Deserialize, Serialize};

use crate::model::vocab::LVR_END;
use crate::numerics::kernels::argmax;
use crate::numerics::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Cosine,
    L1,
    L2,
}

pub fn stop_fixed(steps_taken: usize, k: usize) -> bool {
    steps_taken == k
}

/// Cosine: similarity ≥ threshold. L1/L2: distance ≤ threshold.
pub fn stop_latent_end<S: Real>(h: &[S], anchor: &[S], metric: DistanceMetric, threshold: f64) -> bool {
    let pairs = h.iter().zip(anchor).map(|(a, b)| (a.f64(), b.f64()));
    match metric {
        DistanceMetric::Cosine => {
            let (mut dot, mut nh, mut na) = (0.0, 0.0, 0.0);
            for (a, b) in pairs {
                dot += a * b;
                nh += a * a;
                na += b * b;
            }
            if nh == 0.0 || na == 0.0 {
                warn!("zero-norm vector in cosine stopping test");
                return false;
            }
            dot / (nh.sqrt() * na.sqrt()) >= threshold
        }
        DistanceMetric::L1 => pairs.map(|(a, b)| (a - b).abs()).sum::<f64>() <= threshold,
        DistanceMetric::L2 => pairs.map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() <= threshold,
    }
}

/// True iff `<|lvr_end|>` is the argmax; ties resolve to the lowest id.
pub fn stop_mode_switch<S: Real>(logits: &[S]) -> bool {
    argmax(logits) == LVR_END as usize
}

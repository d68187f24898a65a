//! Composite training objective.
//!
//! `L = L_CE + lambda_route * L_routing + lambda_c * L_cluster
//!    + lambda_d * L_div`, assembled left to right in that order so the
//! breakdown is bit-reproducible. The cluster term is a negated maximum
//! similarity, so the total can legitimately sit below the cross-entropy
//! term; convergence is judged on validation metrics, not loss magnitude.

use std::rc::Rc;

use crate::tape::{Tape, Var};

/// Weights of the auxiliary objective terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_route: f64,
    pub lambda_cluster: f64,
    pub lambda_diversity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_route: 0.3, lambda_cluster: 0.1, lambda_diversity: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) {
        assert!(
            self.lambda_route >= 0.0 && self.lambda_cluster >= 0.0 && self.lambda_diversity >= 0.0,
            "contract error: loss weights must be non-negative"
        );
    }
}

/// Scalar loss terms entering the composite objective.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub ce: Var,
    pub routing: Var,
    pub cluster: Var,
    pub diversity: Var,
}

/// Scalar values of the assembled objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub routing: f64,
    pub cluster: f64,
    pub diversity: f64,
}

/// Mean cross-entropy of logits `[B, C]` against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    tape.cross_entropy(logits, Rc::new(labels.to_vec()))
}

/// Assemble the total objective; returns the scalar node and the breakdown.
pub fn total_loss(tape: &mut Tape, parts: LossParts, weights: &LossWeights) -> (Var, LossBreakdown) {
    weights.validate();
    let breakdown_parts = (
        tape.scalar_value(parts.ce),
        tape.scalar_value(parts.routing),
        tape.scalar_value(parts.cluster),
        tape.scalar_value(parts.diversity),
    );
    let routing_w = tape.mul_scalar(parts.routing, weights.lambda_route);
    let total = tape.add(parts.ce, routing_w);
    let cluster_w = tape.mul_scalar(parts.cluster, weights.lambda_cluster);
    let total = tape.add(total, cluster_w);
    let diversity_w = tape.mul_scalar(parts.diversity, weights.lambda_diversity);
    let total = tape.add(total, diversity_w);
    let breakdown = LossBreakdown {
        total: tape.scalar_value(total),
        ce: breakdown_parts.0,
        routing: breakdown_parts.1,
        cluster: breakdown_parts.2,
        diversity: breakdown_parts.3,
    };
    (total, breakdown)
}

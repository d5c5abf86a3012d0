//! Training objectives and their weighted, schedule-gated sum.

pub mod distortion;
pub mod geometry;
pub mod photometric;
pub mod sdf_supervision;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use distortion::distortion_loss;
pub use geometry::{
    align_pseudo_depth, depth_normal_loss, expected_depth, expected_depth_backward, fit_alignment, normal_cue_loss,
    pseudo_normal_backward, pseudo_normal_from_depth, AlignOutput, AlignParams, ExpectedDepth, NormalField,
};
pub use photometric::{photometric_loss, ssim, ssim_with_grad, wavelet_level};
pub use sdf_supervision::{sample_sdf_rays, sdf_regularization, SdfSampleBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub depth: f64,
    pub normal: f64,
    pub near_surface: f64,
    pub free_space: f64,
    pub distortion: f64,
    pub depth_normal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 0.05,
            normal: 0.1,
            near_surface: 1000.0,
            free_space: 10.0,
            distortion: 100.0,
            depth_normal: 0.05,
        }
    }
}

/// First iteration at which each gated term contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossGates {
    pub distortion_from: usize,
    pub depth_normal_from: usize,
    pub sdf_from: usize,
    /// Pseudo-depth and pseudo-normal cues are on from the start when enabled.
    pub geometry_cues: bool,
}

impl Default for LossGates {
    fn default() -> Self {
        Self {
            distortion_from: 3000,
            depth_normal_from: 7000,
            sdf_from: 5000,
            geometry_cues: true,
        }
    }
}

impl LossGates {
    pub fn distortion(&self, iter: usize) -> bool {
        iter >= self.distortion_from
    }

    pub fn depth_normal(&self, iter: usize) -> bool {
        iter >= self.depth_normal_from
    }

    pub fn sdf(&self, iter: usize) -> bool {
        iter >= self.sdf_from
    }
}

/// Unweighted value of each term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub p: f64,
    #[serde(rename = "D")]
    pub depth: f64,
    #[serde(rename = "N")]
    pub normal: f64,
    pub ns: f64,
    pub fs: f64,
    pub d: f64,
    pub n: f64,
}

/// One line of the training loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: usize,
    #[serde(flatten)]
    pub terms: LossTerms,
    pub total: f64,
    pub gaussian_count: usize,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("loss report serializes")
    }
}

/// Weighted sum with schedule gating; gated terms are reported as zero.
pub fn total_loss(
    terms: &LossTerms,
    weights: &LossWeights,
    gates: &LossGates,
    iter: usize,
    gaussian_count: usize,
) -> Result<LossReport> {
    let named = [
        ("p", terms.p),
        ("D", terms.depth),
        ("N", terms.normal),
        ("ns", terms.ns),
        ("fs", terms.fs),
        ("d", terms.d),
        ("n", terms.n),
    ];
    if let Some((name, v)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            term: (*name).to_string(),
            detail: format!("loss term is {v} at iteration {iter}"),
        });
    }
    let gate = |on: bool, v: f64| if on { v } else { 0.0 };
    let t = LossTerms {
        p: terms.p,
        depth: gate(gates.geometry_cues, terms.depth),
        normal: gate(gates.geometry_cues, terms.normal),
        ns: gate(gates.sdf(iter), terms.ns),
        fs: gate(gates.sdf(iter), terms.fs),
        d: gate(gates.distortion(iter), terms.d),
        n: gate(gates.depth_normal(iter), terms.n),
    };
    let total = t.p
        + weights.depth * t.depth
        + weights.normal * t.normal
        + weights.near_surface * t.ns
        + weights.free_space * t.fs
        + weights.distortion * t.d
        + weights.depth_normal * t.n;
    Ok(LossReport {
        iter,
        terms: t,
        total,
        gaussian_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONES: LossTerms = LossTerms {
        p: 1.0,
        depth: 1.0,
        normal: 1.0,
        ns: 1.0,
        fs: 1.0,
        d: 1.0,
        n: 1.0,
    };

    #[test]
    fn iteration_zero_keeps_only_ungated_terms() {
        let gates = LossGates {
            geometry_cues: false,
            ..Default::default()
        };
        let r = total_loss(&ONES, &LossWeights::default(), &gates, 0, 10).unwrap();
        assert_eq!(r.total, 1.0);
        let r = total_loss(&ONES, &LossWeights::default(), &LossGates::default(), 0, 10).unwrap();
        assert!((r.total - 1.15).abs() < 1e-12);
    }

    #[test]
    fn gates_open_on_schedule() {
        let w = LossWeights::default();
        let g = LossGates::default();
        let at = |i| total_loss(&ONES, &w, &g, i, 0).unwrap().total;
        assert!((at(2999) - 1.15).abs() < 1e-9);
        assert!((at(3000) - 101.15).abs() < 1e-9);
        assert!((at(5000) - 1111.15).abs() < 1e-9);
        assert!((at(7000) - 1111.2).abs() < 1e-9);
    }

    #[test]
    fn non_finite_term_is_named() {
        let mut t = ONES;
        t.fs = f64::NAN;
        match total_loss(&t, &LossWeights::default(), &LossGates::default(), 0, 0) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "fs"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn report_json_has_flat_named_fields() {
        let r = total_loss(&ONES, &LossWeights::default(), &LossGates::default(), 7000, 42).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json_line()).unwrap();
        for key in ["iter", "p", "D", "N", "ns", "fs", "d", "n", "total", "gaussian_count"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: LossReport = serde_json::from_str(&r.to_json_line()).unwrap();
        assert_eq!(back, r);
    }
}

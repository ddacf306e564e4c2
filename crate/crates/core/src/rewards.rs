//! Rule-based rewards for coarse localization and visual consistency
//! filtering outputs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{angle_diff_abs, Pose2};
use crate::localization::SynonymTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("ground-truth landmark set is empty")]
    EmptyGroundTruth,
    #[error("predicted and ground-truth id sets are both empty")]
    BothEmpty,
    #[error("co-visibility score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("invalid reward weights: {0}")]
    InvalidWeights(String),
}

/// A landmark description as emitted in a structured coarse output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkDesc {
    pub category: String,
    #[serde(default)]
    pub visual_attributes: BTreeMap<String, String>,
}

impl LandmarkDesc {
    pub fn new(category: impl Into<String>) -> Self {
        Self {
            category: category.into(),
            visual_attributes: BTreeMap::new(),
        }
    }

    pub fn with_attribute(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.visual_attributes.insert(key.into(), value.into());
        self
    }

    /// Canonical key: synonym-resolved lowercase category plus sorted
    /// lowercase attribute pairs.
    pub fn canonical(&self, synonyms: &SynonymTable) -> (String, Vec<(String, String)>) {
        let attrs = self
            .visual_attributes
            .iter()
            .map(|(k, v)| (k.trim().to_lowercase(), v.trim().to_lowercase()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        (synonyms.canonicalize(&self.category), attrs)
    }
}

/// Structured coarse-localization output.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CoarseOutput {
    pub format_valid: bool,
    #[serde(default)]
    pub predicted_landmarks: Vec<LandmarkDesc>,
    #[serde(default)]
    pub predicted_ids: BTreeSet<String>,
    /// Poses attributed to correct landmarks absent from the ground truth.
    #[serde(default)]
    pub extra_poses: Vec<Pose2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseGroundTruth {
    pub landmarks: Vec<LandmarkDesc>,
    pub ids: BTreeSet<String>,
    pub pose: Pose2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub lambda: f64,
    pub w_d: f64,
    pub w_theta: f64,
    pub covis_lambda: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            w_d: 0.5,
            w_theta: 0.5,
            covis_lambda: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.lambda >= 0.0) || !(self.covis_lambda >= 0.0) {
            return Err(RewardError::InvalidWeights("lambdas must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.w_d) || !(0.0..=1.0).contains(&self.w_theta) {
            return Err(RewardError::InvalidWeights("w_d and w_theta must lie in [0, 1]".into()));
        }
        if (self.w_d + self.w_theta - 1.0).abs() > 1e-9 {
            return Err(RewardError::InvalidWeights(format!(
                "w_d + w_theta = {} but must equal 1",
                self.w_d + self.w_theta
            )));
        }
        Ok(())
    }
}

pub fn format_reward(output: &CoarseOutput) -> f64 {
    if output.format_valid {
        1.0
    } else {
        0.0
    }
}

/// Recall of ground-truth landmarks: `|P ∩ G| / |G|` over canonical keys.
pub fn landmark_reward(
    pred: &[LandmarkDesc],
    gt: &[LandmarkDesc],
    synonyms: &SynonymTable,
) -> Result<f64, RewardError> {
    let g: BTreeSet<_> = gt.iter().map(|l| l.canonical(synonyms)).collect();
    if g.is_empty() {
        return Err(RewardError::EmptyGroundTruth);
    }
    let p: BTreeSet<_> = pred.iter().map(|l| l.canonical(synonyms)).collect();
    Ok(p.intersection(&g).count() as f64 / g.len() as f64)
}

/// Intersection-over-union of landmark id sets.
pub fn map_reward(pred_ids: &BTreeSet<String>, gt_ids: &BTreeSet<String>) -> Result<f64, RewardError> {
    let union = pred_ids.union(gt_ids).count();
    if union == 0 {
        return Err(RewardError::BothEmpty);
    }
    Ok(pred_ids.intersection(gt_ids).count() as f64 / union as f64)
}

/// `exp(-λ (w_d·d + w_θ·|Δφ|))` with the heading difference wrapped to
/// `[0, π]`.
pub fn extra_reward(pred: &Pose2, gt: &Pose2, weights: &RewardWeights) -> Result<f64, RewardError> {
    weights.validate()?;
    let d = pred.distance(gt);
    let dphi = angle_diff_abs(pred.theta, gt.theta);
    Ok((-weights.lambda * (weights.w_d * d + weights.w_theta * dphi)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseReward {
    pub format: f64,
    pub landmark: f64,
    pub map: f64,
    pub extra: f64,
    pub total: f64,
}

/// Sum of the four components. The extra term is the mean over predicted
/// extra poses, or 0 when there are none.
pub fn coarse_reward(
    output: &CoarseOutput,
    gt: &CoarseGroundTruth,
    weights: &RewardWeights,
    synonyms: &SynonymTable,
) -> Result<CoarseReward, RewardError> {
    weights.validate()?;
    let format = format_reward(output);
    let landmark = landmark_reward(&output.predicted_landmarks, &gt.landmarks, synonyms)?;
    let map = map_reward(&output.predicted_ids, &gt.ids)?;
    let extra = if output.extra_poses.is_empty() {
        0.0
    } else {
        let mut acc = 0.0;
        for p in &output.extra_poses {
            acc += extra_reward(p, &gt.pose, weights)?;
        }
        acc / output.extra_poses.len() as f64
    };
    Ok(CoarseReward {
        format,
        landmark,
        map,
        extra,
        total: format + landmark + map + extra,
    })
}

/// `1 - |S_gt - S_pred|`.
pub fn covis_reward(s_gt: f64, s_pred: f64) -> Result<f64, RewardError> {
    for s in [s_gt, s_pred] {
        if !(0.0..=1.0).contains(&s) {
            return Err(RewardError::ScoreOutOfRange(s));
        }
    }
    Ok(1.0 - (s_gt - s_pred).abs())
}

/// `R_format + λ·R_covis`.
pub fn covis_total(format_r: f64, covis_r: f64, covis_lambda: f64) -> f64 {
    format_r + covis_lambda * covis_r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn descs(cats: &[&str]) -> Vec<LandmarkDesc> {
        cats.iter().map(|c| LandmarkDesc::new(*c)).collect()
    }

    #[test]
    fn format() {
        let mut o = CoarseOutput {
            format_valid: true,
            ..Default::default()
        };
        assert_eq!(format_reward(&o), 1.0);
        o.format_valid = false;
        assert_eq!(format_reward(&o), 0.0);
        let parsed: CoarseOutput = serde_json::from_str(
            &serde_json::to_string(&CoarseOutput {
                format_valid: true,
                predicted_ids: ids(&["a"]),
                ..Default::default()
            })
            .unwrap(),
        )
        .unwrap();
        assert_eq!(format_reward(&parsed), 1.0);
    }

    #[test]
    fn landmark_recall() {
        let syn = SynonymTable::default();
        let g = descs(&["sofa", "door", "tv", "plant"]);
        assert_eq!(landmark_reward(&g, &g, &syn).unwrap(), 1.0);
        assert_eq!(landmark_reward(&descs(&["desk"]), &g, &syn).unwrap(), 0.0);
        assert_eq!(
            landmark_reward(&descs(&["couch", "door", "television"]), &g, &syn).unwrap(),
            0.75
        );
        assert_eq!(landmark_reward(&g, &[], &syn), Err(RewardError::EmptyGroundTruth));
        // Recall, not symmetric.
        let a = descs(&["sofa"]);
        assert_ne!(
            landmark_reward(&a, &g, &syn).unwrap(),
            landmark_reward(&g, &a, &syn).unwrap()
        );
    }

    #[test]
    fn map_iou() {
        assert_eq!(map_reward(&ids(&["1", "2"]), &ids(&["1", "2"])).unwrap(), 1.0);
        assert_eq!(map_reward(&ids(&["1"]), &ids(&["2"])).unwrap(), 0.0);
        assert_eq!(map_reward(&ids(&["1", "2", "3"]), &ids(&["2", "3", "4"])).unwrap(), 0.5);
        assert_eq!(map_reward(&ids(&[]), &ids(&[])), Err(RewardError::BothEmpty));
    }

    #[test]
    fn extra_decay() {
        let w = RewardWeights {
            lambda: 1.0,
            w_d: 0.5,
            w_theta: 0.5,
            covis_lambda: 1.0,
        };
        let gt = Pose2::new(0.0, 0.0, 0.0);
        assert_eq!(extra_reward(&gt, &gt, &w).unwrap(), 1.0);
        let r = extra_reward(&Pose2::new(2.0, 0.0, 0.4), &gt, &w).unwrap();
        assert_eq!(r, (-1.2f64).exp());
        assert_eq!(format!("{r:.5}"), "0.30119");
        let zero = RewardWeights { lambda: 0.0, ..w };
        assert_eq!(extra_reward(&Pose2::new(9.0, 3.0, 2.0), &gt, &zero).unwrap(), 1.0);
        let bad = RewardWeights { w_d: 0.7, ..w };
        assert!(extra_reward(&gt, &gt, &bad).is_err());
    }

    #[test]
    fn coarse_sum() {
        let syn = SynonymTable::default();
        let w = RewardWeights::default();
        let gt = CoarseGroundTruth {
            landmarks: descs(&["sofa", "door", "tv", "plant"]),
            ids: ids(&["1", "2", "3"]),
            pose: Pose2::identity(),
        };
        let perfect = CoarseOutput {
            format_valid: true,
            predicted_landmarks: gt.landmarks.clone(),
            predicted_ids: gt.ids.clone(),
            extra_poses: vec![Pose2::identity()],
        };
        assert_eq!(coarse_reward(&perfect, &gt, &w, &syn).unwrap().total, 4.0);
        let wrong = CoarseOutput {
            format_valid: false,
            predicted_landmarks: descs(&["lamp"]),
            predicted_ids: ids(&["9"]),
            extra_poses: vec![],
        };
        assert_eq!(coarse_reward(&wrong, &gt, &w, &syn).unwrap().total, 0.0);
        let partial = CoarseOutput {
            format_valid: true,
            predicted_landmarks: descs(&["sofa", "door", "tv"]),
            predicted_ids: ids(&["2", "3", "4"]),
            extra_poses: vec![Pose2::new(2.0, 0.0, 0.4)],
        };
        let r = coarse_reward(&partial, &gt, &w, &syn).unwrap();
        assert_eq!((r.format, r.landmark, r.map), (1.0, 0.75, 0.5));
        assert!((r.total - 2.55119).abs() < 5e-6);
    }

    #[test]
    fn covis() {
        assert_eq!(covis_reward(0.3, 0.3).unwrap(), 1.0);
        assert_eq!(covis_reward(1.0, 0.0).unwrap(), 0.0);
        assert!((covis_reward(0.8, 0.55).unwrap() - 0.75).abs() < 1e-15);
        assert!(covis_reward(1.2, 0.0).is_err());
        assert_eq!(covis_total(1.0, 1.0, 1.0), 2.0);
        assert_eq!(covis_total(0.0, 0.75, 2.0), 1.5);
        assert_eq!(covis_total(1.0, 0.4, 0.0), 1.0);
    }
}

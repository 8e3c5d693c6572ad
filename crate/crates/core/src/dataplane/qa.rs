use serde::{Deserialize, Serialize};

use super::{Qa, RasterScene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaThresholds {
    pub cloud: f64,
    pub snow: f64,
    pub missing: f64,
    /// Fires must be strictly larger than this.
    pub min_area_ha: f64,
}

impl Default for QaThresholds {
    fn default() -> Self {
        Self {
            cloud: 0.2,
            snow: 0.2,
            missing: 0.2,
            min_area_ha: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Cloud,
    Snow,
    Missing,
    Area,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QaVerdict {
    pub reasons: Vec<RejectReason>,
}

impl QaVerdict {
    pub fn accepted(&self) -> bool {
        self.reasons.is_empty()
    }
}

/// Accepts a scene when every coverage fraction is at most its threshold
/// and the burned area exceeds the minimum.
pub fn qa_filter(scene: &RasterScene, t: &QaThresholds) -> QaVerdict {
    check(&scene.qa, scene.area_ha, t)
}

pub(crate) fn check(qa: &Qa, area_ha: f64, t: &QaThresholds) -> QaVerdict {
    let mut reasons = Vec::new();
    if qa.cloud_frac > t.cloud {
        reasons.push(RejectReason::Cloud);
    }
    if qa.snow_frac > t.snow {
        reasons.push(RejectReason::Snow);
    }
    if qa.missing_frac > t.missing {
        reasons.push(RejectReason::Missing);
    }
    if area_ha <= t.min_area_ha {
        reasons.push(RejectReason::Area);
    }
    QaVerdict { reasons }
}

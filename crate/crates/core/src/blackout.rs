//! Deterministic blackout scenarios: six inference-time conditions describing
//! which parts of each modality carry data.

use crate::data::ScenePair;
use crate::error::{Error, Result};
use crate::mask::ModalityMask;
use serde::{Deserialize, Serialize};

/// Fraction of the image height/width forming the top/bottom and left/right
/// borders of the surrounding blackout: 96/512 = 120/640 = 0.1875.
const SURROUND_BORDER_FRAC: f64 = 0.1875;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Both modalities fully available.
    Dual,
    /// RGB entirely missing.
    RgbBlackout,
    /// Thermal entirely missing.
    ThermalBlackout,
    /// RGB loses its left third, thermal its right third.
    SidesRgbThermal,
    /// Thermal loses its left third, RGB its right third.
    SidesThermalRgb,
    /// Thermal retains only a centered crop; RGB fully available.
    Surrounding,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Dual,
        Scenario::RgbBlackout,
        Scenario::ThermalBlackout,
        Scenario::SidesRgbThermal,
        Scenario::SidesThermalRgb,
        Scenario::Surrounding,
    ];

    /// Scenarios where part of at least one modality is missing but no pixel
    /// loses both (the partial-overlap conditions).
    pub const PARTIAL: [Scenario; 3] = [
        Scenario::SidesRgbThermal,
        Scenario::SidesThermalRgb,
        Scenario::Surrounding,
    ];

    /// CLI flag spelling.
    pub fn flag(self) -> &'static str {
        match self {
            Scenario::Dual => "dual",
            Scenario::RgbBlackout => "rgb_blackout",
            Scenario::ThermalBlackout => "thermal_blackout",
            Scenario::SidesRgbThermal => "sides_rt",
            Scenario::SidesThermalRgb => "sides_tr",
            Scenario::Surrounding => "surrounding",
        }
    }

    pub fn from_flag(s: &str) -> Result<Scenario> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.flag() == s)
            .ok_or_else(|| Error::validation(format!("unknown scenario {s:?}")))
    }
}

/// Builds the (rgb, thermal) masks for a scenario at image resolution.
///
/// Sides scenarios zero ⌊w/3⌋ columns on opposite edges (the center keeps any
/// remainder). The surrounding scenario keeps thermal only on the centered
/// crop with borders ⌊0.1875·h⌋ rows and ⌊0.1875·w⌋ columns, which at 512×640
/// is exactly 96 rows and 120 columns.
pub fn scenario_masks(h: usize, w: usize, s: Scenario) -> Result<(ModalityMask, ModalityMask)> {
    if h == 0 || w == 0 {
        return Err(Error::validation("image dimensions must be positive"));
    }
    let third = w / 3;
    match s {
        Scenario::Dual => Ok((ModalityMask::ones(h, w), ModalityMask::ones(h, w))),
        Scenario::RgbBlackout => Ok((ModalityMask::zeros(h, w), ModalityMask::ones(h, w))),
        Scenario::ThermalBlackout => Ok((ModalityMask::ones(h, w), ModalityMask::zeros(h, w))),
        Scenario::SidesRgbThermal => Ok((
            ModalityMask::from_fn(h, w, |_, x| x >= third),
            ModalityMask::from_fn(h, w, |_, x| x < w - third),
        )),
        Scenario::SidesThermalRgb => Ok((
            ModalityMask::from_fn(h, w, |_, x| x < w - third),
            ModalityMask::from_fn(h, w, |_, x| x >= third),
        )),
        Scenario::Surrounding => {
            let by = (SURROUND_BORDER_FRAC * h as f64).floor() as usize;
            let bx = (SURROUND_BORDER_FRAC * w as f64).floor() as usize;
            if by == 0 || bx == 0 {
                return Err(Error::validation(format!(
                    "image {h}x{w} too small for a surrounding border"
                )));
            }
            Ok((
                ModalityMask::ones(h, w),
                ModalityMask::from_fn(h, w, |y, x| y >= by && y < h - by && x >= bx && x < w - bx),
            ))
        }
    }
}

/// Zeroes each modality's pixels where its scenario mask is 0 and returns the
/// modified pair together with the masks.
pub fn apply_scenario(pair: &ScenePair, s: Scenario) -> Result<(ScenePair, ModalityMask, ModalityMask)> {
    let (h, w) = (pair.height(), pair.width());
    let (m_rgb, m_thermal) = scenario_masks(h, w, s)?;
    let mut out = pair.clone();
    out.zero_rgb_where(&m_rgb);
    out.zero_thermal_where(&m_thermal);
    Ok((out, m_rgb, m_thermal))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(Scenario::from_flag(s.flag()).unwrap(), s);
        }
        assert!(Scenario::from_flag("sideways").is_err());
    }

    #[test]
    fn surrounding_rejects_degenerate_dims() {
        assert!(scenario_masks(4, 640, Scenario::Surrounding).is_err());
    }
}

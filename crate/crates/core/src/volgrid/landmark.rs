use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LANDMARK_COUNT: usize = 6;

/// The six anatomical landmarks. Landmark label class = index + 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LandmarkName {
    RvInsert1,
    RvInsert2,
    RvLateralTurning,
    LvLateralMid,
    Apex,
    MitralCentre,
}

impl LandmarkName {
    pub const ALL: [LandmarkName; LANDMARK_COUNT] = [
        LandmarkName::RvInsert1,
        LandmarkName::RvInsert2,
        LandmarkName::RvLateralTurning,
        LandmarkName::LvLateralMid,
        LandmarkName::Apex,
        LandmarkName::MitralCentre,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LandmarkName::RvInsert1 => "RV-insert-1",
            LandmarkName::RvInsert2 => "RV-insert-2",
            LandmarkName::RvLateralTurning => "RV-lateral-turning",
            LandmarkName::LvLateralMid => "LV-lateral-mid",
            LandmarkName::Apex => "apex",
            LandmarkName::MitralCentre => "mitral-centre",
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    /// Class index in a landmark label grid (background is 0).
    #[inline]
    pub fn class(self) -> u8 {
        self as u8 + 1
    }
}

impl fmt::Display for LandmarkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LandmarkName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LandmarkName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Pairing(format!("unknown landmark name `{s}`")))
    }
}

/// Exactly six named points, millimetres in the grid frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkSet {
    points: [[f64; 3]; LANDMARK_COUNT],
}

#[derive(Serialize, Deserialize)]
struct LandmarkJson {
    name: String,
    pos_mm: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct LandmarkFile {
    landmarks: Vec<LandmarkJson>,
}

impl LandmarkSet {
    /// Points in [`LandmarkName::ALL`] order.
    pub fn new(points: [[f64; 3]; LANDMARK_COUNT]) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("landmark positions must be finite".into()));
        }
        Ok(LandmarkSet { points })
    }

    /// Builds a set from named points; every name must appear exactly once.
    pub fn from_named(named: &[(LandmarkName, [f64; 3])]) -> Result<Self> {
        let mut slots: [Option<[f64; 3]>; LANDMARK_COUNT] = [None; LANDMARK_COUNT];
        for &(name, p) in named {
            if slots[name.index()].replace(p).is_some() {
                return Err(Error::Pairing(format!("duplicate landmark `{name}`")));
            }
        }
        let missing: Vec<String> = LandmarkName::ALL
            .iter()
            .filter(|n| slots[n.index()].is_none())
            .map(|n| n.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::IncompleteLandmarks(missing));
        }
        Self::new(slots.map(|s| s.expect("checked above")))
    }

    #[inline]
    pub fn get(&self, name: LandmarkName) -> [f64; 3] {
        self.points[name.index()]
    }

    #[inline]
    pub fn points(&self) -> &[[f64; 3]; LANDMARK_COUNT] {
        &self.points
    }

    pub fn iter(&self) -> impl Iterator<Item = (LandmarkName, [f64; 3])> + '_ {
        LandmarkName::ALL.into_iter().map(move |n| (n, self.points[n.index()]))
    }

    pub fn map_points(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Self> {
        Self::new(self.points.map(f))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = LandmarkFile {
            landmarks: self
                .iter()
                .map(|(n, p)| LandmarkJson {
                    name: n.as_str().into(),
                    pos_mm: p,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LandmarkFile = serde_json::from_str(text)?;
        if file.landmarks.len() != LANDMARK_COUNT {
            return Err(Error::Pairing(format!(
                "expected {LANDMARK_COUNT} landmarks, found {}",
                file.landmarks.len()
            )));
        }
        let named = file
            .landmarks
            .into_iter()
            .map(|l| Ok((l.name.parse::<LandmarkName>()?, l.pos_mm)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_named(&named)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LandmarkSet {
        LandmarkSet::new([
            [1.0, 2.0, 3.0],
            [4.0, 5.0, 6.0],
            [-1.5, 0.25, 8.0],
            [0.0, 0.0, 0.0],
            [10.0, -3.0, 1e-3],
            [7.0, 7.0, 7.0],
        ])
        .unwrap()
    }

    #[test]
    fn json_round_trip() {
        let s = sample();
        let text = s.to_json().unwrap();
        assert!(text.contains("\"RV-lateral-turning\""));
        assert_eq!(LandmarkSet::from_json(&text).unwrap(), s);
    }

    #[test]
    fn rejects_duplicates_missing_and_unknown() {
        let dup = r#"{"landmarks":[
            {"name":"apex","pos_mm":[0,0,0]},{"name":"apex","pos_mm":[0,0,0]},
            {"name":"RV-insert-1","pos_mm":[0,0,0]},{"name":"RV-insert-2","pos_mm":[0,0,0]},
            {"name":"LV-lateral-mid","pos_mm":[0,0,0]},{"name":"mitral-centre","pos_mm":[0,0,0]}]}"#;
        assert!(LandmarkSet::from_json(dup).is_err());
        let short = r#"{"landmarks":[{"name":"apex","pos_mm":[0,0,0]}]}"#;
        assert!(LandmarkSet::from_json(short).is_err());
        assert!("septum".parse::<LandmarkName>().is_err());
        match LandmarkSet::from_named(&[(LandmarkName::Apex, [0.0; 3])]) {
            Err(Error::IncompleteLandmarks(m)) => assert_eq!(m.len(), 5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(LandmarkSet::new([[f64::NAN, 0.0, 0.0]; 6]).is_err());
    }
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum InputConfigError {
    #[error("recordings (R) are mandatory in every input configuration")]
    RecordingsRequired,
    #[error("unknown input flag {0:?}")]
    UnknownFlag(char),
    #[error("input flag {0:?} given twice")]
    RepeatedFlag(char),
    #[error("unknown observation setting {0:?}")]
    UnknownObservation(String),
}

/// Observation-length categories for the clinician-note study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationCategory {
    Short,
    Medium,
    Long,
}

impl ObservationCategory {
    pub const ALL: [ObservationCategory; 3] = [
        ObservationCategory::Short,
        ObservationCategory::Medium,
        ObservationCategory::Long,
    ];

    /// Inclusive bounds on how many notes a draw contains.
    pub fn size_range(self) -> (usize, usize) {
        match self {
            ObservationCategory::Short => (1, 2),
            ObservationCategory::Medium => (3, 4),
            ObservationCategory::Long => (5, 5),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObservationCategory::Short => "short",
            ObservationCategory::Medium => "medium",
            ObservationCategory::Long => "long",
        }
    }
}

/// Which clinician notes are shown to the agents.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObservationSetting {
    #[default]
    None,
    Category(ObservationCategory),
    /// Indices into the case's observation list.
    Explicit(Vec<usize>),
}

impl ObservationSetting {
    pub fn is_none(&self) -> bool {
        matches!(self, ObservationSetting::None)
    }
}

impl fmt::Display for ObservationSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObservationSetting::None => f.write_str("none"),
            ObservationSetting::Category(c) => f.write_str(c.as_str()),
            ObservationSetting::Explicit(idx) => {
                let parts: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
                write!(f, "explicit:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for ObservationSetting {
    type Err = InputConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "none" | "" => Ok(ObservationSetting::None),
            "short" => Ok(ObservationSetting::Category(ObservationCategory::Short)),
            "medium" => Ok(ObservationSetting::Category(ObservationCategory::Medium)),
            "long" => Ok(ObservationSetting::Category(ObservationCategory::Long)),
            _ => {
                let list = t
                    .strip_prefix("explicit:")
                    .ok_or_else(|| InputConfigError::UnknownObservation(s.to_string()))?;
                list.split(',')
                    .filter(|p| !p.trim().is_empty())
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map(ObservationSetting::Explicit)
                    .map_err(|_| InputConfigError::UnknownObservation(s.to_string()))
            }
        }
    }
}

/// Input modalities available to one run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawInputConfig")]
pub struct InputConfig {
    pub recordings: bool,
    pub trajectories: bool,
    pub profile: bool,
    #[serde(default)]
    pub observations: ObservationSetting,
}

#[derive(Deserialize)]
struct RawInputConfig {
    recordings: bool,
    trajectories: bool,
    profile: bool,
    #[serde(default)]
    observations: ObservationSetting,
}

impl TryFrom<RawInputConfig> for InputConfig {
    type Error = InputConfigError;

    fn try_from(raw: RawInputConfig) -> Result<Self, Self::Error> {
        if !raw.recordings {
            return Err(InputConfigError::RecordingsRequired);
        }
        InputConfig::new(raw.trajectories, raw.profile, raw.observations)
    }
}

impl InputConfig {
    pub fn new(
        trajectories: bool,
        profile: bool,
        observations: ObservationSetting,
    ) -> Result<Self, InputConfigError> {
        Ok(Self {
            recordings: true,
            trajectories,
            profile,
            observations,
        })
    }

    pub fn video_only() -> Self {
        Self::new(false, false, ObservationSetting::None).unwrap()
    }

    pub fn full() -> Self {
        Self::new(true, true, ObservationSetting::None).unwrap()
    }

    /// Ablation ordering: R, RD, RT, RTD.
    pub fn canonical_set() -> [InputConfig; 4] {
        [
            Self::new(false, false, ObservationSetting::None).unwrap(),
            Self::new(false, true, ObservationSetting::None).unwrap(),
            Self::new(true, false, ObservationSetting::None).unwrap(),
            Self::new(true, true, ObservationSetting::None).unwrap(),
        ]
    }

    pub fn with_observations(mut self, observations: ObservationSetting) -> Self {
        self.observations = observations;
        self
    }

    /// Short flag string, e.g. `RTD`.
    pub fn flags(&self) -> String {
        let mut s = String::from("R");
        if self.trajectories {
            s.push('T');
        }
        if self.profile {
            s.push('D');
        }
        s
    }

    /// Display label, e.g. `R+T+D`.
    pub fn label(&self) -> String {
        self.flags()
            .chars()
            .map(String::from)
            .collect::<Vec<_>>()
            .join("+")
    }

    /// Parses a flag string such as `RTD`, `r+d` or `R`.
    pub fn parse_flags(s: &str) -> Result<Self, InputConfigError> {
        let (mut r, mut t, mut d) = (false, false, false);
        for c in s.chars().filter(|c| !matches!(c, '+' | ' ' | ',')) {
            let slot = match c.to_ascii_uppercase() {
                'R' => &mut r,
                'T' => &mut t,
                'D' => &mut d,
                other => return Err(InputConfigError::UnknownFlag(other)),
            };
            if *slot {
                return Err(InputConfigError::RepeatedFlag(c.to_ascii_uppercase()));
            }
            *slot = true;
        }
        if !r {
            return Err(InputConfigError::RecordingsRequired);
        }
        Self::new(t, d, ObservationSetting::None)
    }
}

impl FromStr for InputConfig {
    type Err = InputConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_flags(s)
    }
}

impl fmt::Display for InputConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())?;
        if !self.observations.is_none() {
            write!(f, " obs={}", self.observations)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_strings() {
        let c: InputConfig = "RTD".parse().unwrap();
        assert!(c.recordings && c.trajectories && c.profile);
        assert_eq!(c.label(), "R+T+D");
        assert_eq!("r+d".parse::<InputConfig>().unwrap().flags(), "RD");
        assert_eq!("T".parse::<InputConfig>(), Err(InputConfigError::RecordingsRequired));
        assert_eq!("TD".parse::<InputConfig>(), Err(InputConfigError::RecordingsRequired));
        assert_eq!("RX".parse::<InputConfig>(), Err(InputConfigError::UnknownFlag('X')));
        assert_eq!("RR".parse::<InputConfig>(), Err(InputConfigError::RepeatedFlag('R')));
    }

    #[test]
    fn canonical_order() {
        let labels: Vec<String> = InputConfig::canonical_set().iter().map(|c| c.label()).collect();
        assert_eq!(labels, ["R", "R+D", "R+T", "R+T+D"]);
    }

    #[test]
    fn json_rejects_missing_recordings() {
        let ok = r#"{"recordings":true,"trajectories":true,"profile":false,"observations":{"category":"short"}}"#;
        let c: InputConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(c.observations, ObservationSetting::Category(ObservationCategory::Short));
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<InputConfig>(&json).unwrap(), c);

        let bad = r#"{"recordings":false,"trajectories":true,"profile":false}"#;
        assert!(serde_json::from_str::<InputConfig>(bad).is_err());
    }

    #[test]
    fn observation_settings() {
        assert_eq!("none".parse::<ObservationSetting>().unwrap(), ObservationSetting::None);
        assert_eq!(
            "Long".parse::<ObservationSetting>().unwrap(),
            ObservationSetting::Category(ObservationCategory::Long)
        );
        let e: ObservationSetting = "explicit:0,3".parse().unwrap();
        assert_eq!(e, ObservationSetting::Explicit(vec![0, 3]));
        assert_eq!(e.to_string(), "explicit:0,3");
        assert!("sometimes".parse::<ObservationSetting>().is_err());
    }
}

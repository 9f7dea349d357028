use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Federated algorithm: a local-training rule paired with an aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fedavg,
    Fedprox,
    Laplace,
    Fedsparse,
    Fedl1,
    Feddrop,
    Median,
    Mog,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Fedavg,
        Strategy::Fedprox,
        Strategy::Laplace,
        Strategy::Fedsparse,
        Strategy::Fedl1,
        Strategy::Feddrop,
        Strategy::Median,
        Strategy::Mog,
    ];

    /// Wire tag carried in every message header.
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(usize::from(tag)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fedavg => "fedavg",
            Strategy::Fedprox => "fedprox",
            Strategy::Laplace => "laplace",
            Strategy::Fedsparse => "fedsparse",
            Strategy::Fedl1 => "fedl1",
            Strategy::Feddrop => "feddrop",
            Strategy::Median => "median",
            Strategy::Mog => "mog",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown strategy '{s}'"))
    }
}

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Valence/arousal quadrant, or the absence of a label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmotionClass {
    /// High valence, high arousal.
    Q1,
    /// Low valence, high arousal.
    Q2,
    /// Low valence, low arousal.
    Q3,
    /// High valence, low arousal.
    Q4,
    Unlabeled,
}

impl EmotionClass {
    pub const ALL: [EmotionClass; 5] = [Self::Q1, Self::Q2, Self::Q3, Self::Q4, Self::Unlabeled];
    pub const LABELED: [EmotionClass; 4] = [Self::Q1, Self::Q2, Self::Q3, Self::Q4];
    pub const COUNT: usize = 5;

    /// Fixed serialization index: Q1..Q4 → 0..3, Unlabeled → 4.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Index(format!("emotion class index {i}")))
    }

    pub fn is_labeled(self) -> bool {
        self != Self::Unlabeled
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Q1 => "Q1",
            Self::Q2 => "Q2",
            Self::Q3 => "Q3",
            Self::Q4 => "Q4",
            Self::Unlabeled => "Unlabeled",
        }
    }
}

impl fmt::Display for EmotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmotionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "Q1" | "q1" => Ok(Self::Q1),
            "Q2" | "q2" => Ok(Self::Q2),
            "Q3" | "q3" => Ok(Self::Q3),
            "Q4" | "q4" => Ok(Self::Q4),
            "Unlabeled" | "unlabeled" | "none" => Ok(Self::Unlabeled),
            other => Err(Error::Config(format!("unknown emotion class `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_mapping_is_fixed() {
        for (i, c) in EmotionClass::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(EmotionClass::from_index(i).unwrap(), *c);
            assert_eq!(c.as_str().parse::<EmotionClass>().unwrap(), *c);
        }
        assert!(EmotionClass::from_index(5).is_err());
    }
}

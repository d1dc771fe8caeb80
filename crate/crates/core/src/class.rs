//! The three target classes of the lung tissue classification task.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Slide-level reference class: non-neoplastic tissue, lung adenocarcinoma,
/// or lung squamous cell carcinoma.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "LUAD")]
    Luad,
    #[serde(rename = "LSCC")]
    Lscc,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Normal, Class::Luad, Class::Lscc];

    /// Fixed class index used for probability vectors: normal=0, LUAD=1, LSCC=2.
    pub fn index(self) -> usize {
        match self {
            Class::Normal => 0,
            Class::Luad => 1,
            Class::Lscc => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Class> {
        Class::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Normal => "normal",
            Class::Luad => "LUAD",
            Class::Lscc => "LSCC",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Class::Normal),
            "LUAD" => Ok(Class::Luad),
            "LSCC" => Ok(Class::Lscc),
            other => Err(format!("unknown class {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        for class in Class::ALL {
            assert_eq!(Class::from_index(class.index()), Some(class));
            assert_eq!(class.name().parse::<Class>().unwrap(), class);
        }
        assert!(Class::from_index(3).is_none());
    }
}

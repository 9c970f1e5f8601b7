use std::fmt;

use crate::error::{Error, Result};

/// Body of a unit sequence, without the implicit bos and eos.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitSequence(pub Vec<usize>);

impl UnitSequence {
    pub fn new(units: Vec<usize>) -> Self {
        UnitSequence(units)
    }

    pub fn units(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks every id is a unit of a `k`-unit vocabulary.
    pub fn check_vocab(&self, k: usize) -> Result<()> {
        match self.0.iter().find(|&&u| u >= k) {
            Some(u) => Err(Error::InvalidArgument(format!("unit id {u} outside vocabulary of {k}"))),
            None => Ok(()),
        }
    }

    /// Parses space-separated decimal ids.
    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        line.split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| format!("bad unit id {t:?}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(UnitSequence)
    }

    /// Space-separated decimal ids.
    pub fn to_line(&self) -> String {
        self.to_string()
    }

    /// The ids as whitespace-separated words, for text metrics.
    pub fn words(&self) -> Vec<String> {
        self.0.iter().map(|u| u.to_string()).collect()
    }
}

impl fmt::Display for UnitSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, u) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{u}")?;
        }
        Ok(())
    }
}

impl From<Vec<usize>> for UnitSequence {
    fn from(v: Vec<usize>) -> Self {
        UnitSequence(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let s = UnitSequence(vec![3, 0, 17]);
        assert_eq!(s.to_line(), "3 0 17");
        assert_eq!(UnitSequence::parse(&s.to_line()).unwrap(), s);
        assert_eq!(UnitSequence::parse("").unwrap(), UnitSequence::default());
        assert!(UnitSequence::parse("1 x").is_err());
        assert!(UnitSequence::parse("-1").is_err());
    }

    #[test]
    fn vocab_check() {
        assert!(UnitSequence(vec![0, 1]).check_vocab(2).is_ok());
        assert!(UnitSequence(vec![2]).check_vocab(2).is_err());
    }
}

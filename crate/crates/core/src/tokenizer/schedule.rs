use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Token-map sides for each scale, coarsest first.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Schedule {
    sides: Vec<(usize, usize)>,
}

impl Schedule {
    pub fn new(sides: Vec<(usize, usize)>) -> Result<Self> {
        if sides.is_empty() {
            return Err(Error::Schedule("no scales".into()));
        }
        if sides[0] != (1, 1) {
            return Err(Error::Schedule(format!(
                "first scale must be 1x1, got {:?}",
                sides[0]
            )));
        }
        for w in sides.windows(2) {
            if w[1].0 < w[0].0 || w[1].1 < w[0].1 {
                return Err(Error::Schedule(format!(
                    "sides decrease at {:?} -> {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Schedule { sides })
    }

    /// Square schedule from a list of sides.
    pub fn square(sides: &[usize]) -> Result<Self> {
        Self::new(sides.iter().map(|&s| (s, s)).collect())
    }

    pub fn len(&self) -> usize {
        self.sides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sides.is_empty()
    }

    pub fn sides(&self) -> &[(usize, usize)] {
        &self.sides
    }

    pub fn side(&self, s: usize) -> (usize, usize) {
        self.sides[s]
    }

    pub fn tokens(&self, s: usize) -> usize {
        self.sides[s].0 * self.sides[s].1
    }

    pub fn total_tokens(&self) -> usize {
        (0..self.len()).map(|s| self.tokens(s)).sum()
    }

    /// The latent grid, i.e. the finest scale.
    pub fn last(&self) -> (usize, usize) {
        *self.sides.last().expect("non-empty schedule")
    }

    /// True when `other` starts with every scale of `self`.
    pub fn is_prefix_of(&self, other: &Schedule) -> bool {
        other.sides.len() >= self.sides.len() && other.sides[..self.sides.len()] == self.sides[..]
    }

    /// True when `other` keeps this schedule's leading scales except for the
    /// finest one and ends on a larger grid.
    pub fn extends_to(&self, other: &Schedule) -> bool {
        let n = self.sides.len();
        other.sides.len() >= n && other.sides[..n - 1] == self.sides[..n - 1] && {
            let (a, b) = (self.last(), other.last());
            b.0 >= a.0 && b.1 >= a.1
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, (h, w)) in self.sides.iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{h}x{w}")?;
        }
        Ok(())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// Parses `1x1,2x2,4x4`; a bare number means a square side.
    fn from_str(s: &str) -> Result<Self> {
        let mut sides = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            let bad = || Error::Schedule(format!("cannot parse scale {part:?}"));
            let (h, w) = match part.split_once('x') {
                Some((h, w)) => (
                    h.trim().parse().map_err(|_| bad())?,
                    w.trim().parse().map_err(|_| bad())?,
                ),
                None => {
                    let v = part.parse().map_err(|_| bad())?;
                    (v, v)
                }
            };
            if h == 0 || w == 0 {
                return Err(bad());
            }
            sides.push((h, w));
        }
        Schedule::new(sides)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        let s: Schedule = "1x1,2x2,3x3,4x4".parse().unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.to_string(), "1x1,2x2,3x3,4x4");
        assert_eq!(s.total_tokens(), 30);
        assert_eq!(
            "1,2".parse::<Schedule>().unwrap().sides(),
            &[(1, 1), (2, 2)]
        );
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(Schedule::square(&[2, 4]).is_err());
        assert!(Schedule::square(&[1, 4, 2]).is_err());
        assert!("1x1,0x2".parse::<Schedule>().is_err());
        assert!(Schedule::new(vec![]).is_err());
    }

    #[test]
    fn extension() {
        let a = Schedule::square(&[1, 2, 3, 4]).unwrap();
        let b = Schedule::square(&[1, 2, 3, 4, 6, 8]).unwrap();
        assert!(a.is_prefix_of(&b));
        assert!(a.extends_to(&b));
        assert!(!b.extends_to(&a));
    }
}

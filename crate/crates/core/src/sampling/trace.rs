//! Replayable per-scale sampling record.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTrace {
    pub scale: usize,
    pub seed: u64,
    pub tokens: Vec<u32>,
    pub confidence: Vec<f32>,
    /// Mask-head iterations; zero for one-shot scales.
    pub iterations: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleTrace {
    pub scales: Vec<ScaleTrace>,
}

fn list<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl fmt::Display for ScaleTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "scale {}: seed={} tokens=[{}] conf=[{}] iters={}",
            self.scale,
            self.seed,
            list(&self.tokens),
            list(&self.confidence),
            self.iterations
        )
    }
}

impl fmt::Display for SampleTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.scales {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    let bad = || Error::Format(format!("trace line missing {key}: {line:?}"));
    let start = line.find(&format!(" {key}=")).ok_or_else(bad)? + key.len() + 2;
    let rest = &line[start..];
    Ok(match rest.find(' ') {
        Some(end) => &rest[..end],
        None => rest,
    })
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    let inner = s
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| Error::Format(format!("expected [..], got {s:?}")))?;
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|x| {
            x.parse()
                .map_err(|_| Error::Format(format!("bad list entry {x:?}")))
        })
        .collect()
}

impl FromStr for ScaleTrace {
    type Err = Error;
    fn from_str(line: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("trace: {m} in {line:?}"));
        let head = line
            .strip_prefix("scale ")
            .ok_or_else(|| bad("missing scale"))?;
        let colon = head.find(':').ok_or_else(|| bad("missing ':'"))?;
        let scale = head[..colon].parse().map_err(|_| bad("scale index"))?;
        let seed = field(line, "seed")?.parse().map_err(|_| bad("seed"))?;
        let iterations = match field(line, "iters") {
            Ok(v) => v.parse().map_err(|_| bad("iters"))?,
            Err(_) => 0,
        };
        Ok(ScaleTrace {
            scale,
            seed,
            tokens: parse_list(field(line, "tokens")?)?,
            confidence: parse_list(field(line, "conf")?)?,
            iterations,
        })
    }
}

impl FromStr for SampleTrace {
    type Err = Error;
    fn from_str(text: &str) -> Result<Self> {
        let scales = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        Ok(SampleTrace { scales })
    }
}

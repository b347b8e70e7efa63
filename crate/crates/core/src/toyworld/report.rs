//! Aggregate desk metrics for a set of generated images.

use std::fmt;

use super::locality::Locality;
use super::mmd::{mmd_proxy, Mmd};
use super::oracle::{alignment_oracle, structure_oracle};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub images: usize,
    pub alignment: f64,
    pub structure: f64,
    pub mmd: Mmd,
    pub token_accuracy: Option<f64>,
    pub locality: Vec<Locality>,
}

impl MetricsReport {
    /// Oracle means over `images` (scored against their own captions) and
    /// the MMD proxy against `reference`.
    pub fn score(images: &[Image], captions: &[String], reference: &[Image]) -> Result<Self> {
        if images.len() != captions.len() || images.is_empty() {
            return Err(Error::shape("metrics", "need one caption per image"));
        }
        let n = images.len() as f64;
        let mut alignment = 0.0;
        for (img, cap) in images.iter().zip(captions) {
            alignment += alignment_oracle(img, cap)?;
        }
        let structure = images.iter().map(structure_oracle).sum::<f64>() / n;
        Ok(MetricsReport {
            images: images.len(),
            alignment: alignment / n,
            structure,
            mmd: mmd_proxy(images, reference)?,
            token_accuracy: None,
            locality: Vec::new(),
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "images = {}", self.images)?;
        writeln!(f, "alignment = {:.6}", self.alignment)?;
        writeln!(f, "structure = {:.6}", self.structure)?;
        writeln!(f, "mmd = {:.6}", self.mmd.value)?;
        writeln!(f, "mmd_raw = {:.6}", self.mmd.raw)?;
        writeln!(f, "mmd_bandwidth = {:.6}", self.mmd.bandwidth)?;
        if let Some(a) = self.token_accuracy {
            writeln!(f, "token_accuracy = {a:.6}")?;
        }
        for l in &self.locality {
            writeln!(f, "locality.scale{}.same = {:.6}", l.scale, l.same)?;
            writeln!(f, "locality.scale{}.aligned = {:.6}", l.scale, l.aligned)?;
            writeln!(f, "locality.scale{}.other = {:.6}", l.scale, l.other)?;
        }
        Ok(())
    }
}

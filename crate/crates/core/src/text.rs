//! Micro-caption vocabulary and the prompt encoder.
//!
//! The encoder produces `eta`, a position-free global vector used as the
//! start token, and `tau`, per-word rows used as cross-attention keys and
//! values.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::{Graph, NodeId, ParamStore, Tensor};
use crate::rng::Rng;

pub const PAD: u32 = 0;
pub const NULL: u32 = 1;
pub const M_MAX: usize = 12;

pub const SIZES: [&str; 2] = ["small", "large"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const POSITIONS: [&str; 5] = [
    "top-left",
    "top-right",
    "bottom-left",
    "bottom-right",
    "center",
];
const CONNECTIVES: [&str; 7] = ["a", "the", "at", "in", "on", "of", "with"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// The toy-world grammar. Ids 0 and 1 are `<pad>` and `<null>`.
    pub fn toy() -> Self {
        let mut words = vec!["<pad>".to_string(), "<null>".to_string()];
        for list in [&SIZES[..], &COLORS, &SHAPES, &POSITIONS, &CONNECTIVES] {
            words.extend(list.iter().map(|w| w.to_string()));
        }
        Self::from_words(words).expect("toy vocabulary is well formed")
    }

    /// Rebuilds a vocabulary from its ordered word list.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[0] != "<pad>" || words[1] != "<null>" {
            return Err(Error::Config(
                "vocabulary must start with <pad>, <null>".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::EmptyCaption);
        }
        if words.len() > M_MAX {
            return Err(Error::CaptionTooLong {
                len: words.len(),
                max: M_MAX,
            });
        }
        words
            .iter()
            .map(|w| match self.index.get(*w) {
                Some(&id) if id != PAD && id != NULL => Ok(id),
                _ => Err(Error::UnknownWord(w.to_string())),
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.words[i as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token ids of the unconditional prompt.
pub fn null_prompt() -> Vec<u32> {
    vec![NULL]
}

pub fn init_params(params: &mut ParamStore, rng: &mut Rng, vocab: usize, d: usize) {
    params.init_normal(rng, "text.word", &[vocab, d], 0.5);
    params.init_normal(rng, "text.pos", &[M_MAX, d], 0.1);
    params.init_normal(rng, "text.eta.w", &[d, d], (1.0 / d as f32).sqrt());
    params.init_const("text.eta.b", &[d], 0.0);
}

/// Graph nodes for a batch of prompts.
pub struct PromptNodes {
    /// `batch × d`.
    pub eta: NodeId,
    /// `(batch · M_MAX) × d`.
    pub tau: NodeId,
    /// `batch · M_MAX` flags; false on padding rows.
    pub valid: Vec<bool>,
}

pub fn embed_prompts(
    g: &mut Graph,
    params: &ParamStore,
    prompts: &[Vec<u32>],
) -> Result<PromptNodes> {
    let word = g.param("text.word", params.get("text.word")?);
    let pos = g.param("text.pos", params.get("text.pos")?);
    let vocab = params.get("text.word")?.rows();
    let b = prompts.len();
    let mut ids = Vec::with_capacity(b * M_MAX);
    let mut valid = Vec::with_capacity(b * M_MAX);
    let mut avg = vec![0.0f32; b * b * M_MAX];
    for (k, p) in prompts.iter().enumerate() {
        if p.is_empty() {
            return Err(Error::EmptyCaption);
        }
        if p.len() > M_MAX {
            return Err(Error::CaptionTooLong {
                len: p.len(),
                max: M_MAX,
            });
        }
        if let Some(&t) = p.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange {
                token: t as usize,
                vocab,
            });
        }
        for m in 0..M_MAX {
            ids.push(p.get(m).copied().unwrap_or(PAD));
            valid.push(m < p.len());
            if m < p.len() {
                avg[k * b * M_MAX + k * M_MAX + m] = 1.0 / p.len() as f32;
            }
        }
    }
    let words = g.gather(word, &ids)?;
    let positions: Vec<(u32, u32)> = (0..b * M_MAX).map(|r| (0, (r % M_MAX) as u32)).collect();
    let pos_rows = g.select_rows(&[pos], Arc::new(positions))?;
    let tau = g.add(words, pos_rows)?;
    let avg = g.constant(Tensor::matrix(b, b * M_MAX, avg)?);
    let mean = g.matmul(avg, words)?;
    let w = g.param("text.eta.w", params.get("text.eta.w")?);
    let bias = g.param("text.eta.b", params.get("text.eta.b")?);
    let eta = g.linear(mean, w, Some(bias))?;
    Ok(PromptNodes { eta, tau, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn setup() -> (Vocabulary, ParamStore) {
        let v = Vocabulary::toy();
        let mut p = ParamStore::new();
        init_params(&mut p, &mut rng::seeded(1), v.len(), 8);
        (v, p)
    }

    #[test]
    fn tokenize_grammar() {
        let v = Vocabulary::toy();
        let ids = v.tokenize("large red circle at top-left").unwrap();
        assert_eq!(ids.len(), 5);
        assert_eq!(v.detokenize(&ids), "large red circle at top-left");
        assert!(matches!(
            v.tokenize("purple dragon"),
            Err(Error::UnknownWord(_))
        ));
        assert!(matches!(v.tokenize("  "), Err(Error::EmptyCaption)));
        let long = vec!["red"; 13].join(" ");
        assert!(matches!(
            v.tokenize(&long),
            Err(Error::CaptionTooLong { .. })
        ));
        assert!(v.tokenize("<null>").is_err());
        assert!(v.len() <= 32);
    }

    #[test]
    fn eta_is_order_free_and_tau_permutes() {
        let (v, p) = setup();
        let a = v.tokenize("large red circle at center").unwrap();
        let b = v.tokenize("circle center at red large").unwrap();
        let mut g = Graph::new();
        let na = embed_prompts(&mut g, &p, &[a.clone()]).unwrap();
        let nb = embed_prompts(&mut g, &p, &[b.clone()]).unwrap();
        for (x, y) in g.value(na.eta).data().iter().zip(g.value(nb.eta).data()) {
            assert!((x - y).abs() < 1e-6);
        }
        // Stripping the positional term leaves permuted word rows.
        let pos = p.get("text.pos").unwrap();
        let word_row = |t: &Tensor, m: usize| -> Vec<f32> {
            t.row(m)
                .iter()
                .zip(pos.row(m))
                .map(|(a, b)| a - b)
                .collect()
        };
        let (ta, tb) = (g.value(na.tau).clone(), g.value(nb.tau).clone());
        for (ma, id) in a.iter().enumerate() {
            let mb = b.iter().position(|x| x == id).unwrap();
            for (x, y) in word_row(&ta, ma).iter().zip(word_row(&tb, mb)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        assert_eq!(na.valid.iter().filter(|&&x| x).count(), 5);
    }

    #[test]
    fn null_and_distinct_prompts() {
        let (v, p) = setup();
        let mut g = Graph::new();
        let n = embed_prompts(&mut g, &p, &[null_prompt()]).unwrap();
        let word = p.get("text.word").unwrap();
        assert_eq!(
            &g.value(n.tau).row(0)[..],
            &word
                .row(NULL as usize)
                .iter()
                .zip(p.get("text.pos").unwrap().row(0))
                .map(|(a, b)| a + b)
                .collect::<Vec<_>>()[..]
        );
        let a = embed_prompts(
            &mut g,
            &p,
            &[v.tokenize("small blue square at center").unwrap()],
        )
        .unwrap();
        let b = embed_prompts(
            &mut g,
            &p,
            &[v.tokenize("small blue circle at center").unwrap()],
        )
        .unwrap();
        assert_ne!(g.value(a.tau), g.value(b.tau));
    }

    #[test]
    fn vocabulary_round_trips_through_word_list() {
        let v = Vocabulary::toy();
        assert_eq!(Vocabulary::from_words(v.words().to_vec()).unwrap(), v);
    }
}

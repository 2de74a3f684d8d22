#![allow(dead_code)]

use std::collections::HashMap;

use seqcal_core::data::TokenRecord;
use seqcal_core::error::ModelError;
use seqcal_core::sequence::{ScoringModel, StepOutput};

/// A model given by an explicit table from prefix to next-token
/// distribution. Prefixes missing from the table emit EOS with certainty.
#[derive(Debug, Clone)]
pub struct TableModel {
    pub vocab: usize,
    pub eos: u32,
    pub table: HashMap<Vec<u32>, Vec<f64>>,
}

impl TableModel {
    pub fn new(vocab: usize, eos: u32) -> Self {
        TableModel {
            vocab,
            eos,
            table: HashMap::new(),
        }
    }

    pub fn with(mut self, prefix: &[u32], probs: &[f64]) -> Self {
        assert_eq!(probs.len(), self.vocab);
        self.table.insert(prefix.to_vec(), probs.to_vec());
        self
    }

    /// Chain-rule probability of a full token sequence.
    pub fn sequence_prob(&self, tokens: &[u32]) -> f64 {
        (0..tokens.len())
            .map(|t| self.dist(&tokens[..t])[tokens[t] as usize])
            .product()
    }

    fn dist(&self, prefix: &[u32]) -> Vec<f64> {
        self.table.get(prefix).cloned().unwrap_or_else(|| {
            let mut d = vec![0.0; self.vocab];
            d[self.eos as usize] = 1.0;
            d
        })
    }
}

impl ScoringModel for TableModel {
    type State = ();

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn eos_id(&self) -> u32 {
        self.eos
    }

    fn start(&self, _source: &[u32]) -> Result<(), ModelError> {
        Ok(())
    }

    fn step(&self, _state: &(), prefix: &[u32]) -> Result<StepOutput<()>, ModelError> {
        Ok(StepOutput {
            probs: self.dist(prefix),
            attention: vec![1.0],
            state: (),
        })
    }
}

pub const ITS: u32 = 0;
pub const THATS: u32 = 1;
pub const OK: u32 = 2;
pub const AWESOME: u32 = 3;
pub const EOS: u32 = 4;

/// Two-step model whose first token is over-confident in the wrong word:
/// greedy finds "That's awesome" (0.6·0.6) while a wider beam prefers
/// "It's ok" (0.4·0.91). EOS is certain after two tokens.
pub fn awesome_model() -> TableModel {
    TableModel::new(5, EOS)
        .with(&[], &[0.4, 0.6, 0.0, 0.0, 0.0])
        .with(&[ITS], &[0.0, 0.0, 0.91, 0.09, 0.0])
        .with(&[THATS], &[0.0, 0.0, 0.4, 0.6, 0.0])
}

/// The four complete sequences of [`awesome_model`].
pub fn awesome_support() -> Vec<Vec<u32>> {
    vec![
        vec![ITS, OK, EOS],
        vec![ITS, AWESOME, EOS],
        vec![THATS, OK, EOS],
        vec![THATS, AWESOME, EOS],
    ]
}

pub fn dense(probs: &[f64], gold: u32) -> TokenRecord {
    TokenRecord::from_dense("s", 1, (probs.len() - 1) as u32, gold, probs)
}

/// The two Appendix distributions, first label correct in both.
pub fn appendix_p1() -> TokenRecord {
    dense(&[0.4, 0.1, 0.5], 0)
}

pub fn appendix_p2() -> TokenRecord {
    dense(&[0.0, 0.5, 0.5], 0)
}

//! Synthetic sequence-classification tasks and a small trainer.
//!
//! Two generators produce labeled datasets at desk scale:
//!
//! * [`gen_copy_task`] — is the second half of the sequence an exact mirror
//!   of the first half, or was one position tampered with? Binary.
//! * [`gen_nested_ops`] — bracketed prefix expressions over MAX/MIN/MED on
//!   digits; the label is the expression's value. Ten-way, hierarchical.
//!
//! [`model`] defines the classifier network around the attention layer and
//! [`train`] fits it with Adam; together they demonstrate the layer and its
//! router learning end to end.

pub mod model;
pub mod train;

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A labeled set of equal-length token sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Free-form tag such as `train` or `test`.
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Sequence length, assuming a validated (uniform-length) dataset.
    pub fn seq_len(&self) -> usize {
        self.sequences.first().map(|s| s.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences.len() != self.labels.len() {
            return Err(Error::InvalidArgument {
                op: "Dataset::validate",
                msg: format!(
                    "{} sequences but {} labels",
                    self.sequences.len(),
                    self.labels.len()
                ),
            });
        }
        let len = self.seq_len();
        for (i, seq) in self.sequences.iter().enumerate() {
            if seq.len() != len {
                return Err(Error::InvalidArgument {
                    op: "Dataset::validate",
                    msg: format!("sequence {} has length {}, expected {}", i, seq.len(), len),
                });
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::InvalidArgument {
                    op: "Dataset::validate",
                    msg: format!("sequence {} contains token {} ≥ vocab {}", i, bad, self.vocab_size),
                });
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidArgument {
                op: "Dataset::validate",
                msg: format!("label {} ≥ {} classes", bad, self.num_classes),
            });
        }
        Ok(())
    }

    /// Splits off the last `count` examples as a second dataset with the
    /// given tag; `self` keeps the rest.
    pub fn split_off(&mut self, count: usize, tag: &str) -> Result<Dataset> {
        if count >= self.len() {
            return Err(Error::InvalidArgument {
                op: "Dataset::split_off",
                msg: format!("cannot take {} of {} examples", count, self.len()),
            });
        }
        let at = self.len() - count;
        Ok(Dataset {
            sequences: self.sequences.split_off(at),
            labels: self.labels.split_off(at),
            vocab_size: self.vocab_size,
            num_classes: self.num_classes,
            split: tag.to_string(),
        })
    }
}

/// Alphabet size the copy task is generated with unless a config says
/// otherwise. Kept small so single corrupted positions carry a visible
/// signal after pooling.
pub const DEFAULT_COPY_VOCAB: usize = 8;

/// Mirror-detection task. Each sequence's second half either mirrors the
/// first half exactly (label 1) or differs at exactly one position
/// (label 0). Labels are drawn fair-coin, so classes are balanced in
/// expectation.
pub fn gen_copy_task(seed: u64, n: usize, vocab: usize, examples: usize) -> Result<Dataset> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument {
            op: "gen_copy_task",
            msg: format!("sequence length must be even and ≥ 2, got {}", n),
        });
    }
    if vocab < 2 || examples == 0 {
        return Err(Error::InvalidArgument {
            op: "gen_copy_task",
            msg: format!("need vocab ≥ 2 and ≥ 1 examples, got {} and {}", vocab, examples),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = n / 2;
    let mut sequences = Vec::with_capacity(examples);
    let mut labels = Vec::with_capacity(examples);
    for _ in 0..examples {
        let mut seq = vec![0usize; n];
        for i in 0..half {
            let t = rng.gen_range(0..vocab);
            seq[i] = t;
            seq[n - 1 - i] = t;
        }
        let intact = rng.gen_bool(0.5);
        if !intact {
            // corrupt one mirrored position with a guaranteed-different token
            let pos = half + rng.gen_range(0..half);
            let bump = rng.gen_range(1..vocab);
            seq[pos] = (seq[pos] + bump) % vocab;
        }
        sequences.push(seq);
        labels.push(usize::from(intact));
    }
    Ok(Dataset {
        sequences,
        labels,
        vocab_size: vocab,
        num_classes: 2,
        split: "all".into(),
    })
}

/// Token ids of the nested-ops vocabulary.
pub mod nested_token {
    pub const MAX: usize = 10;
    pub const MIN: usize = 11;
    pub const MED: usize = 12;
    pub const OPEN: usize = 13;
    pub const CLOSE: usize = 14;
    pub const PAD: usize = 15;
    pub const VOCAB: usize = 16;
}

#[derive(Debug, Clone)]
enum Expr {
    Digit(usize),
    Op(usize, Vec<Expr>), // operator token, operands
}

impl Expr {
    /// Exact recursive evaluation; the ground truth labeler.
    fn eval(&self) -> usize {
        match self {
            Expr::Digit(d) => *d,
            Expr::Op(op, args) => {
                let mut vals: Vec<usize> = args.iter().map(Expr::eval).collect();
                match *op {
                    nested_token::MAX => *vals.iter().max().unwrap(),
                    nested_token::MIN => *vals.iter().min().unwrap(),
                    nested_token::MED => {
                        vals.sort_unstable();
                        vals[vals.len() / 2]
                    }
                    other => unreachable!("operator token {}", other),
                }
            }
        }
    }

    fn tokens(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Digit(d) => out.push(*d),
            Expr::Op(op, args) => {
                out.push(nested_token::OPEN);
                out.push(*op);
                for a in args {
                    a.tokens(out);
                }
                out.push(nested_token::CLOSE);
            }
        }
    }

    fn sample<R: Rng>(rng: &mut R, depth: usize) -> Expr {
        let op = [nested_token::MAX, nested_token::MIN, nested_token::MED][rng.gen_range(0..3)];
        // median over an odd count is unambiguous; give every operator
        // three operands
        let args = (0..3)
            .map(|_| {
                if depth > 1 && rng.gen_bool(0.4) {
                    Expr::sample(rng, depth - 1)
                } else {
                    Expr::Digit(rng.gen_range(0..10))
                }
            })
            .collect();
        Expr::Op(op, args)
    }
}

/// Nested prefix expressions over MAX, MIN, and MED applied to digits.
///
/// Each example is `OPEN op args… CLOSE` recursively tokenized and padded
/// to `length`; its label is the exact value of the expression (ten
/// classes). Expressions that do not fit in `length` tokens are resampled a
/// bounded number of times before the generator gives up.
pub fn gen_nested_ops(
    seed: u64,
    depth: usize,
    length: usize,
    examples: usize,
) -> Result<Dataset> {
    if depth == 0 || examples == 0 {
        return Err(Error::InvalidArgument {
            op: "gen_nested_ops",
            msg: format!("need depth ≥ 1 and ≥ 1 examples, got {} and {}", depth, examples),
        });
    }
    // the smallest expression is OPEN op d d d CLOSE
    if length < 6 {
        return Err(Error::InvalidArgument {
            op: "gen_nested_ops",
            msg: format!("length {} cannot hold any expression", length),
        });
    }
    const MAX_RETRIES: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(examples);
    let mut labels = Vec::with_capacity(examples);
    for idx in 0..examples {
        let mut accepted = false;
        for _ in 0..MAX_RETRIES {
            let expr = Expr::sample(&mut rng, depth);
            let mut toks = Vec::new();
            expr.tokens(&mut toks);
            if toks.len() > length {
                continue;
            }
            labels.push(expr.eval());
            toks.resize(length, nested_token::PAD);
            sequences.push(toks);
            accepted = true;
            break;
        }
        if !accepted {
            return Err(Error::InvalidArgument {
                op: "gen_nested_ops",
                msg: format!(
                    "example {}: no expression of depth {} fit in {} tokens after {} tries",
                    idx, depth, length, MAX_RETRIES
                ),
            });
        }
    }
    Ok(Dataset {
        sequences,
        labels,
        vocab_size: nested_token::VOCAB,
        num_classes: 10,
        split: "all".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn copy_task_is_seed_deterministic() {
        let a = gen_copy_task(7, 16, 8, 100).unwrap();
        let b = gen_copy_task(7, 16, 8, 100).unwrap();
        assert_eq!(a, b);
        let c = gen_copy_task(8, 16, 8, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn copy_task_labels_match_mirror_structure() {
        let ds = gen_copy_task(1, 12, 6, 500).unwrap();
        ds.validate().unwrap();
        for (seq, &label) in ds.sequences.iter().zip(&ds.labels) {
            let mirrored = (0..6).all(|i| seq[i] == seq[11 - i]);
            assert_eq!(mirrored, label == 1, "label disagrees with structure: {:?}", seq);
            if label == 0 {
                // broken sequences differ in exactly one mirrored pair
                let breaks = (0..6).filter(|&i| seq[i] != seq[11 - i]).count();
                assert_eq!(breaks, 1);
            }
        }
    }

    #[test]
    fn copy_task_classes_are_balanced() {
        let ds = gen_copy_task(42, 64, 8, 10_000).unwrap();
        let ones: usize = ds.labels.iter().sum();
        let frac = ones as f64 / ds.labels.len() as f64;
        assert!((frac - 0.5).abs() < 0.01, "intact fraction {}", frac);
    }

    #[test]
    fn copy_task_n2_vocab2_has_two_intact_patterns() {
        let ds = gen_copy_task(3, 2, 2, 400).unwrap();
        let intact: BTreeSet<Vec<usize>> = ds
            .sequences
            .iter()
            .zip(&ds.labels)
            .filter(|(_, &l)| l == 1)
            .map(|(s, _)| s.clone())
            .collect();
        assert_eq!(intact, BTreeSet::from([vec![0, 0], vec![1, 1]]));
    }

    #[test]
    fn copy_task_rejects_bad_sizes() {
        assert!(gen_copy_task(0, 7, 4, 10).is_err()); // odd
        assert!(gen_copy_task(0, 0, 4, 10).is_err());
        assert!(gen_copy_task(0, 8, 1, 10).is_err()); // vocab too small
        assert!(gen_copy_task(0, 8, 4, 0).is_err());
    }

    /// Stack-machine evaluation of a token stream, written independently of
    /// the recursive `Expr::eval`.
    fn eval_tokens(tokens: &[usize]) -> usize {
        use nested_token::*;
        let mut stack: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut result = None;
        for &t in tokens {
            match t {
                OPEN => {}
                MAX | MIN | MED => stack.push((t, Vec::new())),
                CLOSE => {
                    let (op, vals) = stack.pop().expect("unbalanced CLOSE");
                    let v = match op {
                        MAX => *vals.iter().max().unwrap(),
                        MIN => *vals.iter().min().unwrap(),
                        MED => {
                            let mut s = vals.clone();
                            s.sort_unstable();
                            s[s.len() / 2]
                        }
                        _ => unreachable!(),
                    };
                    if let Some((_, parent)) = stack.last_mut() {
                        parent.push(v);
                    } else {
                        result = Some(v);
                    }
                }
                PAD => break,
                d if d < 10 => {
                    stack.last_mut().expect("digit outside expression").1.push(d);
                }
                other => panic!("unexpected token {}", other),
            }
        }
        result.expect("no complete expression")
    }

    #[test]
    fn nested_ops_labels_match_stack_machine() {
        let ds = gen_nested_ops(11, 3, 48, 1000).unwrap();
        ds.validate().unwrap();
        for (seq, &label) in ds.sequences.iter().zip(&ds.labels) {
            assert_eq!(eval_tokens(seq), label, "stack machine disagrees on {:?}", seq);
        }
    }

    #[test]
    fn nested_ops_depth_one_is_a_single_operator() {
        let ds = gen_nested_ops(5, 1, 8, 200).unwrap();
        for (seq, &label) in ds.sequences.iter().zip(&ds.labels) {
            // OPEN op d d d CLOSE PAD PAD
            assert_eq!(seq[0], nested_token::OPEN);
            let digits = [seq[2], seq[3], seq[4]];
            let want = match seq[1] {
                nested_token::MAX => *digits.iter().max().unwrap(),
                nested_token::MIN => *digits.iter().min().unwrap(),
                nested_token::MED => {
                    let mut s = digits;
                    s.sort_unstable();
                    s[1]
                }
                other => panic!("bad operator {}", other),
            };
            assert_eq!(seq[5], nested_token::CLOSE);
            assert_eq!(label, want);
        }
    }

    #[test]
    fn nested_ops_is_seed_deterministic_and_padded() {
        let a = gen_nested_ops(2, 2, 32, 50).unwrap();
        let b = gen_nested_ops(2, 2, 32, 50).unwrap();
        assert_eq!(a, b);
        assert!(a.sequences.iter().all(|s| s.len() == 32));
    }

    #[test]
    fn nested_ops_rejects_impossible_lengths() {
        assert!(gen_nested_ops(0, 1, 5, 10).is_err());
        assert!(gen_nested_ops(0, 0, 32, 10).is_err());
        assert!(gen_nested_ops(0, 1, 32, 0).is_err());
    }

    #[test]
    fn split_off_partitions_examples() {
        let mut ds = gen_copy_task(9, 8, 4, 100).unwrap();
        let test = ds.split_off(20, "test").unwrap();
        assert_eq!(ds.len(), 80);
        assert_eq!(test.len(), 20);
        assert_eq!(test.split, "test");
        assert!(ds.split_off(80, "x").is_err());
    }
}

//! CNF grammars and grammar-constrained decoding with Viterbi CYK.
//!
//! Grammar files are line oriented:
//!
//! ```text
//! # comment
//! %start S
//! S -> A B | A C
//! A -> 'a'
//! ```
//!
//! Nonterminals are bare identifiers and terminals are quoted. Every
//! production must be binary (`A -> B C`) or lexical (`A -> 'a'`); binarize
//! before loading. Without `%start` the first left-hand side is the start.

use std::collections::HashMap;

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grammar {
    pub nonterminals: Vec<String>,
    pub terminals: Vec<String>,
    pub start: usize,
    /// `(A, B, C)` for `A -> B C`.
    pub binary: Vec<(usize, usize, usize)>,
    /// `(A, t)` for `A -> 't'`, with `t` indexing `terminals`.
    pub lexical: Vec<(usize, usize)>,
}

enum Sym {
    Nt(String),
    T(String),
}

fn parse_symbol(tok: &str, line: usize) -> Result<Sym> {
    let quoted = |q: char| tok.len() >= 2 && tok.starts_with(q) && tok.ends_with(q);
    if quoted('\'') || quoted('"') {
        return Ok(Sym::T(tok[1..tok.len() - 1].to_string()));
    }
    if tok.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-' || c == '.') && !tok.is_empty() {
        return Ok(Sym::Nt(tok.to_string()));
    }
    Err(Error::Grammar {
        line,
        msg: format!("bad symbol {tok:?}"),
    })
}

impl Grammar {
    pub fn parse(text: &str) -> Result<Self> {
        let mut start_name: Option<(String, usize)> = None;
        let mut rules: Vec<(usize, String, Vec<Sym>)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix("%start") {
                let name = rest.trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(Error::Grammar {
                        line,
                        msg: "expected `%start SYMBOL`".into(),
                    });
                }
                start_name = Some((name.to_string(), line));
                continue;
            }
            let (lhs, rhs) = content.split_once("->").ok_or_else(|| Error::Grammar {
                line,
                msg: "expected `A -> ...`".into(),
            })?;
            let lhs = match parse_symbol(lhs.trim(), line)? {
                Sym::Nt(name) => name,
                Sym::T(_) => {
                    return Err(Error::Grammar {
                        line,
                        msg: "terminal on left-hand side".into(),
                    })
                }
            };
            for alt in rhs.split('|') {
                let syms = alt
                    .split_whitespace()
                    .map(|t| parse_symbol(t, line))
                    .collect::<Result<Vec<_>>>()?;
                let cnf = matches!(syms[..], [Sym::Nt(_), Sym::Nt(_)] | [Sym::T(_)]);
                if !cnf {
                    return Err(Error::Grammar {
                        line,
                        msg: "production is not in CNF (need `A -> B C` or `A -> 'a'`)".into(),
                    });
                }
                rules.push((line, lhs.clone(), syms));
            }
        }
        if rules.is_empty() {
            return Err(Error::Grammar {
                line: 0,
                msg: "no productions".into(),
            });
        }

        let mut nt_index: HashMap<String, usize> = HashMap::new();
        let mut nonterminals = Vec::new();
        for (_, lhs, _) in &rules {
            if !nt_index.contains_key(lhs) {
                nt_index.insert(lhs.clone(), nonterminals.len());
                nonterminals.push(lhs.clone());
            }
        }
        let mut t_index: HashMap<String, usize> = HashMap::new();
        let mut terminals = Vec::new();
        let mut binary = Vec::new();
        let mut lexical = Vec::new();
        for (line, lhs, syms) in &rules {
            let a = nt_index[lhs];
            let lookup = |name: &String| {
                nt_index.get(name).copied().ok_or_else(|| Error::Grammar {
                    line: *line,
                    msg: format!("nonterminal {name:?} has no productions"),
                })
            };
            match &syms[..] {
                [Sym::Nt(b), Sym::Nt(c)] => binary.push((a, lookup(b)?, lookup(c)?)),
                [Sym::T(t)] => {
                    let next = terminals.len();
                    let id = *t_index.entry(t.clone()).or_insert(next);
                    if id == next {
                        terminals.push(t.clone());
                    }
                    lexical.push((a, id));
                }
                _ => unreachable!(),
            }
        }
        if lexical.is_empty() {
            return Err(Error::Grammar {
                line: 0,
                msg: "grammar has no lexical productions".into(),
            });
        }
        let start = match start_name {
            Some((name, line)) => *nt_index.get(&name).ok_or_else(|| Error::Grammar {
                line,
                msg: format!("start symbol {name:?} has no productions"),
            })?,
            None => 0,
        };
        Ok(Grammar {
            nonterminals,
            terminals,
            start,
            binary,
            lexical,
        })
    }

    /// Maps terminals onto output columns of `vocab`.
    pub fn compile(&self, vocab: &Vocab) -> Result<CompiledGrammar> {
        let columns = self
            .terminals
            .iter()
            .map(|t| vocab.id(t).ok_or_else(|| Error::UnknownToken(t.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.compile_with(&columns))
    }

    /// Uses the grammar's own terminal order as the column order.
    pub fn compile_identity(&self) -> CompiledGrammar {
        let cols: Vec<usize> = (0..self.terminals.len()).collect();
        self.compile_with(&cols)
    }

    fn compile_with(&self, columns: &[usize]) -> CompiledGrammar {
        CompiledGrammar {
            num_nonterminals: self.nonterminals.len(),
            start: self.start,
            binary: self.binary.clone(),
            lexical: self.lexical.iter().map(|&(a, t)| (a, columns[t])).collect(),
        }
    }
}

/// A CNF grammar whose terminals are output-vocabulary columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompiledGrammar {
    pub num_nonterminals: usize,
    pub start: usize,
    pub binary: Vec<(usize, usize, usize)>,
    pub lexical: Vec<(usize, usize)>,
}

impl CompiledGrammar {
    /// The grammar accepting every non-empty string over `vocab_size`
    /// columns: `S -> S S | 'c'` for each column.
    pub fn universal(vocab_size: usize) -> Self {
        CompiledGrammar {
            num_nonterminals: 1,
            start: 0,
            binary: vec![(0, 0, 0)],
            lexical: (0..vocab_size).map(|c| (0, c)).collect(),
        }
    }

    /// CYK membership test.
    pub fn accepts(&self, columns: &[usize]) -> bool {
        let l = columns.len();
        if l == 0 {
            return false;
        }
        let nts = self.num_nonterminals;
        let mut chart = vec![false; l * l * nts];
        let at = |i: usize, j: usize, a: usize| (i * l + j) * nts + a;
        for (i, &c) in columns.iter().enumerate() {
            for &(a, t) in &self.lexical {
                if t == c {
                    chart[at(i, i, a)] = true;
                }
            }
        }
        for span in 2..=l {
            for i in 0..=l - span {
                let j = i + span - 1;
                for s in i..j {
                    for &(a, b, c) in &self.binary {
                        if chart[at(i, s, b)] && chart[at(s + 1, j, c)] {
                            chart[at(i, j, a)] = true;
                        }
                    }
                }
            }
        }
        chart[at(0, l - 1, self.start)]
    }
}

#[derive(Clone, Copy, Debug)]
enum Back {
    None,
    Lex(usize),
    Split(usize, usize, usize),
}

/// Best grammatical string under independent per-position distributions
/// (`l × V`, probabilities), and its log score. Ties go to the smaller
/// terminal, then the leftmost split, then the earlier rule.
pub fn viterbi_cyk(distributions: &Array, grammar: &CompiledGrammar) -> Result<(Vec<usize>, f64)> {
    let (l, v) = distributions
        .dims2()
        .ok_or_else(|| Error::shape("viterbi_cyk", &[distributions.shape()]))?;
    if l == 0 {
        return Err(Error::NoParse(0));
    }
    if let Some(&(_, t)) = grammar.lexical.iter().find(|&&(_, t)| t >= v) {
        return Err(Error::shape("viterbi_cyk", &[distributions.shape(), &[t]]));
    }
    let nts = grammar.num_nonterminals;
    let at = |i: usize, j: usize, a: usize| (i * l + j) * nts + a;
    let mut score = vec![f64::NEG_INFINITY; l * l * nts];
    let mut back = vec![Back::None; l * l * nts];
    for i in 0..l {
        let row = distributions.row_slice(i);
        for &(a, t) in &grammar.lexical {
            let s = row[t].ln();
            let cell = at(i, i, a);
            let better = match back[cell] {
                Back::Lex(prev) => s > score[cell] || (s == score[cell] && t < prev),
                _ => s > score[cell],
            };
            if better {
                score[cell] = s;
                back[cell] = Back::Lex(t);
            }
        }
    }
    for span in 2..=l {
        for i in 0..=l - span {
            let j = i + span - 1;
            for s in i..j {
                for &(a, b, c) in &grammar.binary {
                    let cand = score[at(i, s, b)] + score[at(s + 1, j, c)];
                    if cand > score[at(i, j, a)] {
                        score[at(i, j, a)] = cand;
                        back[at(i, j, a)] = Back::Split(s, b, c);
                    }
                }
            }
        }
    }
    let root = at(0, l - 1, grammar.start);
    if score[root] == f64::NEG_INFINITY {
        return Err(Error::NoParse(l));
    }
    let mut out = vec![0; l];
    let mut stack = vec![(0, l - 1, grammar.start)];
    while let Some((i, j, a)) = stack.pop() {
        match back[at(i, j, a)] {
            Back::Lex(t) => out[i] = t,
            Back::Split(s, b, c) => {
                stack.push((i, s, b));
                stack.push((s + 1, j, c));
            }
            Back::None => unreachable!("finite cell without backpointer"),
        }
    }
    Ok((out, score[root]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_format() {
        let g = Grammar::parse("# demo\n%start S\nS -> A B | A A\nA -> 'a'\nB -> \"b\"  # trailing\n").unwrap();
        assert_eq!(g.nonterminals, vec!["S", "A", "B"]);
        assert_eq!(g.terminals, vec!["a", "b"]);
        assert_eq!(g.binary, vec![(0, 1, 2), (0, 1, 1)]);
        assert_eq!(g.lexical, vec![(1, 0), (2, 1)]);
    }

    #[test]
    fn rejects_non_cnf_and_undeclared() {
        for bad in ["S -> A", "S -> A B C", "S -> 'a' B", "S -> A B\nA -> 'a'", "%start Q\nS -> 'a'", "S -> S S"] {
            assert!(matches!(Grammar::parse(bad), Err(Error::Grammar { .. })), "{bad}");
        }
        match Grammar::parse("S -> 'a'\nS -> X Y") {
            Err(Error::Grammar { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_lexical_rule() {
        let g = Grammar::parse("S -> 'a'").unwrap().compile_identity();
        let d = Array::from_rows(&[vec![0.7]]).unwrap();
        let (y, s) = viterbi_cyk(&d, &g).unwrap();
        assert_eq!(y, vec![0]);
        assert!((s - 0.7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn constraint_dominates_preferences() {
        let g = Grammar::parse("S -> A B\nA -> 'a'\nB -> 'b'").unwrap().compile_identity();
        // columns: a = 0, b = 1; position preferences favour "b a"
        let d = Array::from_rows(&[vec![0.1, 0.9], vec![0.8, 0.2]]).unwrap();
        let (y, s) = viterbi_cyk(&d, &g).unwrap();
        assert_eq!(y, vec![0, 1]);
        assert!((s - (0.1f64.ln() + 0.2f64.ln())).abs() < 1e-12);
        assert!(g.accepts(&y));
        assert!(!g.accepts(&[1, 0]));
    }

    #[test]
    fn no_parse_at_length() {
        let g = Grammar::parse("S -> A B\nA -> 'a'\nB -> 'b'").unwrap().compile_identity();
        let d = Array::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(matches!(viterbi_cyk(&d, &g), Err(Error::NoParse(1))));
    }

    #[test]
    fn universal_grammar_is_vacuous() {
        let g = CompiledGrammar::universal(3);
        let d = Array::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3], vec![0.3, 0.3, 0.4]]).unwrap();
        let (y, _) = viterbi_cyk(&d, &g).unwrap();
        assert_eq!(y, vec![1, 0, 2]);
    }

    #[test]
    fn compile_against_vocab() {
        let g = Grammar::parse("S -> A B\nA -> 'x'\nB -> 'y'").unwrap();
        let v = Vocab::from(vec!["y".to_string(), "x".to_string()]);
        let cg = g.compile(&v).unwrap();
        assert_eq!(cg.lexical, vec![(1, 1), (2, 0)]);
        let missing = Vocab::from(vec!["x".to_string()]);
        assert!(g.compile(&missing).is_err());
    }
}

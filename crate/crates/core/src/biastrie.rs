//! Prefix tree over the token spellings of the biasing words.
//!
//! A [`TrieCursor`] follows the emitted token stream and tracks every trie
//! node whose path is a suffix of that stream. The tokens allowed to continue
//! a biasing word at the next step are the children of those nodes plus the
//! root's children, since a new word can always start.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Vocab};

pub const ROOT: usize = 0;

#[derive(Clone, Debug, Default)]
struct Node {
    children: BTreeMap<TokenId, usize>,
    terminal: bool,
}

#[derive(Clone, Debug)]
pub struct PrefixTree {
    nodes: Vec<Node>,
    word_count: usize,
}

impl PrefixTree {
    pub fn build<S: AsRef<str>>(vocab: &Vocab, bias_words: &[S]) -> Result<Self> {
        let mut tree = PrefixTree {
            nodes: vec![Node::default()],
            word_count: 0,
        };
        for word in bias_words {
            let word = word.as_ref();
            let tokens = vocab
                .word_tokens(word)
                .map_err(|e| Error::Untokenizable(format!("{word:?}: {e}")))?;
            if tokens.is_empty() {
                return Err(Error::Untokenizable(format!("{word:?}: empty word")));
            }
            tree.insert(&tokens);
        }
        Ok(tree)
    }

    fn insert(&mut self, tokens: &[TokenId]) {
        let mut node = ROOT;
        for &tok in tokens {
            node = match self.nodes[node].children.get(&tok) {
                Some(&child) => child,
                None => {
                    self.nodes.push(Node::default());
                    let child = self.nodes.len() - 1;
                    self.nodes[node].children.insert(tok, child);
                    child
                }
            };
        }
        if !self.nodes[node].terminal {
            self.nodes[node].terminal = true;
            self.word_count += 1;
        }
    }

    pub fn word_count(&self) -> usize {
        self.word_count
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn child(&self, node: usize, tok: TokenId) -> Option<usize> {
        self.nodes[node].children.get(&tok).copied()
    }

    pub fn children(&self, node: usize) -> impl Iterator<Item = (TokenId, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&t, &n)| (t, n))
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        self.nodes[node].terminal
    }

    /// Depth of the deepest node, i.e. the longest word in tokens.
    pub fn depth(&self) -> usize {
        fn walk(tree: &PrefixTree, node: usize) -> usize {
            tree.children(node)
                .map(|(_, c)| 1 + walk(tree, c))
                .max()
                .unwrap_or(0)
        }
        walk(self, ROOT)
    }

    /// The set M_i: tokens that continue some biasing word given the cursor.
    pub fn valid_set(&self, cursor: &TrieCursor) -> BTreeSet<TokenId> {
        let mut out: BTreeSet<TokenId> = self.nodes[ROOT].children.keys().copied().collect();
        for &node in &cursor.active {
            out.extend(self.nodes[node].children.keys().copied());
        }
        out
    }

    /// Follows `emitted` from every active node and from the root.
    ///
    /// Nodes without a matching child are dropped. A node reached by the advance
    /// is retired when it completes a word and has no children, so a finished
    /// word only re-matches from a fresh boundary token.
    pub fn advance(&self, cursor: &TrieCursor, emitted: TokenId) -> TrieCursor {
        let mut active = BTreeSet::new();
        let starts = std::iter::once(ROOT).chain(cursor.active.iter().copied());
        for node in starts {
            if let Some(next) = self.child(node, emitted) {
                if !self.nodes[next].children.is_empty() {
                    active.insert(next);
                }
            }
        }
        TrieCursor { active }
    }
}

/// Active trie nodes, excluding the root (which is always active).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrieCursor {
    active: BTreeSet<usize>,
}

impl TrieCursor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn active(&self) -> &BTreeSet<usize> {
        &self.active
    }

    pub fn is_fresh(&self) -> bool {
        self.active.is_empty()
    }
}

/// Valid sets along a teacher-forced pass over `tokens`: entry `i` is M_i
/// computed after consuming `tokens[..i]`.
pub fn teacher_forced_sets(tree: &PrefixTree, tokens: &[TokenId]) -> Vec<BTreeSet<TokenId>> {
    let mut cursor = TrieCursor::new();
    let mut sets = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        sets.push(tree.valid_set(&cursor));
        cursor = tree.advance(&cursor, tok);
    }
    sets
}

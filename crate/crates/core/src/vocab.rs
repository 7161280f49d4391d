//! Symbol and token vocabularies, and the reason-then-answer [`Caption`].
//!
//! Caption token ids are laid out as
//!
//! ```text
//! 0..5            delimiters + end   [T] [/T] [A] [/A] <end>
//! 5..16           template words     what next step ...
//! 16..16+|V|      one token per world symbol
//! ```
//!
//! so the token <-> symbol correspondence is a fixed offset and captions can
//! be parsed without a vocabulary in hand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OPEN_THINK: usize = 0;
pub const CLOSE_THINK: usize = 1;
pub const OPEN_ANS: usize = 2;
pub const CLOSE_ANS: usize = 3;
pub const END: usize = 4;
pub const SYMBOL_BASE: usize = 16;

pub fn is_delimiter(token: usize) -> bool {
    token <= END
}

/// Template words used by questions and reasoning traces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(usize)]
pub enum Word {
    What = 5,
    Next,
    Step,
    After,
    Happens,
    If,
    Then,
    To,
    Does,
    /// "what if" hypothesis, branch 0.
    Hyp0,
    /// "what if" hypothesis, branch 1.
    Hyp1,
}

impl Word {
    pub const fn token(self) -> usize {
        self as usize
    }

    pub fn hypothesis(branch: usize) -> Word {
        if branch == 0 {
            Word::Hyp0
        } else {
            Word::Hyp1
        }
    }

    pub fn branch_of(token: usize) -> Option<usize> {
        match token {
            t if t == Word::Hyp0.token() => Some(0),
            t if t == Word::Hyp1.token() => Some(1),
            _ => None,
        }
    }
}

/// Number of predictive branches encoded by hypothesis words.
pub const NUM_BRANCHES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Actor,
    Object,
    Action,
    Location,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Actor, Role::Object, Role::Action, Role::Location];

    fn index(self) -> usize {
        match self {
            Role::Actor => 0,
            Role::Object => 1,
            Role::Action => 2,
            Role::Location => 3,
        }
    }
}

/// Symbol vocabulary: four role blocks of `per_role` ids each.
///
/// Action ids are further split: the first half are procedural steps, the
/// second half predictive events, and the predictive half is split again
/// into the two hypothesis branches' outcome sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub per_role: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab { per_role: 8 }
    }
}

impl Vocab {
    pub fn new(per_role: usize) -> Result<Self> {
        if per_role < 8 || !per_role.is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!(
                "symbols per role must be a multiple of 4 and at least 8, got {per_role}"
            )));
        }
        Ok(Vocab { per_role })
    }

    /// |V|.
    pub fn num_symbols(&self) -> usize {
        4 * self.per_role
    }

    pub fn symbol(&self, role: Role, i: usize) -> usize {
        debug_assert!(i < self.per_role);
        role.index() * self.per_role + i
    }

    pub fn role_of(&self, symbol: usize) -> Option<Role> {
        Role::ALL.get(symbol / self.per_role).copied()
    }

    pub fn role_symbols(&self, role: Role) -> std::ops::Range<usize> {
        let s = role.index() * self.per_role;
        s..s + self.per_role
    }

    pub fn procedural_actions(&self) -> std::ops::Range<usize> {
        let s = self.symbol(Role::Action, 0);
        s..s + self.per_role / 2
    }

    pub fn predictive_actions(&self) -> std::ops::Range<usize> {
        let s = self.symbol(Role::Action, self.per_role / 2);
        s..s + self.per_role / 2
    }

    /// Outcome actions reachable under hypothesis `branch`.
    pub fn branch_outcomes(&self, branch: usize) -> std::ops::Range<usize> {
        let q = self.per_role / 4;
        let s = self.predictive_actions().start + branch * q;
        s..s + q
    }

    /// Caption vocabulary size (delimiters, words and symbol tokens).
    pub fn caption_vocab(&self) -> usize {
        SYMBOL_BASE + self.num_symbols()
    }

    /// Frame vocabulary size: every symbol plus an end-of-video token.
    pub fn frame_vocab(&self) -> usize {
        self.num_symbols() + 1
    }

    pub fn frame_end(&self) -> usize {
        self.num_symbols()
    }

    pub fn token_of_symbol(&self, symbol: usize) -> usize {
        SYMBOL_BASE + symbol
    }

    pub fn symbol_of_token(&self, token: usize) -> Option<usize> {
        (SYMBOL_BASE..self.caption_vocab())
            .contains(&token)
            .then(|| token - SYMBOL_BASE)
    }

    /// The published token <-> symbol table.
    pub fn correspondence(&self) -> TokenSymbolTable {
        TokenSymbolTable {
            symbols_per_role: self.per_role,
            caption_vocab: self.caption_vocab(),
            frame_vocab: self.frame_vocab(),
            pairs: (0..self.num_symbols())
                .map(|s| TokenSymbol {
                    token: self.token_of_symbol(s),
                    symbol: s,
                    role: self.role_of(s).expect("symbol in range"),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSymbol {
    pub token: usize,
    pub symbol: usize,
    pub role: Role,
}

/// Serialized next to dataset files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSymbolTable {
    pub symbols_per_role: usize,
    pub caption_vocab: usize,
    pub frame_vocab: usize,
    pub pairs: Vec<TokenSymbol>,
}

/// Token sequence following `[T] think [/T] [A] answer [/A]`, optionally
/// terminated by the end token.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Caption {
    tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    pub think: std::ops::Range<usize>,
    pub answer: std::ops::Range<usize>,
}

impl Caption {
    pub fn new(tokens: Vec<usize>) -> Self {
        Caption { tokens }
    }

    /// Builds a well-formed caption (with trailing end token).
    pub fn compose(think: &[usize], answer: &[usize]) -> Self {
        let mut tokens = Vec::with_capacity(think.len() + answer.len() + 5);
        tokens.push(OPEN_THINK);
        tokens.extend_from_slice(think);
        tokens.push(CLOSE_THINK);
        tokens.push(OPEN_ANS);
        tokens.extend_from_slice(answer);
        tokens.push(CLOSE_ANS);
        tokens.push(END);
        Caption { tokens }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Template segments, or `None` when the caption is malformed.
    pub fn segments(&self) -> Option<Segments> {
        let mut toks = self.tokens.as_slice();
        if toks.last() == Some(&END) {
            toks = &toks[..toks.len() - 1];
        }
        let delims: Vec<(usize, usize)> = toks
            .iter()
            .enumerate()
            .filter(|(_, &t)| is_delimiter(t))
            .map(|(i, &t)| (i, t))
            .collect();
        let [(a, OPEN_THINK), (b, CLOSE_THINK), (c, OPEN_ANS), (d, CLOSE_ANS)] = delims[..] else {
            return None;
        };
        let well = a == 0 && b > a + 1 && c == b + 1 && d > c + 1 && d == toks.len() - 1;
        well.then(|| Segments {
            think: a + 1..b,
            answer: c + 1..d,
        })
    }

    pub fn is_well_formed(&self) -> bool {
        self.segments().is_some()
    }

    pub fn answer(&self) -> Option<&[usize]> {
        self.segments().map(|s| &self.tokens[s.answer])
    }

    pub fn think(&self) -> Option<&[usize]> {
        self.segments().map(|s| &self.tokens[s.think])
    }

    /// Answer span when well-formed, otherwise every token.
    pub fn answer_or_all(&self) -> &[usize] {
        match self.segments() {
            Some(s) => &self.tokens[s.answer],
            None => &self.tokens,
        }
    }

    /// Length of the reasoning that precedes the answer: the think span when
    /// well-formed, else the non-delimiter tokens before the first `[A]`.
    pub fn thinking_length(&self) -> usize {
        match self.segments() {
            Some(s) => s.think.len(),
            None => self
                .tokens
                .iter()
                .take_while(|&&t| t != OPEN_ANS)
                .filter(|&&t| !is_delimiter(t))
                .count(),
        }
    }
}

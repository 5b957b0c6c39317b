//! One-time transfer codes such as `66-antenna-transit`.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use rand::Rng;

use crate::digest::Sha256Digest;

pub const MIN_CHANNEL: u16 = 1;
pub const MAX_CHANNEL: u16 = 999;

/// Three-syllable words; the first word of a code comes from here.
static LIST_A: LazyLock<Vec<&'static str>> = LazyLock::new(|| load(include_str!("../../data/wordlist-a-v1.txt")));
/// Two-syllable words; the second word of a code comes from here.
static LIST_B: LazyLock<Vec<&'static str>> = LazyLock::new(|| load(include_str!("../../data/wordlist-b-v1.txt")));

fn load(text: &'static str) -> Vec<&'static str> {
    let words: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    assert_eq!(words.len(), 256, "wordlists hold exactly 256 words");
    words
}

pub fn list_a() -> &'static [&'static str] {
    &LIST_A
}

pub fn list_b() -> &'static [&'static str] {
    &LIST_B
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid transfer code {text:?}: {reason}")]
pub struct InvalidCode {
    pub text: String,
    pub reason: &'static str,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct TransferCode {
    channel: u16,
    word_a: u8,
    word_b: u8,
}

impl TransferCode {
    pub fn new(channel: u16, word_a: u8, word_b: u8) -> Option<Self> {
        (MIN_CHANNEL..=MAX_CHANNEL).contains(&channel).then_some(Self {
            channel,
            word_a,
            word_b,
        })
    }

    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            channel: rng.random_range(MIN_CHANNEL..=MAX_CHANNEL),
            word_a: rng.random(),
            word_b: rng.random(),
        }
    }

    pub fn channel(&self) -> u16 {
        self.channel
    }

    pub fn words(&self) -> (&'static str, &'static str) {
        (LIST_A[self.word_a as usize], LIST_B[self.word_b as usize])
    }

    /// The value presented to the relay in place of the code itself.
    pub fn rendezvous_hash(&self) -> Sha256Digest {
        Sha256Digest::of(self.to_string().as_bytes())
    }
}

impl fmt::Display for TransferCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = self.words();
        write!(f, "{}-{a}-{b}", self.channel)
    }
}

impl fmt::Debug for TransferCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TransferCode({self})")
    }
}

impl FromStr for TransferCode {
    type Err = InvalidCode;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let bad = |reason| InvalidCode {
            text: text.to_owned(),
            reason,
        };
        let mut parts = text.split('-');
        let (Some(channel), Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected <channel>-<word>-<word>"));
        };
        if channel.is_empty()
            || channel.len() > 3
            || !channel.bytes().all(|c| c.is_ascii_digit())
            || (channel.len() > 1 && channel.starts_with('0'))
        {
            return Err(bad("channel must be a number from 1 to 999"));
        }
        let channel: u16 = channel
            .parse()
            .map_err(|_| bad("channel must be a number from 1 to 999"))?;
        if !(MIN_CHANNEL..=MAX_CHANNEL).contains(&channel) {
            return Err(bad("channel must be a number from 1 to 999"));
        }
        let word_a = LIST_A
            .iter()
            .position(|w| *w == a)
            .ok_or_else(|| bad("unknown first word"))?;
        let word_b = LIST_B
            .iter()
            .position(|w| *w == b)
            .ok_or_else(|| bad("unknown second word"))?;
        Ok(Self {
            channel,
            word_a: word_a as u8,
            word_b: word_b as u8,
        })
    }
}

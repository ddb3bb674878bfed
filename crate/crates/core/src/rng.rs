//! Counter-based, splittable random streams.
//!
//! A stream is identified by a root seed and a path of labels. Its 64-bit key
//! is a fold of the path through Philox4x32-10, and the values it produces are
//! Philox blocks of consecutive counters under that key. Deriving a child is a
//! pure function of `(root_seed, path)`, so rollout streams can be handed to
//! worker threads in any order without changing what each rollout draws.

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = (a as u64) * (b as u64);
    ((p >> 32) as u32, p as u32)
}

/// The Philox4x32 bijection with 10 rounds.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut ctr = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ k[0], lo1, hi0 ^ ctr[3] ^ k[1], lo0];
    }
    ctr
}

/// One element of a stream path.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Index(u64),
    Name(String),
}

impl Label {
    // (tag, lo, hi) fed to the key fold; the tag keeps Index(n) and Name(..) apart.
    fn words(&self) -> (u32, u64) {
        match self {
            Label::Index(i) => (0x1D3C_0001, *i),
            Label::Name(s) => {
                // FNV-1a, 64-bit
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for b in s.as_bytes() {
                    h ^= *b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
                (0x5A4E_0002 ^ (s.len() as u32), h)
            }
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Index(i) => write!(f, "{i}"),
            Label::Name(s) => f.write_str(s),
        }
    }
}

impl From<&str> for Label {
    fn from(s: &str) -> Self {
        Label::Name(s.to_owned())
    }
}

impl From<String> for Label {
    fn from(s: String) -> Self {
        Label::Name(s)
    }
}

macro_rules! label_from_int {
    ($($t:ty),*) => {$(
        impl From<$t> for Label {
            fn from(i: $t) -> Self {
                Label::Index(i as u64)
            }
        }
    )*};
}
label_from_int!(u8, u16, u32, u64, usize);

fn split_key(key: u64) -> [u32; 2] {
    [key as u32, (key >> 32) as u32]
}

fn fold_key(key: u64, label: &Label) -> u64 {
    let (tag, value) = label.words();
    let out = philox4x32_10([value as u32, (value >> 32) as u32, tag, 0x7265_6B79], split_key(key));
    (out[0] as u64) | ((out[1] as u64) << 32)
}

/// A named random stream: `(root_seed, path)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    root_seed: u64,
    path: Vec<Label>,
    key: u64,
}

impl RngStream {
    pub fn new(root_seed: u64) -> Self {
        Self {
            root_seed,
            path: Vec::new(),
            key: root_seed,
        }
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn path(&self) -> &[Label] {
        &self.path
    }

    /// Child stream at `path + [label]`.
    pub fn derive(&self, label: impl Into<Label>) -> RngStream {
        let label = label.into();
        let key = fold_key(self.key, &label);
        let mut path = Vec::with_capacity(self.path.len() + 1);
        path.extend_from_slice(&self.path);
        path.push(label);
        RngStream {
            root_seed: self.root_seed,
            path,
            key,
        }
    }

    /// Child stream reached by deriving each label in turn.
    pub fn derive_path<I, L>(&self, labels: I) -> RngStream
    where
        I: IntoIterator<Item = L>,
        L: Into<Label>,
    {
        labels
            .into_iter()
            .fold(self.clone(), |stream, label| stream.derive(label))
    }

    /// A generator positioned at the start of this stream.
    pub fn rng(&self) -> PhiloxRng {
        PhiloxRng::new(self.key)
    }
}

impl fmt::Display for RngStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root_seed)?;
        for label in &self.path {
            write!(f, "/{label}")?;
        }
        Ok(())
    }
}

/// Philox4x32-10 in counter mode.
#[derive(Clone, Debug)]
pub struct PhiloxRng {
    key: [u32; 2],
    counter: u64,
    buf: [u32; 4],
    idx: usize,
}

impl PhiloxRng {
    pub fn new(key: u64) -> Self {
        Self {
            key: split_key(key),
            counter: 0,
            buf: [0; 4],
            idx: 4,
        }
    }

    fn refill(&mut self) {
        let c = self.counter;
        self.buf = philox4x32_10([c as u32, (c >> 32) as u32, 0, 0], self.key);
        self.counter = self.counter.wrapping_add(1);
        self.idx = 0;
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for PhiloxRng {
    fn next_u32(&mut self) -> u32 {
        if self.idx >= 4 {
            self.refill();
        }
        let v = self.buf[self.idx];
        self.idx += 1;
        v
    }

    fn next_u64(&mut self) -> u64 {
        let lo = self.next_u32() as u64;
        let hi = self.next_u32() as u64;
        lo | (hi << 32)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(4) {
            let bytes = self.next_u32().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

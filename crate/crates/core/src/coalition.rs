//! Fixed-size player sets.

use std::fmt;

/// A subset of `n` players stored as a bitset.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Coalition {
    n: usize,
    words: Vec<u64>,
}

impl Coalition {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn full(n: usize) -> Self {
        let mut c = Self::empty(n);
        for i in 0..n {
            c.insert(i);
        }
        c
    }

    pub fn from_members(n: usize, members: impl IntoIterator<Item = usize>) -> Self {
        let mut c = Self::empty(n);
        for i in members {
            c.insert(i);
        }
        c
    }

    /// Players whose bit is set in `mask` (n ≤ 64).
    pub fn from_mask(n: usize, mask: u64) -> Self {
        assert!(n <= 64, "mask form holds at most 64 players");
        let mut c = Self::empty(n);
        if n > 0 {
            c.words[0] = if n == 64 { mask } else { mask & ((1u64 << n) - 1) };
        }
        c
    }

    pub fn player_count(&self) -> usize {
        self.n
    }

    pub fn contains(&self, i: usize) -> bool {
        debug_assert!(i < self.n);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < self.n, "player {i} out of range for {} players", self.n);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn remove(&mut self, i: usize) {
        assert!(i < self.n, "player {i} out of range for {} players", self.n);
        self.words[i / 64] &= !(1 << (i % 64));
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn is_subset(&self, other: &Coalition) -> bool {
        self.n == other.n && self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(|&i| self.contains(i))
    }
}

impl fmt::Debug for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.members()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_set_operations() {
        let mut c = Coalition::empty(130);
        assert!(c.is_empty());
        c.insert(0);
        c.insert(64);
        c.insert(129);
        assert_eq!(c.len(), 3);
        assert!(c.contains(64) && !c.contains(63));
        assert_eq!(c.members().collect::<Vec<_>>(), vec![0, 64, 129]);
        c.remove(64);
        assert_eq!(c.len(), 2);
        assert!(c.is_subset(&Coalition::full(130)));
        assert!(!Coalition::full(130).is_subset(&c));
        assert_eq!(Coalition::full(130).len(), 130);
        assert_eq!(Coalition::from_mask(3, 0b1101), Coalition::from_members(3, [0, 2]));
    }
}

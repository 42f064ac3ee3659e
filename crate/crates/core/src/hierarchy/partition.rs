//! Set partitions of small index sets, encoded as bitmask blocks.

use crate::error::{Error, Result};

/// A subset of `{0, ..., L-1}` as a bitmask.
pub type Subset = u32;

pub const MAX_ORDER: usize = 6;

/// A set partition; blocks are listed in order of their smallest element.
pub type Partition = Vec<Subset>;

/// All partitions of `{0, ..., l-1}` in lexicographic order of their
/// restricted growth strings.
pub fn partitions(l: usize) -> Result<Vec<Partition>> {
    if l == 0 {
        return Err(Error::InvalidParameter("partition order must be at least 1".into()));
    }
    if l > MAX_ORDER {
        return Err(Error::OrderTooLarge(l));
    }
    let mut out = Vec::new();
    let mut rgs = vec![0usize; l];
    loop {
        let blocks = rgs.iter().copied().max().unwrap_or(0) + 1;
        let mut p = vec![0 as Subset; blocks];
        for (i, &b) in rgs.iter().enumerate() {
            p[b] |= 1 << i;
        }
        out.push(p);
        // next restricted growth string: increment the rightmost position that
        // may grow, reset everything after it
        let mut i = l;
        loop {
            if i <= 1 {
                return Ok(out);
            }
            i -= 1;
            let prefix_max = rgs[..i].iter().copied().max().unwrap_or(0);
            if rgs[i] <= prefix_max {
                rgs[i] += 1;
                rgs[i + 1..].iter_mut().for_each(|v| *v = 0);
                break;
            }
        }
    }
}

/// Elements of a subset in increasing order.
pub fn elements(s: Subset) -> Vec<usize> {
    (0..32).filter(|&i| s & (1 << i) != 0).collect()
}

/// Partitions of the elements of `s`, blocks expressed as sub-masks of `s`.
pub fn partitions_of(s: Subset) -> Result<Vec<Partition>> {
    let elems = elements(s);
    let base = partitions(elems.len())?;
    Ok(base
        .into_iter()
        .map(|p| {
            p.into_iter()
                .map(|b| elements(b).into_iter().fold(0, |m, i| m | (1 << elems[i])))
                .collect()
        })
        .collect())
}

/// Human-readable, one-based label `1-3` for `{0, 2}`; `0` for the empty set.
pub fn subset_label(s: Subset) -> String {
    if s == 0 {
        return "0".into();
    }
    elements(s).iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join("-")
}

/// Nonempty subsets of the full set of size `l`, by increasing size.
pub fn subsets_by_size(l: usize) -> Vec<Subset> {
    let mut all: Vec<Subset> = (1..(1u32 << l)).collect();
    all.sort_by_key(|s| (s.count_ones(), *s));
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    /// Brute force: assign each element a block label in `0..l` and keep the
    /// distinct resulting set systems.
    fn brute_force_count(l: usize) -> usize {
        let mut seen = BTreeSet::new();
        let total = l.pow(l as u32);
        for mut code in 0..total {
            let mut blocks = vec![0u32; l];
            for i in 0..l {
                blocks[code % l] |= 1 << i;
                code /= l;
            }
            let mut key: Vec<u32> = blocks.into_iter().filter(|&b| b != 0).collect();
            key.sort();
            seen.insert(key);
        }
        seen.len()
    }

    #[test]
    fn small_orders() {
        assert_eq!(partitions(1).unwrap(), vec![vec![0b1]]);
        let p3 = partitions(3).unwrap();
        assert_eq!(p3.len(), 5);
        assert_eq!(p3.iter().filter(|p| p.len() > 1).count(), 4);
        assert_eq!(p3[0], vec![0b111]);
        assert_eq!(p3[4], vec![0b001, 0b010, 0b100]);
    }

    #[test]
    fn counts_match_brute_force() {
        for l in 1..=6 {
            assert_eq!(partitions(l).unwrap().len(), brute_force_count(l), "l = {l}");
        }
        assert_eq!(partitions(4).unwrap().len(), 15);
    }

    #[test]
    fn blocks_cover_exactly() {
        for l in 1..=6 {
            let full = (1u32 << l) - 1;
            for p in partitions(l).unwrap() {
                let mut acc = 0;
                for b in &p {
                    assert!(*b != 0 && acc & b == 0);
                    acc |= b;
                }
                assert_eq!(acc, full);
            }
        }
    }

    #[test]
    fn order_limits() {
        assert!(matches!(partitions(7), Err(Error::OrderTooLarge(7))));
        assert!(partitions(0).is_err());
    }

    #[test]
    fn partitions_of_a_sparse_subset() {
        let p = partitions_of(0b1010).unwrap();
        assert_eq!(p, vec![vec![0b1010], vec![0b0010, 0b1000]]);
        assert_eq!(subset_label(0b101), "1-3");
        assert_eq!(subsets_by_size(2), vec![0b01, 0b10, 0b11]);
    }
}

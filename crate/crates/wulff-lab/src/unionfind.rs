//! Disjoint-set forest with path halving and union by size.

#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind { parent: (0..n as u32).collect(), size: vec![1; n] }
    }

    pub fn reset(&mut self) {
        for (i, p) in self.parent.iter_mut().enumerate() {
            *p = i as u32;
        }
        self.size.fill(1);
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    #[inline]
    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] as usize != x {
            let gp = self.parent[self.parent[x] as usize];
            self.parent[x] = gp;
            x = gp as usize;
        }
        x
    }

    /// Returns true when two distinct sets were merged.
    #[inline]
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra as u32;
        self.size[ra] += self.size[rb];
        true
    }

    pub fn connected(&mut self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }

    pub fn set_size(&mut self, x: usize) -> usize {
        let r = self.find(x);
        self.size[r] as usize
    }

    /// Dense labels `0..k` in order of first appearance, and k.
    pub fn labels(&mut self) -> (Vec<u32>, usize) {
        let n = self.parent.len();
        let mut map = vec![u32::MAX; n];
        let mut out = vec![0u32; n];
        let mut k = 0u32;
        for i in 0..n {
            let r = self.find(i);
            if map[r] == u32::MAX {
                map[r] = k;
                k += 1;
            }
            out[i] = map[r];
        }
        (out, k as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matches_naive_components(n in 1usize..40, pairs in proptest::collection::vec((0usize..40, 0usize..40), 0..60)) {
            let mut uf = UnionFind::new(n);
            let mut naive: Vec<usize> = (0..n).collect();
            for &(a, b) in &pairs {
                let (a, b) = (a % n, b % n);
                uf.union(a, b);
                let (la, lb) = (naive[a], naive[b]);
                for x in naive.iter_mut() {
                    if *x == lb { *x = la; }
                }
            }
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(uf.connected(i, j), naive[i] == naive[j]);
                }
            }
        }
    }
}

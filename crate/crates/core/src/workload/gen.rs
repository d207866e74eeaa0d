//! Synthetic workloads: a counter vector, an open-addressing hash table and
//! a red-black tree, all laid out in the home region.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Address, LineValue};
use crate::engine::{Suspend, ThreadProgram, TxMem, TxSpec, Workload};

use super::WorkloadSpec;

type R<T> = std::result::Result<T, Suspend>;

/// Plain memory over a home vector, for building initial states and
/// reading logical contents back out of images.
pub struct DirectMem<'a>(pub &'a mut [LineValue]);

impl TxMem for DirectMem<'_> {
    fn read(&mut self, addr: Address) -> R<LineValue> {
        Ok(self.0[addr.0 as usize])
    }

    fn write(&mut self, addr: Address, value: LineValue) -> R<()> {
        self.0[addr.0 as usize] = value;
        Ok(())
    }
}

fn reads_for(spec: &WorkloadSpec) -> usize {
    let r = spec.read_write_ratio.clamp(0.0, 0.95);
    (spec.writes_per_tx as f64 * r / (1.0 - r)).round() as usize
}

fn distribute(spec: &WorkloadSpec, mut make: impl FnMut(usize, &mut ChaCha8Rng) -> TxSpec) -> Vec<ThreadProgram> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut threads = vec![ThreadProgram::default(); spec.threads];
    for i in 0..spec.tx_count {
        let tx = make(i, &mut rng);
        threads[i % spec.threads]
            .items
            .push(crate::engine::ProgramItem::Tx(tx));
    }
    threads
}

/// Each transaction increments `writes_per_tx` distinct counters and reads
/// a few more. Increments commute, so every serial order ends in the same
/// state.
pub fn counter_vector(spec: &WorkloadSpec) -> Workload {
    let lines = spec.table_lines as usize;
    let writes = spec.writes_per_tx.min(lines);
    let reads = reads_for(spec);
    let threads = distribute(spec, |i, rng| {
        let w: Vec<Address> = sample(rng, lines, writes)
            .into_iter()
            .map(|a| Address(a as u64))
            .collect();
        let r: Vec<Address> = (0..reads)
            .map(|_| Address(rng.gen_range(0..lines) as u64))
            .collect();
        TxSpec::new(format!("inc{i}"), move |m| {
            for &a in &r {
                m.read(a)?;
            }
            for &a in &w {
                let v = m.read(a)?;
                m.write(a, v + 1)?;
            }
            Ok(())
        })
    });
    Workload {
        threads,
        initial_home: Vec::new(),
    }
}

/// Hash table slot: `key << 32 | count`, zero when empty.
fn ht_probe(m: &mut dyn TxMem, lines: u64, key: u64) -> R<(Address, LineValue)> {
    let mut i = hash(key) % lines;
    loop {
        let a = Address(i);
        let v = m.read(a)?;
        if v == 0 || v >> 32 == key {
            return Ok((a, v));
        }
        i = (i + 1) % lines;
    }
}

fn hash(key: u64) -> u64 {
    key.wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 17
}

/// Upserts with linear probing: each write bumps the count stored with a
/// key, inserting it if absent. Keys are drawn from half the table so the
/// load factor stays at or below one half.
pub fn hashtable(spec: &WorkloadSpec) -> Workload {
    let lines = spec.table_lines;
    let keyspace = (lines / 2).max(1);
    let reads = reads_for(spec);
    let writes = spec.writes_per_tx;
    let threads = distribute(spec, |i, rng| {
        let up: Vec<u64> = (0..writes).map(|_| rng.gen_range(1..=keyspace)).collect();
        let look: Vec<u64> = (0..reads).map(|_| rng.gen_range(1..=keyspace)).collect();
        TxSpec::new(format!("ht{i}"), move |m| {
            for &k in &look {
                ht_probe(m, lines, k)?;
            }
            for &k in &up {
                let (a, v) = ht_probe(m, lines, k)?;
                let count = if v == 0 { 1 } else { (v & 0xffff_ffff) + 1 };
                m.write(a, k << 32 | count)?;
            }
            Ok(())
        })
    });
    Workload {
        threads,
        initial_home: Vec::new(),
    }
}

/// Sorted `(key, count)` pairs held by a hash table image.
pub fn hashtable_contents(home: &[LineValue], lines: u64) -> Vec<(u64, u64)> {
    let mut v: Vec<(u64, u64)> = home[..lines as usize]
        .iter()
        .filter(|&&x| x != 0)
        .map(|&x| (x >> 32, x & 0xffff_ffff))
        .collect();
    v.sort_unstable();
    v
}

/// Red-black tree over the home region. Line 0 holds the root; node `n`
/// (1-based, 0 is nil) occupies four lines: key, left, right, and
/// `parent << 1 | red`.
pub struct RbTree<'m> {
    m: &'m mut dyn TxMem,
}

const KEY: u64 = 0;
const LEFT: u64 = 1;
const RIGHT: u64 = 2;
const PC: u64 = 3;

pub fn rbtree_lines(nodes: u64) -> u64 {
    1 + 4 * nodes
}

fn field(n: u64, f: u64) -> Address {
    debug_assert!(n > 0);
    Address(1 + (n - 1) * 4 + f)
}

impl<'m> RbTree<'m> {
    pub fn new(m: &'m mut dyn TxMem) -> Self {
        Self { m }
    }

    fn get(&mut self, n: u64, f: u64) -> R<u64> {
        self.m.read(field(n, f))
    }

    fn set(&mut self, n: u64, f: u64, v: u64) -> R<()> {
        self.m.write(field(n, f), v)
    }

    fn root(&mut self) -> R<u64> {
        self.m.read(Address(0))
    }

    fn set_root(&mut self, n: u64) -> R<()> {
        self.m.write(Address(0), n)
    }

    fn parent(&mut self, n: u64) -> R<u64> {
        Ok(self.get(n, PC)? >> 1)
    }

    fn red(&mut self, n: u64) -> R<bool> {
        Ok(n != 0 && self.get(n, PC)? & 1 == 1)
    }

    fn set_parent(&mut self, n: u64, p: u64) -> R<()> {
        let pc = self.get(n, PC)?;
        self.set(n, PC, p << 1 | (pc & 1))
    }

    fn set_red(&mut self, n: u64, red: bool) -> R<()> {
        let pc = self.get(n, PC)?;
        if pc & 1 != red as u64 {
            self.set(n, PC, (pc & !1) | red as u64)?;
        }
        Ok(())
    }

    /// `dir` is LEFT or RIGHT: the side `x`'s child moves up from.
    fn rotate(&mut self, x: u64, dir: u64) -> R<()> {
        let other = LEFT + RIGHT - dir;
        let y = self.get(x, other)?;
        let inner = self.get(y, dir)?;
        self.set(x, other, inner)?;
        if inner != 0 {
            self.set_parent(inner, x)?;
        }
        let xp = self.parent(x)?;
        self.set_parent(y, xp)?;
        if xp == 0 {
            self.set_root(y)?;
        } else if self.get(xp, LEFT)? == x {
            self.set(xp, LEFT, y)?;
        } else {
            self.set(xp, RIGHT, y)?;
        }
        self.set(y, dir, x)?;
        self.set_parent(x, y)
    }

    /// Inserts `key` as node `z`; returns false (and writes nothing) when
    /// the key is already present.
    pub fn insert(&mut self, z: u64, key: u64) -> R<bool> {
        let mut y = 0;
        let mut x = self.root()?;
        while x != 0 {
            y = x;
            let k = self.get(x, KEY)?;
            if key == k {
                return Ok(false);
            }
            x = self.get(x, if key < k { LEFT } else { RIGHT })?;
        }
        self.set(z, KEY, key)?;
        self.set(z, LEFT, 0)?;
        self.set(z, RIGHT, 0)?;
        self.set(z, PC, y << 1 | 1)?;
        if y == 0 {
            self.set_root(z)?;
        } else {
            let side = if key < self.get(y, KEY)? { LEFT } else { RIGHT };
            self.set(y, side, z)?;
        }
        self.fixup(z)?;
        Ok(true)
    }

    fn fixup(&mut self, mut z: u64) -> R<()> {
        loop {
            let p = self.parent(z)?;
            if !self.red(p)? {
                break;
            }
            let g = self.parent(p)?;
            let (side, other) = if self.get(g, LEFT)? == p {
                (LEFT, RIGHT)
            } else {
                (RIGHT, LEFT)
            };
            let u = self.get(g, other)?;
            if self.red(u)? {
                self.set_red(p, false)?;
                self.set_red(u, false)?;
                self.set_red(g, true)?;
                z = g;
                continue;
            }
            let mut p = p;
            if self.get(p, other)? == z {
                z = p;
                self.rotate(z, side)?;
                p = self.parent(z)?;
            }
            self.set_red(p, false)?;
            self.set_red(g, true)?;
            self.rotate(g, other)?;
        }
        let r = self.root()?;
        self.set_red(r, false)
    }

    /// In-order keys.
    pub fn keys(&mut self) -> R<Vec<u64>> {
        let mut out = Vec::new();
        let mut stack = Vec::new();
        let mut n = self.root()?;
        while n != 0 || !stack.is_empty() {
            while n != 0 {
                stack.push(n);
                n = self.get(n, LEFT)?;
            }
            let top = stack.pop().expect("non-empty");
            out.push(self.get(top, KEY)?);
            n = self.get(top, RIGHT)?;
        }
        Ok(out)
    }

    /// Checks the red-black invariants; returns the black height.
    pub fn validate(&mut self) -> R<Option<usize>> {
        let r = self.root()?;
        if self.red(r)? {
            return Ok(None);
        }
        self.black_height(r, 0, u64::MAX)
    }

    fn black_height(&mut self, n: u64, lo: u64, hi: u64) -> R<Option<usize>> {
        if n == 0 {
            return Ok(Some(1));
        }
        let k = self.get(n, KEY)?;
        if k < lo || k > hi {
            return Ok(None);
        }
        let red = self.red(n)?;
        let (l, r) = (self.get(n, LEFT)?, self.get(n, RIGHT)?);
        if red && (self.red(l)? || self.red(r)?) {
            return Ok(None);
        }
        for c in [l, r] {
            if c != 0 && self.parent(c)? != n {
                return Ok(None);
            }
        }
        let hl = self.black_height(l, lo, k.saturating_sub(1))?;
        let hr = self.black_height(r, k + 1, hi)?;
        Ok(match (hl, hr) {
            (Some(a), Some(b)) if a == b => Some(a + usize::from(!red)),
            _ => None,
        })
    }
}

/// Seeds a tree with `table_lines` random keys, then runs `tx_count`
/// inserts of fresh random keys. Node ids are preassigned so inserts share
/// no allocator line.
pub fn rbtree(spec: &WorkloadSpec) -> (Workload, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let seeded = spec.table_lines;
    let nodes = seeded + spec.tx_count as u64;
    let lines = rbtree_lines(nodes);
    let mut home = vec![0; lines as usize];
    {
        let mut mem = DirectMem(&mut home);
        let mut t = RbTree::new(&mut mem);
        for n in 1..=seeded {
            let k = rng.gen_range(1..u32::MAX as u64);
            t.insert(n, k).expect("direct memory never suspends");
        }
    }
    let initial_home = home
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0)
        .map(|(a, v)| (Address(a as u64), *v))
        .collect();
    let threads = distribute(spec, |i, rng| {
        let key = rng.gen_range(1..u32::MAX as u64);
        let node = seeded + 1 + i as u64;
        TxSpec::new(format!("ins{i}"), move |m| {
            RbTree::new(m).insert(node, key)?;
            Ok(())
        })
    });
    (
        Workload {
            threads,
            initial_home,
        },
        lines,
    )
}

/// In-order keys of a tree image.
pub fn rbtree_keys(home: &[LineValue]) -> Vec<u64> {
    let mut copy = home.to_vec();
    let mut mem = DirectMem(&mut copy);
    RbTree::new(&mut mem)
        .keys()
        .expect("direct memory never suspends")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rbtree_stays_balanced_and_sorted() {
        let mut home = vec![0; rbtree_lines(500) as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut keys = Vec::new();
        {
            let mut mem = DirectMem(&mut home);
            let mut t = RbTree::new(&mut mem);
            for n in 1..=500 {
                let k = rng.gen_range(1..10_000);
                if t.insert(n, k).unwrap() {
                    keys.push(k);
                }
            }
            assert!(t.validate().unwrap().is_some());
        }
        keys.sort_unstable();
        assert_eq!(rbtree_keys(&home), keys);
    }

    #[test]
    fn hashtable_probe_finds_existing_key() {
        let mut home = vec![0; 16];
        let mut mem = DirectMem(&mut home);
        for k in [3, 19, 3] {
            let (a, v) = ht_probe(&mut mem, 16, k).unwrap();
            let c = if v == 0 { 1 } else { (v & 0xffff_ffff) + 1 };
            mem.write(a, k << 32 | c).unwrap();
        }
        assert_eq!(hashtable_contents(&home, 16), vec![(3, 2), (19, 1)]);
    }
}

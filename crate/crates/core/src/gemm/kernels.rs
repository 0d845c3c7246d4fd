//! Kernel bodies, generic over the popcount implementation so that the
//! hardware variant can be compiled under `#[target_feature]`.

use super::BlockConfig;
use crate::bitpack::popcount_software;

pub(super) struct Problem<'a> {
    /// Left operand, row-packed: `a[m·words + w]`.
    pub a: &'a [u64],
    /// Right operand, word-major: `b[w·n + col]`.
    pub b: &'a [u64],
    pub n: usize,
    pub words: usize,
}

#[derive(Clone, Copy)]
pub(super) enum Variant {
    Base,
    Blocked,
    Unrolled,
}

trait Popcount {
    fn count(x: u64) -> u32;
}

struct Hardware;
struct Software;

impl Popcount for Hardware {
    #[inline(always)]
    fn count(x: u64) -> u32 {
        x.count_ones()
    }
}

impl Popcount for Software {
    #[inline(always)]
    fn count(x: u64) -> u32 {
        popcount_software(x)
    }
}

/// Fills `out`, the rows `row0..row0 + out.len()/n` of C.
pub(super) fn run(
    variant: Variant,
    p: &Problem<'_>,
    row0: usize,
    out: &mut [u32],
    block: &BlockConfig,
    hardware: bool,
) {
    if hardware {
        #[cfg(target_arch = "x86_64")]
        {
            // SAFETY: callers pass `hardware` only after runtime detection of popcnt.
            unsafe { run_popcnt(variant, p, row0, out, block) };
            return;
        }
        #[allow(unreachable_code)]
        {
            run_generic::<Hardware>(variant, p, row0, out, block);
            return;
        }
    }
    run_generic::<Software>(variant, p, row0, out, block);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn run_popcnt(variant: Variant, p: &Problem<'_>, row0: usize, out: &mut [u32], block: &BlockConfig) {
    run_generic::<Hardware>(variant, p, row0, out, block)
}

#[inline(always)]
fn run_generic<P: Popcount>(variant: Variant, p: &Problem<'_>, row0: usize, out: &mut [u32], block: &BlockConfig) {
    match variant {
        Variant::Base => base::<P>(p, row0, out),
        Variant::Blocked => blocked::<P>(p, row0, out, block),
        Variant::Unrolled => unrolled::<P>(p, row0, out, block),
    }
}

#[inline(always)]
fn base<P: Popcount>(p: &Problem<'_>, row0: usize, out: &mut [u32]) {
    let n = p.n;
    for (i, c_row) in out.chunks_exact_mut(n).enumerate() {
        let m = row0 + i;
        for w in 0..p.words {
            let a_part = p.a[m * p.words + w];
            let b_row = &p.b[w * n..(w + 1) * n];
            for (c, &bw) in c_row.iter_mut().zip(b_row) {
                *c += P::count(!(a_part ^ bw));
            }
        }
    }
}

/// Copies the `w0..w1` × `n0..n1` tile of B into `tile`, contiguous with
/// row stride `n1 − n0`.
#[inline(always)]
fn load_tile(p: &Problem<'_>, w0: usize, w1: usize, n0: usize, n1: usize, tile: &mut Vec<u64>) {
    tile.clear();
    for w in w0..w1 {
        tile.extend_from_slice(&p.b[w * p.n + n0..w * p.n + n1]);
    }
}

#[inline(always)]
fn blocked<P: Popcount>(p: &Problem<'_>, row0: usize, out: &mut [u32], block: &BlockConfig) {
    let n = p.n;
    let rows = out.len() / n;
    let mut tile = Vec::with_capacity(block.words.min(p.words) * block.cols.min(n));
    for n0 in (0..n).step_by(block.cols) {
        let n1 = (n0 + block.cols).min(n);
        let width = n1 - n0;
        for w0 in (0..p.words).step_by(block.words) {
            let w1 = (w0 + block.words).min(p.words);
            load_tile(p, w0, w1, n0, n1, &mut tile);
            for m0 in (0..rows).step_by(block.rows) {
                let m1 = (m0 + block.rows).min(rows);
                for i in m0..m1 {
                    let a_row = &p.a[(row0 + i) * p.words + w0..(row0 + i) * p.words + w1];
                    let c_tile = &mut out[i * n + n0..i * n + n1];
                    for (&a_part, b_tile) in a_row.iter().zip(tile.chunks_exact(width)) {
                        for (c, &bw) in c_tile.iter_mut().zip(b_tile) {
                            *c += P::count(!(a_part ^ bw));
                        }
                    }
                }
            }
        }
    }
}

/// Blocked, with four rows of A sharing each load of B.
#[inline(always)]
fn unrolled<P: Popcount>(p: &Problem<'_>, row0: usize, out: &mut [u32], block: &BlockConfig) {
    let n = p.n;
    let rows = out.len() / n;
    let aw = |i: usize, w: usize| p.a[(row0 + i) * p.words + w];
    let mut tile = Vec::with_capacity(block.words.min(p.words) * block.cols.min(n));
    for n0 in (0..n).step_by(block.cols) {
        let n1 = (n0 + block.cols).min(n);
        let width = n1 - n0;
        for w0 in (0..p.words).step_by(block.words) {
            let w1 = (w0 + block.words).min(p.words);
            load_tile(p, w0, w1, n0, n1, &mut tile);
            for m0 in (0..rows).step_by(block.rows) {
                let m1 = (m0 + block.rows).min(rows);
                let mut i = m0;
                while i + 4 <= m1 {
                    let (c0, rest) = out[i * n..].split_at_mut(n);
                    let (c1, rest) = rest.split_at_mut(n);
                    let (c2, rest) = rest.split_at_mut(n);
                    let c3 = &mut rest[..n];
                    let (c0, c1, c2, c3) = (
                        &mut c0[n0..n1],
                        &mut c1[n0..n1],
                        &mut c2[n0..n1],
                        &mut c3[n0..n1],
                    );
                    for (w, b_tile) in (w0..w1).zip(tile.chunks_exact(width)) {
                        let (a0, a1, a2, a3) = (aw(i, w), aw(i + 1, w), aw(i + 2, w), aw(i + 3, w));
                        for j in 0..width {
                            let bw = b_tile[j];
                            c0[j] += P::count(!(a0 ^ bw));
                            c1[j] += P::count(!(a1 ^ bw));
                            c2[j] += P::count(!(a2 ^ bw));
                            c3[j] += P::count(!(a3 ^ bw));
                        }
                    }
                    i += 4;
                }
                for i in i..m1 {
                    let c_tile = &mut out[i * n + n0..i * n + n1];
                    for (w, b_tile) in (w0..w1).zip(tile.chunks_exact(width)) {
                        let a_part = aw(i, w);
                        for (c, &bw) in c_tile.iter_mut().zip(b_tile) {
                            *c += P::count(!(a_part ^ bw));
                        }
                    }
                }
            }
        }
    }
}

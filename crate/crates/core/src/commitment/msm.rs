//! Windowed multi-scalar multiplication with signed-digit recoding.
//!
//! Scalars are recoded into signed digits of `w` bits with values in
//! `[-(2^(w-1)-1), 2^(w-1)]`, so a single table of the multiples
//! `1*G .. 2^(w-1)*G` per generator covers every digit (negative digits use
//! the group inverse). Evaluation is Horner-style over the windows, from the
//! most significant down, with `w` group doublings between windows.
//!
//! The window width is selected adaptively per call: a wide window of 16
//! bits is used when all active scalars fall on the first five generators
//! (the extension-node and key-embedding commitments), since the table for
//! those five fixed generators costs only `5 * 2^15` points. Computations
//! that may involve all 256 generators use a 10-bit window.

use crate::commitment::basis::GeneratorBasis;
use crate::commitment::group::GroupElement;
use crate::commitment::scalar::Scalar;
use crate::error::{Error, Result};

/// Scalars span at most 253 bits.
const SCALAR_BITS: usize = 253;

/// Number of generators covered by the wide window.
pub const WIDE_WINDOW_GENERATORS: usize = 5;

/// Window widths supported by the precomputed tables.
pub const WINDOW_NARROW: u32 = 10;
pub const WINDOW_WIDE: u32 = 16;

/// Precomputed per-generator multiple tables for one window width.
struct WindowTable {
    window_bits: u32,
    /// `tables[g][d-1] = d * G_g` for `d` in `1 ..= 2^(w-1)`.
    tables: Vec<Vec<GroupElement>>,
}

impl WindowTable {
    fn build(basis: &GeneratorBasis, window_bits: u32, generators: usize) -> WindowTable {
        let half = 1usize << (window_bits - 1);
        let mut tables = Vec::with_capacity(generators);
        for g in 0..generators {
            let base = *basis.generator(g);
            let mut multiples = Vec::with_capacity(half);
            let mut acc = base;
            multiples.push(acc);
            for _ in 1..half {
                acc = acc.add(&base);
                multiples.push(acc);
            }
            tables.push(multiples);
        }
        WindowTable {
            window_bits,
            tables,
        }
    }

    fn entry_count(&self) -> usize {
        self.tables.iter().map(Vec::len).sum()
    }
}

/// MSM configuration: the window tables derived from a basis.
pub struct MsmConfig {
    narrow: WindowTable,
    wide: WindowTable,
}

impl MsmConfig {
    pub fn build(basis: &GeneratorBasis) -> MsmConfig {
        let wide_coverage = basis.len().min(WIDE_WINDOW_GENERATORS);
        MsmConfig {
            narrow: WindowTable::build(basis, WINDOW_NARROW, basis.len()),
            wide: WindowTable::build(basis, WINDOW_WIDE, wide_coverage),
        }
    }

    /// Points held by the wide-window table (5 * 2^15 for a 256-wide basis).
    pub fn wide_table_points(&self) -> usize {
        self.wide.entry_count()
    }

    /// Window width that would be selected for the given scalars.
    pub fn select_window(&self, scalars: &[Scalar]) -> u32 {
        let highest_active = scalars.iter().rposition(|s| !s.is_zero());
        match highest_active {
            Some(i) if i < self.wide.tables.len() => WINDOW_WIDE,
            None => WINDOW_WIDE,
            _ => WINDOW_NARROW,
        }
    }

    /// Computes `sum_i scalars[i] * G_i` over the basis the tables were
    /// built from. `scalars` must not exceed the basis length.
    pub fn msm(&self, scalars: &[Scalar]) -> Result<GroupElement> {
        if scalars.len() > self.narrow.tables.len() {
            return Err(Error::invalid(format!(
                "msm length {} exceeds basis length {}",
                scalars.len(),
                self.narrow.tables.len()
            )));
        }
        let table = if self.select_window(scalars) == WINDOW_WIDE {
            &self.wide
        } else {
            &self.narrow
        };
        Ok(windowed_msm(scalars, table))
    }

    /// Forces a specific window width; used by the cross-window oracle
    /// tests. Errors if the requested table does not cover the active
    /// generators.
    pub fn msm_with_window(&self, scalars: &[Scalar], window_bits: u32) -> Result<GroupElement> {
        let table = match window_bits {
            WINDOW_NARROW => &self.narrow,
            WINDOW_WIDE => &self.wide,
            other => {
                return Err(Error::invalid(format!("unsupported window width {other}")));
            }
        };
        let active = scalars.iter().rposition(|s| !s.is_zero());
        if let Some(i) = active {
            if i >= table.tables.len() {
                return Err(Error::invalid(format!(
                    "window {window_bits} covers {} generators, scalar at {} is active",
                    table.tables.len(),
                    i
                )));
            }
        }
        Ok(windowed_msm(scalars, table))
    }
}

/// Recodes a scalar into signed `w`-bit digits, least significant first.
/// Digits lie in `[-(2^(w-1)-1), 2^(w-1)]`.
fn recode(scalar: &Scalar, window_bits: u32) -> Vec<i32> {
    let bytes = scalar.to_bytes();
    let w = window_bits as usize;
    let windows = SCALAR_BITS.div_ceil(w) + 1;
    let half = 1i64 << (w - 1);
    let full = 1i64 << w;

    let mut digits = Vec::with_capacity(windows);
    let mut carry = 0i64;
    for j in 0..windows {
        let chunk = extract_bits(&bytes, j * w, w) as i64 + carry;
        if chunk > half {
            digits.push((chunk - full) as i32);
            carry = 1;
        } else {
            digits.push(chunk as i32);
            carry = 0;
        }
    }
    debug_assert_eq!(carry, 0, "scalar exceeds recoding range");
    digits
}

fn extract_bits(bytes: &[u8; 32], start: usize, count: usize) -> u64 {
    let mut out = 0u64;
    for i in 0..count {
        let bit = start + i;
        if bit >= 256 {
            break;
        }
        if bytes[bit / 8] >> (bit % 8) & 1 == 1 {
            out |= 1 << i;
        }
    }
    out
}

fn windowed_msm(scalars: &[Scalar], table: &WindowTable) -> GroupElement {
    let w = table.window_bits;
    let digits: Vec<(usize, Vec<i32>)> = scalars
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_zero())
        .map(|(i, s)| (i, recode(s, w)))
        .collect();
    if digits.is_empty() {
        return GroupElement::IDENTITY;
    }
    let windows = digits[0].1.len();

    let mut acc = GroupElement::IDENTITY;
    for j in (0..windows).rev() {
        if !acc.is_identity() {
            for _ in 0..w {
                acc = acc.add(&acc);
            }
        }
        for (g, ds) in &digits {
            let d = ds[j];
            if d == 0 {
                continue;
            }
            let m = &table.tables[*g][d.unsigned_abs() as usize - 1];
            if d > 0 {
                acc = acc.add(m);
            } else {
                acc = acc.add(&m.neg());
            }
        }
    }
    acc
}

/// Reference MSM using double-and-add over group operations only. This is
/// the independent oracle for the windowed path; it never takes the
/// backend's scalar-multiplication shortcut.
pub fn naive_msm(scalars: &[Scalar], basis: &GeneratorBasis) -> Result<GroupElement> {
    if scalars.len() > basis.len() {
        return Err(Error::invalid("msm length exceeds basis length"));
    }
    let mut acc = GroupElement::IDENTITY;
    for (s, g) in scalars.iter().zip(basis.generators()) {
        acc = acc.add(&double_and_add(g, s));
    }
    Ok(acc)
}

fn double_and_add(base: &GroupElement, scalar: &Scalar) -> GroupElement {
    let bytes = scalar.to_bytes();
    let mut acc = GroupElement::IDENTITY;
    for byte in bytes.iter().rev() {
        for bit in (0..8).rev() {
            acc = acc.add(&acc);
            if byte >> bit & 1 == 1 {
                acc = acc.add(base);
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scalar(rng: &mut ChaCha8Rng) -> Scalar {
        let mut bytes = [0u8; 32];
        rng.fill(&mut bytes);
        Scalar::from_bytes_le(&bytes)
    }

    #[test]
    fn single_unit_scalar_returns_generator() {
        let basis = GeneratorBasis::derive(b"msm", 8).unwrap();
        let config = MsmConfig::build(&basis);
        let r = config.msm(&[Scalar::from_u64(1)]).unwrap();
        assert_eq!(r, *basis.generator(0));
    }

    #[test]
    fn wide_table_size_matches_contract() {
        let basis = GeneratorBasis::derive(b"msm", 256).unwrap();
        let config = MsmConfig::build(&basis);
        assert_eq!(config.wide_table_points(), 5 * (1 << 15));
    }

    #[test]
    fn window_selection_follows_active_generators() {
        let basis = GeneratorBasis::derive(b"msm", 256).unwrap();
        let config = MsmConfig::build(&basis);
        let mut scalars = vec![Scalar::ZERO; 256];
        scalars[3] = Scalar::from_u64(9);
        assert_eq!(config.select_window(&scalars), WINDOW_WIDE);
        scalars[17] = Scalar::from_u64(1);
        assert_eq!(config.select_window(&scalars), WINDOW_NARROW);
    }

    #[test]
    fn windowed_matches_naive_for_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let basis = GeneratorBasis::derive(b"msm", 64).unwrap();
        let config = MsmConfig::build(&basis);
        for _ in 0..20 {
            let scalars: Vec<Scalar> = (0..64).map(|_| random_scalar(&mut rng)).collect();
            let fast = config.msm(&scalars).unwrap();
            let slow = naive_msm(&scalars, &basis).unwrap();
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn cross_window_agreement_on_five_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let basis = GeneratorBasis::derive(b"msm", 256).unwrap();
        let config = MsmConfig::build(&basis);
        for _ in 0..10 {
            let mut scalars = vec![Scalar::ZERO; 5];
            for s in scalars.iter_mut() {
                *s = random_scalar(&mut rng);
            }
            let wide = config.msm_with_window(&scalars, WINDOW_WIDE).unwrap();
            let narrow = config.msm_with_window(&scalars, WINDOW_NARROW).unwrap();
            assert_eq!(wide, narrow);
        }
    }

    #[test]
    fn length_overflow_is_rejected() {
        let basis = GeneratorBasis::derive(b"msm", 4).unwrap();
        let config = MsmConfig::build(&basis);
        let scalars = vec![Scalar::from_u64(1); 5];
        assert!(config.msm(&scalars).is_err());
    }

    #[test]
    fn recode_digits_reconstruct_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for w in [10u32, 16] {
            for _ in 0..50 {
                let s = random_scalar(&mut rng);
                let digits = recode(&s, w);
                let half = 1i64 << (w - 1);
                // Reconstruct sum(d_j * 2^(j*w)) via field arithmetic.
                let mut acc = Scalar::ZERO;
                let mut base = Scalar::ONE;
                let window_factor = Scalar::from_u64(1u64 << w);
                for d in &digits {
                    assert!((*d as i64) <= half && (*d as i64) > -half);
                    let term = if *d >= 0 {
                        Scalar::from_u64(*d as u64)
                    } else {
                        Scalar::from_u64((-*d) as u64).neg()
                    };
                    acc = acc.add(&term.mul(&base));
                    base = base.mul(&window_factor);
                }
                assert_eq!(acc, s);
            }
        }
    }
}

//! Partial sub-integer (PSI) weight decomposition.
//!
//! A weight `w` is split into `2N` signed powers of two so that
//! `w * x == sum(s * (x << n))` can be evaluated with two barrel shifters per
//! pass and no multiplier. INT5 weights use one pass (two terms), INT8 weights
//! two passes (four terms).
//!
//! Decomposition is an exhaustive minimisation over every multiset of legal
//! terms, precomputed once per mode. Among candidates with the smallest
//! reconstruction error it prefers, in order: the smaller magnitude (round
//! toward zero), fewer non-zero terms, the lexicographically smallest sorted
//! shift list, then the smallest sign list.

use std::fmt;
use std::ops::RangeInclusive;
use std::sync::OnceLock;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TmaError};
use crate::tensor::Tensor;

pub const MAX_TERMS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionMode {
    Int5,
    Int8,
}

impl PrecisionMode {
    pub const ALL: [PrecisionMode; 2] = [PrecisionMode::Int5, PrecisionMode::Int8];

    /// Number of PSI passes `N` (SEL_W_BIT settings).
    pub const fn passes(self) -> usize {
        match self {
            PrecisionMode::Int5 => 1,
            PrecisionMode::Int8 => 2,
        }
    }

    pub const fn n_terms(self) -> usize {
        2 * self.passes()
    }

    pub const fn bits(self) -> u32 {
        match self {
            PrecisionMode::Int5 => 5,
            PrecisionMode::Int8 => 8,
        }
    }

    pub const fn max_shift(self) -> u8 {
        self.bits() as u8 - 1
    }

    pub const fn weight_min(self) -> i32 {
        -(1 << (self.bits() - 1))
    }

    pub const fn weight_max(self) -> i32 {
        (1 << (self.bits() - 1)) - 1
    }

    pub fn weight_range(self) -> RangeInclusive<i32> {
        self.weight_min()..=self.weight_max()
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "int5" => Some(PrecisionMode::Int5),
            "int8" => Some(PrecisionMode::Int8),
            _ => None,
        }
    }
}

impl fmt::Display for PrecisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrecisionMode::Int5 => f.write_str("int5"),
            PrecisionMode::Int8 => f.write_str("int8"),
        }
    }
}

/// One signed power-of-two term `sign * 2^shift`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PsiTerm {
    sign: i8,
    shift: u8,
}

impl PsiTerm {
    pub const ZERO: PsiTerm = PsiTerm { sign: 0, shift: 0 };

    /// A zero sign always yields the canonical zero term.
    pub fn new(sign: i8, shift: u8) -> Result<Self> {
        if !(-1..=1).contains(&sign) {
            return Err(TmaError::OutOfRange {
                what: "PSI sign",
                value: sign as i64,
                min: -1,
                max: 1,
            });
        }
        if sign == 0 {
            return Ok(Self::ZERO);
        }
        if shift > PrecisionMode::Int8.max_shift() {
            return Err(TmaError::OutOfRange {
                what: "PSI shift",
                value: shift as i64,
                min: 0,
                max: PrecisionMode::Int8.max_shift() as i64,
            });
        }
        Ok(Self { sign, shift })
    }

    pub fn sign(self) -> i8 {
        self.sign
    }

    pub fn shift(self) -> u8 {
        self.shift
    }

    pub fn value(self) -> i32 {
        self.sign as i32 * (1 << self.shift)
    }

    pub fn is_zero(self) -> bool {
        self.sign == 0
    }
}

/// A weight held as `2N` PSI terms. Pass `k` (0-based) uses terms `2k` and `2k+1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PsiWeight {
    mode: PrecisionMode,
    terms: [PsiTerm; MAX_TERMS],
    original: i32,
}

impl Default for PsiWeight {
    fn default() -> Self {
        Self::zero(PrecisionMode::Int5)
    }
}

impl PsiWeight {
    pub fn zero(mode: PrecisionMode) -> Self {
        Self {
            mode,
            terms: [PsiTerm::ZERO; MAX_TERMS],
            original: 0,
        }
    }

    /// Builds a weight from explicit terms; `original` is what the terms stand in for.
    pub fn from_terms(mode: PrecisionMode, terms: &[PsiTerm], original: i32) -> Result<Self> {
        if terms.len() != mode.n_terms() {
            return Err(TmaError::OperandCount {
                expected: mode.n_terms(),
                got: terms.len(),
            });
        }
        check_weight(original, mode)?;
        let mut t = [PsiTerm::ZERO; MAX_TERMS];
        for (slot, term) in t.iter_mut().zip(terms) {
            if term.shift > mode.max_shift() {
                return Err(TmaError::OutOfRange {
                    what: "PSI shift",
                    value: term.shift as i64,
                    min: 0,
                    max: mode.max_shift() as i64,
                });
            }
            *slot = *term;
        }
        Ok(Self {
            mode,
            terms: t,
            original,
        })
    }

    pub fn mode(&self) -> PrecisionMode {
        self.mode
    }

    pub fn original(&self) -> i32 {
        self.original
    }

    pub fn terms(&self) -> &[PsiTerm] {
        &self.terms[..self.mode.n_terms()]
    }

    /// The two terms evaluated on pass `pass` (0-based).
    pub fn pass_terms(&self, pass: usize) -> [PsiTerm; 2] {
        assert!(pass < self.mode.passes(), "pass {pass} out of range");
        [self.terms[2 * pass], self.terms[2 * pass + 1]]
    }

    /// Partial weight contributed by one pass.
    pub fn pass_value(&self, pass: usize) -> i32 {
        self.pass_terms(pass).iter().map(|t| t.value()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.is_zero())
    }
}

/// Reconstructed weight of `w * x` when evaluated with `x = 1`.
pub fn reconstruct(pw: &PsiWeight) -> i32 {
    pw.terms().iter().map(|t| t.value()).sum()
}

/// Shift-and-add product; equals `reconstruct(pw) * x` exactly.
pub fn psi_multiply(pw: &PsiWeight, x: u8) -> i32 {
    pw.terms()
        .iter()
        .map(|t| t.sign as i32 * ((x as i32) << t.shift))
        .sum()
}

fn check_weight(w: i32, mode: PrecisionMode) -> Result<()> {
    if mode.weight_range().contains(&w) {
        Ok(())
    } else {
        Err(TmaError::OutOfRange {
            what: match mode {
                PrecisionMode::Int5 => "INT5 weight",
                PrecisionMode::Int8 => "INT8 weight",
            },
            value: w as i64,
            min: mode.weight_min() as i64,
            max: mode.weight_max() as i64,
        })
    }
}

pub fn decompose_weight(w: i32, mode: PrecisionMode) -> Result<PsiWeight> {
    check_weight(w, mode)?;
    let table = decomposition_table(mode);
    let terms = table[(w - mode.weight_min()) as usize];
    Ok(PsiWeight {
        mode,
        terms,
        original: w,
    })
}

fn decomposition_table(mode: PrecisionMode) -> &'static [[PsiTerm; MAX_TERMS]] {
    static INT5: OnceLock<Vec<[PsiTerm; MAX_TERMS]>> = OnceLock::new();
    static INT8: OnceLock<Vec<[PsiTerm; MAX_TERMS]>> = OnceLock::new();
    let cell = match mode {
        PrecisionMode::Int5 => &INT5,
        PrecisionMode::Int8 => &INT8,
    };
    cell.get_or_init(|| build_table(mode))
}

#[derive(Clone)]
struct Candidate {
    value: i32,
    nonzero: usize,
    shifts: Vec<u8>,
    signs: Vec<i8>,
    terms: [PsiTerm; MAX_TERMS],
}

/// Every multiset of `n_terms` legal terms, in canonical order.
fn candidates(mode: PrecisionMode) -> Vec<Candidate> {
    let mut options = vec![PsiTerm::ZERO];
    for shift in 0..=mode.max_shift() {
        options.push(PsiTerm { sign: 1, shift });
        options.push(PsiTerm { sign: -1, shift });
    }
    let n = mode.n_terms();
    let mut out = Vec::new();
    let mut idx = vec![0usize; n];
    loop {
        let mut chosen: Vec<PsiTerm> = idx.iter().map(|&i| options[i]).collect();
        // Non-zero terms by descending shift, zeros last.
        chosen.sort_by(|a, b| {
            a.is_zero()
                .cmp(&b.is_zero())
                .then(b.shift.cmp(&a.shift))
                .then(b.sign.cmp(&a.sign))
        });
        let mut terms = [PsiTerm::ZERO; MAX_TERMS];
        terms[..n].copy_from_slice(&chosen);
        let mut shifts: Vec<u8> = chosen.iter().filter(|t| !t.is_zero()).map(|t| t.shift).collect();
        shifts.sort_unstable();
        out.push(Candidate {
            value: chosen.iter().map(|t| t.value()).sum(),
            nonzero: shifts.len(),
            shifts,
            signs: chosen.iter().map(|t| t.sign).collect(),
            terms,
        });

        // Next non-decreasing index tuple.
        let mut pos = n;
        while pos > 0 && idx[pos - 1] == options.len() - 1 {
            pos -= 1;
        }
        if pos == 0 {
            break;
        }
        idx[pos - 1] += 1;
        let v = idx[pos - 1];
        for slot in &mut idx[pos..] {
            *slot = v;
        }
    }
    out
}

fn build_table(mode: PrecisionMode) -> Vec<[PsiTerm; MAX_TERMS]> {
    let cands = candidates(mode);
    mode.weight_range()
        .map(|w| {
            cands
                .iter()
                .min_by(|a, b| {
                    let ka = ((w - a.value).abs(), a.value.abs(), a.nonzero);
                    let kb = ((w - b.value).abs(), b.value.abs(), b.nonzero);
                    ka.cmp(&kb)
                        .then_with(|| a.shifts.cmp(&b.shifts))
                        .then_with(|| a.signs.cmp(&b.signs))
                })
                .expect("candidate set is never empty")
                .terms
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorReport {
    pub weight: i32,
    pub effective: i32,
    pub abs_error: i32,
    /// `abs_error / |weight|`, zero for a zero weight.
    pub rel_error: Ratio<i64>,
}

impl ErrorReport {
    pub fn for_weight(pw: &PsiWeight) -> Self {
        let effective = reconstruct(pw);
        let abs_error = (effective - pw.original).abs();
        let rel_error = if pw.original == 0 {
            Ratio::from_integer(0)
        } else {
            Ratio::new(abs_error as i64, pw.original.abs() as i64)
        };
        Self {
            weight: pw.original,
            effective,
            abs_error,
            rel_error,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.abs_error == 0
    }
}

/// An inexact entry of a decomposed tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InexactEntry {
    pub index: Vec<usize>,
    pub report: ErrorReport,
}

pub fn decompose_tensor(
    weights: &Tensor<i32>,
    mode: PrecisionMode,
) -> Result<(Tensor<PsiWeight>, Vec<InexactEntry>)> {
    let mut out = Vec::with_capacity(weights.len());
    let mut inexact = Vec::new();
    for (i, &w) in weights.data().iter().enumerate() {
        let pw = decompose_weight(w, mode).map_err(|e| TmaError::AtIndex {
            index: weights.unravel(i),
            source: Box::new(e),
        })?;
        let report = ErrorReport::for_weight(&pw);
        if !report.is_exact() {
            inexact.push(InexactEntry {
                index: weights.unravel(i),
                report,
            });
        }
        out.push(pw);
    }
    Ok((Tensor::from_vec(weights.dims(), out)?, inexact))
}

/// Largest relative multiplication error over a set of weights.
pub fn max_relative_error(
    weights: impl IntoIterator<Item = i32>,
    mode: PrecisionMode,
) -> Result<Ratio<i64>> {
    let mut worst = Ratio::from_integer(0);
    for w in weights {
        let r = ErrorReport::for_weight(&decompose_weight(w, mode)?).rel_error;
        if r > worst {
            worst = r;
        }
    }
    Ok(worst)
}

pub fn worst_case_relative_error(mode: PrecisionMode) -> Ratio<i64> {
    max_relative_error(mode.weight_range(), mode).expect("range weights always decompose")
}

/// Error report for every weight in the mode's range.
pub fn error_table(mode: PrecisionMode) -> Vec<ErrorReport> {
    mode.weight_range()
        .map(|w| ErrorReport::for_weight(&decompose_weight(w, mode).expect("in range")))
        .collect()
}

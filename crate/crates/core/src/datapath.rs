//! Bit-level models of the multiplier-less datapath: GEN_NEG, the SAM block,
//! the carry-save multi-operand adders and the neural element (NE).
//!
//! Sums are exact; the 18-bit output width of MOA18 is reported through
//! [`MoaResult::overflow18`] rather than enforced by wrapping.

use crate::error::{Result, TmaError};
use crate::psiquant::{PsiTerm, PsiWeight};

/// Register width of a negated activation; -255 needs 9 bits.
pub const NEG_WIDTH: u32 = 9;
/// Low-part width of the MOA18 operands. The sign of each PSI is carried
/// separately through NUM_P, so magnitudes up to `255 << 7` fit.
pub const MOA18_LOW_WIDTH: u32 = 15;
pub const MOA18_OUT_WIDTH: u32 = 18;
/// Low-part width of the MOA66 operands (NE outputs, 32-bit Psum, bias).
pub const MOA66_LOW_WIDTH: u32 = 32;
pub const NES_PER_COLUMN: usize = 64;

pub fn fits_signed(value: i64, bits: u32) -> bool {
    let half = 1i64 << (bits - 1);
    (-half..half).contains(&value)
}

/// Error unless `value` fits a signed register of `bits` bits.
pub fn check_width(what: &'static str, value: i64, bits: u32) -> Result<()> {
    if fits_signed(value, bits) {
        Ok(())
    } else {
        Err(TmaError::Width { what, value, bits })
    }
}

/// Two's-complement negation at [`NEG_WIDTH`] bits.
pub fn gen_neg(x: u8) -> i16 {
    let raw = (!(x as u16)).wrapping_add(1) & ((1 << NEG_WIDTH) - 1);
    // sign-extend the 9-bit pattern
    ((raw << (16 - NEG_WIDTH)) as i16) >> (16 - NEG_WIDTH)
}

/// An activation travelling through the array with its precomputed negation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ActPair {
    pub x: u8,
    pub neg_x: i16,
}

impl ActPair {
    pub fn new(x: u8) -> Self {
        Self { x, neg_x: gen_neg(x) }
    }
}

/// The 3-1 mux in front of the barrel shifters.
pub fn sam_select(sign: i8, x: u8, neg_x: i16) -> i32 {
    match sign {
        1 => x as i32,
        -1 => neg_x as i32,
        _ => 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SamState {
    weight: PsiWeight,
    input: ActPair,
}

impl SamState {
    pub fn new(weight: PsiWeight) -> Self {
        Self {
            weight,
            input: ActPair::default(),
        }
    }

    pub fn weight(&self) -> &PsiWeight {
        &self.weight
    }

    pub fn input(&self) -> ActPair {
        self.input
    }

    pub fn set_weight(&mut self, weight: PsiWeight) {
        self.weight = weight;
    }

    pub fn set_input(&mut self, input: ActPair) {
        self.input = input;
    }
}

fn shifted(term: PsiTerm, input: ActPair) -> i32 {
    sam_select(term.sign(), input.x, input.neg_x) << term.shift()
}

/// The two PSIs a SAM produces on `pass` (0-based).
pub fn sam_eval(state: &SamState, pass: usize) -> (i32, i32) {
    let [t1, t2] = state.weight.pass_terms(pass);
    (shifted(t1, state.input), shifted(t2, state.input))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoaResult {
    pub sum: i64,
    /// Number of negative operands.
    pub num_p: usize,
    /// The exact sum does not fit a signed 18-bit output.
    pub overflow18: bool,
    /// 3:2 carry-save stages used before the final two-operand add.
    pub stages: u32,
}

/// Multi-operand addition with the simplified sign extension.
///
/// Each operand contributes only its low `low_width` bits as an unsigned
/// vector; instead of sign-extending the negative ones, `NUM_P * 2^low_width`
/// is subtracted once. Operands must lie in `[-2^w, 2^w)`.
pub fn moa_reduce(operands: &[i64], low_width: u32) -> Result<MoaResult> {
    assert!((1..=40).contains(&low_width), "unsupported low width {low_width}");
    let span = 1i64 << low_width;
    let mask = (span - 1) as u64;
    let mut num_p = 0usize;
    let mut vectors = Vec::with_capacity(operands.len());
    for &op in operands {
        if !(-span..span).contains(&op) {
            return Err(TmaError::OutOfRange {
                what: "MOA operand",
                value: op,
                min: -span,
                max: span - 1,
            });
        }
        if op < 0 {
            num_p += 1;
        }
        vectors.push(op as u64 & mask);
    }

    let mut stages = 0;
    while vectors.len() > 2 {
        let mut next = Vec::with_capacity(vectors.len() * 2 / 3 + 2);
        let mut groups = vectors.chunks_exact(3);
        for g in &mut groups {
            let (a, b, c) = (g[0], g[1], g[2]);
            next.push(a ^ b ^ c);
            next.push(((a & b) | (a & c) | (b & c)) << 1);
        }
        next.extend_from_slice(groups.remainder());
        vectors = next;
        stages += 1;
    }
    let low_sum = vectors.iter().fold(0u64, |acc, v| acc.wrapping_add(*v));
    let sum = low_sum as i64 - num_p as i64 * span;
    Ok(MoaResult {
        sum,
        num_p,
        overflow18: !fits_signed(sum, MOA18_OUT_WIDTH),
        stages,
    })
}

pub fn moa18(psis: &[i64]) -> Result<MoaResult> {
    if psis.len() != 18 {
        return Err(TmaError::OperandCount {
            expected: 18,
            got: psis.len(),
        });
    }
    moa_reduce(psis, MOA18_LOW_WIDTH)
}

/// Column adder: 64 NE outputs plus the reloaded Psum and the bias.
pub fn moa66(ne_outputs: &[i64], psum: i64, bias: i64) -> Result<i64> {
    if ne_outputs.len() != NES_PER_COLUMN {
        return Err(TmaError::OperandCount {
            expected: NES_PER_COLUMN,
            got: ne_outputs.len(),
        });
    }
    let mut ops = [0i64; NES_PER_COLUMN + 2];
    ops[..NES_PER_COLUMN].copy_from_slice(ne_outputs);
    ops[NES_PER_COLUMN] = psum;
    ops[NES_PER_COLUMN + 1] = bias;
    moa_reduce(&ops, MOA66_LOW_WIDTH).map(|r| r.sum)
}

/// PSI accumulation across passes. The accumulator is cleared before pass 0,
/// so with a single INT5 pass the result is the MOA18 output itself.
pub fn psi_accumulate(acc: i64, moa_out: i64, _pass: usize) -> i64 {
    acc + moa_out
}

/// A neural element: 3x3 SAMs whose inputs form three horizontal shift chains.
/// Cell 0 of each row is the input side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NeState {
    sams: [[SamState; 3]; 3],
    pass: usize,
    psum_acc: i64,
}

impl NeState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sam(&self, row: usize, cell: usize) -> &SamState {
        &self.sams[row][cell]
    }

    pub fn set_weight(&mut self, row: usize, cell: usize, w: PsiWeight) {
        self.sams[row][cell].set_weight(w);
    }

    pub fn has_weights(&self) -> bool {
        self.sams.iter().flatten().any(|s| !s.weight.is_zero())
    }

    pub fn pass(&self) -> usize {
        self.pass
    }

    pub fn psum_acc(&self) -> i64 {
        self.psum_acc
    }

    /// One SH_EN cycle: every row chain moves one cell away from the input
    /// side, `column` enters at cell 0 and the values leaving cell 2 are returned.
    pub fn shift_in(&mut self, column: [ActPair; 3]) -> [ActPair; 3] {
        let mut evicted = [ActPair::default(); 3];
        for ((row, entering), out) in self.sams.iter_mut().zip(column).zip(&mut evicted) {
            *out = row[2].input;
            row[2].input = row[1].input;
            row[1].input = row[0].input;
            row[0].input = entering;
        }
        evicted
    }

    /// MOA18 over the 18 PSIs of pass `pass`.
    pub fn compute(&self, pass: usize) -> Result<MoaResult> {
        let mut psis = [0i64; 18];
        for (i, sam) in self.sams.iter().flatten().enumerate() {
            let (a, b) = sam_eval(sam, pass);
            psis[2 * i] = a as i64;
            psis[2 * i + 1] = b as i64;
        }
        moa18(&psis)
    }

    /// Runs one pass and folds it into the PSI accumulator.
    pub fn step_pass(&mut self, pass: usize) -> Result<MoaResult> {
        let r = self.compute(pass)?;
        if pass == 0 {
            self.psum_acc = 0;
        }
        self.psum_acc = psi_accumulate(self.psum_acc, r.sum, pass);
        self.pass = pass;
        Ok(r)
    }

    /// All passes of the weight mode; returns the accumulated dot product and
    /// whether any pass overflowed the 18-bit MOA output.
    pub fn evaluate(&mut self, passes: usize) -> Result<(i64, bool)> {
        let mut overflow = false;
        for k in 0..passes {
            overflow |= self.step_pass(k)?.overflow18;
        }
        Ok((self.psum_acc, overflow))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psiquant::{decompose_weight, reconstruct, PrecisionMode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn term(s: i8, n: u8) -> PsiTerm {
        PsiTerm::new(s, n).unwrap()
    }

    #[test]
    fn gen_neg_values() {
        assert_eq!(gen_neg(0), 0);
        assert_eq!(gen_neg(1), -1);
        assert_eq!(gen_neg(255), -255);
        for x in 0..=255u8 {
            assert_eq!(gen_neg(x) as i32, -(x as i32));
        }
    }

    #[test]
    fn mux_selects() {
        assert_eq!(sam_select(1, 100, -100), 100);
        assert_eq!(sam_select(-1, 100, -100), -100);
        assert_eq!(sam_select(0, 100, -100), 0);
    }

    #[test]
    fn sam_eval_examples() {
        let w = PsiWeight::from_terms(PrecisionMode::Int5, &[term(1, 2), term(-1, 0)], 3).unwrap();
        let mut sam = SamState::new(w);
        sam.set_input(ActPair::new(3));
        assert_eq!(sam_eval(&sam, 0), (12, -3));
        sam.set_input(ActPair::new(0));
        assert_eq!(sam_eval(&sam, 0), (0, 0));

        let big = PsiWeight::from_terms(
            PrecisionMode::Int8,
            &[term(1, 7), PsiTerm::ZERO, PsiTerm::ZERO, PsiTerm::ZERO],
            127,
        )
        .unwrap();
        let mut sam = SamState::new(big);
        sam.set_input(ActPair::new(255));
        assert_eq!(sam_eval(&sam, 0).0, 32640);
    }

    #[test]
    fn sign_extension_example_six_five_bit() {
        let ops = [-3i64, -5, 7, 2, -1, 4];
        let low: i64 = ops.iter().map(|&o| o & 31).sum();
        assert_eq!(low, 100);
        let r = moa_reduce(&ops, 5).unwrap();
        assert_eq!(r.num_p, 3);
        assert_eq!(r.sum, 4);
    }

    #[test]
    fn uniform_operands() {
        let r = moa_reduce(&[0; 18], 15).unwrap();
        assert_eq!((r.sum, r.num_p), (0, 0));
        let r = moa_reduce(&[-1; 18], 15).unwrap();
        assert_eq!((r.sum, r.num_p), (-18, 18));
        assert_eq!(r.stages, 6);
    }

    #[test]
    fn operand_outside_low_width_is_rejected() {
        assert!(moa_reduce(&[32], 5).is_err());
        assert!(moa_reduce(&[-33], 5).is_err());
        assert!(moa_reduce(&[-32, 31], 5).is_ok());
    }

    #[test]
    fn sign_extension_identity_exhaustive_small() {
        // every 6-tuple over [-2^w, 2^w) for w = 1, 2
        for w in 1..=2u32 {
            let span = 1i64 << w;
            let vals: Vec<i64> = (-span..span).collect();
            let n = vals.len();
            for code in 0..n.pow(6) {
                let mut c = code;
                let ops: Vec<i64> = (0..6)
                    .map(|_| {
                        let v = vals[c % n];
                        c /= n;
                        v
                    })
                    .collect();
                assert_eq!(moa_reduce(&ops, w).unwrap().sum, ops.iter().sum::<i64>());
            }
        }
    }

    #[test]
    fn moa18_matches_direct_sum_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..100_000 {
            let ops: Vec<i64> = (0..18).map(|_| rng.gen_range(-32768..32768)).collect();
            let r = moa18(&ops).unwrap();
            assert_eq!(r.sum, ops.iter().sum::<i64>());
            assert_eq!(r.overflow18, !fits_signed(r.sum, 18));
        }
    }

    #[test]
    fn moa18_bounds() {
        let r = moa18(&[4080; 18]).unwrap();
        assert_eq!(r.sum, 73440);
        assert!(!r.overflow18);
        let r = moa18(&[32640; 18]).unwrap();
        assert_eq!(r.sum, 587520);
        assert!(r.overflow18);
        assert!(matches!(
            moa18(&[0; 17]),
            Err(TmaError::OperandCount { expected: 18, got: 17 })
        ));
    }

    #[test]
    fn moa66_examples() {
        assert_eq!(moa66(&[0; 64], 0, 5).unwrap(), 5);
        assert_eq!(moa66(&[1; 64], 2, 0).unwrap(), 66);
        assert!(moa66(&[1; 63], 0, 0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        for _ in 0..10_000 {
            let ne: Vec<i64> = (0..64).map(|_| rng.gen_range(-600_000..600_000)).collect();
            let psum = rng.gen_range(i32::MIN..=i32::MAX) as i64;
            let bias = rng.gen_range(-100_000..100_000);
            assert_eq!(moa66(&ne, psum, bias).unwrap(), ne.iter().sum::<i64>() + psum + bias);
        }
    }

    #[test]
    fn shift_chain_semantics() {
        let mut ne = NeState::new();
        let col = |a, b, c| [ActPair::new(a), ActPair::new(b), ActPair::new(c)];
        let out = ne.shift_in(col(1, 2, 3));
        assert_eq!(out, [ActPair::default(); 3]);
        assert_eq!(ne.sam(0, 0).input().x, 1);
        assert_eq!(ne.sam(2, 0).input().x, 3);

        let mut ne = NeState::new();
        let cs = [col(10, 11, 12), col(20, 21, 22), col(30, 31, 32)];
        for c in cs {
            ne.shift_in(c);
        }
        for r in 0..3 {
            let held: Vec<u8> = (0..3).map(|cell| ne.sam(r, cell).input().x).collect();
            assert_eq!(held, vec![30 + r as u8, 20 + r as u8, 10 + r as u8]);
        }
        assert_eq!(ne.shift_in(col(0, 0, 0)), cs[0]);
    }

    fn load_patch(ne: &mut NeState, w: &[i32; 9], x: &[u8; 9], mode: PrecisionMode) {
        for r in 0..3 {
            for c in 0..3 {
                ne.set_weight(r, c, decompose_weight(w[3 * r + c], mode).unwrap());
            }
        }
        // push columns so that cell c ends up holding x[.., c]
        for c in (0..3).rev() {
            ne.shift_in([ActPair::new(x[c]), ActPair::new(x[3 + c]), ActPair::new(x[6 + c])]);
        }
    }

    #[test]
    fn ne_identity_and_zero() {
        let x = [9, 8, 7, 6, 5, 4, 3, 2, 1];
        let mut ne = NeState::new();
        load_patch(&mut ne, &[0; 9], &x, PrecisionMode::Int5);
        assert_eq!(ne.evaluate(1).unwrap().0, 0);
        let mut id = [0; 9];
        id[4] = 1;
        let mut ne = NeState::new();
        load_patch(&mut ne, &id, &x, PrecisionMode::Int5);
        assert_eq!(ne.evaluate(1).unwrap().0, 5);
    }

    #[test]
    fn int8_passes_split_eighty_five() {
        let mut w = [0; 9];
        w[0] = 85;
        let mut x = [0u8; 9];
        x[0] = 3;
        let mut ne = NeState::new();
        load_patch(&mut ne, &w, &x, PrecisionMode::Int8);
        let p0 = ne.compute(0).unwrap().sum;
        let p1 = ne.compute(1).unwrap().sum;
        assert_eq!((p0, p1), (240, 15));
        assert_eq!(ne.evaluate(2).unwrap().0, 255);
        assert_eq!(psi_accumulate(0, 7, 0), 7);
    }

    #[test]
    fn ne_matches_golden_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for mode in PrecisionMode::ALL {
            for _ in 0..100_000 {
                let w: [i32; 9] = std::array::from_fn(|_| rng.gen_range(mode.weight_range()));
                let x: [u8; 9] = std::array::from_fn(|_| rng.gen());
                let mut ne = NeState::new();
                load_patch(&mut ne, &w, &x, mode);
                let golden: i64 = (0..9)
                    .map(|i| {
                        reconstruct(&decompose_weight(w[i], mode).unwrap()) as i64 * x[i] as i64
                    })
                    .sum();
                let (v, overflow) = ne.evaluate(mode.passes()).unwrap();
                assert_eq!(v, golden);
                if mode == PrecisionMode::Int5 {
                    assert!(!overflow);
                }
            }
        }
    }

    #[test]
    fn int5_extremes_do_not_overflow18() {
        for w in [-16, 15, -13, 13] {
            let mut ne = NeState::new();
            load_patch(&mut ne, &[w; 9], &[255; 9], PrecisionMode::Int5);
            let (v, overflow) = ne.evaluate(1).unwrap();
            assert!(!overflow);
            assert_eq!(v, 9 * 255 * reconstruct(&decompose_weight(w, PrecisionMode::Int5).unwrap()) as i64);
        }
    }

    proptest! {
        #[test]
        fn shift_chain_conserves_values(cols in proptest::collection::vec(any::<[u8; 3]>(), 0..20)) {
            let mut ne = NeState::new();
            let mut inserted: Vec<u8> = vec![0; 9]; // initial zero contents
            let mut out: Vec<u8> = Vec::new();
            for c in &cols {
                inserted.extend_from_slice(c);
                let ev = ne.shift_in(c.map(ActPair::new));
                out.extend(ev.iter().map(|a| a.x));
            }
            for r in 0..3 {
                for cell in 0..3 {
                    out.push(ne.sam(r, cell).input().x);
                }
            }
            inserted.sort_unstable();
            out.sort_unstable();
            prop_assert_eq!(inserted, out);
        }

        #[test]
        fn sign_extension_identity_w15(ops in proptest::collection::vec(-32768i64..32768, 1..40)) {
            prop_assert_eq!(moa_reduce(&ops, 15).unwrap().sum, ops.iter().sum::<i64>());
        }
    }
}

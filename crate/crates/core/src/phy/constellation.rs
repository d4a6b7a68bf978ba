use num_complex::Complex64;

use crate::error::{Error, Result};

/// Square Gray-labeled QAM with unit average energy.
///
/// A label's leading half of bits (MSB first) selects the in-phase level and
/// the trailing half the quadrature level. Along each axis the levels
/// `-(L-1), .., -1, 1, .., L-1` carry the binary-reflected Gray codes of their
/// index, so label 0 sits at the lower-left corner.
#[derive(Clone, Debug, PartialEq)]
pub struct Constellation {
    order: usize,
    bits_per_symbol: usize,
    points: Vec<Complex64>,
}

fn gray(i: usize) -> usize {
    i ^ (i >> 1)
}

impl Constellation {
    pub fn new(order: usize) -> Result<Self> {
        let bits_per_symbol = match order {
            4 => 2,
            16 => 4,
            64 => 6,
            _ => {
                return Err(Error::Domain(format!(
                    "unsupported constellation order {order}; expected 4, 16 or 64"
                )))
            }
        };
        let half = bits_per_symbol / 2;
        let levels = 1usize << half;
        let norm = (2.0 * (order as f64 - 1.0) / 3.0).sqrt();
        let mut amp_of_label = vec![0.0; levels];
        for i in 0..levels {
            amp_of_label[gray(i)] = (2 * i) as f64 - (levels - 1) as f64;
        }
        let points = (0..order)
            .map(|label| {
                let re = amp_of_label[label >> half];
                let im = amp_of_label[label & (levels - 1)];
                Complex64::new(re / norm, im / norm)
            })
            .collect();
        Ok(Constellation {
            order,
            bits_per_symbol,
            points,
        })
    }

    pub fn qpsk() -> Self {
        Self::new(4).expect("QPSK is supported")
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits_per_symbol
    }

    /// Points indexed by label.
    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    /// Bit `b` (0 = MSB) of `label`.
    pub fn bit(&self, label: usize, b: usize) -> u8 {
        ((label >> (self.bits_per_symbol - 1 - b)) & 1) as u8
    }

    pub fn label_of(&self, bits: &[u8]) -> usize {
        bits.iter().fold(0, |acc, &b| (acc << 1) | (b & 1) as usize)
    }

    pub fn map_bits(&self, bits: &[u8]) -> Result<Vec<Complex64>> {
        if bits.len() % self.bits_per_symbol != 0 {
            return Err(Error::Dimension(format!(
                "{} bits is not a multiple of {} bits per symbol",
                bits.len(),
                self.bits_per_symbol
            )));
        }
        Ok(bits
            .chunks(self.bits_per_symbol)
            .map(|c| self.points[self.label_of(c)])
            .collect())
    }

    /// Label of the nearest point.
    pub fn hard_decision(&self, x: Complex64) -> usize {
        (0..self.order)
            .min_by(|&a, &b| {
                (x - self.points[a])
                    .norm_sqr()
                    .total_cmp(&(x - self.points[b]).norm_sqr())
            })
            .expect("non-empty constellation")
    }
}

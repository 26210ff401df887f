/// Fixed sinusoidal position vectors: even columns carry `sin`, odd columns
/// `cos`, both at frequency `10000^(-2i/d)` for column pair `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoder {
    d: usize,
    max_len: usize,
    table: Vec<f64>,
}

impl PositionalEncoder {
    pub fn new(d: usize, max_len: usize) -> Self {
        let mut table = Vec::with_capacity(d * max_len);
        for pos in 0..max_len {
            for j in 0..d {
                table.push(Self::compute(d, pos, j));
            }
        }
        Self { d, max_len, table }
    }

    fn compute(d: usize, pos: usize, j: usize) -> f64 {
        let pair = (j / 2 * 2) as f64;
        let angle = pos as f64 / 10000f64.powf(pair / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Positions past `max_len` are computed on demand.
    pub fn entry(&self, pos: usize, j: usize) -> f64 {
        if pos < self.max_len {
            self.table[pos * self.d + j]
        } else {
            Self::compute(self.d, pos, j)
        }
    }

    /// Rows `0..len` flattened row-major.
    pub fn rows(&self, len: usize) -> Vec<f64> {
        (0..len)
            .flat_map(|p| (0..self.d).map(move |j| (p, j)))
            .map(|(p, j)| self.entry(p, j))
            .collect()
    }
}

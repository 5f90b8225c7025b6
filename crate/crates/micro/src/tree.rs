//! Binary sum tree over event rates: logarithmic update and selection.

#[derive(Debug, Clone)]
pub struct SumTree {
    size: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(len: usize) -> Self {
        let size = len.max(1).next_power_of_two();
        Self { size, nodes: vec![0.0; 2 * size] }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.size + i]
    }

    /// Sets leaf `i`; parents are recomputed from their children so the
    /// total never accumulates update drift.
    pub fn set(&mut self, i: usize, rate: f64) {
        let mut k = self.size + i;
        self.nodes[k] = rate;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    /// Leaf whose cumulative interval contains `u * total`, `u` in `[0, 1)`.
    /// Never returns a zero-rate leaf while the total is positive.
    pub fn select(&self, u: f64) -> usize {
        let mut target = u * self.total();
        let mut k = 1;
        while k < self.size {
            let left = self.nodes[2 * k];
            if target < left || self.nodes[2 * k + 1] <= 0.0 {
                k *= 2;
            } else {
                target -= left;
                k = 2 * k + 1;
            }
        }
        let mut i = k - self.size;
        // Roundoff can land on an empty leaf at an interval edge.
        while self.get(i) <= 0.0 && i > 0 {
            i -= 1;
        }
        i
    }
}

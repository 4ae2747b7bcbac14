//! Small dense and banded LU factorizations used by the implicit integrator.

/// Row-major dense LU with partial pivoting.
#[derive(Debug, Clone)]
pub struct DenseLu {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

impl DenseLu {
    /// Factors the row-major `n x n` matrix `a`. Returns `None` when a zero pivot shows up.
    pub fn factor(n: usize, mut a: Vec<f64>) -> Option<Self> {
        assert_eq!(a.len(), n * n);
        let mut piv = vec![0; n];
        for k in 0..n {
            let mut p = k;
            let mut best = a[k * n + k].abs();
            for i in k + 1..n {
                let v = a[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return None;
            }
            piv[k] = p;
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
            }
            let inv = 1.0 / a[k * n + k];
            for i in k + 1..n {
                let l = a[i * n + k] * inv;
                a[i * n + k] = l;
                if l != 0.0 {
                    for j in k + 1..n {
                        a[i * n + j] -= l * a[k * n + j];
                    }
                }
            }
        }
        Some(Self { n, lu: a, piv })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        for k in 0..n {
            b.swap(k, self.piv[k]);
        }
        for i in 0..n {
            let mut s = b[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * b[j];
            }
            b[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * b[j];
            }
            b[i] = s / self.lu[i * n + i];
        }
    }
}

/// Square band matrix with `kl` sub- and `ku` super-diagonals.
///
/// Rows carry `kl` extra slots on the right so the factorization can absorb
/// the fill-in produced by row interchanges.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self { n, kl, ku, width, data: vec![0.0; n * width] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn lower(&self) -> usize {
        self.kl
    }

    pub fn upper(&self) -> usize {
        self.ku
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.ku + self.kl);
        i * self.width + (j + self.kl - i)
    }

    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && j + self.kl >= i && j <= i + self.ku
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.slot(i, j)]
        } else {
            0.0
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "entry ({i},{j}) outside band");
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "entry ({i},{j}) outside band");
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            y[i] = (lo..=hi).map(|j| self.get(i, j) * x[j]).sum();
        }
    }

    /// LU factorization with partial pivoting (LINPACK `gbfa` ordering).
    pub fn factor(mut self) -> Option<BandLu> {
        let n = self.n;
        let kl = self.kl;
        let reach = kl + self.ku;
        let mut piv = vec![0; n];
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.slot(k, k)].abs();
            for i in k + 1..=last_row {
                let v = self.data[self.slot(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return None;
            }
            piv[k] = p;
            let last_col = (k + reach).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    let a = self.slot(k, j);
                    let b = self.slot(p, j);
                    self.data.swap(a, b);
                }
            }
            let inv = 1.0 / self.data[self.slot(k, k)];
            for i in k + 1..=last_row {
                let s = self.slot(i, k);
                let l = self.data[s] * inv;
                self.data[s] = l;
                if l != 0.0 {
                    for j in k + 1..=last_col {
                        let kj = self.data[self.slot(k, j)];
                        let ij = self.slot(i, j);
                        self.data[ij] -= l * kj;
                    }
                }
            }
        }
        Some(BandLu { a: self, piv })
    }
}

#[derive(Debug, Clone)]
pub struct BandLu {
    a: BandMatrix,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn solve(&self, b: &mut [f64]) {
        let a = &self.a;
        let n = a.n;
        let reach = a.kl + a.ku;
        for k in 0..n {
            b.swap(k, self.piv[k]);
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..=(k + a.kl).min(n - 1) {
                    b[i] -= a.data[a.slot(i, k)] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            for j in k + 1..=(k + reach).min(n - 1) {
                s -= a.data[a.slot(k, j)] * b[j];
            }
            b[k] = s / a.data[a.slot(k, k)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense_mul(n: usize, a: &[f64], x: &[f64]) -> Vec<f64> {
        (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect()
    }

    #[test]
    fn dense_needs_pivoting() {
        let a = vec![0.0, 1.0, 1.0, 0.0];
        let lu = DenseLu::factor(2, a).unwrap();
        let mut b = vec![3.0, 5.0];
        lu.solve(&mut b);
        assert_eq!(b, vec![5.0, 3.0]);
    }

    #[test]
    fn singular_is_rejected() {
        assert!(DenseLu::factor(2, vec![1.0, 2.0, 2.0, 4.0]).is_none());
        let mut m = BandMatrix::zeros(3, 1, 1);
        m.set(0, 0, 1.0);
        m.set(2, 2, 1.0);
        assert!(m.factor().is_none());
    }

    proptest! {
        #[test]
        fn band_solve_matches_dense(
            n in 2usize..30,
            kl in 0usize..4,
            ku in 0usize..4,
            seed in any::<u64>(),
        ) {
            // Cheap deterministic fill; off-diagonals may exceed the diagonal so
            // pivoting is exercised.
            let mut s = seed | 1;
            let mut next = || {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                (s % 2001) as f64 / 1000.0 - 1.0
            };
            let mut band = BandMatrix::zeros(n, kl, ku);
            let mut dense = vec![0.0; n * n];
            for i in 0..n {
                for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                    let v = if i == j { 0.5 + next() } else { 2.0 * next() };
                    band.set(i, j, v);
                    dense[i * n + j] = v;
                }
            }
            let x: Vec<f64> = (0..n).map(|i| i as f64 - 3.0).collect();
            let b = dense_mul(n, &dense, &x);
            let mut bb = vec![0.0; n];
            band.mul_vec(&x, &mut bb);
            for (p, q) in b.iter().zip(&bb) {
                prop_assert!((p - q).abs() < 1e-12);
            }
            if let (Some(dlu), Some(blu)) = (DenseLu::factor(n, dense.clone()), band.factor()) {
                let mut xd = b.clone();
                dlu.solve(&mut xd);
                let mut xb = b.clone();
                blu.solve(&mut xb);
                let r = dense_mul(n, &dense, &xb);
                let scale = b.iter().map(|v| v.abs()).fold(1.0, f64::max);
                // Compare residuals rather than solutions: random matrices can be ill-conditioned.
                for (p, q) in r.iter().zip(&b) {
                    prop_assert!((p - q).abs() < 1e-8 * scale, "{} vs {}", p, q);
                }
            }
        }
    }
}

/// Two-reading stability test on a stream of Δ-Welford values: stable when the
/// current and previous `|Δ|` are both below `κ` times the running peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaGate {
    kappa: f64,
    current: Option<f64>,
    previous: Option<f64>,
    peak: f64,
    readings: usize,
}

impl DeltaGate {
    pub fn new(kappa: f64) -> Self {
        Self { kappa, current: None, previous: None, peak: 0.0, readings: 0 }
    }

    /// Records one reading and returns the stable flag.
    pub fn push(&mut self, delta: f64) -> bool {
        let a = delta.abs();
        self.peak = self.peak.max(a);
        self.previous = self.current;
        self.current = Some(a);
        self.readings += 1;
        self.is_stable()
    }

    pub fn is_stable(&self) -> bool {
        match (self.current, self.previous) {
            (Some(c), Some(p)) => {
                let bound = self.kappa * self.peak;
                c < bound && p < bound
            }
            _ => false,
        }
    }

    pub fn peak(&self) -> f64 {
        self.peak
    }

    pub fn current(&self) -> Option<f64> {
        self.current
    }

    pub fn readings(&self) -> usize {
        self.readings
    }
}

/// Pooled Welford accumulator for one patch: every coordinate of the patch at
/// every inner iteration feeds the same stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchWelford {
    count: u64,
    mean: f64,
    m2: f64,
    sigma: Option<f64>,
    gate: DeltaGate,
}

impl PatchWelford {
    pub fn new(kappa: f64) -> Self {
        Self { count: 0, mean: 0.0, m2: 0.0, sigma: None, gate: DeltaGate::new(kappa) }
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population variance `M2 / n`.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }

    /// Closes one inner iteration: refreshes `σ_W`, and from the second
    /// iteration on feeds `Δ_W = σ_W − σ_W(prev)` to the gate. Returns the
    /// reading, if any.
    pub fn end_iteration(&mut self) -> Option<f64> {
        let s = self.variance().sqrt();
        let delta = self.sigma.map(|prev| s - prev);
        self.sigma = Some(s);
        if let Some(d) = delta {
            self.gate.push(d);
        }
        delta
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn is_stable(&self) -> bool {
        self.gate.is_stable()
    }

    pub fn gate(&self) -> &DeltaGate {
        &self.gate
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gate_needs_two_consecutive_small_readings() {
        let mut g = DeltaGate::new(0.1);
        let flags: Vec<bool> = [5.0, -3.0, 0.4, -0.3].iter().map(|&d| g.push(d)).collect();
        assert_eq!(flags, vec![false, false, false, true]);
        assert_eq!(g.peak(), 5.0);
    }

    #[test]
    fn one_small_reading_is_not_enough() {
        let mut g = DeltaGate::new(0.1);
        for d in [5.0, 0.1, 2.0, 0.1] {
            assert!(!g.push(d));
        }
    }

    #[test]
    fn first_reading_arrives_at_second_iteration() {
        let mut w = PatchWelford::new(0.1);
        w.push(1.0);
        assert_eq!(w.end_iteration(), None);
        w.push(3.0);
        assert_eq!(w.end_iteration(), Some(1.0));
        assert_eq!(w.gate().readings(), 1);
    }

    fn two_pass(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn welford_matches_two_pass(xs in prop::collection::vec(-1e3f64..1e3, 1..1000), shift in -1e4f64..1e4) {
            let xs: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            let mut w = PatchWelford::new(0.1);
            for &x in &xs {
                w.push(x);
            }
            let (m, v) = two_pass(&xs);
            prop_assert!((w.mean() - m).abs() <= 1e-10 * m.abs().max(1.0));
            prop_assert!((w.variance() - v).abs() <= 1e-10 * v.max(1e-300) || (v == 0.0 && w.variance().abs() < 1e-20));
        }

        #[test]
        fn peak_is_nondecreasing(ds in prop::collection::vec(-10f64..10.0, 1..50)) {
            let mut g = DeltaGate::new(0.3);
            let mut last = 0.0;
            for d in ds {
                g.push(d);
                prop_assert!(g.peak() >= last);
                last = g.peak();
            }
        }
    }
}

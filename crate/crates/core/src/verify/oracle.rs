use crate::episode::Metric;

/// Compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Mean prototypical cross-entropy written out as plain loops.
///
/// `queries[i]` has label `labels[i]`, an index into `prototypes`.
pub fn proto_oracle(
    queries: &[Vec<f64>],
    prototypes: &[Vec<f64>],
    labels: &[usize],
    metric: Metric,
    temperature: f64,
) -> f64 {
    assert_eq!(queries.len(), labels.len(), "one label per query");
    let mut total = Neumaier::default();
    for (q, &label) in queries.iter().zip(labels) {
        let mut logits = Vec::with_capacity(prototypes.len());
        for c in prototypes {
            let value = match metric {
                Metric::SqEuclidean => {
                    let mut acc = Neumaier::default();
                    for k in 0..q.len() {
                        let diff = q[k] - c[k];
                        acc.add(diff * diff);
                    }
                    -acc.value() / temperature
                }
                Metric::Cosine => {
                    let (mut dot, mut qq, mut cc) = (Neumaier::default(), Neumaier::default(), Neumaier::default());
                    for k in 0..q.len() {
                        dot.add(q[k] * c[k]);
                        qq.add(q[k] * q[k]);
                        cc.add(c[k] * c[k]);
                    }
                    dot.value() / (qq.value().sqrt() * cc.value().sqrt()) / temperature
                }
            };
            logits.push(value);
        }
        let mut top = f64::NEG_INFINITY;
        for &l in &logits {
            if l > top {
                top = l;
            }
        }
        let mut denom = Neumaier::default();
        for &l in &logits {
            denom.add((l - top).exp());
        }
        total.add(-(logits[label] - top - denom.value().ln()));
    }
    total.value() / queries.len() as f64
}

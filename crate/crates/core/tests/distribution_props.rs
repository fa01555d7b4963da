use proptest::prelude::*;
use trustlab_core::dist::{entropy, log_softmax, softmax};
use trustlab_core::policy::TabularPolicy;
use trustlab_core::{StateKey, Vocab};

fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 2..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_is_shift_invariant(l in logits(40), c in -500.0f64..500.0) {
        let a = softmax(&l).unwrap();
        let shifted: Vec<f64> = l.iter().map(|x| x + c).collect();
        let b = softmax(&shifted).unwrap();
        for (p, q) in a.probs().iter().zip(b.probs()) {
            prop_assert!((p - q).abs() <= 1e-12, "{p} vs {q}");
        }
    }

    #[test]
    fn softmax_sums_to_one_and_matches_log_softmax(l in logits(64)) {
        let d = softmax(&l).unwrap();
        let s: f64 = d.probs().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        let lp = log_softmax(&l).unwrap();
        for (p, q) in d.probs().iter().zip(&lp) {
            if *p > 1e-300 {
                prop_assert!((p.ln() - q).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn entropy_lies_between_zero_and_log_vocab(l in logits(64)) {
        let d = softmax(&l).unwrap();
        let h = entropy(&d);
        prop_assert!(h >= -1e-12);
        prop_assert!(h <= (d.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn logprob_gradient_matches_finite_differences(l in prop::collection::vec(-4.0f64..4.0, 2..8), pick in 0usize..8) {
        let v = l.len();
        let token = (pick % v) as u32;
        let vocab = Vocab::new(v).unwrap();
        let s = StateKey::new(3, vec![1, 0]);
        let mut p = TabularPolicy::new(vocab);
        p.set_logits(s.clone(), l.clone()).unwrap();
        let g = p.logprob_grad(&s, token);
        let h = 1e-5;
        for b in 0..v {
            let mut q = p.clone();
            let mut plus = l.clone();
            plus[b] += h;
            q.set_logits(s.clone(), plus).unwrap();
            let up = q.logprob(&s, token);
            let mut minus = l.clone();
            minus[b] -= h;
            q.set_logits(s.clone(), minus).unwrap();
            let down = q.logprob(&s, token);
            let fd = (up - down) / (2.0 * h);
            prop_assert!((fd - g.get(&s, b as u32)).abs() <= 1e-7, "b={b}: fd {fd} analytic {}", g.get(&s, b as u32));
        }
    }
}

use proptest::prelude::*;
use trustlab_core::divergence::*;
use trustlab_core::{Distribution, RngStream};

const SLACK: f64 = 1e-9;

fn pair(v: usize) -> impl Strategy<Value = (Distribution, Distribution, u32)> {
    (
        prop::collection::vec(-6.0f64..6.0, v),
        prop::collection::vec(-6.0f64..6.0, v),
        0..v as u32,
    )
        .prop_map(|(a, b, s)| (trustlab_core::dist::softmax(&a).unwrap(), trustlab_core::dist::softmax(&b).unwrap(), s))
}

fn any_pair() -> impl Strategy<Value = (Distribution, Distribution, u32)> {
    prop_oneof![pair(4), pair(64), pair(1024)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn approximations_lower_bound_exact((mu, pi, s) in any_pair(), k in 1usize..32) {
        let tv = tv_exact(&mu, &pi).unwrap();
        let kl = kl_exact(&mu, &pi).unwrap();
        prop_assert!(tv - tv_binary(mu.prob(s), pi.prob(s)) >= -SLACK);
        prop_assert!(kl - kl_binary(mu.prob(s), pi.prob(s)) >= -SLACK);
        prop_assert!(tv - tv_topk(&mu, &pi, k, s).unwrap() >= -SLACK);
        prop_assert!(kl - kl_topk(&mu, &pi, k, s).unwrap() >= -SLACK);
    }

    #[test]
    fn topk_is_monotone_in_k((mu, pi, s) in any_pair(), k in 1usize..40) {
        prop_assert!(tv_topk(&mu, &pi, k + 1, s).unwrap() - tv_topk(&mu, &pi, k, s).unwrap() >= -SLACK);
        prop_assert!(kl_topk(&mu, &pi, k + 1, s).unwrap() - kl_topk(&mu, &pi, k, s).unwrap() >= -SLACK);
    }

    #[test]
    fn topk_tv_gap_is_bounded_by_tail_mass((mu, pi, s) in any_pair(), k in 1usize..32) {
        let support = topk_support(&mu, k, s);
        let (mut om, mut op) = (0.0, 0.0);
        for a in 0..mu.len() as u32 {
            if !support.contains(&a) {
                om += mu.prob(a);
                op += pi.prob(a);
            }
        }
        let gap = tv_exact(&mu, &pi).unwrap() - tv_on_support(&mu, &pi, &support);
        prop_assert!(gap <= 0.5 * (om + op) + SLACK);
    }

    #[test]
    fn pinsker_holds((mu, pi, _s) in any_pair()) {
        prop_assert!(pinsker_gap(&mu, &pi).unwrap() >= -SLACK);
    }

    #[test]
    fn full_support_topk_equals_exact((mu, pi, s) in pair(16)) {
        let k = mu.len();
        prop_assert!((tv_topk(&mu, &pi, k, s).unwrap() - tv_exact(&mu, &pi).unwrap()).abs() <= 1e-12);
        prop_assert!((kl_topk(&mu, &pi, k, s).unwrap() - kl_exact(&mu, &pi).unwrap()).abs() <= 1e-12);
    }

    /// π/μ constant on the tail makes the tail carry no KL.
    #[test]
    fn constant_tail_ratio_gives_kl_equality(
        head in prop::collection::vec(-3.0f64..3.0, 4),
        tail in prop::collection::vec(-3.0f64..3.0, 12),
        head_pi in prop::collection::vec(0.05f64..1.0, 4),
        tail_scale in 0.2f64..3.0,
    ) {
        let mut w: Vec<f64> = head.iter().map(|x| (x + 10.0).exp()).collect();
        w.extend(tail.iter().map(|x| x.exp()));
        let mu = Distribution::from_weights(w.clone()).unwrap();
        let mut wp: Vec<f64> = head_pi.clone();
        let tail_mu: f64 = mu.probs()[4..].iter().sum();
        wp.extend(mu.probs()[4..].iter().map(|p| p * tail_scale));
        let pi = Distribution::from_weights(wp).unwrap();
        let k = 4;
        let s = topk_support(&mu, k, 0);
        prop_assert_eq!(s.len(), 4);
        prop_assert!(tail_mu > 0.0);
        let d = (kl_topk(&mu, &pi, k, 0).unwrap() - kl_exact(&mu, &pi).unwrap()).abs();
        prop_assert!(d <= 1e-10, "gap {d:e}");
    }
}

#[test]
fn monte_carlo_tv_estimate_converges() {
    let mu = Distribution::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
    let pi = Distribution::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let exact = tv_exact(&mu, &pi).unwrap();
    let mut prev_err = f64::INFINITY;
    for (i, n) in [100usize, 10_000, 1_000_000].into_iter().enumerate() {
        let mut rng = RngStream::new(11, i as u64);
        let est = tv_mc_estimate(&mu, &pi, n, &mut rng).unwrap();
        let err = (est - exact).abs();
        // ½|r−1| is bounded by 1.5 here, so 4 standard errors stay below 3/√n.
        assert!(err <= 3.0 / (n as f64).sqrt(), "n={n}: est {est} exact {exact}");
        if n >= 10_000 {
            assert!(err < prev_err.max(1e-3));
        }
        prev_err = err;
    }
}

#[test]
fn binary_equals_exact_on_two_tokens() {
    let mu = Distribution::new(vec![0.3, 0.7]).unwrap();
    let pi = Distribution::new(vec![0.6, 0.4]).unwrap();
    assert!((tv_binary(0.3, 0.6) - tv_exact(&mu, &pi).unwrap()).abs() < 1e-12);
    assert!((kl_binary(0.3, 0.6) - kl_exact(&mu, &pi).unwrap()).abs() < 1e-12);
}

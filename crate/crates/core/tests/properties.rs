mod common;

use proptest::prelude::*;

use common::{random_params, random_point, random_structure, seeded};
use ltvae::evaluation::{clustering_accuracy, facet_nmi};
use ltvae::search::{enumerate, Limits, Operator};
use ltvae::CliqueTree;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_proposal_is_a_valid_structure(seed in 0u64..10_000, j in 1usize..7) {
        let mut rng = seeded(seed);
        let s = random_structure(&mut rng, 4, 4, j);
        let limits = Limits { max_card: 5, max_latents: j };
        for op in Operator::ALL {
            for p in enumerate(op, &s, &limits) {
                prop_assert!(p.structure.validate().is_ok(), "{op} on {} gave {}", s.describe(), p.structure.describe());
                prop_assert_eq!(p.structure.n_vars(), j);
            }
        }
    }

    #[test]
    fn pivot_does_not_change_loglik(seed in 0u64..10_000, j in 1usize..6) {
        let mut rng = seeded(seed);
        let s = random_structure(&mut rng, 4, 3, j);
        let p = random_params(&mut rng, &s);
        let z = random_point(&mut rng, j);
        let base = CliqueTree::new(&s).loglik(&p, &z).unwrap();
        for l in &s.latents {
            let ll = CliqueTree::with_pivot(&s, l.id).loglik(&p, &z).unwrap();
            prop_assert!((ll - base).abs() < 1e-10);
        }
    }

    #[test]
    fn accuracy_is_invariant_to_relabelling(
        truth in prop::collection::vec(0usize..4, 1..60),
        pred_seed in prop::collection::vec(0usize..4, 60),
        perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let pred: Vec<usize> = truth.iter().zip(&pred_seed).map(|(&t, &r)| if r == 0 { (t + 1) % 4 } else { t }).collect();
        let relabelled: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
        let a = clustering_accuracy(&pred, &truth).unwrap();
        let b = clustering_accuracy(&relabelled, &truth).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(clustering_accuracy(&truth, &truth).unwrap(), 1.0);
    }

    #[test]
    fn nmi_is_symmetric_and_bounded(
        rows in prop::collection::vec((prop::collection::vec(0.01f64..1.0, 3), prop::collection::vec(0.01f64..1.0, 2)), 2..40),
    ) {
        let norm = |v: &Vec<f64>| { let t: f64 = v.iter().sum(); v.iter().map(|x| x / t).collect::<Vec<f64>>() };
        let a: Vec<Vec<f64>> = rows.iter().map(|(x, _)| norm(x)).collect();
        let b: Vec<Vec<f64>> = rows.iter().map(|(_, y)| norm(y)).collect();
        let ab = facet_nmi(&a, &b);
        let ba = facet_nmi(&b, &a);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ab));
    }
}

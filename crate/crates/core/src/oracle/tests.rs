use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::brute::*;
use super::quadrature::integrate;
use super::*;
use crate::bcm::{generate_interventional, CausalModel, Dag, LinearGaussianScm};
use crate::diffengine::Tensor;

const UNIT: IdentPriors = IdentPriors { sigma: 1.0, sigma_w: 1.0 };
const DEFAULT_NONIDENT: NonIdentPriors = NonIdentPriors {
    alpha: 3.0,
    beta: 0.5,
    eta: 1.0,
};

fn random_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
    let w: f64 = rng.sample::<f64, _>(StandardNormal);
    (0..n)
        .map(|_| {
            let x2: f64 = rng.sample::<f64, _>(StandardNormal);
            [w * x2 + rng.sample::<f64, _>(StandardNormal), x2]
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn sufficient_statistics_examples() {
    let empty = suff_stats(&Tensor::zeros(&[0, 2])).unwrap();
    assert_eq!(empty, SufficientStats::default());
    let one = suff_stats(&Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
    assert_eq!((one.s1, one.s2, one.s12, one.n), (1.0, 1.0, 1.0, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let st = SufficientStats::from_rows(&random_rows(&mut rng, 100)).unwrap();
        assert!(st.s12 * st.s12 <= st.s1 * st.s2);
    }
    assert!(SufficientStats::from_rows(&[[f64::NAN, 0.0]]).is_err());
}

#[test]
fn ident_graph_posterior_examples() {
    let p = ident_graph_posterior(&SufficientStats::default(), &UNIT).unwrap();
    for v in p {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let st = SufficientStats::from_rows(&[[1.0, 1.0]]).unwrap();
    let p = ident_graph_posterior(&st, &UNIT).unwrap();
    assert!((p[0] - 0.3224).abs() < 1e-3 && (p[1] - 0.3224).abs() < 1e-3 && (p[2] - 0.3551).abs() < 1e-3, "{p:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows = random_rows(&mut rng, 12);
    let a = ident_graph_posterior(&SufficientStats::from_rows(&rows).unwrap(), &UNIT).unwrap();
    let swapped: Vec<[f64; 2]> = rows.iter().map(|[x, y]| [*y, *x]).collect();
    let b = ident_graph_posterior(&SufficientStats::from_rows(&swapped).unwrap(), &UNIT).unwrap();
    assert_eq!((a[0], a[1], a[2]), (b[1], b[0], b[2]));
}

#[test]
fn ident_posterior_matches_one_dimensional_quadrature() {
    let rows = [[1.0, 1.0]];
    let closed = ident_graph_posterior(&SufficientStats::from_rows(&rows).unwrap(), &UNIT).unwrap();
    let brute = ident_posterior_brute(&rows, &UNIT).unwrap();
    for k in 0..3 {
        assert!(rel(closed[k], brute[k]) < 1e-10, "{closed:?} vs {brute:?}");
    }
}

#[test]
fn ident_interventional_examples() {
    let st = SufficientStats {
        s1: 1.0,
        s2: 1.0,
        s12: 1.0,
        n: 1,
    };
    let mix = ident_posterior_interventional(&st, &UNIT, Direction::DoX2OnX1, 2.0).unwrap();
    assert!((mix.means[0] - 1.0).abs() < 1e-14);
    assert!((mix.stds[0].powi(2) - 3.0).abs() < 1e-13);
    let zero = ident_posterior_interventional(&st, &UNIT, Direction::DoX2OnX1, 0.0).unwrap();
    assert_eq!(zero.means[0], 0.0);
    assert!((zero.stds[0] - 1.0).abs() < 1e-15);

    let st = SufficientStats {
        s1: 400.0,
        s2: 1.0,
        s12: 0.0,
        n: 400,
    };
    let graph = ident_graph_posterior(&st, &UNIT).unwrap();
    let mix = ident_posterior_interventional(&st, &UNIT, Direction::DoX1OnX2, 1.5).unwrap();
    assert!((mix.weights[0] - graph[1]).abs() < 1e-15);
    assert!(graph[1] < 0.1);
    assert!((mix.means[1]).abs() < 1e-15 && (mix.stds[1] - 1.0).abs() < 1e-15);
}

#[test]
fn ident_full_conditional_monte_carlo() {
    // w | G1, D ~ N(σ_w² S12/(σ_w² S2 + σ²), σ² σ_w²/(σ_w² S2 + σ²)) with (S1=S2=S12=1): N(1/2, 1/2).
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 400_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let w = 0.5 + 0.5f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
            w * 2.0 + rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - 1.0).abs() < 0.01, "{mean}");
    assert!((var / 3.0 - 1.0).abs() < 0.01, "{var}");
}

#[test]
fn ident_interventional_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let rows = random_rows(&mut rng, 7);
        let st = SufficientStats::from_rows(&rows).unwrap();
        let mix = ident_posterior_interventional(&st, &UNIT, Direction::DoX2OnX1, 1.3).unwrap();
        let total = integrate(|y| mog_logpdf(&mix, y).exp(), -50.0, 50.0, 1e-14, 1e-13).unwrap();
        assert!((total - 1.0).abs() < 1e-8, "{total}");
    }
}

#[test]
fn ident_interventional_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [0, 1, 3, 5] {
        let rows = random_rows(&mut rng, n);
        let st = SufficientStats::from_rows(&rows).unwrap();
        for direction in [Direction::DoX2OnX1, Direction::DoX1OnX2] {
            let mix = ident_posterior_interventional(&st, &UNIT, direction, -0.8).unwrap();
            for y in [-2.0, 0.1, 1.7] {
                let brute = ident_predictive_brute(&rows, &UNIT, direction, -0.8, y).unwrap();
                assert!(rel(mog_logpdf(&mix, y).exp(), brute) < 1e-8);
            }
        }
    }
}

#[test]
fn ident_posterior_concentrates_with_sample_size() {
    let mut medians = Vec::new();
    for n in [10, 100, 1000] {
        let mut probs: Vec<f64> = (0..50)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let w: f64 = 0.5 + rng.random::<f64>();
                let rows: Vec<[f64; 2]> = (0..n)
                    .map(|_| {
                        let x2: f64 = rng.sample::<f64, _>(StandardNormal);
                        [w * x2 + rng.sample::<f64, _>(StandardNormal), x2]
                    })
                    .collect();
                ident_graph_posterior(&SufficientStats::from_rows(&rows).unwrap(), &UNIT).unwrap()[0]
            })
            .collect();
        probs.sort_by(f64::total_cmp);
        medians.push(0.5 * (probs[24] + probs[25]));
    }
    assert!(medians[0] < medians[1] && medians[1] < medians[2], "{medians:?}");
    assert!(medians[2] > 0.99);
}

#[test]
fn nonident_graph_posterior_examples() {
    let st = SufficientStats::from_rows(&[[1.0, 1.0]]).unwrap();
    let p = nonident_graph_posterior(&st, &DEFAULT_NONIDENT).unwrap();
    let raw = [3f64.powf(-3.5), 3f64.powf(-3.5), 2f64.powf(-6.5)];
    let z: f64 = raw.iter().sum();
    for k in 0..3 {
        assert!(rel(p[k], raw[k] / z) < 1e-12);
    }
    assert!((p[0] - 0.3973).abs() < 1e-4 && (p[2] - 0.2053).abs() < 1e-4, "{p:?}");

    let brute = nonident_posterior_brute(&[[1.0, 1.0]], &DEFAULT_NONIDENT).unwrap();
    for k in 0..3 {
        assert!(rel(p[k], brute[k]) < 1e-8, "{p:?} vs {brute:?}");
    }
}

#[test]
fn nonident_no_data_matches_prior_predictive() {
    for pr in [
        DEFAULT_NONIDENT,
        NonIdentPriors {
            alpha: 1.7,
            beta: 0.3,
            eta: 4.0,
        },
    ] {
        let closed = nonident_graph_posterior(&SufficientStats::default(), &pr).unwrap();
        let brute = nonident_posterior_brute(&[], &pr).unwrap();
        for k in 0..3 {
            assert!((closed[k] - brute[k]).abs() < 1e-6, "{closed:?} vs {brute:?}");
        }
    }
}

#[test]
fn markov_equivalent_graphs_tie_when_shifts_coincide() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for beta in [0.5, 0.2, 2.0] {
        let pr = NonIdentPriors {
            alpha: 2.5,
            beta,
            eta: 1.0 / (2.0 * beta),
        };
        for n in [1, 10, 200] {
            let st = SufficientStats::from_rows(&random_rows(&mut rng, n)).unwrap();
            let p = nonident_graph_posterior(&st, &pr).unwrap();
            assert!((p[0] - p[1]).abs() < 1e-12, "{p:?}");
        }
    }
}

#[test]
fn nonident_interventional_matches_three_dimensional_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows = random_rows(&mut rng, 3);
    let st = SufficientStats::from_rows(&rows).unwrap();
    for direction in [Direction::DoX2OnX1, Direction::DoX1OnX2] {
        let mix = nonident_posterior_interventional(&st, &DEFAULT_NONIDENT, direction, 1.1).unwrap();
        for k in 0..10 {
            let y = -3.0 + 0.65 * k as f64;
            let brute = nonident_predictive_brute(&rows, &DEFAULT_NONIDENT, direction, 1.1, y).unwrap();
            let closed = tmix_logpdf(&mix, y).exp();
            assert!(rel(closed, brute) < 1e-4, "y={y} {direction:?}: {closed} vs {brute}");
        }
    }
    let zero = nonident_posterior_interventional(&st, &DEFAULT_NONIDENT, Direction::DoX2OnX1, 0.0).unwrap();
    assert_eq!(zero.locs[0], 0.0);
}

#[test]
fn student_t_approaches_matched_gaussian() {
    let (nu, scale) = (1000.0, 1.3);
    let var = scale * scale * nu / (nu - 2.0);
    let g = Gaussian { mean: 0.0, var };
    let kl = integrate(
        |y| {
            let lt = student_t_logpdf(nu, 0.0, scale, y);
            lt.exp() * (lt - g.log_pdf(y))
        },
        -60.0,
        60.0,
        1e-15,
        1e-12,
    )
    .unwrap();
    assert!(kl >= -1e-12 && kl < 1e-3, "{kl}");
}

#[test]
fn mixture_logpdf_examples() {
    let one = GaussianMixture::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
    assert!((mog_logpdf(&one, 0.0) + 0.918939).abs() < 1e-6);
    let twin = GaussianMixture::new(vec![0.5, 0.5], vec![0.3, 0.3], vec![2.0, 2.0]).unwrap();
    let single = GaussianMixture::new(vec![1.0], vec![0.3], vec![2.0]).unwrap();
    assert!((mog_logpdf(&twin, 1.1) - mog_logpdf(&single, 1.1)).abs() < 1e-14);
    let sym = GaussianMixture::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1.0, 1.0]).unwrap();
    assert!((mog_logpdf(&sym, 0.0) - 0.241971f64.ln()).abs() < 1e-5);
    assert!((mog_logpdf(&sym, 0.0) + 1.41894).abs() < 1e-5);
}

#[test]
fn mc_kl_calibration() {
    let p = Gaussian { mean: 0.0, var: 1.0 };
    let q = Gaussian { mean: 1.0, var: 1.0 };
    let est = mc_kl(&p, &q, 10_000, 7).unwrap();
    assert!((est.value - 0.5).abs() < 0.05, "{est:?}");
    let same = mc_kl(&p, &p, 1000, 8).unwrap();
    assert!(same.value.abs() <= 3.0 * same.sem.max(1e-300) || same.value == 0.0);
}

#[test]
fn mc_kl_to_own_component_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let k = rng.random_range(2..5);
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
        let z: f64 = raw.iter().sum();
        let mix = GaussianMixture::new(
            raw.iter().map(|w| w / z).collect(),
            (0..k).map(|_| rng.random_range(-3.0..3.0)).collect(),
            (0..k).map(|_| rng.random_range(0.3..2.0)).collect(),
        )
        .unwrap();
        let comp = Gaussian {
            mean: mix.means[0],
            var: mix.stds[0] * mix.stds[0],
        };
        let est = mc_kl(&mix, &comp, 2000, rng.random()).unwrap();
        assert!(est.value > -3.0 * est.sem, "{est:?}");
    }
}

#[test]
fn mc_kl_reports_support_mismatch() {
    struct Nowhere;
    impl LogDensity for Nowhere {
        fn log_pdf(&self, _: f64) -> f64 {
            f64::NEG_INFINITY
        }
    }
    let p = Gaussian { mean: 0.0, var: 1.0 };
    assert!(mc_kl(&p, &Nowhere, 10, 0).is_err());
}

fn three_node(edges: &[(usize, usize, f64)]) -> LinearGaussianScm {
    let dag = Dag::from_edges(3, &edges.iter().map(|e| (e.0, e.1)).collect::<Vec<_>>()).unwrap();
    let mut w = vec![vec![0.0; 3]; 3];
    for &(p, c, v) in edges {
        w[p][c] = v;
    }
    LinearGaussianScm::new(dag, w, vec![1.0; 3]).unwrap()
}

#[test]
fn linear_do_examples() {
    let dag = Dag::from_edges(2, &[(0, 1)]).unwrap();
    let chain = LinearGaussianScm::new(dag, vec![vec![0.0, 1.7], vec![0.0, 0.0]], vec![0.4, 0.6]).unwrap();
    let g = linear_scm_do(&chain, 0, 2.0, 1).unwrap();
    assert!((g.mean - 3.4).abs() < 1e-14 && (g.var - 0.36).abs() < 1e-14);

    let (a, b, c) = (0.8, -1.2, 0.5);
    // Nodes: 0 = X, 1 = Y, 2 = Z.
    let confounder = three_node(&[(2, 0, a), (2, 1, c), (0, 1, b)]);
    let g = linear_scm_do(&confounder, 0, 1.5, 1).unwrap();
    assert!((g.mean - b * 1.5).abs() < 1e-14 && (g.var - (c * c + 1.0)).abs() < 1e-14);
    let mediator = three_node(&[(0, 2, a), (2, 1, c), (0, 1, b)]);
    let g = linear_scm_do(&mediator, 0, 1.5, 1).unwrap();
    assert!((g.mean - (b + a * c) * 1.5).abs() < 1e-14 && (g.var - (c * c + 1.0)).abs() < 1e-14);
}

#[test]
fn linear_do_matches_generator_monte_carlo() {
    let (a, b, c) = (0.8, -1.2, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for scm in [
        three_node(&[(2, 0, a), (2, 1, c), (0, 1, b)]),
        three_node(&[(0, 2, a), (2, 1, c), (0, 1, b)]),
    ] {
        let x = 1.5;
        let n = 1_000_000;
        let values = vec![x; n];
        let int = generate_interventional(&CausalModel::from_linear(&scm), 0, &values, &mut rng).unwrap();
        let ys: Vec<f64> = int.data().chunks(3).map(|r| r[1]).collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let g = linear_scm_do(&scm, 0, x, 1).unwrap();
        assert!((mean - g.mean).abs() < 3.0 * (g.var / n as f64).sqrt(), "{mean} vs {}", g.mean);
        assert!((var / g.var - 1.0).abs() < 0.03);
    }
}

#[test]
fn nonident_interventional_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [0, 4, 40] {
        let st = SufficientStats::from_rows(&random_rows(&mut rng, n)).unwrap();
        for direction in [Direction::DoX2OnX1, Direction::DoX1OnX2] {
            let mix = nonident_posterior_interventional(&st, &DEFAULT_NONIDENT, direction, 0.9).unwrap();
            let f = |y: f64| tmix_logpdf(&mix, y).exp();
            let total: f64 = [(-1e4, -50.0), (-50.0, 50.0), (50.0, 1e4)]
                .iter()
                .map(|&(a, b)| integrate(f, a, b, 1e-15, 1e-12).unwrap())
                .sum();
            assert!((total - 1.0).abs() < 1e-6, "{total}");
        }
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn rows_strategy() -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64).prop_map(|(a, b)| [a, b]), 0..40)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn graph_posteriors_live_on_the_simplex(rows in rows_strategy(), alpha in 1.0..6.0f64, beta in 0.1..2.0f64, eta in 0.2..5.0f64) {
            let st = SufficientStats::from_rows(&rows).unwrap();
            let ident = ident_graph_posterior(&st, &UNIT).unwrap();
            let nonident = nonident_graph_posterior(&st, &NonIdentPriors { alpha, beta, eta }).unwrap();
            for p in [ident, nonident] {
                prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn ident_posterior_is_equivariant_under_column_swap(rows in rows_strategy()) {
            let st = SufficientStats::from_rows(&rows).unwrap();
            let a = ident_graph_posterior(&st, &UNIT).unwrap();
            let b = ident_graph_posterior(&st.swapped(), &UNIT).unwrap();
            prop_assert!((a[0] - b[1]).abs() < 1e-12 && (a[2] - b[2]).abs() < 1e-12);
            let x = 0.7;
            let m1 = ident_posterior_interventional(&st, &UNIT, Direction::DoX2OnX1, x).unwrap();
            let m2 = ident_posterior_interventional(&st.swapped(), &UNIT, Direction::DoX1OnX2, x).unwrap();
            prop_assert!((mog_logpdf(&m1, 0.3) - mog_logpdf(&m2, 0.3)).abs() < 1e-10);
        }

        #[test]
        fn interventional_densities_are_finite(rows in rows_strategy(), x in -4.0..4.0f64, y in -10.0..10.0f64) {
            let st = SufficientStats::from_rows(&rows).unwrap();
            for direction in [Direction::DoX2OnX1, Direction::DoX1OnX2] {
                let g = ident_posterior_interventional(&st, &UNIT, direction, x).unwrap();
                let t = nonident_posterior_interventional(&st, &DEFAULT_NONIDENT, direction, x).unwrap();
                prop_assert!(mog_logpdf(&g, y).is_finite());
                prop_assert!(tmix_logpdf(&t, y).is_finite());
            }
        }
    }
}

use super::*;
use crate::model::{loss, AttentionVariant, ModelConfig};
use crate::oracle::{mog_logpdf, tmix_logpdf};

fn two_node(family: Family, n_obs: usize, n_int: usize) -> GeneratorConfig {
    GeneratorConfig {
        family,
        n_obs_min: n_obs,
        n_obs_max: n_obs,
        n_total: None,
        n_int,
        ..GeneratorConfig::default()
    }
}

fn tiny_model(seed: u64) -> Model {
    Model::init(ModelConfig::tiny(AttentionVariant::SelfPlusCross), seed).unwrap()
}

/// Multiplies every component scale of an inner predictor.
struct Broadened<'a, P: Predictor>(&'a P, f64);

impl<P: Predictor> Predictor for Broadened<'_, P> {
    fn predictive(&self, bundle: &TaskBundle, xs: &[f64]) -> Result<Vec<Predictive>> {
        Ok(self
            .0
            .predictive(bundle, xs)?
            .into_iter()
            .map(|p| match p {
                Predictive::Gaussian(mut m) => {
                    m.stds.iter_mut().for_each(|s| *s *= self.1);
                    Predictive::Gaussian(m)
                }
                Predictive::StudentT(mut m) => {
                    m.scales.iter_mut().for_each(|s| *s *= self.1);
                    Predictive::StudentT(m)
                }
            })
            .collect())
    }
}

#[test]
fn nlpid_of_oracle_matches_summed_log_density() {
    let pr = IdentPriors { sigma: 1.0, sigma_w: 1.0 };
    let npr = NonIdentPriors { alpha: 3.0, beta: 0.5, eta: 1.0 };
    for seed in 0..10 {
        let b = make_task(&two_node(Family::default(), 30, 40), seed).unwrap();
        let st = suff_stats(&b.obs).unwrap();
        let dir = Direction::from_int_node(b.int_node).unwrap();
        let direct: f64 = b
            .int_values
            .iter()
            .zip(b.outcomes())
            .map(|(&x, y)| -mog_logpdf(&ident_posterior_interventional(&st, &pr, dir, x).unwrap(), y))
            .sum();
        let got = nlpid(&BcmPrior::Ident(pr), &b).unwrap();
        assert!((got - direct).abs() <= 1e-10 * direct.abs().max(1.0), "{got} vs {direct}");

        let b = make_task(&two_node(Family::two_node_nonident(), 30, 40), seed).unwrap();
        let st = suff_stats(&b.obs).unwrap();
        let dir = Direction::from_int_node(b.int_node).unwrap();
        let direct: f64 = b
            .int_values
            .iter()
            .zip(b.outcomes())
            .map(|(&x, y)| -tmix_logpdf(&nonident_posterior_interventional(&st, &npr, dir, x).unwrap(), y))
            .sum();
        let got = nlpid(&BcmPrior::Nonident(npr), &b).unwrap();
        assert!((got - direct).abs() <= 1e-10 * direct.abs().max(1.0), "{got} vs {direct}");
    }
}

#[test]
fn nlpid_of_model_is_its_summed_loss() {
    let model = tiny_model(3);
    let b = make_task(&two_node(Family::default(), 25, 12), 5).unwrap();
    let mog = model.forward(&b).unwrap();
    let expected = loss(&mog, &b.outcomes()).unwrap();
    let got = nlpid(&model, &b).unwrap();
    assert!((got - expected).abs() <= 1e-10 * expected.abs());
}

#[test]
fn broadening_scales_increases_nlpid() {
    let oracle = BcmPrior::Ident(IdentPriors { sigma: 1.0, sigma_w: 1.0 });
    let wide = Broadened(&oracle, 5.0);
    let config = two_node(Family::default(), 500, 500);
    let mut diff = 0.0;
    for seed in 0..20 {
        let b = make_task(&config, seed).unwrap();
        diff += nlpid(&wide, &b).unwrap() - nlpid(&oracle, &b).unwrap();
    }
    assert!(diff / 20.0 > 0.0, "{diff}");
}

struct Degenerate;

impl Predictor for Degenerate {
    fn predictive(&self, _: &TaskBundle, xs: &[f64]) -> Result<Vec<Predictive>> {
        xs.iter()
            .enumerate()
            .map(|(n, _)| {
                let std = if n == 3 || n == 5 { 1e-300 } else { 1.0 };
                Ok(Predictive::Gaussian(GaussianMixture::new(vec![1.0], vec![1e6], vec![std])?))
            })
            .collect()
    }
}

#[test]
fn nlpid_names_offending_queries() {
    let b = make_task(&two_node(Family::default(), 10, 8), 0).unwrap();
    let err = nlpid(&Degenerate, &b).unwrap_err().to_string();
    assert!(err.contains("[3, 5]"), "{err}");
}

#[test]
fn kl_of_reference_to_itself_is_zero() {
    let b = make_task(&two_node(Family::two_node_nonident(), 40, 1), 2).unwrap();
    let xs = query_values(5, 1);
    let r = Reference::PosteriorBcm(BcmPrior::Nonident(NonIdentPriors { alpha: 3.0, beta: 0.5, eta: 1.0 }));
    let p = r.predictive(&b, &xs).unwrap();
    let kl = mean_kl(&p, &p, 1000, 0).unwrap();
    assert_eq!(kl.value, 0.0);
}

#[test]
fn untrained_model_is_far_from_the_oracle() {
    let model = tiny_model(0);
    let reference = Reference::PosteriorBcm(BcmPrior::Ident(IdentPriors { sigma: 1.0, sigma_w: 1.0 }));
    let mut kls: Vec<f64> = (0..20)
        .map(|seed| {
            let b = make_task(&two_node(Family::default(), 100, 1), seed).unwrap();
            let xs = query_values(5, seed);
            let kl = kl_to_reference(&model, &b, &reference, &xs, 500, seed).unwrap();
            assert!(kl.value > -3.0 * kl.sem);
            kl.value
        })
        .collect();
    kls.sort_by(f64::total_cmp);
    assert!(quantile(&kls, 0.5) > 0.0);
}

#[test]
fn adjustment_tasks_have_the_stated_total_effects() {
    let family = Family::three_node_linear();
    for seed in 0..10 {
        let c = adjustment_task(CurveKind::Confounder, &family, 20, 3, seed).unwrap();
        let w = &c.metadata.as_ref().unwrap().scm.as_ref().unwrap().weights;
        let slope = TrueMechanism.predictive(&c, &[1.0]).unwrap()[0].mean();
        assert!((slope - w[0][1]).abs() < 1e-12);
        for &(p, ch) in &[(2, 0), (2, 1), (0, 1)] {
            assert!((0.5..1.5).contains(&w[p][ch].abs()));
        }

        let m = adjustment_task(CurveKind::Mediator, &family, 20, 3, seed).unwrap();
        let w = &m.metadata.as_ref().unwrap().scm.as_ref().unwrap().weights;
        let slope = TrueMechanism.predictive(&m, &[1.0]).unwrap()[0].mean();
        assert!((slope - (w[0][1] + w[0][2] * w[2][1])).abs() < 1e-12);
        // X is intervened, so its column equals the intervention values
        assert_eq!(m.int_values, (0..3).map(|r| m.int_full.get(&[r, 0])).collect::<Vec<_>>());
    }
}

#[test]
fn curve_experiment_is_deterministic_and_nonnegative() {
    let model = tiny_model(1);
    let trained = two_node(Family::two_node_nonident(), 50, 10);
    let protocol = EvalProtocol {
        n_obs_grid: vec![20, 60],
        datasets: 4,
        kl_samples: 300,
        kl_queries: 3,
        ..EvalProtocol::default()
    };
    let a = run_curve_experiment(CurveKind::Nonident, &model, &trained, &protocol).unwrap();
    let b = run_curve_experiment(CurveKind::Nonident, &model, &trained, &protocol).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.values("nonident", 20, "kl_bcm").len(), 4);
    for metric in ["kl_bcm", "kl_true"] {
        for n in [20, 60] {
            let v = a.values("nonident", n, metric);
            let s = a.values("nonident", n, &format!("{metric}_sem"));
            for (v, s) in v.iter().zip(&s) {
                assert!(*v > -3.0 * s, "{metric} {v} ± {s}");
            }
        }
    }
    let m = run_curve_experiment(CurveKind::NonidentMint, &model, &trained, &protocol).unwrap();
    assert!(m.values("nonident+m_int", 20, "kl_bcm").is_empty());
    assert_eq!(m.values("nonident+m_int", 20, "kl_true").len(), 4);
}

#[test]
fn curve_experiment_rejects_mismatched_models() {
    let model = tiny_model(1);
    let protocol = EvalProtocol::default();
    let ident = two_node(Family::default(), 50, 10);
    assert!(run_curve_experiment(CurveKind::Nonident, &model, &ident, &protocol).is_err());
    assert!(run_curve_experiment(CurveKind::Confounder, &model, &ident, &protocol).is_err());
    let lin = two_node(Family::three_node_linear(), 50, 10);
    assert!(run_curve_experiment(CurveKind::HiddenConfounder, &model, &lin, &protocol).is_err());
    let standardized = GeneratorConfig { standardize: Some(true), ..lin };
    assert!(run_curve_experiment(CurveKind::Mediator, &model, &standardized, &protocol).is_err());
}

#[test]
fn adjustment_kinds_report_slopes() {
    let model = Model::init(ModelConfig::tiny(AttentionVariant::MaskedSelf), 2).unwrap();
    let protocol = EvalProtocol {
        n_obs_grid: vec![30],
        datasets: 3,
        kl_samples: 100,
        kl_queries: 2,
        ..EvalProtocol::default()
    };
    let full = two_node(Family::three_node_linear(), 50, 10);
    let hidden = GeneratorConfig { hidden_nodes: 1, ..full.clone() };
    for (kind, trained) in [(CurveKind::Mediator, &full), (CurveKind::HiddenConfounder, &hidden)] {
        let r = run_curve_experiment(kind, &model, trained, &protocol).unwrap();
        for metric in ["kl_true", "slope", "slope_true", "slope_rel_err"] {
            assert_eq!(r.values(kind.name(), 30, metric).len(), 3, "{metric}");
        }
    }
}

#[test]
fn oracle_nlpid_is_not_beaten_by_an_untrained_model() {
    let model = tiny_model(4);
    let oracle = BcmPrior::Ident(IdentPriors { sigma: 1.0, sigma_w: 1.0 });
    let protocol = EvalProtocol::default();
    let config = two_node(Family::default(), protocol.nlpid_n_obs, protocol.nlpid_n_int);
    let corpus: Vec<TaskBundle> = (0..100).map(|k| make_task(&config, task_seed(7, k)).unwrap()).collect();
    let o = nlpid_report(&oracle, &corpus, "oracle").unwrap().aggregate("oracle", 500, "nlpid").unwrap();
    let m = nlpid_report(&model, &corpus, "model").unwrap().aggregate("model", 500, "nlpid").unwrap();
    assert_eq!(o.count, 100);
    assert!(o.mean <= m.mean + 2.0 * m.sem, "{} vs {}", o.mean, m.mean);
}

fn sample_report() -> EvalReport {
    let mut rows = Vec::new();
    for (k, kind) in ["ident", "mediator"].iter().enumerate() {
        for n in [50, 500] {
            for d in 0..7 {
                let v = ((d * 37 + n + k * 11) % 17) as f64 / 7.0 + 1e-13 * d as f64;
                rows.push(row(d, d as u64 * 3, kind, n, "kl_true", v));
            }
        }
    }
    EvalReport { rows }
}

#[test]
fn report_round_trip_reproduces_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let report = sample_report();
    emit_report(&report, dir.path()).unwrap();
    let (back, aggs) = read_report(dir.path()).unwrap();
    assert_eq!(back, report);
    let recomputed = back.aggregates();
    assert_eq!(aggs.len(), recomputed.len());
    for (a, b) in aggs.iter().zip(&recomputed) {
        assert_eq!((&a.kind, a.n_obs, &a.metric, a.count), (&b.kind, b.n_obs, &b.metric, b.count));
        for (x, y) in [(a.median, b.median), (a.q10, b.q10), (a.q90, b.q90), (a.mean, b.mean), (a.sem, b.sem)] {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn aggregates_match_direct_quantiles() {
    let report = sample_report();
    let agg = report.aggregate("ident", 50, "kl_true").unwrap();
    let mut v = report.values("ident", 50, "kl_true");
    v.sort_by(f64::total_cmp);
    assert_eq!(agg.median, v[3]);
    assert!((agg.q10 - (v[0] + 0.6 * (v[1] - v[0]))).abs() < 1e-15);
    assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
}

#[test]
fn empty_report_writes_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    emit_report(&EvalReport::default(), dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
    assert_eq!(text, "dataset_id,seed,kind,n_obs,metric,value\n");
    let agg = std::fs::read_to_string(dir.path().join(AGGREGATE_FILE)).unwrap();
    assert_eq!(agg.lines().count(), 1);
    let (back, aggs) = read_report(dir.path()).unwrap();
    assert!(back.rows.is_empty() && aggs.is_empty());
}

#[test]
fn protocol_rejects_zero_counts() {
    assert!(EvalProtocol { datasets: 0, ..EvalProtocol::default() }.validate().is_err());
    assert!(EvalProtocol { n_obs_grid: vec![], ..EvalProtocol::default() }.validate().is_err());
    EvalProtocol::default().validate().unwrap();
    assert!(serde_json::from_str::<EvalProtocol>(r#"{"bogus": 1}"#).is_err());
}


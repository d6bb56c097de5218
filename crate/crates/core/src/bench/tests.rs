use super::*;
use crate::backbone::Projection;

fn small() -> BenchConfig {
    BenchConfig {
        backbone: BackboneConfig {
            vocab_size: 64,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            ffn_dim: 64,
            max_seq_len: 64,
            seed: 3,
        },
        n_adapters: 4,
        rank: 2,
        tokens_to_generate: 24,
        tokens_per_sentence: 4,
        repetitions: 3,
        warmup: 1,
        ..BenchConfig::default()
    }
}

#[test]
fn config_rejects_too_few_repetitions_and_overlong_runs() {
    assert!(small().validate().is_ok());
    for bad in [
        BenchConfig { repetitions: 2, ..small() },
        BenchConfig { warmup: 0, ..small() },
        BenchConfig { n_adapters: 0, ..small() },
        BenchConfig { methods: vec![], ..small() },
        BenchConfig { tokens_to_generate: 61, ..small() },
        BenchConfig { p_threshold: 1.5, ..small() },
        BenchConfig { fused_adapters: 0, ..small() },
        BenchConfig { fused_adapters: 5, ..small() },
        BenchConfig { fused_adapters: 4, p_threshold: 0.3, ..small() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    assert!(BenchConfig::default().validate().is_ok());
}

#[test]
fn method_names_roundtrip() {
    for m in BenchMethod::ALL {
        assert_eq!(m.as_str().parse::<BenchMethod>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
    }
    assert!("moe".parse::<BenchMethod>().is_err());
}

#[test]
fn fixture_script_has_fixed_sentence_length() {
    let cfg = small();
    let fx = build_fixture(&cfg).unwrap();
    let dot = fx.vocab.id(".");
    assert_eq!(fx.prompt.len(), 4);
    assert_eq!(fx.script.len(), 24);
    for (i, &t) in fx.prompt.iter().chain(&fx.script).enumerate() {
        assert_eq!(t == dot, (i + 1) % 4 == 0, "position {i}");
    }
    assert_eq!(fx.registry.len(), 4);
}

#[test]
fn report_counts_router_calls_per_method() {
    let cfg = small();
    let report = run_bench(&cfg).unwrap();
    assert_eq!(report.methods.len(), 4);
    let calls = |m| report.stats(m).unwrap().router_invocations;
    assert_eq!(calls(BenchMethod::Base), 0);
    assert_eq!(calls(BenchMethod::SingleLoraMerged), 0);
    // one prompt sentence plus six generated sentences
    assert_eq!(calls(BenchMethod::DlpSentence), 7);
    // prompt sentence plus every generated token
    assert_eq!(calls(BenchMethod::TokenReroutingBaseline), 1 + 24);
    for m in &report.methods {
        assert_eq!(m.samples_ms.len(), 3);
        assert!(m.median_ms > 0.0 && m.stddev_ms >= 0.0);
    }
    let base = report.stats(BenchMethod::Base).unwrap();
    assert_eq!(base.ratio_vs_base, Some(1.0));
    let single = report.stats(BenchMethod::SingleLoraMerged).unwrap();
    assert_eq!(single.ratio_vs_single_lora, Some(1.0));
    let dlp = report.stats(BenchMethod::DlpSentence).unwrap();
    assert_eq!(dlp.mean_selected, 2.0);
}

#[test]
fn self_ratio_of_base_is_near_one() {
    let cfg = BenchConfig {
        methods: vec![BenchMethod::Base],
        repetitions: 5,
        ..small()
    };
    let fx = build_fixture(&cfg).unwrap();
    let a = run_bench_on(&fx, &cfg).unwrap().median_ms(BenchMethod::Base).unwrap();
    let b = run_bench_on(&fx, &cfg).unwrap().median_ms(BenchMethod::Base).unwrap();
    let ratio = a / b;
    assert!((0.5..2.0).contains(&ratio), "self ratio {ratio}");
}

#[test]
fn csv_header_and_rows() {
    let report = run_bench(&small()).unwrap();
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split(',').count() == 7));
    assert!(rows[0].starts_with("base,4,"));
    let json = serde_json::to_string(&report).unwrap();
    let back: BenchReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}

#[test]
fn unmeasurable_medians_are_rejected() {
    let stat = |median_ms| MethodStats {
        method: BenchMethod::Base,
        n_adapters: 1,
        median_ms,
        mean_ms: median_ms,
        stddev_ms: 0.0,
        ratio_vs_base: None,
        ratio_vs_single_lora: None,
        router_invocations: 0,
        mean_selected: 0.0,
        samples_ms: vec![],
    };
    // 1 µs ticks: anything under 1 ms is too coarse
    assert!(matches!(check_measurable(&[stat(0.5)], 1000.0), Err(Error::Measurement(_))));
    assert!(check_measurable(&[stat(0.0)], 20.0).is_err());
    assert!(check_measurable(&[stat(2.0)], 1000.0).is_ok());
}

#[test]
fn param_fraction_is_linear_and_matches_closed_form() {
    let mut cfg = BenchConfig::default();
    let backbone = Backbone::new(cfg.backbone).unwrap();
    assert_eq!(adapter_param_fraction(&LoraRegistry::new(), &backbone), 0.0);

    let per_adapter: usize = (0..cfg.backbone.n_layers)
        .flat_map(|_| cfg.targets.projections())
        .map(|&p| {
            let (h, d) = cfg.backbone.projection_shape(p);
            cfg.rank * (h + d)
        })
        .sum();
    assert_eq!(cfg.targets.projections().len(), 4);
    assert!(!cfg.targets.projections().contains(&Projection::FfnUp));

    cfg.n_adapters = 25;
    let f25 = adapter_param_fraction(&build_fixture(&cfg).unwrap().registry, &backbone);
    cfg.n_adapters = 50;
    let f50 = adapter_param_fraction(&build_fixture(&cfg).unwrap().registry, &backbone);
    assert_eq!(f50, 2.0 * f25);
    let expected = (50 * per_adapter) as f64 / backbone.parameter_count() as f64;
    assert!((f50 - expected).abs() <= 1e-12 * expected, "{f50} vs {expected}");
}

#[test]
fn paired_ratio_cancels_shared_drift() {
    // the machine slows 2x halfway; each pair keeps a 1.1 ratio
    let den = [10.0, 10.0, 20.0, 20.0, 20.0];
    let num: Vec<f64> = den.iter().map(|d| d * 1.1).collect();
    assert!((paired_median_ratio(&num, &den) - 1.1).abs() < 1e-12);
    // a ratio of independent medians would see 22 / 20
    assert_eq!(paired_median_ratio(&[1.0, 3.0], &[1.0, 1.0]), 2.0);
}

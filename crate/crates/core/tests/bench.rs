use forkseq::bench::{
    bench_model_spec, check_equivalence, fit_counter_exponent, fit_exponent, machine_metadata,
    run_scaling_bench, BenchOptions,
};
use forkseq::encoders::EncoderFamily;
use forkseq::inference::{analytic_exponent, InferenceScheme};
use forkseq::model::MqForecaster;
use forkseq::panel::{FrequencyMeta, SeriesRecord, TimeSeriesPanel};
use forkseq::Error;

fn counters(family: EncoderFamily, scheme: InferenceScheme, grid: &[usize], window: usize) -> forkseq::bench::BenchResult {
    let mut opts = BenchOptions::new(family);
    opts.counters_only = true;
    opts.window = window;
    run_scaling_bench(family, scheme, grid, 1, 3, &opts).unwrap()
}

#[test]
fn counter_exponents_match_the_table() {
    use EncoderFamily::*;
    let schemes = [InferenceScheme::Fs, InferenceScheme::WsRestricted(0), InferenceScheme::WsFull];
    for family in [Cnn, Rnn, Lstm, Mlp] {
        for scheme in schemes {
            let r = counters(family, scheme, &[128, 256, 512, 1024], 64);
            let fit = fit_counter_exponent(&r).unwrap();
            assert_eq!(fit.slope.round(), analytic_exponent(scheme, family), "{family} {scheme}: {}", fit.slope);
        }
    }
    for scheme in [InferenceScheme::Fs, InferenceScheme::WsFull] {
        let r = counters(Transformer, scheme, &[16, 32, 64, 128], 8);
        let fit = fit_counter_exponent(&r).unwrap();
        assert_eq!(fit.slope.round(), analytic_exponent(scheme, Transformer), "{scheme}: {}", fit.slope);
    }
}

#[test]
fn restricted_attention_counts_are_linear_in_t() {
    // Windows of fixed length L cost L(L+1)/2 query-key pairs each, so the
    // total grows like T L^2 rather than the tabulated T^2 L.
    let l = 8;
    let r = counters(EncoderFamily::Transformer, InferenceScheme::WsRestricted(l), &[64, 128, 256, 512], l);
    let heads = bench_model_spec(EncoderFamily::Transformer).encoder.heads as u64;
    for row in &r.rows {
        let t = row.t as u64;
        let l = l as u64;
        let expect: u64 = (1..=t).map(|f| f.min(l)).map(|w| w * (w + 1) / 2).sum::<u64>() * heads;
        assert_eq!(row.op_count, expect, "T={t}");
    }
    let fit = fit_counter_exponent(&r).unwrap();
    assert!((fit.slope - 1.0).abs() < 0.05, "{}", fit.slope);
}

#[test]
fn encoder_calls_recorded() {
    let r = counters(EncoderFamily::Rnn, InferenceScheme::WsFull, &[10, 20, 30, 40], 64);
    assert_eq!(r.rows.iter().map(|r| r.encoder_calls).collect::<Vec<_>>(), vec![10, 20, 30, 40]);
    let r = counters(EncoderFamily::Rnn, InferenceScheme::Fs, &[10, 20, 30, 40], 64);
    assert!(r.rows.iter().all(|r| r.encoder_calls == 1));
}

#[test]
fn timing_rows_and_csv() {
    let opts = BenchOptions::new(EncoderFamily::Cnn);
    let r = run_scaling_bench(EncoderFamily::Cnn, InferenceScheme::Fs, &[16, 32, 64, 128], 3, 1, &opts).unwrap();
    assert!(r.rows.iter().all(|row| row.median_seconds > 0.0 && row.repetitions == 3));
    assert!(fit_exponent(&r).unwrap().slope.is_finite());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    r.write_csv(&path).unwrap();
    let body = std::fs::read_to_string(path).unwrap();
    assert!(body.starts_with("family,scheme,T,median_seconds,op_count\n"));
    assert_eq!(body.lines().count(), 5);
    assert!(machine_metadata().contains("threads_used=1"));
}

#[test]
fn invalid_grids_are_rejected() {
    let opts = BenchOptions::new(EncoderFamily::Cnn);
    let run = |grid: &[usize], reps| run_scaling_bench(EncoderFamily::Cnn, InferenceScheme::Fs, grid, reps, 1, &opts);
    assert!(matches!(run(&[16, 32, 64], 1), Err(Error::Config(_))));
    assert!(matches!(run(&[16, 32, 32, 64], 1), Err(Error::Config(_))));
    assert!(matches!(run(&[16, 32, 64, 128], 0), Err(Error::Config(_))));
}

#[test]
fn equivalence_check_reports_the_gap() {
    let (model, store) = MqForecaster::new(bench_model_spec(EncoderFamily::Lstm), 2).unwrap();
    let values: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
    let panel = TimeSeriesPanel::new(
        vec![SeriesRecord::new("a", values)],
        FrequencyMeta::new("Test", 1, 4).unwrap(),
    )
    .unwrap();
    let d = check_equivalence(&model, &store, &panel, InferenceScheme::WsFull, 1e-12).unwrap();
    assert!(d <= 1e-12);
    // A restricted window shorter than the receptive field is not comparable.
    let (cnn, cnn_store) = MqForecaster::new(bench_model_spec(EncoderFamily::Cnn), 2).unwrap();
    let d = check_equivalence(&cnn, &cnn_store, &panel, InferenceScheme::WsRestricted(4), 1e-12).unwrap();
    assert_eq!(d, 0.0);
    // A negative tolerance turns any gap, even zero, into an error.
    let strict = check_equivalence(&model, &store, &panel, InferenceScheme::WsFull, -1.0);
    assert!(matches!(strict, Err(Error::Contract(_))));
}

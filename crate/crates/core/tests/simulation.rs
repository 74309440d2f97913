mod common;

use quartz_core::oracle::{diff, oracle_forward};
use quartz_core::snn::{classify, simulate, ConversionOptions, TraceLevel};
use quartz_core::{convert, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_input, random_model, toy_model};

#[test]
fn toy_network_chronogram() {
    let net = convert(&toy_model(), 16, ConversionOptions::default()).unwrap();
    let input = Tensor::vector(vec![0.75, 0.25]).unwrap();
    let run = simulate(&net, &input, &TraceLevel::Off).unwrap();
    let out = run.output();
    let local: Vec<i64> = out
        .spike_times
        .iter()
        .map(|t| t.unwrap() as i64 - out.offset)
        .collect();
    assert_eq!(local, vec![24, 32]);
    assert_eq!(run.output_values(), vec![Some(0.5), Some(0.0)]);
    assert!(out.forced[1] && !out.forced[0]);
    assert_eq!(classify(&run).unwrap().label, 0);

    let oracle = oracle_forward(&net, &input).unwrap();
    assert_eq!(oracle.output().values(16), vec![Some(0.5), Some(0.0)]);
    assert!(diff(&net, &run, &oracle).unwrap().is_clean());
}

#[test]
fn current_is_one_after_the_counter_spike() {
    let net = convert(&toy_model(), 16, ConversionOptions::default()).unwrap();
    let input = Tensor::vector(vec![0.75, 0.25]).unwrap();
    let run = simulate(&net, &input, &TraceLevel::All).unwrap();
    let offset = run.output().offset;
    let spike = run.output().spike_times[0].unwrap();
    let rows: Vec<_> = run
        .trace
        .iter()
        .filter(|r| r.stage == 0 && r.unit == 0)
        .filter(|r| r.step as i64 - offset > 16 && r.step <= spike)
        .collect();
    assert_eq!(rows.len(), 8);
    for r in rows {
        assert_eq!(r.current, 1.0, "step {}", r.step);
    }
}

#[test]
fn single_unit_boundaries() {
    use quartz_core::model::{AnnModel, Layer};
    let one = Layer::dense(Tensor::new(vec![1, 1], vec![1.0]).unwrap(), Tensor::zeros(vec![1]), true).unwrap();
    let model = AnnModel::new("unit", vec![1], vec![one]).unwrap();
    for t in [1, 4, 16] {
        let net = convert(&model, t, ConversionOptions::default()).unwrap();
        let full = simulate(&net, &Tensor::vector(vec![1.0]).unwrap(), &TraceLevel::Off).unwrap();
        assert_eq!(full.output().spike_times[0].unwrap() as i64 - full.output().offset, t as i64);
        assert_eq!(full.output_values(), vec![Some(1.0)]);
        let zero = simulate(&net, &Tensor::vector(vec![0.0]).unwrap(), &TraceLevel::Off).unwrap();
        assert_eq!(zero.output().spike_times[0].unwrap() as i64 - zero.output().offset, 2 * t as i64);
        assert_eq!(zero.output_values(), vec![Some(0.0)]);
    }
}

#[test]
fn random_networks_match_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut clean = 0;
    for _ in 0..60 {
        let model = random_model(&mut rng);
        for t in [1, 2, 4, 16, 64] {
            let net = convert(&model, t, ConversionOptions::default()).unwrap();
            let input = random_input(&mut rng, model.input_shape());
            let run = simulate(&net, &input, &TraceLevel::Off).unwrap();
            let oracle = oracle_forward(&net, &input).unwrap();
            let report = diff(&net, &run, &oracle).unwrap();
            assert_eq!(run.total_spikes(), run.total_units());
            if !run.has_early_spikes() {
                clean += 1;
                assert_eq!(report.mismatches, 0, "model {:?} T={t}", model.layers().len());
            }
            assert_eq!(report.unexplained_mismatches, 0);
        }
    }
    assert!(clean > 150, "only {clean} clean runs");
}

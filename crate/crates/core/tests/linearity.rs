use layerlab::data::{gen_synthetic_seq, split, SeqTaskConfig};
use layerlab::harness::{self, ExperimentConfig, Splits};
use layerlab::linearity::{approximator_recipe, fit_approximator, linearity_score, probe_model, ProbeSpec};
use layerlab::models::{build_encoder, BlockKind, EncoderConfig, EncoderVariant};
use layerlab::rng::Stream;
use layerlab::surgery::{remove_blocks, RemoveTarget};
use layerlab::train::TrainConfig;
use layerlab::{Error, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = Stream::root(seed).rng();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
}

fn map_rows(x: &Tensor, f: impl Fn(&[f32]) -> Vec<f32>) -> Tensor {
    let rows: Vec<f32> = (0..x.n_rows()).flat_map(|r| f(x.row(r))).collect();
    let d = rows.len() / x.n_rows();
    Tensor::new(vec![x.n_rows(), d], rows).unwrap()
}

fn fit_and_score(f: impl Fn(&[f32]) -> Vec<f32>, d: usize) -> f64 {
    let (x_fit, x_eval) = (gaussian(4000, d, 1), gaussian(1000, d, 2));
    let (y_fit, y_eval) = (map_rows(&x_fit, &f), map_rows(&x_eval, &f));
    let cfg = TrainConfig { epochs: 20, ..approximator_recipe() };
    let approx = fit_approximator(&x_fit, &y_fit, &cfg, Stream::root(3)).unwrap();
    linearity_score(&approx, &x_eval, &y_eval).unwrap()
}

#[test]
fn identity_targets_are_recovered() {
    let gamma = fit_and_score(|r| r.to_vec(), 16);
    assert!(gamma >= 0.999, "γ = {gamma}");
}

#[test]
fn relu_targets_are_measurably_nonlinear() {
    let d = 32;
    let a = gaussian(d, d, 9);
    let affine = |r: &[f32]| -> Vec<f32> {
        (0..d).map(|i| a.row(i).iter().zip(r).map(|(w, x)| w * x).sum::<f32>() + 0.5).collect()
    };
    let linear = fit_and_score(affine, d);
    let relu = fit_and_score(|r| r.iter().map(|v| v.max(0.0)).collect(), d);
    assert!(linear >= 0.99, "affine γ = {linear}");
    assert!(relu < 0.99 && relu < linear, "ReLU γ = {relu}, affine γ = {linear}");
}

fn tiny_task() -> (EncoderConfig, Splits) {
    let task = SeqTaskConfig { n_train: 30, n_finetune: 30, n_eval: 30, seq_len: 8, vocab_size: 16, ..Default::default() };
    let data = gen_synthetic_seq(&task).unwrap();
    let parts = split(&data, &[0.34, 0.33, 0.33], 0).unwrap();
    let enc = EncoderConfig { n_layers: 2, hidden_size: 16, ffn_inner_size: 32, vocab_size: 16, max_seq_len: 8, ..EncoderConfig::toy() };
    (enc, Splits { train: parts[0].clone(), heldout: parts[1].clone(), eval: parts[2].clone() })
}

fn quick_spec(kinds: Vec<BlockKind>) -> ProbeSpec {
    ProbeSpec { kinds, fit: TrainConfig { epochs: 1, ..approximator_recipe() }, ..ProbeSpec::default() }
}

#[test]
fn attention_only_models_have_no_mlp_probes() {
    let (enc, data) = tiny_task();
    let model = build_encoder(&EncoderConfig { variant: EncoderVariant::NoFfn, ..enc }, 4).unwrap();
    let err = probe_model(&model, &data.heldout, &data.eval, &quick_spec(vec![BlockKind::Mlp]), Stream::root(0));
    assert!(matches!(err, Err(Error::Lookup(_))), "{err:?}");

    let cfg = ExperimentConfig { probe: quick_spec(vec![BlockKind::SaFf, BlockKind::Mlp]), ..ExperimentConfig::default() };
    let report = harness::run_probe_suite(&cfg, &data, &model).unwrap();
    let probe = report.column("probe").unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r[probe] == harness::Cell::Text("sa_ff".into())), "{:?}", report.rows);
}

#[test]
fn removed_cores_cannot_be_probed() {
    let (enc, data) = tiny_task();
    let model = build_encoder(&enc, 4).unwrap();
    let removed = remove_blocks(&model, RemoveTarget::Mlp, &[2]).unwrap();
    let spec = ProbeSpec { layers: vec![2], ..quick_spec(vec![BlockKind::Mlp]) };
    match probe_model(&removed, &data.heldout, &data.eval, &spec, Stream::root(0)) {
        Err(Error::Degenerate(msg)) => assert!(msg.contains("100%"), "{msg}"),
        other => panic!("expected a degenerate-input error, got {other:?}"),
    }
}

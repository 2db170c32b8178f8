use std::f64::consts::LN_2;

use structrans::checks::tiny_model;
use structrans::data::{Example, Vocab, Vocabulary};
use structrans::grammar::Grammar;
use structrans::inference::{self, sequence_log_score};
use structrans::oracle::{derives, exhaustive_decode};
use structrans::params::Graph;
use structrans::training::{self, encode_examples, example_loss, loss_and_grads, Adam, Encoded, TrainConfig};
use structrans::{checkpoint, DecoderVariant, Error, Model, ModelConfig, Order};

fn vocab(source: &[&str], target: &[&str]) -> Vocabulary {
    let v = |t: &[&str]| Vocab::from(t.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    Vocabulary {
        source: v(source),
        target: v(target),
    }
}

fn zero_model() -> Model {
    let cfg = ModelConfig {
        embedding_dim: 4,
        fertility_hidden: 2,
        reorder_hidden: 2,
        decoder_hidden: 2,
        mlp_hidden: 3,
        max_fertility: 1,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg, vocab(&["a"], &["a", "b"]), 1).unwrap();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        model.params.get_mut(id).data_mut().fill(0.0);
    }
    model
}

fn loss(model: &Model, ex: &Encoded, cfg: &TrainConfig) -> f64 {
    let mut g = Graph::new(&model.params);
    let v = example_loss(model, &mut g, ex, 0, cfg).unwrap();
    g.tape.value(v).data()[0]
}

#[test]
fn zero_weight_network_loss() {
    let model = zero_model();
    let ex = &encode_examples(&model, &[Example::from_strs(&["a"], &["b"])]).unwrap()[0];
    let tokens_only = TrainConfig {
        length_weight: 0.0,
        ..TrainConfig::default()
    };
    assert!((loss(&model, ex, &tokens_only) - LN_2).abs() < 1e-12);
    // P(l = 1) is also 1/2 under a uniform fertility row
    assert!((loss(&model, ex, &TrainConfig::default()) - 2.0 * LN_2).abs() < 1e-12);
}

#[test]
fn guidance_term_never_reduces_loss() {
    let model = tiny_model(Order::FertilityFirst, DecoderVariant::Independent, 3).unwrap();
    let mut ex = encode_examples(&model, &[Example::from_strs(&["a", "b"], &["b", "a", "c"])]).unwrap().remove(0);
    let cfg = TrainConfig {
        guidance: true,
        guidance_weight: 1.0,
        ..TrainConfig::default()
    };
    let base = loss(&model, &ex, &cfg);
    ex.guidance = vec![(0, 1), (1, 0)];
    let with = loss(&model, &ex, &cfg);
    // the guidance term is a sum of log-probabilities, so it never reduces the loss
    assert!(with > base);
}

#[test]
fn infeasible_length_is_an_error() {
    let model = tiny_model(Order::FertilityFirst, DecoderVariant::Independent, 1).unwrap();
    let ex = &encode_examples(&model, &[Example::from_strs(&["a"], &["a", "b", "c"])]).unwrap()[0];
    let mut g = Graph::new(&model.params);
    match example_loss(&model, &mut g, ex, 0, &TrainConfig::default()) {
        Err(Error::InfeasibleLength { length: 3, support }) => assert_eq!(support, vec![1, 2]),
        other => panic!("expected InfeasibleLength, got {other:?}"),
    }
}

fn losses(steps: usize) -> Vec<f64> {
    let mut model = tiny_model(Order::FertilityFirst, DecoderVariant::Independent, 7).unwrap();
    let data = encode_examples(
        &model,
        &[
            Example::from_strs(&["a", "b"], &["a", "b", "b", "a"]),
            Example::from_strs(&["c"], &["c", "c"]),
        ],
    )
    .unwrap();
    let cfg = TrainConfig::default();
    let mut adam = Adam::new(&model.params, &cfg);
    (0..steps)
        .map(|s| {
            let (l, grads) = loss_and_grads(&model, &data[s % 2], 0, &cfg).unwrap();
            adam.update(&mut model.params, &grads);
            l
        })
        .collect()
}

#[test]
fn training_steps_are_deterministic() {
    let a = losses(4);
    assert_eq!(a, losses(4));
    assert!(a.iter().all(|l| l.is_finite()));
}

#[test]
fn train_runs_are_reproducible() {
    let run = || {
        let mut model = tiny_model(Order::FertilityFirst, DecoderVariant::Independent, 2).unwrap();
        let data = vec![
            Example::from_strs(&["a", "b"], &["a", "b", "b", "a"]),
            Example::from_strs(&["b", "c"], &["b", "c", "c", "b"]),
        ];
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        let report = training::train(&mut model, &data, &data, &cfg, Some(&mut log)).unwrap();
        (report.metrics.iter().map(|m| m.train_loss).collect::<Vec<_>>(), model.params.iter().map(|(_, a)| a.clone()).collect::<Vec<_>>(), log)
    };
    let (a, pa, log) = run();
    let (b, pb, _) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 3);
}

#[test]
fn overfits_a_single_example() {
    let mut model = tiny_model(Order::FertilityFirst, DecoderVariant::Independent, 5).unwrap();
    let data = vec![Example::from_strs(&["a", "b"], &["a", "b", "b", "a"])];
    let cfg = TrainConfig {
        epochs: 600,
        learning_rate: 0.02,
        ..TrainConfig::default()
    };
    let report = training::train(&mut model, &data, &data, &cfg, None).unwrap();
    let last = report.metrics.last().unwrap().train_loss;
    assert!(last < 0.01, "final loss {last}");
    assert_eq!(report.best_dev_exact_match, 1.0);
}

#[test]
fn nan_parameters_abort_training() {
    let mut model = tiny_model(Order::FertilityFirst, DecoderVariant::Independent, 1).unwrap();
    let id = model.params.ids().next().unwrap();
    model.params.get_mut(id).data_mut()[0] = f64::NAN;
    let data = vec![Example::from_strs(&["a"], &["a", "a"])];
    let err = training::train(&mut model, &data, &data, &TrainConfig::default(), None).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 0, example: 0, .. }), "{err:?}");
}

#[test]
fn predict_matches_exhaustive_search() {
    for seed in 0..3 {
        for order in [Order::FertilityFirst, Order::ReorderFirst] {
            for decoder in [DecoderVariant::Independent, DecoderVariant::Copy] {
                let model = tiny_model(order, decoder, seed).unwrap();
                for source in [vec![0], vec![2, 1]] {
                    let max_len = model.max_length(source.len());
                    let (l, y, s) = exhaustive_decode(&model, &source, max_len, 3, None).unwrap().unwrap();
                    let got = inference::predict(&model, &source, max_len).unwrap();
                    assert_eq!((got.length, &got.tokens), (l, &y));
                    assert!((got.log_score - s).abs() < 1e-9);
                    assert!((sequence_log_score(&model, &source, &y).unwrap() - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn grammar_prediction_matches_filtered_search() {
    let grammar = Grammar::parse("S -> A B\nS -> B A\nA -> 'a'\nB -> 'b'\nB -> 'c'\nS -> 'c'").unwrap();
    for seed in 0..3 {
        let model = tiny_model(Order::FertilityFirst, DecoderVariant::Independent, seed).unwrap();
        let compiled = grammar.compile(&model.vocab.target).unwrap();
        let accept = |w: &[usize]| derives(&compiled, w);
        for source in [vec![1], vec![0, 2]] {
            let max_len = model.max_length(source.len());
            let (l, y, s) = exhaustive_decode(&model, &source, max_len, 3, Some(&accept)).unwrap().unwrap();
            let got = inference::predict_grammar(&model, &source, &compiled, max_len).unwrap();
            assert_eq!((got.length, &got.tokens), (l, &y));
            assert!((got.log_score - s).abs() < 1e-9);
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    for decoder in [DecoderVariant::Independent, DecoderVariant::Autoregressive] {
        let model = tiny_model(Order::ReorderFirst, decoder, 9).unwrap();
        checkpoint::save_model(&model, &path).unwrap();
        let loaded = checkpoint::load_model(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.vocab.target.tokens(), model.vocab.target.tokens());
        let a: Vec<_> = model.params.iter().map(|(n, a)| (n.to_string(), a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())).collect();
        let b: Vec<_> = loaded.params.iter().map(|(n, a)| (n.to_string(), a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())).collect();
        assert_eq!(a, b);
        let src = [0, 1];
        assert_eq!(
            inference::predict(&model, &src, 2).unwrap().tokens,
            inference::predict(&loaded, &src, 2).unwrap().tokens
        );
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let model = tiny_model(Order::FertilityFirst, DecoderVariant::Independent, 1).unwrap();
    let mut bytes = Vec::new();
    checkpoint::write_model(&model, &mut bytes).unwrap();
    bytes.truncate(bytes.len() - 5);
    assert!(checkpoint::read_model(&bytes[..]).is_err());
}

#[test]
fn hard_alignments_factorize_into_copy_classifiers() {
    let mut model = tiny_model(Order::FertilityFirst, DecoderVariant::Independent, 4).unwrap();
    // strongly straight spans make R̄ the identity
    let w = model.params.id("reorder.span_mlp.out.weight").unwrap();
    model.params.get_mut(w).data_mut().fill(0.0);
    let b = model.params.id("reorder.span_mlp.out.bias").unwrap();
    model.params.get_mut(b).data_mut().copy_from_slice(&[60.0, -60.0]);

    let source = [2, 0];
    let (n, d, v) = (2, model.max_fertility(), model.target_vocab_size());
    let mut g = Graph::new(&model.params);
    let prep = model.prepare(&mut g, &source).unwrap();
    // l = n·d forces every fertility to d, so F̄ is 0/1
    let al = model.align(&mut g, &prep, n * d).unwrap();
    let out = model.output_distributions(&mut g, &prep, &al).unwrap();

    let param = |g: &mut Graph, name: &str| g.param(model.params.id(name).unwrap());
    let (w1, b1) = (param(&mut g, "decoder.mlp.weight"), param(&mut g, "decoder.mlp.bias"));
    let (w2, b2) = (param(&mut g, "decoder.out.weight"), param(&mut g, "decoder.out.bias"));
    let h = g.tape.matmul(prep.dec, w1).unwrap();
    let h = g.tape.add_row(h, b1).unwrap();
    let h = g.tape.tanh(h).unwrap();
    let logits = g.tape.matmul(h, w2).unwrap();
    let logits = g.tape.add_row(logits, b2).unwrap();
    let logits = g.tape.reshape(logits, &[n * d, v]).unwrap();
    let direct = g.tape.softmax(logits, 1.0).unwrap();

    let (got, want) = (g.tape.value(out), g.tape.value(direct));
    assert_eq!(got.shape(), want.shape());
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

mod common;

use std::io::Write;
use std::net::TcpStream;
use std::sync::Arc;

use common::*;
use leba_core::harness::load_splits;
use leba_core::nets::{accuracy, init_model, train, LabeledDataset, Model, ModelSpec};
use leba_core::oracle::wire::{
    decode_request, encode_request, read_response, STATUS_BUDGET, STATUS_MALFORMED, STATUS_OK,
};
use leba_core::oracle::{
    adversarial_train, fgsm_accuracy, spawn_server, DefenseSpec, MeteredOracle, OracleResponse, RemoteOracle,
    ScoreOracle,
};
use leba_core::{Error, Result, Tensor};
use proptest::prelude::*;

fn small_victim(seed: u64) -> Arc<Model> {
    Arc::new(init_model(&ModelSpec::tiny_cnn(&[2, 3], 3, (1, 8, 8), 4, seed)).unwrap())
}

/// Desk data cut down so training stays quick.
fn desk_subset(n_train: usize, n_test: usize) -> (LabeledDataset, LabeledDataset) {
    let (tr, te) = load_splits(&data_dir(), 10).unwrap();
    let a: Vec<usize> = (0..n_train.min(tr.len())).collect();
    let b: Vec<usize> = (0..n_test.min(te.len())).collect();
    (tr.subset(&a).unwrap(), te.subset(&b).unwrap())
}

fn desk_cnn(seed: u64) -> Model {
    init_model(&ModelSpec::tiny_cnn(&[8, 16], 3, (1, 28, 28), 10, seed)).unwrap()
}

// An implementation with nothing but the two trait methods, and an exhaustive
// destructuring of the response: both stop compiling if the attacker-facing
// surface grows.
struct Constant;

impl ScoreOracle for Constant {
    fn query(&self, _: &Tensor) -> Result<OracleResponse> {
        Ok(OracleResponse {
            probs: vec![1.0],
            query_index: 1,
        })
    }

    fn queries_used(&self) -> u64 {
        0
    }
}

#[test]
fn attacker_surface_is_scores_only() {
    let OracleResponse { probs, query_index } = Constant.query(&Tensor::zeros(&[1, 1, 1])).unwrap();
    assert_eq!((probs, query_index), (vec![1.0], 1));
    assert_eq!(Constant.queries_used(), 0);
}

#[test]
fn repeated_queries_are_each_metered() {
    let o = MeteredOracle::new(small_victim(1), 100);
    let x = rand_tensor(&mut rng(1), &[1, 8, 8], 0.0, 1.0);
    let a = o.query(&x).unwrap();
    let b = o.query(&x).unwrap();
    assert_eq!((a.query_index, b.query_index), (1, 2));
    assert_eq!(a.probs, b.probs);
    assert_eq!(o.queries_used(), 2);
}

#[test]
fn undefended_oracle_passes_predictions_through() {
    let v = small_victim(2);
    let o = MeteredOracle::wrap_defense(v.clone(), &DefenseSpec::None, 10).unwrap();
    let x = rand_tensor(&mut rng(2), &[1, 8, 8], 0.0, 1.0);
    assert_eq!(o.query(&x).unwrap().probs, v.predict(&x).unwrap().into_data());
}

#[test]
fn binary_quantization_is_applied_before_the_victim() {
    let v = small_victim(3);
    let o = MeteredOracle::wrap_defense(v.clone(), &DefenseSpec::Quantize { levels: 2 }, 10).unwrap();
    let grey = Tensor::new(&[1, 8, 8], vec![0.4; 64]).unwrap();
    let black = Tensor::zeros(&[1, 8, 8]);
    assert_eq!(o.query(&grey).unwrap().probs, v.predict(&black).unwrap().into_data());
}

#[test]
fn bad_queries_cost_nothing() {
    let o = MeteredOracle::new(small_victim(4), 2);
    assert!(matches!(o.query(&Tensor::zeros(&[1, 8, 7])), Err(Error::Shape { .. })));
    let mut nan = Tensor::zeros(&[1, 8, 8]);
    nan.data_mut()[3] = f64::NAN;
    assert!(o.query(&nan).is_err());
    let x = Tensor::zeros(&[1, 8, 8]);
    o.query(&x).unwrap();
    o.query(&x).unwrap();
    assert!(matches!(o.query(&x), Err(Error::BudgetExceeded { used: 2 })));
    assert_eq!(o.queries_used(), 2);
}

#[test]
fn remote_answers_match_local_bitwise() {
    let v = small_victim(5);
    let local = MeteredOracle::new(v.clone(), 100);
    let server = spawn_server("127.0.0.1:0", Arc::new(MeteredOracle::new(v, 100))).unwrap();
    let remote = RemoteOracle::connect(server.local_addr()).unwrap();
    let mut r = rng(5);
    for _ in 0..20 {
        let x = rand_tensor(&mut r, &[1, 8, 8], 0.0, 1.0);
        let a = local.query(&x).unwrap();
        let b = remote.query(&x).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(remote.queries_used(), 20);
    server.shutdown().unwrap();
}

#[test]
fn remote_budget_is_refused_with_status_one() {
    let server = spawn_server("127.0.0.1:0", Arc::new(MeteredOracle::new(small_victim(6), 1))).unwrap();
    let remote = RemoteOracle::connect(server.local_addr()).unwrap();
    let x = Tensor::zeros(&[1, 8, 8]);
    assert_eq!(remote.remote_query(&x).unwrap().status, STATUS_OK);
    let refused = remote.remote_query(&x).unwrap();
    assert_eq!(refused.status, STATUS_BUDGET);
    assert_eq!(refused.counter, 1);
    assert!(refused.probs.is_empty());
    assert!(matches!(remote.query(&x), Err(Error::BudgetExceeded { used: 1 })));
    server.shutdown().unwrap();
}

#[test]
fn truncated_frame_is_rejected_and_the_connection_survives() {
    let server = spawn_server("127.0.0.1:0", Arc::new(MeteredOracle::new(small_victim(7), 10))).unwrap();
    let mut stream = TcpStream::connect(server.local_addr()).unwrap();
    let x = Tensor::zeros(&[1, 8, 8]);
    let frame = encode_request(&x).unwrap();
    stream.write_all(&frame[..frame.len() - 11]).unwrap();
    let r = read_response(&mut stream).unwrap();
    assert_eq!(r.status, STATUS_MALFORMED);
    assert_eq!(r.counter, 0);
    stream.write_all(&frame).unwrap();
    let r = read_response(&mut stream).unwrap();
    assert_eq!((r.status, r.counter), (STATUS_OK, 1));

    let mut bad = frame.clone();
    bad[0] = b'X';
    stream.write_all(&bad).unwrap();
    assert_eq!(read_response(&mut stream).unwrap().status, STATUS_MALFORMED);
    stream.write_all(&frame).unwrap();
    assert_eq!(read_response(&mut stream).unwrap().counter, 2);
    server.shutdown().unwrap();
}

#[test]
fn wrong_shape_over_the_wire_costs_nothing() {
    let server = spawn_server("127.0.0.1:0", Arc::new(MeteredOracle::new(small_victim(8), 10))).unwrap();
    let remote = RemoteOracle::connect(server.local_addr()).unwrap();
    let r = remote.remote_query(&Tensor::zeros(&[1, 4, 4])).unwrap();
    assert_eq!((r.status, r.counter), (STATUS_MALFORMED, 0));
    server.shutdown().unwrap();
}

#[test]
fn soak_meters_exactly() {
    let o = Arc::new(MeteredOracle::new(small_victim(9), 1000));
    let server = spawn_server("127.0.0.1:0", o.clone()).unwrap();
    let remote = RemoteOracle::connect(server.local_addr()).unwrap();
    let mut r = rng(9);
    for i in 1..=1000 {
        let x = rand_tensor(&mut r, &[1, 8, 8], 0.0, 1.0);
        assert_eq!(remote.query(&x).unwrap().query_index, i);
    }
    assert!(remote.query(&Tensor::zeros(&[1, 8, 8])).is_err());
    assert_eq!(o.queries_used(), 1000);
    assert_eq!(remote.queries_used(), 1000);
    server.shutdown().unwrap();
}

proptest! {
    #[test]
    fn request_frames_round_trip(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = rand_tensor(&mut rng(seed), &[c, h, w], -1e3, 1e3);
        let b = encode_request(&x).unwrap();
        prop_assert_eq!(b.len(), 17 + 8 * c * h * w);
        prop_assert_eq!(decode_request(&b).unwrap(), x);
    }

    #[test]
    fn truncated_requests_never_decode(c in 1usize..3, h in 1usize..4, cut in 1usize..17) {
        let x = Tensor::zeros(&[c, h, 2]);
        let b = encode_request(&x).unwrap();
        let keep = b.len().saturating_sub(cut);
        prop_assert!(matches!(decode_request(&b[..keep]), Err(Error::Malformed(_))));
    }
}

#[test]
fn fine_quantization_barely_moves_scores() {
    let (tr, te) = desk_subset(600, 100);
    let (v, _) = train(desk_cnn(1), &tr, 2, 0.05, 16).unwrap();
    let v = Arc::new(v);
    let o = MeteredOracle::wrap_defense(v.clone(), &DefenseSpec::Quantize { levels: 256 }, 1000).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..te.len() {
        let x = te.image(i).unwrap();
        let q = o.query(&x).unwrap().probs;
        let p = v.predict(&x).unwrap();
        worst = p.data().iter().zip(&q).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    assert!(worst < 1e-2, "max change {worst}");
}

#[test]
fn zero_step_adversarial_training_is_standard_training() {
    let (tr, _) = desk_subset(80, 1);
    let spec = ModelSpec::mlp(&[16], (1, 28, 28), 10, 3);
    let (a, acc, robust) = adversarial_train(init_model(&spec).unwrap(), &tr, 2, 0.1, 16, 0.0).unwrap();
    let (b, acc_b) = train(init_model(&spec).unwrap(), &tr, 2, 0.1, 16).unwrap();
    assert_eq!(a, b);
    assert_eq!((acc, robust), (acc_b, acc_b));
    assert!(adversarial_train(init_model(&spec).unwrap(), &tr, 1, 0.1, 16, -0.1).is_err());
}

#[test]
fn adversarial_training_buys_robustness() {
    let (tr, te) = desk_subset(1200, 300);
    let eps = 0.1;
    let (plain, _) = train(desk_cnn(1), &tr, 5, 0.05, 16).unwrap();
    let (robust, _, _) = adversarial_train(desk_cnn(1), &tr, 5, 0.05, 16, eps).unwrap();
    let (pc, rc) = (accuracy(&plain, &te).unwrap(), accuracy(&robust, &te).unwrap());
    let (pf, rf) = (
        fgsm_accuracy(&plain, &te, eps).unwrap(),
        fgsm_accuracy(&robust, &te, eps).unwrap(),
    );
    assert!(rf > pf, "fgsm accuracy: robust {rf:.3}, plain {pf:.3}");
    assert!((pc - rc).abs() <= 0.10, "clean accuracy: robust {rc:.3}, plain {pc:.3}");
}

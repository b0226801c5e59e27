mod common;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::thread::JoinHandle;

use arrowrl::bridge::{BridgeClient, BridgeRequest, BridgeResponse, SamplePayload};
use arrowrl::domain::{encode_all, read_samples_jsonl, write_samples_jsonl, EncodedSample, FrameSeq, Sample, TaskKind, Vocab};
use arrowrl::error::Error;
use arrowrl::policy::{PolicyParams, RolloutPolicy, ToyPolicy};
use arrowrl::run::{build_vocab, init_policy};
use arrowrl::synthworld::{gen_dataset, WorldConfig};
use proptest::prelude::*;
use serde_json::{json, Value};

#[derive(Clone, Copy, PartialEq)]
enum Fault {
    None,
    /// Echo a wrong id on the n-th request.
    WrongId(u64),
    /// Old protocol version in the handshake.
    OldProto,
}

/// In-thread peer serving the toy policy over the line protocol.
fn spawn_peer(params: PolicyParams, vocab: Vocab, fault: Fault) -> (BridgeClient, JoinHandle<usize>) {
    let (req_r, req_w) = std::io::pipe().unwrap();
    let (resp_r, resp_w) = std::io::pipe().unwrap();
    let peer_vocab = vocab.clone();
    let handle = std::thread::spawn(move || serve(params, peer_vocab, fault, BufReader::new(req_r), resp_w));
    let client = BridgeClient::connect("peer", Box::new(BufReader::new(resp_r)), Box::new(req_w), Some(&vocab));
    (client.unwrap_or_else(|e| panic!("handshake: {e}")), handle)
}

fn serve(params: PolicyParams, vocab: Vocab, fault: Fault, reader: impl BufRead, mut out: impl Write) -> usize {
    let toy = ToyPolicy::new(&params, "peer");
    let mut served = 0;
    for line in reader.lines() {
        let Ok(line) = line else { break };
        let req: BridgeRequest = serde_json::from_str(&line).unwrap();
        let result = handle(&toy, &vocab, &req, fault);
        let id = if fault == Fault::WrongId(req.id) { req.id + 100 } else { req.id };
        let resp = match result {
            Ok(payload) => BridgeResponse { id, ok: true, payload: Some(payload), error: None },
            Err((code, message)) => BridgeResponse {
                id,
                ok: false,
                payload: None,
                error: Some(arrowrl::bridge::BridgeErrorBody { code: code.into(), message }),
            },
        };
        let mut s = serde_json::to_string(&resp).unwrap();
        s.push('\n');
        if out.write_all(s.as_bytes()).and_then(|_| out.flush()).is_err() {
            break;
        }
        served += 1;
    }
    served
}

fn decode(payload: &Value, vocab: &Vocab, max_frames: usize) -> (EncodedSample, FrameSeq) {
    let p: SamplePayload = serde_json::from_value(payload.clone()).unwrap();
    let enc = EncodedSample::new(&p.sample, vocab, max_frames).unwrap();
    assert_eq!(enc.query, p.encoded.query);
    assert_eq!(enc.option_tokens, p.encoded.option_tokens);
    assert_eq!(enc.target, p.encoded.target);
    (enc, FrameSeq::new(p.frames).unwrap())
}

fn handle(toy: &ToyPolicy<'_>, vocab: &Vocab, req: &BridgeRequest, fault: Fault) -> Result<Value, (&'static str, String)> {
    let max_frames = toy.params.dims.max_frames;
    let p = &req.payload;
    match req.op.as_str() {
        "hello" => {
            let proto = if fault == Fault::OldProto { 0 } else { 1 };
            Ok(json!({"proto": proto, "capabilities": ["sample", "logprobs", "option_probs"], "text_vocab": vocab.words()}))
        }
        "option_probs" => {
            let (enc, frames) = decode(p, vocab, max_frames);
            let probs = toy.option_probs(&enc, &frames).map_err(|e| ("bad_request", e.to_string()))?;
            Ok(json!({"probs": probs.probs()}))
        }
        "sample" => {
            let (enc, frames) = decode(p, vocab, max_frames);
            let r = toy
                .sample(&enc, &frames, p["temperature"].as_f64().unwrap(), p["max_len"].as_u64().unwrap() as usize, p["seed"].as_u64().unwrap())
                .map_err(|e| ("bad_request", e.to_string()))?;
            Ok(json!({"tokens": r.tokens, "token_logprobs": r.token_logprobs}))
        }
        "logprobs" => {
            let (enc, frames) = decode(p, vocab, max_frames);
            let tokens: Vec<u32> = serde_json::from_value(p["tokens"].clone()).unwrap();
            let lp = toy.logprobs(&enc, &frames, &tokens).map_err(|e| ("bad_request", e.to_string()))?;
            Ok(json!({"logprobs": lp}))
        }
        op => Err(("unsupported", format!("unknown op {op}"))),
    }
}

struct World {
    params: PolicyParams,
    vocab: Vocab,
    samples: Vec<EncodedSample>,
}

fn world() -> World {
    let cfg = WorldConfig { num_samples: 25, ..WorldConfig::default() };
    let raw = gen_dataset(&cfg).unwrap();
    let vocab = build_vocab(&raw);
    let samples = encode_all(&raw, &vocab, 13).unwrap();
    let dims = arrowrl::policy::PolicyDims { frame_vocab: cfg.frame_vocab(), text_vocab: vocab.len(), max_frames: 13, d: 16 };
    World { params: init_policy(dims, Default::default(), 3), vocab, samples }
}

#[test]
fn bridged_toy_policy_matches_in_process() {
    let w = world();
    let local = ToyPolicy::new(&w.params, "local");
    let (client, handle) = spawn_peer(w.params.clone(), w.vocab.clone(), Fault::None);
    assert_eq!(client.capabilities(), ["sample", "logprobs", "option_probs"]);
    let mut checked = 0;
    for (i, enc) in w.samples.iter().enumerate() {
        if enc.task() == TaskKind::Mcq {
            let a = local.option_probs(enc, &enc.frames).unwrap();
            let b = client.option_probs(enc, &enc.frames).unwrap();
            let diff = a.probs().iter().zip(b.probs()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-9, "{diff}");
            checked += 1;
        }
        let a = local.sample(enc, &enc.frames, 0.0, 4, i as u64).unwrap();
        let b = client.sample(enc, &enc.frames, 0.0, 4, i as u64).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.token_logprobs, b.token_logprobs);
        let a = local.sample(enc, &enc.frames, 1.0, 4, i as u64).unwrap();
        let b = client.sample(enc, &enc.frames, 1.0, 4, i as u64).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(local.logprobs(enc, &enc.frames, &enc.target).unwrap(), client.logprobs(enc, &enc.frames, &enc.target).unwrap());
    }
    assert!(checked >= 50);
    drop(client);
    assert!(handle.join().unwrap() > 300);
}

#[test]
fn protocol_survives_ten_thousand_round_trips() {
    let w = world();
    let (client, handle) = spawn_peer(w.params.clone(), w.vocab.clone(), Fault::None);
    let enc = &w.samples[0];
    let first = client.option_probs(enc, &enc.frames).unwrap();
    for _ in 1..10_000 {
        assert_eq!(client.option_probs(enc, &enc.frames).unwrap(), first);
    }
    drop(client);
    assert_eq!(handle.join().unwrap(), 10_001);
}

#[test]
fn mismatched_response_id_is_an_error() {
    let w = world();
    let (client, _handle) = spawn_peer(w.params.clone(), w.vocab.clone(), Fault::WrongId(3));
    let enc = &w.samples[0];
    client.option_probs(enc, &enc.frames).unwrap();
    let err = client.option_probs(enc, &enc.frames).unwrap_err();
    assert!(matches!(err, Error::Bridge(ref m) if m.contains("does not match")), "{err}");
}

#[test]
fn peer_errors_surface_with_their_code() {
    let w = world();
    let (client, _handle) = spawn_peer(w.params.clone(), w.vocab.clone(), Fault::None);
    let err = client.call("render_video", json!({})).unwrap_err();
    assert!(matches!(err, Error::Bridge(ref m) if m.starts_with("unsupported")), "{err}");
    // the connection stays usable
    let enc = &w.samples[0];
    client.option_probs(enc, &enc.frames).unwrap();
}

#[test]
fn handshake_rejects_other_protocols_and_vocabularies() {
    let w = world();
    let (req_r, req_w) = std::io::pipe().unwrap();
    let (resp_r, resp_w) = std::io::pipe().unwrap();
    let (p, v) = (w.params.clone(), w.vocab.clone());
    std::thread::spawn(move || serve(p, v, Fault::OldProto, BufReader::new(req_r), resp_w));
    let r = BridgeClient::connect("x", Box::new(BufReader::new(resp_r)), Box::new(req_w), None);
    assert!(matches!(r, Err(Error::Bridge(_))));

    let (req_r, req_w) = std::io::pipe().unwrap();
    let (resp_r, resp_w) = std::io::pipe().unwrap();
    let (p, v) = (w.params.clone(), w.vocab.clone());
    std::thread::spawn(move || serve(p, v, Fault::None, BufReader::new(req_r), resp_w));
    let other = Vocab::new(["something", "else"]);
    let r = BridgeClient::connect("x", Box::new(BufReader::new(resp_r)), Box::new(req_w), Some(&other));
    assert!(matches!(r, Err(Error::Bridge(ref m)) if m.contains("vocabulary")));
}

#[test]
fn closed_peer_is_an_error() {
    let w = world();
    let (req_r, req_w) = std::io::pipe().unwrap();
    let (resp_r, resp_w) = std::io::pipe().unwrap();
    let (p, v) = (w.params.clone(), w.vocab.clone());
    // serve the handshake only, then hang up
    std::thread::spawn(move || serve(p, v, Fault::None, BufReader::new(req_r).take_lines(1), resp_w));
    let client = BridgeClient::connect("x", Box::new(BufReader::new(resp_r)), Box::new(req_w), None).unwrap();
    let enc = &w.samples[0];
    assert!(matches!(client.option_probs(enc, &enc.frames), Err(Error::Bridge(_))));
}

#[test]
fn spawn_reports_a_missing_program() {
    let r = BridgeClient::spawn("x", &["/nonexistent/adapter".to_string()], None);
    assert!(matches!(r, Err(Error::Bridge(_))));
    assert!(matches!(BridgeClient::spawn("x", &[], None), Err(Error::Config(_))));
}

#[test]
fn generated_samples_roundtrip_through_jsonl() {
    let raw = gen_dataset(&WorldConfig { num_samples: 30, noise: 0.2, ..WorldConfig::default() }).unwrap();
    let mut buf = Vec::new();
    write_samples_jsonl(&mut buf, &raw).unwrap();
    assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), raw.len());
    assert_eq!(read_samples_jsonl(&buf[..]).unwrap(), raw);
}

#[test]
fn malformed_jsonl_lines_are_rejected() {
    assert!(read_samples_jsonl(&b"{\"id\": 3}\n"[..]).is_err());
    assert!(read_samples_jsonl(&b"not json\n"[..]).is_err());
}

/// Limit a line reader to its first `n` lines.
trait TakeLines: BufRead + Sized {
    fn take_lines(self, n: usize) -> BufReader<std::io::Cursor<Vec<u8>>> {
        let mut buf = Vec::new();
        for line in self.lines().take(n) {
            buf.extend(line.unwrap().into_bytes());
            buf.push(b'\n');
        }
        BufReader::new(std::io::Cursor::new(buf))
    }
}

impl<R: BufRead> TakeLines for R {}

fn sample_strategy() -> impl Strategy<Value = Sample> {
    (
        "[a-z0-9-]{1,12}",
        prop_oneof![Just(TaskKind::Mcq), Just(TaskKind::OpenQa), Just(TaskKind::Caption)],
        prop::collection::vec(0u32..100, 1..20),
        "\\PC{0,30}",
        prop::option::of(prop::collection::vec("\\PC{1,10}", 2..5)),
        "\\PC{0,20}",
        prop::collection::btree_map("[a-z]{1,6}", "\\PC{0,8}", 0..4),
    )
        .prop_map(|(id, task, frames, query, options, answer, meta): (_, _, _, _, _, _, BTreeMap<_, _>)| Sample {
            id,
            task,
            frames,
            query,
            options,
            answer,
            meta,
        })
}

proptest! {
    #[test]
    fn sample_serde_is_an_identity(s in sample_strategy()) {
        let line = serde_json::to_string(&s).unwrap();
        let back: Sample = serde_json::from_str(&line).unwrap();
        prop_assert_eq!(&back, &s);
        let req = BridgeRequest { op: "sample".into(), id: 9, payload: serde_json::to_value(&s).unwrap() };
        let back: BridgeRequest = serde_json::from_str(&serde_json::to_string(&req).unwrap()).unwrap();
        prop_assert_eq!(back, req);
    }
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 4 5`.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;

use seqmatch::autograd::{CandidateRow, Tape};
use seqmatch::checkpoint::Checkpoint;
use seqmatch::config::{Fusion, TrainingConfig, Variant};
use seqmatch::data::dataset::{prepare, PrepareRules, PreparedData};
use seqmatch::data::synthetic::{generate, PlantedPattern, SyntheticConfig};
use seqmatch::data::{segment_sessions, InteractionEvent, LongTerm, SessionRules, UserHistory};
use seqmatch::eval::{evaluate, report, Ranked};
use seqmatch::gradcheck::{numeric_param_gradient, relative_error, STEP};
use seqmatch::init::rng_for;
use seqmatch::loss::{candidate_row, sampled_softmax_loss};
use seqmatch::matching::top_n;
use seqmatch::model::Model;
use seqmatch::recommend::{RecommendRequest, RecommendResponse, Recommender, RequestEvent};
use seqmatch::sampler::LogUniformSampler;
use seqmatch::tensor::Tensor;
use seqmatch::train::Trainer;
use seqmatch::vocab::Vocab;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// 1 -------------------------------------------------------------------------

fn toy_event(user: &str, item: usize, ts: i64) -> InteractionEvent {
    let mut e = InteractionEvent::new(user, format!("i{item:02}"), ts);
    e.leaf_category = Some(format!("leaf{}", item % 7));
    e.category = Some(format!("cate{}", item % 3));
    e.brand = Some(format!("brand{}", item % 5));
    e.shop = Some(format!("shop{}", item % 4));
    e
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let n_items = 30;
    let histories: Vec<UserHistory> = (0..6)
        .map(|u| {
            let uid = format!("u{u}");
            let prior: Vec<InteractionEvent> =
                (0..6).map(|k| toy_event(&uid, (u * 5 + k * 7) % n_items, 100 - k as i64)).collect();
            UserHistory {
                user_id: uid.clone(),
                profile: BTreeMap::from([
                    ("user_id".to_string(), uid.clone()),
                    ("age_band".to_string(), format!("a{}", u % 3)),
                    ("gender".to_string(), format!("g{}", u % 2)),
                ]),
                short_term: (0..5).map(|k| toy_event(&uid, (u * 5 + k) % n_items, 1000 + k as i64)).collect(),
                long_term: LongTerm::from_events(prior.iter(), 1000, &Default::default()),
            }
        })
        .collect();
    let config = TrainingConfig {
        d: 8,
        heads: 2,
        lstm_layers: 2,
        dropout: 0.0,
        fusion: Fusion::Gated,
        user_attention: true,
        long_term: true,
        side_info: true,
        ..TrainingConfig::default()
    };
    let vocab = Vocab::build(&histories, &config.profile_features);
    ensure(vocab.num_items() == n_items + 1, || format!("vocab has {} ids", vocab.num_items()))?;
    let model = ok(Model::new(config, vocab))?;
    let h = &histories[2];
    let feats = model.featurize(&h.user_id, &h.profile, &h.short_term, &h.long_term);
    let ids: Vec<usize> = h.short_term.iter().map(|e| model.vocab().item_index(&e.item_id)).collect();
    let negatives = [3, 11, 17, 23, 29];
    // every position predicts the rest of the session (multi-target rows)
    let rows: Vec<CandidateRow> = (0..4)
        .map(|k| {
            let pos: Vec<usize> = ids[k + 1..].to_vec();
            let neg: Vec<usize> = negatives.iter().copied().filter(|n| !pos.contains(n)).collect();
            let mut row = candidate_row(k, &pos, &neg, None).unwrap();
            row.offsets = (0..row.candidates.len()).map(|c| 0.1 * c as f64 - 0.2).collect();
            row
        })
        .collect();
    let loss_of = |m: &Model| {
        let tape = Tape::new();
        let bound = m.bind(&tape);
        let trace = m.forward::<rand_chacha::ChaCha8Rng>(&tape, &bound, &feats, None).unwrap();
        let loss = tape.sampled_softmax_xent(trace.output, bound.var(m.output_slot()), rows.clone()).unwrap();
        tape.value(loss).item()
    };
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let trace = ok(model.forward::<rand_chacha::ChaCha8Rng>(&tape, &bound, &feats, None))?;
    let loss = ok(tape.sampled_softmax_xent(trace.output, bound.var(model.output_slot()), rows.clone()))?;
    let grads = ok(tape.backward(loss))?;

    let params = model.params().clone();
    let mut worst = (0.0f64, String::new());
    for slot in 0..params.len() {
        let numeric = numeric_param_gradient(&params, slot, STEP, |p| {
            let m = Model::from_parts(model.config().clone(), model.vocab().clone(), p.clone()).unwrap();
            loss_of(&m)
        });
        let zero = Tensor::zeros(numeric.shape());
        let analytic = grads.params().get(&slot).unwrap_or(&zero);
        let err = relative_error(analytic, &numeric);
        if err > worst.0 {
            worst = (err, params.name(slot).unwrap().to_string());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(worst.0 <= 1e-5, || format!("{}: relative error {:.3e}", worst.1, worst.0))?;
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} tensors, worst relative error {:.2e} ({}), {secs:.1} s",
        params.len(),
        worst.0,
        worst.1
    ))
}

// 2 -------------------------------------------------------------------------

fn sampled_softmax_oracle() -> Outcome {
    let mut rng = rng_for(20, 0);
    let (v_count, d) = (50, 6);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let o: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..v_count * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target = rng.random_range(0..v_count);
        let negatives: Vec<usize> = (0..v_count).filter(|&i| i != target).collect();
        let row = ok(candidate_row(0, &[target], &negatives, None))?;
        let tape = Tape::new();
        let out = tape.constant(ok(Tensor::matrix(1, d, o.clone()))?);
        let items = tape.constant(ok(Tensor::matrix(v_count, d, v.clone()))?);
        let loss = tape.value(ok(sampled_softmax_loss(&tape, out, items, vec![row]))?).item();

        let logits: Vec<f64> = (0..v_count).map(|i| (0..d).map(|c| o[c] * v[i * d + c]).sum()).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let exact = lse - logits[target];
        let diff = (loss - exact).abs();
        ensure(diff <= 1e-10, || format!("trial {trial}: {loss} vs exact {exact}"))?;
        worst = worst.max(diff);
    }
    Ok(format!("20 random cases, max |loss - exact| = {worst:.1e}"))
}

// 3 -------------------------------------------------------------------------

fn log_uniform_sampler() -> Outcome {
    let v = 100;
    let sampler = ok(LogUniformSampler::new((0..v).collect()))?;
    let mut rng = rng_for(3, 0);
    let draws = 1_000_000;
    let mut counts = vec![0u64; v];
    for _ in 0..draws {
        counts[sampler.sample_rank(&mut rng)] += 1;
    }
    let mut worst: f64 = 0.0;
    for (r, &c) in counts.iter().enumerate() {
        let p = ((r as f64 + 2.0) / (r as f64 + 1.0)).ln() / ((v as f64) + 1.0).ln();
        worst = worst.max((c as f64 / draws as f64 - p).abs());
    }
    ensure(worst < 0.003, || format!("max deviation {worst}"))?;
    Ok(format!("10^6 draws, max |freq - P(r)| = {worst:.2e}"))
}

// 4 -------------------------------------------------------------------------

fn synthetic(pattern: PlantedPattern, seed: u64) -> Result<PreparedData, String> {
    let config = SyntheticConfig {
        pattern,
        ..SyntheticConfig::default()
    };
    let (events, _) = ok(generate(&config, seed))?;
    ok(prepare(&events, &PrepareRules::default(), None))
}

fn hit_rate_at_10(model: &Model, data: &PreparedData) -> Result<f64, String> {
    let rec = Recommender::new(model.clone(), PrepareRules::default());
    Ok(ok(evaluate(&rec, &data.test, &[10]))?[0].hit_rate)
}

fn planted_pattern() -> Outcome {
    let started = Instant::now();
    let data = synthetic(PlantedPattern::Transitions, 0)?;
    let config = TrainingConfig {
        batch_size: 64,
        seed: 0,
        ..TrainingConfig::for_variant(Variant::Psdmmal)
    };
    let mut trainer = ok(Trainer::from_histories(config, &data.train))?;
    let untrained = hit_rate_at_10(trainer.model(), &data)?;
    let mut trained = 0.0;
    let mut epochs = 0;
    while epochs < 20 && trained < 0.8 {
        ok(trainer.run_epoch())?;
        epochs += 1;
        trained = hit_rate_at_10(trainer.model(), &data)?;
    }
    let secs = started.elapsed().as_secs_f64();
    let detail = format!(
        "HitRate@10 untrained {untrained:.3}, trained {trained:.3} after {epochs} epochs, {} test cases, {secs:.0} s",
        data.test.len()
    );
    ensure(trained >= 0.8 && untrained <= 0.15 && secs < 600.0, || detail.clone())?;
    Ok(detail)
}

// 5 -------------------------------------------------------------------------

/// Mean over three data/training seeds: a single seed's HitRate@10 on about
/// 360 test cases has a standard error near 0.015, too coarse for 0.03 gaps.
fn ablation_ordering() -> Outcome {
    let seeds = [0u64, 1, 2];
    let fusions = [Fusion::Gated, Fusion::Add, Fusion::ShortOnly];
    let mut per_seed = Vec::new();
    for &seed in &seeds {
        let data = synthetic(
            PlantedPattern::LongTermPreference {
                hub_items: 8,
                explore_rate: 0.0,
            },
            seed,
        )?;
        let mut row = Vec::new();
        for fusion in fusions {
            let config = TrainingConfig {
                fusion,
                epochs: 4,
                batch_size: 64,
                seed,
                profile_features: vec!["age_band".into(), "gender".into()],
                ..TrainingConfig::default()
            };
            let mut trainer = ok(Trainer::from_histories(config, &data.train))?;
            ok(trainer.run(4, |_| {}))?;
            row.push(hit_rate_at_10(trainer.model(), &data)?);
        }
        per_seed.push(row);
    }
    let mean: Vec<f64> = (0..3).map(|f| per_seed.iter().map(|r| r[f]).sum::<f64>() / seeds.len() as f64).collect();
    let runs: Vec<String> = per_seed.iter().map(|r| format!("{:.3}/{:.3}/{:.3}", r[0], r[1], r[2])).collect();
    let detail = format!(
        "mean HitRate@10 gated {:.3}, add {:.3}, short_only {:.3} (per seed gated/add/short_only: {})",
        mean[0],
        mean[1],
        mean[2],
        runs.join(", ")
    );
    ensure(mean[0] - mean[1] >= 0.03 && mean[1] - mean[2] >= 0.03, || detail.clone())?;
    Ok(detail)
}

// 6 -------------------------------------------------------------------------

fn retrieval_exactness() -> Outcome {
    let mut rng = rng_for(6, 0);
    let mut checked = 0usize;
    for trial in 0..10_000 {
        let len = rng.random_range(1..=64);
        let scores: Vec<f64> = (0..len)
            .map(|_| {
                if rng.random_bool(0.5) {
                    f64::from(rng.random_range(-4..4))
                } else {
                    rng.random_range(-4.0..4.0)
                }
            })
            .collect();
        let mut oracle: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for n in 1..=len + 1 {
            let got = top_n(&scores, n, &HashSet::new());
            ensure(got[..] == oracle[..n.min(len)], || format!("vector {trial}, n = {n}"))?;
            checked += 1;
        }
    }
    Ok(format!("10^4 vectors, {checked} prefixes, all equal to the sort oracle"))
}

// 7 -------------------------------------------------------------------------

fn metric_fixtures() -> Outcome {
    let ids = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();
    let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let top20 = ids("p", 20);
    let mut g_a = ids("g", 6);
    g_a.extend(strs(&["p3", "p9"]));
    let g_b = top20.clone();
    let g_c = strs(&["q0"]);
    let g_d = strs(&["x", "y"]);
    let g_e = strs(&["p19", "z0", "z1", "z2"]);
    let ranked = vec![
        Ranked {
            user_id: "a",
            recommended: top20.clone(),
            ground_truth: &g_a,
        },
        Ranked {
            user_id: "b",
            recommended: top20.clone(),
            ground_truth: &g_b,
        },
        Ranked {
            user_id: "c",
            recommended: ids("q", 5),
            ground_truth: &g_c,
        },
        Ranked {
            user_id: "d",
            recommended: top20.clone(),
            ground_truth: &g_d,
        },
        Ranked {
            user_id: "e",
            recommended: top20.clone(),
            ground_truth: &g_e,
        },
    ];
    let r = ok(report(20, &ranked))?;
    // per case (precision, recall, f1):
    //   a 2/20, 2/8, 1/7   b 1, 1, 1   c 1/20, 1, 2/21   d 0, 0, 0   e 1/20, 1/4, 1/12
    let want_user = [
        (0.1, 0.25, 1.0 / 7.0),
        (1.0, 1.0, 1.0),
        (0.05, 1.0, 2.0 / 21.0),
        (0.0, 0.0, 0.0),
        (0.05, 0.25, 1.0 / 12.0),
    ];
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    for (u, w) in r.per_user.iter().zip(want_user) {
        ensure(close(u.precision, w.0) && close(u.recall, w.1) && close(u.f1, w.2), || {
            format!("user {}: got ({}, {}, {}), want {w:?}", u.user_id, u.precision, u.recall, u.f1)
        })?;
    }
    let want = (0.8, 0.24, 0.5, 37.0 / 140.0);
    ensure(
        close(r.hit_rate, want.0) && close(r.precision, want.1) && close(r.recall, want.2) && close(r.f1, want.3),
        || format!("aggregate ({}, {}, {}, {}), want {want:?}", r.hit_rate, r.precision, r.recall, r.f1),
    )?;
    Ok("5-case fixture matches hand values within 1e-12 (incl. 2/20/8 -> F1 = 1/7)".into())
}

// 8 -------------------------------------------------------------------------

#[derive(serde::Deserialize)]
struct FixtureEvent {
    ts: i64,
    sid: Option<String>,
}

#[derive(serde::Deserialize)]
struct SessionCase {
    name: String,
    gap_seconds: i64,
    max_len: usize,
    events: Vec<FixtureEvent>,
    expected: Vec<usize>,
}

fn sessionization_golden() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/sessions.json");
    let cases: Vec<SessionCase> = ok(serde_json::from_str(&ok(std::fs::read_to_string(path))?))?;
    for case in &cases {
        let events: Vec<InteractionEvent> = case
            .events
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let mut ev = InteractionEvent::new("u", format!("i{k}"), e.ts);
                ev.session_id = e.sid.clone();
                ev
            })
            .collect();
        let rules = SessionRules {
            gap_seconds: case.gap_seconds,
            max_len: case.max_len,
        };
        let sessions = ok(segment_sessions(&events, &rules))?;
        let lens: Vec<usize> = sessions.iter().map(|s| s.len()).collect();
        ensure(lens == case.expected, || format!("{}: got {lens:?}, want {:?}", case.name, case.expected))?;
        let flat: Vec<i64> = sessions.iter().flat_map(|s| s.events.iter().map(|e| e.timestamp)).collect();
        ensure(flat.windows(2).all(|w| w[0] <= w[1]), || format!("{}: not chronological", case.name))?;
    }
    Ok(format!("{} golden cases reproduced exactly", cases.len()))
}

// 9 -------------------------------------------------------------------------

fn pipeline(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    std::fs::write(dir.join("cfg.toml"), "d = 16\nheads = 2\nepochs = 2\nbatch_size = 32\nnegatives = 10\n")
        .map_err(|e| e.to_string())?;
    let seed = [("SEQMATCH_SEED", "7")];
    common::run_cli(&["generate", "--out", &p("ev.jsonl"), "--users", "120", "--events-per-user", "30"], &seed)?;
    common::run_cli(&["prepare", "--input", &p("ev.jsonl"), "--output", &p("data")], &seed)?;
    common::run_cli(
        &["train", "--data", &p("data"), "--config", &p("cfg.toml"), "--out", &p("m.ckpt")],
        &seed,
    )?;
    common::run_cli(
        &["eval", "--checkpoint", &p("m.ckpt"), "--test", &p("data"), "--k", "10", "--k", "50", "--out", &p("report.json")],
        &seed,
    )?;
    let read = |n: &str| std::fs::read(dir.join(n)).map_err(|e| e.to_string());
    Ok((read("m.ckpt")?, read("report.json")?))
}

fn determinism() -> Outcome {
    let (a, b) = (ok(tempfile::tempdir())?, ok(tempfile::tempdir())?);
    let (ck_a, rep_a) = pipeline(a.path())?;
    let (ck_b, rep_b) = pipeline(b.path())?;
    ensure(ck_a == ck_b, || "checkpoints differ".into())?;
    ensure(rep_a == rep_b, || "reports differ".into())?;
    Ok(format!(
        "two prepare->train->eval runs: checkpoints ({} bytes) and reports ({} bytes) identical",
        ck_a.len(),
        rep_a.len()
    ))
}

// 10 ------------------------------------------------------------------------

fn random_request(rng: &mut impl Rng, n_items: usize) -> RecommendRequest {
    let n_events = rng.random_range(1..=12);
    let mut ts = 1_700_000_000i64;
    let events = (0..n_events)
        .map(|_| {
            ts += if rng.random_bool(0.2) { rng.random_range(600..90_000) } else { rng.random_range(1..300) };
            let item = if rng.random_bool(0.05) {
                "not-in-vocab".to_string()
            } else {
                format!("item{:06}", rng.random_range(0..n_items))
            };
            RequestEvent {
                item_id: item,
                timestamp: ts,
                leaf_category: Some(format!("leaf{}", rng.random_range(0..50))),
                category: Some(format!("cate{}", rng.random_range(0..10))),
                brand: None,
                shop: Some(format!("shop{}", rng.random_range(0..200))),
            }
        })
        .collect();
    RecommendRequest {
        user_id: Some(format!("user{}", rng.random_range(0..20))),
        profile: BTreeMap::new(),
        events,
        n: rng.random_range(1..=100),
    }
}

fn serving_parity_and_budget() -> Outcome {
    let n_items = 100_000;
    let catalog: Vec<InteractionEvent> = (0..n_items)
        .map(|i| {
            let mut e = InteractionEvent::new(format!("user{}", i % 20), format!("item{i:06}"), i as i64);
            e.leaf_category = Some(format!("leaf{}", i % 50));
            e.category = Some(format!("cate{}", i % 10));
            e.brand = Some(format!("brand{}", i % 300));
            e.shop = Some(format!("shop{}", i % 200));
            e
        })
        .collect();
    let history = UserHistory {
        user_id: "user0".into(),
        profile: BTreeMap::new(),
        short_term: catalog,
        long_term: LongTerm::default(),
    };
    let config = TrainingConfig {
        d: 64,
        ..TrainingConfig::for_variant(Variant::Psdmmal)
    };
    let vocab = Vocab::build(&[history], &config.profile_features);
    let model = ok(Model::new(config, vocab))?;
    let dir = ok(tempfile::tempdir())?;
    let path = dir.path().join("big.ckpt");
    ok(Checkpoint::new(model).save(&path))?;

    let offline = Recommender::from_checkpoint(ok(Checkpoint::load(&path))?);
    let served = Arc::new(Recommender::from_checkpoint(ok(Checkpoint::load(&path))?));
    let server = common::spawn_server(served)?;

    let mut rng = rng_for(10, 0);
    for _ in 0..5 {
        common::post(server, "/recommend", &ok(serde_json::to_vec(&random_request(&mut rng, n_items)))?)?;
    }
    let mut latencies = Vec::new();
    for i in 0..100 {
        let req = random_request(&mut rng, n_items);
        let body = ok(serde_json::to_vec(&req))?;
        let started = Instant::now();
        let (status, reply) = common::post(server, "/recommend", &body)?;
        latencies.push(started.elapsed());
        ensure(status == 200, || format!("request {i}: status {status}"))?;
        let resp: RecommendResponse = ok(serde_json::from_slice(&reply))?;
        let want = ok(offline.recommend(&req))?;
        ensure(resp.items == want, || format!("request {i}: service and offline rankings differ"))?;
        ensure(resp.items.len() == req.n.min(n_items), || format!("request {i}: {} items", resp.items.len()))?;
    }
    latencies.sort();
    let p99 = latencies[98];
    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    let detail = format!(
        "100 requests identical to offline; end-to-end p50 {:.1} ms, p99 {:.1} ms at |I| = 10^5, d = 64",
        ms(latencies[49]),
        ms(p99)
    );
    ensure(ms(p99) < 50.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_correctness),
        ("sampled-softmax oracle", sampled_softmax_oracle),
        ("log-uniform sampler", log_uniform_sampler),
        ("planted-pattern learning", planted_pattern),
        ("fusion ablation ordering", ablation_ordering),
        ("retrieval exactness", retrieval_exactness),
        ("metric fixtures", metric_fixtures),
        ("sessionization golden tests", sessionization_golden),
        ("determinism", determinism),
        ("serving parity and latency", serving_parity_and_budget),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {number:>2} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {number:>2} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

//! Release gate: prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails. Everything runs against the scripted stub backends.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use chrono::{TimeZone, Utc};
use proptest::prelude::*;
use proptest::strategy::Strategy as _;
use proptest::test_runner::{Config as ProptestConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use veil_core::clock::LogicalClock;
use veil_core::conversation::Strategy;
use veil_core::engine::{Engine, EngineConfig};
use veil_core::filter::{RuleId, StatsTable};
use veil_core::graph::{band, band_sizes, FeatureId, PreferenceGraph, RankParams};
use veil_core::llm::{EmbeddingVector, Gateway, HashEmbedder, ScriptedBackend};
use veil_core::profile::{Impression, Item};
use veil_core::store::LOG_FILE;
use veil_eval::metrics::{confusion_metrics, ConfusionMatrix};
use veil_eval::proxy::uniform_prediction_stub;
use veil_eval::{load_mind, make_trial, run_proxy, Bucket, Method, PlantedConfig, PlantedWorld, ProxyConfig};
use veil_service::{ApiRequest, Service};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn manifest() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

fn mind_fixture() -> PathBuf {
    manifest().join("../eval/fixtures/mind_small")
}

fn stub_gateway() -> Gateway {
    Gateway::new(ScriptedBackend::load_dir(&manifest().join("stub"), 0).expect("shipped stub scripts load"))
}

fn logical_engine(dir: &Path, clock: Arc<LogicalClock>, snapshot_every: u64) -> Engine {
    let config = EngineConfig { snapshot_every, ..EngineConfig::default() };
    Engine::open(dir, stub_gateway(), clock, config).expect("engine opens")
}

// ---------------------------------------------------------------- pagerank

/// Dense power iteration over the explicit Google matrix.
fn dense_pagerank(n: usize, weights: &BTreeMap<(usize, usize), u64>, damping: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (&(from, _), &w) in weights {
        out[from] += w as f64;
    }
    let mut m = vec![vec![0.0; n]; n];
    for (j, row_out) in out.iter().enumerate() {
        for (i, row) in m.iter_mut().enumerate() {
            let link = if *row_out == 0.0 {
                1.0 / n as f64
            } else {
                weights.get(&(j, i)).copied().unwrap_or(0) as f64 / row_out
            };
            row[j] = damping * link + (1.0 - damping) / n as f64;
        }
    }
    let mut x = vec![1.0 / n as f64; n];
    for _ in 0..5_000 {
        let next: Vec<f64> = m.iter().map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
        let delta: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = next;
        if delta < 1e-15 {
            break;
        }
    }
    let total: f64 = x.iter().sum();
    x.iter().map(|v| v / total).collect()
}

fn graph_with_nodes(n: usize, embedder: &HashEmbedder) -> (PreferenceGraph<f64>, Vec<FeatureId>) {
    let mut g = PreferenceGraph::new();
    let ids = (0..n)
        .map(|i| {
            let label = format!("feature {i}");
            let e = EmbeddingVector::from_raw(embedder.embed(&label)).unwrap();
            g.upsert_feature(&label, e, Utc.timestamp_opt(i as i64, 0).unwrap()).unwrap()
        })
        .collect();
    (g, ids)
}

fn pagerank_oracle() -> Outcome {
    let started = Instant::now();
    let embedder = HashEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = rng.random_range(1..=50);
        let (mut g, ids) = graph_with_nodes(n, &embedder);
        let mut weights = BTreeMap::new();
        let max_edges = (n * (n - 1)).min(300);
        let edges = if max_edges == 0 { 0 } else { rng.random_range(0..=max_edges) };
        while weights.len() < edges {
            let (u, v) = (rng.random_range(0..n), rng.random_range(0..n));
            if u != v && !weights.contains_key(&(u, v)) {
                weights.insert((u, v), rng.random_range(1..=5u64));
            }
        }
        for (&(u, v), &w) in &weights {
            for _ in 0..w {
                g.add_preference_edge(ids[u], ids[v]).unwrap();
            }
        }
        let ranked = g
            .rank(RankParams { damping: 0.85, tol: 1e-14, max_iter: 10_000 })
            .map_err(|e| format!("case {case}: {e}"))?;
        let oracle = dense_pagerank(n, &weights, 0.85);
        let l1: f64 = ids.iter().zip(&oracle).map(|(id, o)| (ranked.score_of(*id).unwrap() - o).abs()).sum();
        ensure!(l1 < 1e-9, "case {case} (n={n}, edges={edges}): L1 {l1:e}");
        worst = worst.max(l1);
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("200 graphs, worst L1 {worst:.1e}, {elapsed:.2?}"))
}

// ---------------------------------------------------------- graph properties

fn graph_properties() -> Outcome {
    let embedder = HashEmbedder::default();
    let strategy = (1usize..30).prop_flat_map(|n| {
        (Just(n), proptest::collection::vec((0..n, 0..n, 1u64..4), 0..150), proptest::collection::vec(0..n, 1..5))
    });
    let mut runner =
        TestRunner::new(ProptestConfig { cases: 1_000, failure_persistence: None, ..ProptestConfig::default() });
    let cases = std::cell::Cell::new(0u32);
    runner
        .run(&strategy, |(n, edges, merge)| {
            cases.set(cases.get() + 1);
            let (mut g, ids) = graph_with_nodes(n, &embedder);
            for &(u, v, w) in &edges {
                for _ in 0..w {
                    g.record_preference(ids[u], ids[v]).unwrap();
                }
            }
            let params = RankParams::default();
            let ranked = g.rank(params).map_err(|e| TestCaseError::fail(e.to_string()))?;

            prop_assert!((ranked.score_sum() - 1.0).abs() < 1e-9, "score sum {}", ranked.score_sum());

            let profile = band(&ranked);
            let labels: Vec<&str> = profile.labels().collect();
            let order: Vec<&str> = ranked.entries.iter().map(|e| e.label.as_str()).collect();
            prop_assert_eq!(&labels, &order);
            let sizes: Vec<usize> = profile.bands().map(|(_, l)| l.len()).collect();
            prop_assert_eq!(sizes, band_sizes(n).to_vec());
            let mut unique = labels.clone();
            unique.sort();
            unique.dedup();
            prop_assert_eq!(unique.len(), n);

            prop_assert_eq!(g.rank(params).unwrap(), ranked.clone());
            let restored = PreferenceGraph::from_snapshot(g.to_snapshot()).unwrap();
            prop_assert_eq!(restored.rank(params).unwrap(), ranked);

            let survivor = ids[merge[0]];
            let mut absorbed: Vec<FeatureId> =
                merge[1..].iter().map(|&i| ids[i]).filter(|&id| id != survivor).collect();
            absorbed.sort();
            absorbed.dedup();
            let before = g.total_edge_weight() + g.discarded_self_loop_weight();
            g.merge_features(survivor, &absorbed).unwrap();
            prop_assert_eq!(g.total_edge_weight() + g.discarded_self_loop_weight(), before);
            prop_assert_eq!(g.node_count(), n - absorbed.len());
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let cases = cases.get();
    ensure!(cases >= 1_000, "only {cases} cases ran");
    Ok(format!("{cases} randomized graphs: weight conservation, bands, score sum, determinism"))
}

// -------------------------------------------------------------- confusion

fn confusion_matrix() -> Outcome {
    let m = ConfusionMatrix::new(173, 32, 67, 208);
    let (p, r) = confusion_metrics::<f64>(&m);
    let (p, r) = (p.ok_or("no precision")? * 100.0, r.ok_or("no recall")? * 100.0);
    ensure!((p - 72.1).abs() <= 0.05, "precision {p:.3}%");
    ensure!((r - 84.4).abs() <= 0.05, "recall {r:.3}%");
    ensure!(m.total() == 480, "total {}", m.total());
    Ok(format!("precision {p:.2}%, recall {r:.2}%"))
}

// ------------------------------------------------------------- efficiency

/// Per-rule, per-day counters rebuilt straight from the raw log lines.
fn stats_from_log(log: &str) -> StatsTable {
    let mut table = StatsTable::new();
    for line in log.lines() {
        let event: Value = serde_json::from_str(line).unwrap();
        if event["kind"] != "feedFiltered" {
            continue;
        }
        let at: chrono::DateTime<Utc> = serde_json::from_value(event["payload"]["at"].clone()).unwrap();
        let day: NaiveDate = at.date_naive();
        for app in event["payload"]["applications"].as_array().unwrap() {
            let rule = RuleId(app["ruleId"].as_u64().unwrap());
            let cell = table.entry(rule).or_default().entry(day).or_default();
            cell.applied += 1;
            cell.filtered += u64::from(app["filtered"].as_bool().unwrap());
        }
    }
    table
}

fn filtering_efficiency() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let clock = Arc::new(LogicalClock::starting_2024());
    let service = Service::new(logical_engine(dir.path(), clock.clone(), 100));
    let r = service.route(&ApiRequest::post("/rules", json!({ "text": "I do not want to see celebrity gossip" })));
    ensure!(r.status == 201, "create rule: {}", r.body);

    // 1093 items over 7 days, 124 of them gossip.
    let mut next = 0usize;
    for day in 0..7 {
        let count = if day < 6 { 156 } else { 1093 - 6 * 156 };
        let items: Vec<Item> = (0..count)
            .map(|_| {
                next += 1;
                let title = if next.is_multiple_of(8) && next / 8 <= 124 {
                    format!("Singer {next} caught in scandal")
                } else {
                    format!("Community garden report {next}")
                };
                Item::new(format!("E{next}"), title)
            })
            .collect();
        let r = service.route(&ApiRequest::post("/feed/filter", json!({ "items": items })));
        ensure!(r.status == 200, "feed {day}: {}", r.body);
        clock.advance_millis(86_400_000);
    }
    let stats = service.route(&ApiRequest::get("/filter-stats?ruleId=1"));
    let totals = &stats.body["totals"][0];
    let (big_n, small_n) = (totals["N"].as_u64().unwrap_or(0), totals["n"].as_u64().unwrap_or(0));
    let eff = totals["efficiency"].as_f64().unwrap_or(f64::NAN);
    ensure!((big_n, small_n) == (1093, 124), "N={big_n} n={small_n}");
    ensure!((eff - 0.1134).abs() <= 0.0001, "efficiency {eff}");
    ensure!(stats.body["rows"].as_array().map(Vec::len) == Some(7), "expected 7 daily rows");

    let live = service.engine().state().filter_log.stats.clone();
    let log = fs::read_to_string(dir.path().join(LOG_FILE)).map_err(|e| e.to_string())?;
    ensure!(stats_from_log(&log) == live, "series recomputed from the log differs from live counters");
    drop(service);
    let reopened = logical_engine(dir.path(), Arc::new(LogicalClock::starting_2024()), 100);
    ensure!(reopened.state().filter_log.stats == live, "replayed counters differ from live counters");
    Ok(format!("N={big_n}, n={small_n}, efficiency {eff:.4}; 7 daily rows match the log"))
}

// ------------------------------------------------------------------ proxy

fn proxy_sanity() -> Outcome {
    let started = Instant::now();
    let world = PlantedWorld::generate(&PlantedConfig::default());
    let imps = world.impressions("S1", 200, &mut ChaCha8Rng::seed_from_u64(5));
    let refs: Vec<_> = imps.iter().collect();
    let uniform = Gateway::new(uniform_prediction_stub(4, 5));
    let a = run_proxy("S1", &refs, Method::A, &uniform, &ProxyConfig::default());
    ensure!(a.steps.len() == 200, "{} trials", a.steps.len());
    ensure!((0.17..=0.33).contains(&a.accuracy), "uniform method A accuracy {}", a.accuracy);

    let seed = PlantedConfig::default().seed;
    let planted = world.impressions("S1", 200, &mut ChaCha8Rng::seed_from_u64(seed));
    let refs: Vec<_> = planted.iter().collect();
    let gateway = Gateway::new(world.backend(seed));
    let config = ProxyConfig { seed, ..ProxyConfig::default() };
    let acc: Vec<(Method, f64)> =
        Method::ALL.iter().map(|&m| (m, run_proxy("S1", &refs, m, &gateway, &config).accuracy)).collect();
    let full = acc[0].1;
    let table = acc.iter().map(|(m, a)| format!("{m} {a:.3}")).collect::<Vec<_>>().join(", ");
    ensure!(full >= 0.85, "full {full:.3} below 0.85 ({table})");
    ensure!(acc.iter().all(|(_, a)| full >= *a), "an ablation beats full ({table})");
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("uniform A {:.3}; planted {table}; {elapsed:.2?}", a.accuracy))
}

// ------------------------------------------------------------ determinism

fn fixture_impressions(count: usize) -> Vec<Impression> {
    let ds = load_mind(&mind_fixture()).expect("fixture loads");
    let mut imps = ds.behaviors;
    imps.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.impression_id.cmp(&b.impression_id)));
    imps.truncate(count);
    for imp in &mut imps {
        imp.user_id = "U1".to_string();
    }
    imps
}

fn demo_feed() -> Vec<Item> {
    let text = fs::read_to_string(manifest().join("demo/feed.json")).unwrap();
    serde_json::from_value(serde_json::from_str::<Value>(&text).unwrap()["items"].clone()).unwrap()
}

fn full_run(dir: &Path) -> Result<Vec<u8>, String> {
    let mut engine = logical_engine(dir, Arc::new(LogicalClock::starting_2024()), 20);
    for imp in fixture_impressions(50) {
        engine.ingest_impression(&imp).map_err(|e| e.to_string())?;
    }
    engine.create_rule("I do not want to see celebrity gossip").map_err(|e| e.to_string())?;
    engine.create_rule("No scary or violent content").map_err(|e| e.to_string())?;
    let feed = engine.filter_feed(&demo_feed()).map_err(|e| e.to_string())?;
    ensure!(feed.kept.len() == 14, "kept {} of 20", feed.kept.len());
    let session = engine.open_session(Strategy::ProfileExplanation).map_err(|e| e.to_string())?;
    engine.send_message(session.id, "What does my profile say?").map_err(|e| e.to_string())?;
    let round = engine.send_message(session.id, "I am tired of sports scores").map_err(|e| e.to_string())?;
    let action = round.round.action.ok_or("no action proposed")?;
    engine.resolve_action(action.id, None, true).map_err(|e| e.to_string())?;
    ensure!(engine.state().rules.all().count() == 3, "the confirmed Add did not create a rule");
    fs::read(dir.join(LOG_FILE)).map_err(|e| e.to_string())
}

fn end_to_end_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = full_run(a.path())?;
    let second = full_run(b.path())?;
    ensure!(first == second, "event logs differ");
    let lines = first.iter().filter(|&&c| c == b'\n').count();
    Ok(format!("two runs, {lines} events, {} identical bytes", first.len()))
}

// --------------------------------------------------------- crash recovery

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// One engine call per step; each commits exactly one event.
fn scripted_step(engine: &mut Engine, step: usize, imps: &[Impression], feed: &[Item]) -> Result<(), String> {
    let e = |err: veil_core::engine::EngineError| format!("step {step}: {err}");
    match step % 10 {
        0..=2 => {
            engine.ingest_impression(&imps[(step / 10) * 3 + step % 10]).map_err(e)?;
        }
        3 => {
            engine.create_rule(&format!("No scary content, variant {step}")).map_err(e)?;
        }
        4 => {
            engine.filter_feed(&feed[(step / 10) % 10..]).map_err(e)?;
        }
        5 => {
            let id = engine.state().rules.all().last().map(|r| r.id).ok_or("no rule")?;
            engine.edit_rule(id, &format!("I do not want to see celebrity gossip ({step})")).map_err(e)?;
        }
        6 => {
            engine.open_session(Strategy::ProfileExplanation).map_err(e)?;
        }
        7 => {
            let id = *engine.state().sessions.keys().last().ok_or("no session")?;
            engine.send_message(id, "Please stop showing me sports").map_err(e)?;
        }
        8 => {
            let id = engine.pending_actions().first().map(|a| a.id).ok_or("no pending action")?;
            engine.resolve_action(id, None, step % 20 != 8).map_err(e)?;
        }
        _ => {
            let id = engine.state().rules.all().next().map(|r| r.id).ok_or("no rule")?;
            let active = engine.state().rules.get(id).map(|r| r.active).unwrap_or(true);
            engine.set_rule_active(id, !active).map_err(e)?;
        }
    }
    Ok(())
}

fn crash_recovery() -> Outcome {
    let live_dir = tempfile::tempdir().unwrap();
    let crash_root = tempfile::tempdir().unwrap();
    let clock = Arc::new(LogicalClock::starting_2024());
    let mut engine = logical_engine(live_dir.path(), clock.clone(), 25);
    let imps = fixture_impressions(100);
    let feed = demo_feed();
    for step in 0..200 {
        scripted_step(&mut engine, step, &imps, &feed)?;
        ensure!(engine.state().last_seq == step as u64 + 1, "step {step} committed more than one event");
        let killed = crash_root.path().join(format!("kill-{step}"));
        copy_dir(live_dir.path(), &killed);
        let reloaded = logical_engine(&killed, Arc::new(LogicalClock::starting_2024()), 25);
        ensure!(reloaded.state() == engine.state(), "state after event {} differs on reload", step + 1);
        drop(reloaded);
        fs::remove_dir_all(&killed).unwrap();
    }

    // A torn final write is dropped and the log truncated back to a record boundary.
    let torn = crash_root.path().join("torn");
    copy_dir(live_dir.path(), &torn);
    let log_path = torn.join(LOG_FILE);
    let intact = fs::read(&log_path).unwrap();
    let mut damaged = intact.clone();
    damaged.extend_from_slice(br#"{"seq":201,"kind":"ruleChanged","at":"2024-"#);
    fs::write(&log_path, damaged).unwrap();
    let reloaded = logical_engine(&torn, Arc::new(LogicalClock::starting_2024()), 25);
    ensure!(reloaded.state() == engine.state(), "torn tail changed the reloaded state");
    ensure!(fs::read(&log_path).unwrap() == intact, "torn tail was not truncated");
    Ok(format!("200 kill points and a torn tail reload to the live state ({} snapshots)", 200 / 25))
}

// ------------------------------------------------------------ mind fixture

fn mind_fixture_checks() -> Outcome {
    let ds = load_mind(&mind_fixture()).map_err(|e| e.to_string())?;
    ensure!(ds.behaviors.len() == 100, "{} impressions", ds.behaviors.len());

    let bounds: Vec<String> = Bucket::all().map(|b| b.to_string()).collect();
    let expected: Vec<String> =
        (0..10).map(|i| format!("[{}, {})", i * 10, i * 10 + 10)).chain(["[100, inf)".to_string()]).collect();
    ensure!(bounds == expected, "buckets {bounds:?}");
    for (clicks, bucket) in [(0, 0), (9, 0), (10, 1), (99, 9), (100, 10), (5_000, 10)] {
        ensure!(Bucket::of(clicks) == Bucket(bucket), "{clicks} clicks -> {}", Bucket::of(clicks));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut slates = 0;
    for imp in &ds.behaviors {
        if let Some(slate) = make_trial(imp, 4, &mut rng) {
            slates += 1;
            ensure!(slate.k() == 4, "slate of {}", slate.k());
            ensure!(imp.clicked().any(|c| c.id == slate.clicked().id), "slate lost its click in {}", imp.impression_id);
        }
    }

    let imp = ds
        .behaviors
        .iter()
        .find(|i| i.clicked().count() == 1 && i.unclicked().count() >= 5)
        .ok_or("no impression with one click and five unclicked items")?;
    let mut counts = [0u64; 4];
    for _ in 0..10_000 {
        counts[make_trial(imp, 4, &mut rng).unwrap().pos_index] += 1;
    }
    let expected = 2_500.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(chi2);
    ensure!(p > 0.01, "positions {counts:?}, chi2 {chi2:.3}, p {p:.4}");
    Ok(format!("100 impressions, {slates} slates, positions {counts:?} p={p:.3}"))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("pagerank oracle", pagerank_oracle),
        ("graph property suite", graph_properties),
        ("confusion-matrix reproduction", confusion_matrix),
        ("filtering-efficiency reproduction", filtering_efficiency),
        ("proxy-task sanity", proxy_sanity),
        ("end-to-end determinism", end_to_end_determinism),
        ("crash recovery", crash_recovery),
        ("MIND fixture", mind_fixture_checks),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name}: {reason}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Runs offline against the toy fixture, mock re-rankers and
//! a local fake chat-completion server.

#[path = "../../core/tests/support/http.rs"]
mod http;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::{Duration, Instant};

use biolink::corpus::{load_kb, load_mentions, Entity, KnowledgeBase, MentionFormat, Split};
use biolink::distillgen::{validate_dataset, DistillRecord};
use biolink::embedstore::{load_store, EmbeddingStore};
use biolink::evalharness::{acc_at_k, hits_at_k, recall_hits, run_eval, EvalOptions};
use biolink::promptkit::{candidate_labels, numbered_list, PromptTemplate};
use biolink::rankparse::parse_ranked;
use biolink::retriever::{hard_negative_count, Candidate, CandidateSet, Metric, NegativeKind, Retriever};
use biolink::teacher::{CallRecord, MockBackend, MockMode, Price, PriceTable, Source, TeacherClient, UsageLedger};
use http::{prompt_candidates, user_prompt, FakeServer, Reply};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy(name: &str) -> PathBuf {
    root().join("fixtures/toy").join(name)
}

fn biolink(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_biolink"));
    cmd.arg("--config").arg(root().join("configs/toy.toml")).args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("run biolink")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn ids(set: &CandidateSet) -> Vec<String> {
    set.ids().map(String::from).collect()
}

/// Integer-valued vectors keep f32 dot products exact, so the oracle and the
/// retriever agree bit for bit and ties are common.
fn int_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.gen_range(-4i32..=4) as f32).collect()
}

fn numbered_kb(n: usize) -> KnowledgeBase {
    KnowledgeBase::new(
        (0..n)
            .map(|i| Entity {
                id: format!("E{i}"),
                name: format!("entity {i}"),
            })
            .collect(),
    )
    .unwrap()
}

/// Brute force: score every row, stable sort by score descending, take k.
fn full_sort(rows: &[Vec<f32>], q: &[f32], k: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f32)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r.iter().zip(q).map(|(a, b)| a * b).sum()))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    scored.into_iter().take(k).map(|(i, _)| i).collect()
}

fn retrieval_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let start = Instant::now();
    for trial in 0..200 {
        let n = rng.gen_range(1..=200);
        let dim = rng.gen_range(1..=16);
        let k = rng.gen_range(1..=n);
        let rows: Vec<Vec<f32>> = (0..n).map(|_| int_vec(&mut rng, dim)).collect();
        let q = int_vec(&mut rng, dim);
        let kb = numbered_kb(n);
        let store = EmbeddingStore::new(dim, kb.entities().iter().map(|e| e.id.clone()).collect(), rows.concat()).unwrap();
        let got = ids(&Retriever::new(&kb, &store).unwrap().top_k("m", &q, k, Metric::Dot).unwrap());
        let want: Vec<String> = full_sort(&rows, &q, k).into_iter().map(|i| format!("E{i}")).collect();
        assert_eq!(got, want, "trial {trial}: n={n} dim={dim} k={k}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
}

const NAMES: &[&str] = &[
    "Myopia", "Glaucoma", "Cataract", "Keratitis", "Blepharitis", "Conjunctivitis", "Dry eye syndrome",
    "Macular degeneration", "Hordeolum", "Hypermetropia", "Retinal detachment", "Uveitis", "Chalazion",
    "Presbyopia", "Astigmatism", "Amblyopia", "Strabismus", "Ptosis", "Iritis", "Scleritis",
];

/// Candidate labels through the production labelling, including duplicate
/// names that need an id suffix.
fn random_candidates(rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    let k = rng.gen_range(1..=12);
    let entities: Vec<Entity> = (0..k)
        .map(|i| Entity {
            id: format!("C{i:02}.{}", rng.gen_range(0..10)),
            name: NAMES[rng.gen_range(0..NAMES.len())].to_string(),
        })
        .collect();
    let kb = KnowledgeBase::new(entities.clone()).unwrap();
    let set = CandidateSet {
        mention_uid: "m".into(),
        candidates: entities
            .iter()
            .map(|e| Candidate {
                entity_id: e.id.clone(),
                score: 0.0,
            })
            .collect(),
        k,
        metric: Metric::Dot,
    };
    candidate_labels(&set, &kb).unwrap()
}

fn corrupt(rng: &mut ChaCha8Rng, labels: &[String]) -> String {
    let mut lines: Vec<String> = labels.to_vec();
    lines.shuffle(rng);
    if rng.gen_bool(0.4) {
        let drop = rng.gen_range(0..=lines.len());
        for _ in 0..drop.min(lines.len()) {
            let i = rng.gen_range(0..lines.len());
            lines.remove(i);
        }
    }
    if rng.gen_bool(0.4) && !lines.is_empty() {
        for _ in 0..rng.gen_range(1..=3) {
            let dup = lines[rng.gen_range(0..lines.len())].clone();
            lines.insert(rng.gen_range(0..=lines.len()), dup);
        }
    }
    if rng.gen_bool(0.3) {
        lines.insert(rng.gen_range(0..=lines.len()), "Optic neuritis".into());
    }
    let mut out: Vec<String> = lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let l = match rng.gen_range(0..4) {
                0 => l.to_uppercase(),
                1 => l.to_lowercase(),
                2 => format!("  {}  ", l.replace(' ', "   ")),
                _ => l,
            };
            match rng.gen_range(0..7) {
                0 => format!("{}. {l}", i + 1),
                1 => format!("{}) {l}", i + 1),
                2 => format!("({}) {l}", i + 1),
                3 => format!("- {l}"),
                4 => format!("* {l}."),
                5 => format!("[{}] {l}", i + 1),
                _ => l,
            }
        })
        .collect();
    if rng.gen_bool(0.3) {
        out.insert(0, "Here is the ranking:".into());
    }
    let sep = if rng.gen_bool(0.5) { "\r\n" } else { "\n" };
    out.join(sep)
}

fn is_permutation(order: &[String], ids: &[String]) -> bool {
    let mut a = order.to_vec();
    let mut b = ids.to_vec();
    a.sort();
    b.sort();
    a == b
}

fn parser_fuzz() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut parsed = 0;
    for trial in 0..1000 {
        let (labels, ids) = random_candidates(&mut rng);
        let raw = corrupt(&mut rng, &labels);
        if let Ok(list) = parse_ranked("m", &raw, &labels, &ids) {
            parsed += 1;
            assert!(is_permutation(&list.order, &ids), "trial {trial}: {raw:?} -> {:?}", list.order);
            assert!(!list.clean || list.repairs.is_empty(), "trial {trial}");
        }
    }
    assert!(parsed > 900, "only {parsed} of 1000 corrupted outputs parsed");

    for trial in 0..1000 {
        let (labels, ids) = random_candidates(&mut rng);
        let mut perm: Vec<usize> = (0..labels.len()).collect();
        perm.shuffle(&mut rng);
        let raw = numbered_list(&perm.iter().map(|&i| &labels[i]).collect::<Vec<_>>());
        let list = parse_ranked("m", &raw, &labels, &ids).unwrap();
        let want: Vec<String> = perm.iter().map(|&i| ids[i].clone()).collect();
        assert_eq!(list.order, want, "trial {trial}");
        assert!(list.clean && list.repairs.is_empty(), "trial {trial}");
    }
}

struct Fixture {
    kb: KnowledgeBase,
    entities: EmbeddingStore,
    vectors: EmbeddingStore,
}

fn fixture() -> Fixture {
    Fixture {
        kb: load_kb(toy("kb.tsv")).unwrap(),
        entities: load_store(toy("emb/entities.json")).unwrap(),
        vectors: load_store(toy("emb/mentions.json")).unwrap(),
    }
}

fn metric_sandwich() {
    let f = fixture();
    let r = Retriever::new(&f.kb, &f.entities).unwrap();
    let mentions = load_mentions(toy("test.tsv"), MentionFormat::NormalizedTsv, Split::Test).unwrap();
    let template = PromptTemplate::load(root().join("templates/teacher_en.toml")).unwrap();
    let k = 6;
    let sets: Vec<Vec<String>> = mentions
        .iter()
        .map(|m| ids(&r.top_k(&m.uid, f.vectors.lookup(&m.uid).unwrap(), k, Metric::Dot).unwrap()))
        .collect();
    let golds: Vec<String> = mentions.iter().map(|m| m.gold_id.clone().unwrap()).collect();
    let recall = recall_hits(&sets, &golds).unwrap().hits;
    let opts = EvalOptions {
        k,
        metric: Metric::Dot,
        acc_ks: vec![1, 5],
        strict_gold: false,
        parallelism: 2,
        context_chars: 256,
        include_context: true,
        model: "mock".into(),
        temperature: 0.0,
        max_output: 512,
    };
    for mode in [MockMode::Identity, MockMode::Oracle, MockMode::Reverse] {
        let client = TeacherClient::new(Arc::new(MockBackend::new(mode)));
        let rep = run_eval(&mentions, &r, &f.vectors, &client, &template, &opts, None, None).unwrap().report;
        assert_eq!(rep.recall_hits, recall, "{mode:?}");
        assert!(rep.hits_at[&1] <= rep.hits_at[&5] && rep.hits_at[&5] <= recall, "{mode:?}: {:?}", rep.hits_at);
        match mode {
            MockMode::Oracle => assert_eq!(rep.hits_at[&1], recall),
            MockMode::Identity => {
                for kk in [1, 5] {
                    assert_eq!(rep.hits_at[&kk], hits_at_k(&sets, &golds, kk).unwrap().hits, "identity @{kk}");
                    assert_eq!(rep.acc_at[&kk], rep.retrieval_acc_at[&kk]);
                }
            }
            _ => {}
        }
    }
}

fn hand_traced() {
    let ranked: Vec<Vec<String>> = [1usize, 1, 1, 3]
        .iter()
        .map(|&rank| (1..=6).map(|p| if p == rank { "G".to_string() } else { format!("x{p}") }).collect())
        .collect();
    let golds = ["G"; 4];
    assert_eq!(acc_at_k(&ranked, &golds, 1).unwrap(), 0.75);
    assert_eq!(acc_at_k(&ranked, &golds, 5).unwrap(), 1.0);
}

/// Answers every request with the prompt's candidates in reverse order.
fn reversing_server() -> FakeServer {
    FakeServer::start(|_, seen| {
        let mut labels = prompt_candidates(&user_prompt(&seen.body));
        labels.reverse();
        Reply::completion(&numbered_list(&labels), 120, 30)
    })
}

fn remote_generate(server_url: &str, cache: &Path, out: &Path) -> Output {
    biolink(
        &[
            "generate",
            "--backend",
            "remote",
            "--endpoint",
            server_url,
            "--api-key-env",
            "ACCEPTANCE_API_KEY",
            "--cache-dir",
            cache.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ],
        &[("ACCEPTANCE_API_KEY", "sk-test")],
    )
}

fn determinism_and_cost(work: &Path) {
    let cache = work.join("cache");
    let (a, b) = (work.join("first"), work.join("second"));
    let server = reversing_server();
    ok(&remote_generate(&server.url, &cache, &a));
    assert_eq!(server.count(), 8);
    let url = server.url.clone();
    drop(server);
    let second = remote_generate(&url, &cache, &b);
    ok(&second);
    assert_eq!(fs::read(a.join("dataset.jsonl")).unwrap(), fs::read(b.join("dataset.jsonl")).unwrap());
    assert_eq!(UsageLedger::load(a.join("ledger.generate.json")).unwrap().remote_calls(), 8);
    let warm = UsageLedger::load(b.join("ledger.generate.json")).unwrap();
    assert_eq!(warm.remote_calls(), 0);
    assert_eq!(warm.records().len(), 8);
    assert!(String::from_utf8_lossy(&second.stdout).contains("calls: 0 remote, 8 from cache"));

    let prices = PriceTable {
        models: [(
            "m".to_string(),
            Price::Tokens {
                prompt_per_1k: 0.5,
                completion_per_1k: 1.5,
            },
        )]
        .into(),
    };
    let ledger = UsageLedger::from_records(vec![CallRecord {
        model: "m".into(),
        source: Source::Remote,
        prompt_tokens: 1000,
        completion_tokens: 1000,
        seconds: 0.0,
    }]);
    assert_eq!(biolink::teacher::cost_report(&ledger, &prices).total_usd, 2.00);
}

fn dataset_validity(work: &Path) {
    let f = fixture();
    let r = Retriever::new(&f.kb, &f.entities).unwrap();
    let train = load_mentions(toy("train.tsv"), MentionFormat::NormalizedTsv, Split::Train).unwrap();
    let sets: Vec<Vec<String>> = train
        .iter()
        .map(|m| ids(&r.top_k(&m.uid, f.vectors.lookup(&m.uid).unwrap(), 6, Metric::Dot).unwrap()))
        .collect();
    let golds: Vec<String> = train.iter().map(|m| m.gold_id.clone().unwrap()).collect();
    let recall = recall_hits(&sets, &golds).unwrap();

    let server = reversing_server();
    let runs = [
        ("remote", work.join("remote")),
        ("mock:oracle", work.join("oracle")),
        ("mock:reverse", work.join("reverse")),
    ];
    for (backend, out) in &runs {
        let o = if *backend == "remote" {
            remote_generate(&server.url, &work.join("cache"), out)
        } else {
            biolink(&["generate", "--backend", backend, "--no-cache", "--out-dir", out.to_str().unwrap()], &[])
        };
        ok(&o);
        let path = out.join("dataset.jsonl");
        let report = validate_dataset(&path).unwrap();
        assert!(report.passed(), "{backend}: {:?}", report.errors);
        assert_eq!(report.records, train.len(), "{backend}");
        let cli = Command::new(env!("CARGO_BIN_EXE_biolink")).arg("validate-dataset").arg(&path).output().unwrap();
        ok(&cli);
        let records: Vec<DistillRecord> = fs::read_to_string(&path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let with_gold = records.iter().filter(|r| r.meta.gold_in_candidates == Some(true)).count();
        // Cross-multiplied so the comparison is exact.
        assert_eq!(with_gold * recall.total, recall.hits * records.len(), "{backend}");
    }
}

fn negative_mining() {
    assert_eq!(hard_negative_count(15, 0.10), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..1000 {
        let n = rng.gen_range(17..=120);
        let dim = rng.gen_range(2..=8);
        let total = if trial % 2 == 0 { 15 } else { rng.gen_range(1..n - 1) };
        let ratio = if trial % 2 == 0 { 0.10 } else { rng.gen_range(0.0..=1.0) };
        let rows: Vec<Vec<f32>> = (0..n).map(|_| int_vec(&mut rng, dim)).collect();
        let q = int_vec(&mut rng, dim);
        let kb = numbered_kb(n);
        let store = EmbeddingStore::new(dim, kb.entities().iter().map(|e| e.id.clone()).collect(), rows.concat()).unwrap();
        let r = Retriever::new(&kb, &store).unwrap();
        let gold = format!("E{}", rng.gen_range(0..n));
        let seed = rng.gen();
        let negs = r.mine_negatives("m", &q, &gold, total, ratio, seed, Metric::Dot).unwrap();

        assert_eq!(negs.len(), total, "trial {trial}");
        assert!(negs.iter().all(|s| s.entity_id != gold), "trial {trial}: gold sampled");
        let hard: Vec<&str> = negs.iter().filter(|s| s.kind == NegativeKind::Hard).map(|s| s.entity_id.as_str()).collect();
        let random: Vec<&str> = negs.iter().filter(|s| s.kind == NegativeKind::Random).map(|s| s.entity_id.as_str()).collect();
        let expected_hard = ((ratio * total as f64) - 1e-9).ceil().max(0.0) as usize;
        assert_eq!(hard.len(), expected_hard, "trial {trial}: total={total} ratio={ratio}");
        if trial % 2 == 0 {
            assert_eq!(hard.len(), 2);
        }
        assert!(hard.iter().all(|h| !random.contains(h)), "trial {trial}: partition overlaps");
        let mut all: Vec<&str> = negs.iter().map(|s| s.entity_id.as_str()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), total, "trial {trial}: repeated entity");
        let top: Vec<String> = full_sort(&rows, &q, n)
            .into_iter()
            .map(|i| format!("E{i}"))
            .filter(|id| *id != gold)
            .take(expected_hard)
            .collect();
        assert_eq!(hard, top, "trial {trial}: hard negatives are not the top non-gold entities");
        let again = r.mine_negatives("m", &q, &gold, total, ratio, seed, Metric::Dot).unwrap();
        assert_eq!(negs, again, "trial {trial}: not deterministic");
    }
}

type Check = Box<dyn Fn()>;

fn main() {
    let work = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Check)> = vec![
        ("retrieval oracle equivalence (200 instances, < 5 s)", Box::new(retrieval_oracle)),
        ("parser fuzz: permutation closure and round trip (1000 + 1000)", Box::new(parser_fuzz)),
        ("metric sandwich on toy fixture (identity, oracle, reverse)", Box::new(metric_sandwich)),
        ("hand-traced Acc@1 = 0.75, Acc@5 = 1.0", Box::new(hand_traced)),
        ("determinism with warm cache and $2.00 cost check", {
            let dir = work.path().join("determinism");
            Box::new(move || determinism_and_cost(&dir))
        }),
        ("dataset validity and gold_in_candidates = recall@k", {
            let dir = work.path().join("validity");
            Box::new(move || dataset_validity(&dir))
        }),
        ("negative mining (1000 seeded trials)", Box::new(negative_mining)),
    ];
    let mut failed = Vec::new();
    for (name, check) in &criteria {
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(()) => println!("PASS  {name}"),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL  {name}: {msg}");
                failed.push(*name);
            }
        }
    }
    println!("acceptance: {} passed, {} failed", criteria.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

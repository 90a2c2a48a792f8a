//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs under `cargo test`; set `WALKRE_ACCEPT_ONLY=1,5` to run a subset.

use std::collections::BTreeSet;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use walkre::checkpoint;
use walkre::dataset::{generate_synthetic, save_corpus, EntityMention, GeneratorSpec, Sentence, Vocabulary};
use walkre::edge::{attend, ContextMatrix};
use walkre::evaluation::{
    approx_randomization, breakdown_by_entity_count, exact_randomization, micro_prf, Counts, Decision, DecisionSet,
};
use walkre::gradcheck::{gradcheck, GradcheckDims};
use walkre::numerics::{Tape, Tensor};
use walkre::training::{predict_corpus, train};
use walkre::walks::{aggregate_to_length, pair_row, walk_aggregate, EdgeTensor};
use walkre::{Config, Model, Preset};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- 1 -------------------------------------------------------------------

fn gradient_integrity() -> Outcome {
    let report = match gradcheck(3, GradcheckDims::Tiny) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("gradcheck failed to run: {e}")),
    };
    let has_walk = report.params.iter().any(|p| p.name.starts_with("walk"));
    let ok = report.worst < 1e-4 && report.elapsed < Duration::from_secs(60) && has_walk;
    outcome(
        ok,
        format!(
            "{} parameters, max relative error {:.2e} ({}), {:.2} s",
            report.params.len(),
            report.worst,
            report.worst_param,
            report.elapsed.as_secs_f64()
        ),
    )
}

// ---- 2 -------------------------------------------------------------------

type Edges = Vec<Vec<Vec<f64>>>;

fn oracle_step(v: &Edges, w: &[Vec<f64>], beta: f64) -> Edges {
    let n = v.len();
    let nb = w.len();
    let mut out = vec![vec![vec![]; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut acc = vec![0.0; nb];
            for k in (0..n).filter(|&k| k != i && k != j) {
                for d in 0..nb {
                    let mapped: f64 = (0..nb).map(|e| w[d][e] * v[k][j][e]).sum();
                    acc[d] += sig(v[i][k][d] * mapped);
                }
            }
            out[i][j] = (0..nb).map(|d| beta * v[i][j][d] + (1.0 - beta) * acc[d]).collect();
        }
    }
    out
}

fn edges_tensor(v: &Edges) -> Tensor {
    let n = v.len();
    let mut rows = vec![vec![]; n * (n - 1)];
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            rows[pair_row(n, i, j)] = v[i][j].clone();
        }
    }
    Tensor::from_rows(&rows).unwrap()
}

fn random_edges(n: usize, nb: usize, rng: &mut ChaCha8Rng) -> Edges {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { vec![] } else { rand_vec(nb, rng) }).collect())
        .collect()
}

fn walk_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for trial in 0..60 {
        let n = 3 + trial % 3;
        let nb = rng.gen_range(1..=8);
        let beta = rng.gen_range(0.0..1.0);
        let v = random_edges(n, nb, &mut rng);
        let w: Vec<Vec<f64>> = (0..nb).map(|_| rand_vec(nb, &mut rng)).collect();
        let mut tape = Tape::new();
        let reps = tape.input(edges_tensor(&v));
        let wt = tape.input(Tensor::from_rows(&w).unwrap());
        let out = aggregate_to_length(&mut tape, EdgeTensor::new(reps, n), 4, wt, beta).unwrap();
        let expect = oracle_step(&oracle_step(&v, &w, beta), &w, beta);
        worst = worst.max(max_diff(tape.value(out.reps).data(), edges_tensor(&expect).data()));
    }

    let mut identity = true;
    let mut empty_sum = true;
    for n in [2, 3, 4, 5] {
        let v = edges_tensor(&random_edges(n, 5, &mut rng));
        let w = Tensor::new(vec![5, 5], rand_vec(25, &mut rng)).unwrap();
        let mut tape = Tape::new();
        let reps = tape.input(v.clone());
        let wt = tape.input(w);
        let same = aggregate_to_length(&mut tape, EdgeTensor::new(reps, n), 8, wt, 1.0).unwrap();
        identity &= tape.value(same.reps).data() == v.data();
        if n == 2 {
            let half = walk_aggregate(&mut tape, &EdgeTensor::new(reps, n), wt, 0.35).unwrap();
            let expect: Vec<f64> = v.data().iter().map(|x| 0.35 * x).collect();
            empty_sum &= tape.value(half.reps).data() == expect.as_slice();
        }
    }
    outcome(
        worst < 1e-12 && identity && empty_sum,
        format!("oracle max |diff| {worst:.1e}; beta=1 identity {identity}; n=2 empty sum {empty_sum}"),
    )
}

// ---- 3 -------------------------------------------------------------------

fn attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut worst_sum, mut worst_oracle) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let m = rng.gen_range(1..16);
        let nd = rng.gen_range(1..12);
        let c: Vec<Vec<f64>> = (0..m).map(|_| rand_vec(nd, &mut rng).iter().map(|x| 4.0 * x).collect()).collect();
        let q = rand_vec(nd, &mut rng);
        let mut tape = Tape::new();
        let rows = tape.input(Tensor::from_rows(&c).unwrap());
        let qv = tape.input(Tensor::matrix(nd, 1, q.clone()).unwrap());
        let att = attend(&mut tape, Some(&ContextMatrix { rows, tokens: (0..m).collect() }), qv, nd).unwrap();
        let alpha = tape.value(att.weights.unwrap()).data().to_vec();
        let pooled = tape.value(att.context).data().to_vec();

        let u: Vec<f64> = c.iter().map(|r| r.iter().zip(&q).map(|(x, qd)| x.tanh() * qd).sum()).collect();
        let top = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = u.iter().map(|x| (x - top).exp()).sum();
        let expect_alpha: Vec<f64> = u.iter().map(|x| (x - top).exp() / z).collect();
        let expect_c: Vec<f64> = (0..nd).map(|d| (0..m).map(|r| expect_alpha[r] * c[r][d]).sum()).collect();

        worst_sum = worst_sum.max((alpha.iter().sum::<f64>() - 1.0).abs());
        worst_oracle = worst_oracle.max(max_diff(&alpha, &expect_alpha)).max(max_diff(&pooled, &expect_c));
    }

    let row = vec![0.4, -2.0, 1.5, 0.0];
    let mut tape = Tape::new();
    let rows = tape.input(Tensor::from_rows(&[row.clone()]).unwrap());
    let q = tape.input(Tensor::matrix(4, 1, vec![1.0, -1.0, 0.5, 2.0]).unwrap());
    let att = attend(&mut tape, Some(&ContextMatrix { rows, tokens: vec![0] }), q, 4).unwrap();
    let single = tape.value(att.weights.unwrap()).data() == [1.0] && tape.value(att.context).data() == row.as_slice();

    outcome(
        worst_sum <= 1e-9 && worst_oracle < 1e-12 && single,
        format!("max |sum-1| {worst_sum:.1e}; oracle max |diff| {worst_oracle:.1e}; m=1 exact {single}"),
    )
}

// ---- 4 -------------------------------------------------------------------

fn dimensional_contract() -> Outcome {
    let mut spec = GeneratorSpec::default();
    spec.sentences = 300;
    let corpus = generate_synthetic(&spec, 1).unwrap();
    let vocab = Vocabulary::build(&corpus, None);
    let relations = vocab.labels().relation_types().len();
    let model = match Model::new(Config::preset(Preset::L4), vocab, None) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("model build failed: {e}")),
    };
    let d = model.dims();
    let ok = relations == 6
        && d.context == 170
        && d.concat == 460
        && d.pair == 100
        && d.classes == 13
        && model.check_structure().is_ok();
    outcome(
        ok,
        format!(
            "{relations} relations: n_d={} n_m={} n_s=n_b={} n_r={}",
            d.context, d.concat, d.pair, d.classes
        ),
    )
}

// ---- 5 -------------------------------------------------------------------

fn overfit_spec() -> GeneratorSpec {
    let mut spec = GeneratorSpec::two_hop();
    spec.sentences = 50;
    spec.min_entities = 2;
    spec.max_entities = 6;
    spec.chain_bias = 0.0;
    spec.rules.iter_mut().for_each(|r| r.latent = false);
    spec
}

fn overfit() -> Outcome {
    let corpus = generate_synthetic(&overfit_spec(), 5).unwrap();
    let relations: usize = corpus.iter().map(|s| s.relations.len()).sum();
    let mut cfg = Config::preset(Preset::L4);
    cfg.lstm_dim = 20;
    cfg.max_epochs = 200;
    cfg.patience = 200;
    cfg.seed = 1;
    let model = Model::new(cfg, Vocabulary::build(&corpus, None), None).unwrap();
    let start = Instant::now();
    let mut first = None;
    let result = train(model, &corpus, &corpus, |e| {
        if first.is_none() && e.dev.f1 >= 0.99 {
            first = Some(e.epoch);
        }
    });
    let elapsed = start.elapsed();
    match result {
        Ok(out) => outcome(
            out.best_dev.f1 >= 0.99 && elapsed < Duration::from_secs(300),
            format!(
                "{relations} gold relations; train F1 {:.4} (first >= 0.99 at epoch {}), {:.1} s",
                out.best_dev.f1,
                first.map_or("-".to_string(), |e| e.to_string()),
                elapsed.as_secs_f64()
            ),
        ),
        Err(e) => outcome(false, format!("training failed: {e}")),
    }
}

// ---- 6 -------------------------------------------------------------------

fn dev_f1(train_set: &[Sentence], dev: &[Sentence], walk_length: usize, seed: u64) -> f64 {
    let mut cfg = Config::preset(Preset::L4);
    cfg.lstm_dim = 20;
    cfg.walk_length = walk_length;
    cfg.patience = 15;
    cfg.seed = seed;
    let model = Model::new(cfg, Vocabulary::build(train_set, None), None).unwrap();
    train(model, train_set, dev, |_| {}).unwrap().best_dev.f1
}

fn generalization() -> Outcome {
    let spec = GeneratorSpec::two_hop();
    let mut gaps = Vec::new();
    let mut rows = Vec::new();
    for data_seed in [21u64, 31, 41] {
        let train_set = generate_synthetic(&spec, data_seed).unwrap();
        let mut dev_spec = spec.clone();
        dev_spec.sentences = 100;
        let dev = generate_synthetic(&dev_spec, data_seed + 1).unwrap();
        for model_seed in [1u64, 2] {
            let l4 = dev_f1(&train_set, &dev, 4, model_seed);
            let l1 = dev_f1(&train_set, &dev, 1, model_seed);
            gaps.push(100.0 * (l4 - l1));
            rows.push(format!("{:.1}/{:.1}", 100.0 * l4, 100.0 * l1));
        }
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    outcome(
        mean >= 2.0,
        format!("mean l4-l1 dev F1 gap {mean:+.2} points over 6 runs (l4/l1: {})", rows.join(" ")),
    )
}

// ---- 7 -------------------------------------------------------------------

fn d(k: usize, h: &str, t: &str, r: &str) -> Decision {
    Decision { sentence_index: k, head: h.into(), tail: t.into(), rtype: r.into() }
}

fn oracle_f1(gold: &DecisionSet, pred: &DecisionSet) -> f64 {
    let tp = pred.iter().filter(|x| gold.contains(x)).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let p = tp / pred.len() as f64;
    let r = tp / gold.len() as f64;
    2.0 * p * r / (p + r)
}

fn exhaustive_p(a: &DecisionSet, b: &DecisionSet, gold: &DecisionSet) -> f64 {
    let units: Vec<usize> = a.iter().chain(b).map(|x| x.sentence_index).collect::<BTreeSet<_>>().into_iter().collect();
    let observed = (oracle_f1(gold, a) - oracle_f1(gold, b)).abs();
    let mut hits = 0;
    for mask in 0..1u32 << units.len() {
        let swapped = |k: usize| units.iter().position(|&u| u == k).is_some_and(|p| mask >> p & 1 == 1);
        let sa: DecisionSet = a.iter().filter(|x| !swapped(x.sentence_index)).chain(b.iter().filter(|x| swapped(x.sentence_index))).cloned().collect();
        let sb: DecisionSet = b.iter().filter(|x| !swapped(x.sentence_index)).chain(a.iter().filter(|x| swapped(x.sentence_index))).cloned().collect();
        if (oracle_f1(gold, &sa) - oracle_f1(gold, &sb)).abs() >= observed - 1e-12 {
            hits += 1;
        }
    }
    hits as f64 / (1u32 << units.len()) as f64
}

fn metrics() -> Outcome {
    let gold: DecisionSet = [d(0, "a", "b", "R"), d(0, "b", "c", "R"), d(1, "a", "b", "S"), d(2, "x", "y", "R")].into();
    let pred: DecisionSet = [
        d(0, "a", "b", "R"),
        d(0, "b", "c", "R"),
        d(1, "a", "b", "S"),
        d(1, "b", "a", "S"),
        d(2, "y", "x", "R"),
    ]
    .into();
    let prf = micro_prf(&gold, &pred);
    let hand = prf.precision == 0.6 && prf.recall == 0.75 && (prf.f1 - 2.0 / 3.0).abs() < 1e-15;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let random_set = |rng: &mut ChaCha8Rng| -> DecisionSet {
        (0..rng.gen_range(0..30))
            .map(|_| {
                let (k, h, t) = (rng.gen_range(0..10), rng.gen_range(0..4), rng.gen_range(0..4));
                d(k, &format!("E{h}"), &format!("E{t}"), ["A", "B"][rng.gen_range(0..2)])
            })
            .collect()
    };
    let mut identity = true;
    for _ in 0..500 {
        let (g, p) = (random_set(&mut rng), random_set(&mut rng));
        let sentences: Vec<Sentence> = (0..10)
            .map(|_| {
                let n = rng.gen_range(2..23);
                Sentence {
                    tokens: vec!["w".into(); n],
                    entities: (0..n).map(|k| EntityMention::new(format!("E{k}"), k, k + 1, "PER")).collect(),
                    relations: vec![],
                }
            })
            .collect();
        let rows = breakdown_by_entity_count(&g, &p, &sentences, &walkre::evaluation::default_buckets()).unwrap();
        let sum = rows.iter().fold(Counts::default(), |acc, r| acc + r.counts);
        identity &= sum == Counts::between(&g, &p);
    }

    let gold4: DecisionSet = [
        d(0, "a", "b", "R"),
        d(1, "a", "b", "R"),
        d(1, "b", "c", "S"),
        d(2, "a", "c", "R"),
        d(3, "a", "b", "S"),
    ]
    .into();
    let sys_a: DecisionSet = [d(0, "a", "b", "R"), d(1, "a", "b", "R"), d(2, "a", "c", "R"), d(3, "b", "a", "S")].into();
    let sys_b: DecisionSet = [d(0, "a", "b", "S"), d(1, "b", "c", "S"), d(2, "c", "a", "R"), d(3, "b", "a", "S")].into();
    let oracle = exhaustive_p(&sys_a, &sys_b, &gold4);
    let exact = exact_randomization(&sys_a, &sys_b, &gold4).unwrap();
    let approx = approx_randomization(&sys_a, &sys_b, &gold4, 100_000, 1).unwrap();
    let same = approx_randomization(&sys_a, &sys_a, &gold4, 1000, 1).unwrap();
    let ar_ok = oracle < 1.0 && exact == oracle && (approx - oracle).abs() < 0.01 && same == 1.0;

    outcome(
        hand && identity && ar_ok,
        format!(
            "P/R/F1 {:.4}/{:.4}/{:.4}; bucket identity {identity}; AR p {approx:.4} vs exhaustive {oracle:.4} (library exact {exact:.4}); identical systems p {same}",
            prf.precision, prf.recall, prf.f1
        ),
    )
}

// ---- 8 -------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = GeneratorSpec::default();
    spec.sentences = 40;
    let train_set = generate_synthetic(&spec, 3).unwrap();
    spec.sentences = 15;
    let dev = generate_synthetic(&spec, 4).unwrap();
    let train_path = dir.path().join("train.jsonl");
    let dev_path = dir.path().join("dev.jsonl");
    save_corpus(&train_path, &train_set).unwrap();
    save_corpus(&dev_path, &dev).unwrap();

    let run = |tag: &str| -> (Vec<u8>, Vec<u8>) {
        let out = dir.path().join(format!("{tag}.ckpt"));
        let result = Command::new(env!("CARGO_BIN_EXE_walkre"))
            .args(["train", "--config"])
            .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/../../presets/l4.cfg"))
            .args(["--set", "lstm_dim=16", "--set", "pair_dim=16", "--set", "max_epochs=3", "--seed", "11"])
            .arg("--train")
            .arg(&train_path)
            .arg("--dev")
            .arg(&dev_path)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
        let log = String::from_utf8(result.stdout).unwrap();
        let losses = log
            .lines()
            .filter(|l| l.starts_with("epoch"))
            .collect::<Vec<_>>()
            .join("\n")
            .into_bytes();
        (losses, std::fs::read(out).unwrap())
    };
    let (log_a, ckpt_a) = run("a");
    let (log_b, ckpt_b) = run("b");
    let same_run = !log_a.is_empty() && log_a == log_b && ckpt_a == ckpt_b;

    let mut cfg = Config::preset(Preset::L4);
    cfg.lstm_dim = 16;
    cfg.pair_dim = 16;
    cfg.max_epochs = 2;
    let model = Model::new(cfg, Vocabulary::build(&train_set, None), None).unwrap();
    let trained = train(model, &train_set, &dev, |_| {}).unwrap().model;
    let loaded = checkpoint::read_checkpoint(checkpoint::to_bytes(&trained).unwrap().as_slice()).unwrap();
    let mut bit_identical = true;
    for s in dev.iter().filter(|s| s.entities.len() >= 2) {
        let a = trained.predict(&trained.prepare(s).unwrap()).unwrap();
        let b = loaded.predict(&loaded.prepare(s).unwrap()).unwrap();
        bit_identical &= a.iter().zip(&b).all(|(x, y)| {
            x.label == y.label && x.probs.iter().map(|p| p.to_bits()).eq(y.probs.iter().map(|p| p.to_bits()))
        });
    }
    bit_identical &= predict_corpus(&trained, &dev).unwrap() == predict_corpus(&loaded, &dev).unwrap();

    outcome(
        same_run && bit_identical,
        format!(
            "repeat train: logs and checkpoints identical {same_run} ({} bytes); save/load predict bit-identical {bit_identical}",
            ckpt_a.len()
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<BTreeSet<usize>> = std::env::var("WALKRE_ACCEPT_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "gradient integrity", gradient_integrity),
        (2, "walk algebra", walk_algebra),
        (3, "attention", attention),
        (4, "dimensional contract", dimensional_contract),
        (5, "overfit sanity", overfit),
        (6, "generalization signal", generalization),
        (7, "metrics", metrics),
        (8, "determinism", determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let verdict = if result.passed { "PASS" } else { "FAIL" };
        println!("[{verdict}] {id}. {name}: {} [{:.1} s]", result.detail, start.elapsed().as_secs_f64());
        if !result.passed {
            failed += 1;
        }
    }
    if only.as_ref().map_or(true, |s| s.contains(&9)) {
        println!("[INFO] 9. ACE 2005 reproduction: not gated; see README for the procedure");
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

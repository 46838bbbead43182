//! Acceptance criteria. Runs without the libtest harness so that every
//! criterion prints one PASS or FAIL line; exits non-zero on any failure.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use qembed::binary::{and_popcount, BinaryMatrix};
use qembed::cluster::ClusterModel;
use qembed::corpus::{Corpus, Document};
use qembed::cost::{llm_prompt_count, llm_qa_cost, mbqa_cost, training_pair_count, CostParams};
use qembed::cqg::{probe_question, select_question_bank, CandidateQuestion, ProbeConfig, ScoredCandidate};
use qembed::eval::{cognitive_load, ndcg_at_k, spearman, v_measure, Gain};
use qembed::mbqa::{compute_pos_weight, head_loss_grad, TrainingExample};
use qembed::pipeline::demo;
use qembed::prompts::{render_cqg_prompt, render_qa_prompt, render_qaemb_prompt};
use qembed::providers::{mock_encoder, DecodeParams, EncoderProvider, LlmError, LlmProvider};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Answers "yes" for the documents whose bit is set in `mask`.
struct MaskLlm {
    mask: u32,
    order: Vec<String>,
}

impl LlmProvider for MaskLlm {
    fn complete(&self, prompt: &str, _: &DecodeParams) -> Result<String, LlmError> {
        let i = self
            .order
            .iter()
            .position(|t| prompt.contains(&format!("\n{t}\n")))
            .expect("probe text is one of the documents");
        Ok(if self.mask >> i & 1 == 1 { "1. yes" } else { "1. no" }.into())
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    // five positives, three in the nearest cluster, two far away
    let sizes = [5, 3, 2];
    let mut docs = Vec::new();
    let mut assignments = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            docs.push(Document {
                id: format!("c{c}d{i}"),
                text: format!("cluster {c} text {i}"),
                source: None,
            });
            assignments.push(c);
        }
    }
    let ids: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
    let order: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
    let model = ClusterModel::from_parts(1, 0, vec![0.0, 1.0, 5.0], 0.0, ids, assignments).map_err(|e| e.to_string())?;
    let corpus = Corpus::new(docs).map_err(|e| e.to_string())?;
    let q = CandidateQuestion {
        text: "Is it in cluster zero?".into(),
        origin_cluster: Some(0),
        ordinal: 1,
    };
    let cfg = ProbeConfig {
        neighbors: 1,
        ..ProbeConfig::default()
    };
    for mask in 0u32..1024 {
        let llm = MaskLlm { mask, order: order.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(mask as u64);
        let got = probe_question(&q, &corpus, &model, &llm, &cfg, &DecodeParams::answering(), &mut rng)
            .map_err(|e| e.to_string())?;
        let pos = (0..5).filter(|i| mask >> i & 1 == 1).count();
        let neg = (5..10).filter(|i| mask >> i & 1 == 1).count();
        let expected = pos as f64 / 5.0 - neg as f64 / 5.0;
        check(got.quality == expected, format!("mask {mask:#012b}: {} != {expected}", got.quality))?;
    }
    let t = start.elapsed();
    check(t < Duration::from_secs(1), format!("took {t:?}"))?;
    Ok(format!("1024 combinations exact in {t:.2?}"))
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let words = [
        "river", "bank", "loan", "tide", "orbit", "comet", "basil", "oven", "garlic", "reef", "whale",
        "budget", "tax", "pension", "galaxy", "nebula", "dough", "simmer", "shark", "lagoon",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let candidates: Vec<ScoredCandidate> = (0..500)
        .map(|i| {
            let n = rng.gen_range(1..=3);
            let picked: Vec<&str> = words.choose_multiple(&mut rng, n).copied().collect();
            ScoredCandidate {
                question: CandidateQuestion {
                    text: format!("Does the text mention {}?", picked.join(" ")),
                    origin_cluster: Some(rng.gen_range(0..40)),
                    ordinal: i % 10 + 1,
                },
                quality: rng.gen_range(-1.0..=1.0),
            }
        })
        .collect();
    let enc = mock_encoder(0, 64);
    let bank = select_question_bank(&candidates, &enc, 0.8, 4).map_err(|e| e.to_string())?;
    let oracle = mock_encoder(0, 64);
    let vecs: Vec<Vec<f32>> = bank
        .questions()
        .iter()
        .map(|q| oracle.embed(&q.text).map(|e| e.0).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let mut worst = f64::MIN;
    for i in 0..vecs.len() {
        for j in 0..i {
            let c = cosine(&vecs[i], &vecs[j]);
            worst = worst.max(c);
            check(c <= 0.8, format!("questions {j} and {i} have cosine {c}"))?;
        }
    }
    let mut per: HashMap<Option<usize>, usize> = HashMap::new();
    for q in bank.questions() {
        *per.entry(q.origin_cluster).or_default() += 1;
    }
    let most = per.values().copied().max().unwrap_or(0);
    check(most <= 4, format!("a cluster holds {most} questions"))?;
    check(bank.m() < candidates.len(), "nothing was filtered; the check is vacuous")?;
    let t = start.elapsed();
    check(t < Duration::from_secs(10), format!("took {t:?}"))?;
    Ok(format!("m = {} of 500, max cosine {worst:.4}, max per cluster {most}, {t:.2?}", bank.m()))
}

/// Independent forward pass and weighted BCE.
fn oracle_loss(p: &[f64], d: usize, h: usize, e: &[f64], label: bool, pw: f64) -> f64 {
    let mut z = p[h * d + 2 * h];
    for j in 0..h {
        let mut a = p[h * d + j];
        for k in 0..d {
            a += p[j * d + k] * e[k];
        }
        if a > 0.0 {
            z += p[h * d + h + j] * a;
        }
    }
    let s = 1.0 / (1.0 + (-z).exp());
    if label {
        -pw * s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for trial in 0..200 {
        let d = rng.gen_range(1..=16);
        let h = rng.gen_range(1..=8);
        let n = h * d + 2 * h + 1;
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // skip draws with a hidden unit sitting on the ReLU kink
        let near_kink = (0..h).any(|j| {
            let a = p[h * d + j] + (0..d).map(|k| p[j * d + k] * e[k]).sum::<f64>();
            a.abs() < 1e-3
        });
        if near_kink {
            continue;
        }
        let label = trial % 2 == 0;
        let pw = rng.gen_range(0.5..8.0);
        let mut grad = vec![0.0; n];
        head_loss_grad(&p, d, h, &e, label, pw, &mut grad);
        let step = 1e-6;
        for k in 0..n {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[k] += step;
            b[k] -= step;
            let numeric = (oracle_loss(&a, d, h, &e, label, pw) - oracle_loss(&b, d, h, &e, label, pw)) / (2.0 * step);
            let scale = numeric.abs().max(grad[k].abs());
            if scale > 1e-7 {
                worst = worst.max((numeric - grad[k]).abs() / scale);
            } else {
                worst = worst.max((numeric - grad[k]).abs());
            }
        }
        checked += 1;
    }
    check(worst < 1e-4, format!("max relative error {worst:e}"))?;
    Ok(format!("{checked} random heads, max relative error {worst:.2e}"))
}

fn tree_hash(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&p).unwrap())));
            }
        }
    }
    out
}

fn report_records(ws: &Path, name: &str) -> Vec<serde_json::Value> {
    fs::read_to_string(ws.join("reports").join(name))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn criterion_4(ws: &Path, elapsed: Duration) -> Outcome {
    let train = report_records(ws, "train.jsonl");
    let acc = train[0]["heldout"]["accuracy"].as_f64().ok_or("no held-out accuracy")?;
    let sts = report_records(ws, "eval-sts.jsonl");
    let rho = sts[0]["binary_spearman"].as_f64().ok_or("no STS score")?;
    check(acc >= 0.95, format!("held-out accuracy {acc}"))?;
    check(rho >= 0.8, format!("binary STS Spearman {rho}"))?;
    check(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(format!("accuracy {acc:.4}, Spearman {rho:.4}, {elapsed:.2?}"))
}

fn criterion_5() -> Outcome {
    let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).map_err(|e| e.to_string())?;
    check((rho - 0.8).abs() <= 1e-12, format!("spearman {rho}"))?;

    let qrels: HashMap<String, f64> = [("a".to_string(), 1.0), ("b".to_string(), 1.0)].into();
    let n = ndcg_at_k(&["a", "x", "b", "y"], &qrels, 10, Gain::Linear);
    check((n - 0.9197).abs() <= 1e-4, format!("ndcg {n}"))?;

    let single = v_measure(&[0, 0, 1, 1], &[0, 0, 0, 0]).map_err(|e| e.to_string())?;
    let perfect = v_measure(&[0, 0, 1, 1], &[5, 5, 7, 7]).map_err(|e| e.to_string())?;
    check(single.v == 0.0, format!("v for one predicted cluster {}", single.v))?;
    check(perfect.v == 1.0, format!("v for a relabelled match {}", perfect.v))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let m = rng.gen_range(1..300);
        let u: Vec<bool> = (0..m).map(|_| rng.gen()).collect();
        let v: Vec<bool> = (0..m).map(|_| rng.gen()).collect();
        let mut expected = 0u64;
        for j in 0..m {
            if u[j] && v[j] {
                expected += 1;
            }
        }
        let (mut a, mut b) = (BinaryMatrix::new(m, "fp"), BinaryMatrix::new(m, "fp"));
        a.push_row("u", &u).map_err(|e| e.to_string())?;
        b.push_row("v", &v).map_err(|e| e.to_string())?;
        let packed = and_popcount(a.packed_row(0), b.packed_row(0)) as u64;
        let plain = cognitive_load(&u, &v).map_err(|e| e.to_string())?;
        check(packed == expected && plain == expected, format!("load {packed}/{plain} != {expected}"))?;
    }
    Ok(format!("spearman {rho}, ndcg {n:.6}, v-measure 0 and 1, 10,000 load pairs exact"))
}

fn criterion_6(ws: &Path) -> Outcome {
    let rows: Vec<(f64, f64)> = report_records(ws, "ablate.jsonl")
        .iter()
        .filter(|r| r["setting"] == "tau")
        .map(|r| (r["value"].as_f64().unwrap(), r["mean_cognitive_load"].as_f64().unwrap()))
        .collect();
    let taus: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let expected: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    check(taus == expected, format!("swept {taus:?}"))?;
    for w in rows.windows(2) {
        check(w[1].1 <= w[0].1, format!("load rises from {} at {} to {} at {}", w[0].1, w[0].0, w[1].1, w[1].0))?;
    }
    let loads: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.1)).collect();
    Ok(format!("loads {}", loads.join(" ")))
}

fn criterion_7() -> Outcome {
    let (no, yes) = (846_089usize, 112_645usize);
    // spread the answers over documents of 1,000 questions each
    let mut examples = Vec::new();
    let mut left = [(no, false), (yes, true)];
    let mut doc = 0;
    while left.iter().any(|l| l.0 > 0) {
        let mut answers = BTreeMap::new();
        for q in 0..1000 {
            if let Some(l) = left.iter_mut().find(|l| l.0 > 0) {
                answers.insert(q, l.1);
                l.0 -= 1;
            }
        }
        examples.push(TrainingExample {
            document_id: format!("d{doc}"),
            answers,
        });
        doc += 1;
    }
    let w = compute_pos_weight(&examples).map_err(|e| e.to_string())?;
    check((w - 7.5111).abs() <= 1e-4, format!("pos_weight {w}"))?;
    Ok(format!("pos_weight {w:.4}"))
}

fn criterion_8() -> Outcome {
    let p = CostParams::default();
    let prompts = llm_prompt_count(&p);
    check(prompts == 4_400_000_000, format!("prompt count {prompts}"))?;
    let pairs = training_pair_count(&p);
    check(pairs == 10_000_000, format!("training pairs {pairs}"))?;
    let usd = llm_qa_cost(&p);
    check((usd - 244_551.0).abs() <= 0.1 * 244_551.0, format!("LLM cost {usd}"))?;
    let mut totals = Vec::new();
    for (q, expected) in [(2_000, 13.0), (4_000, 20.0), (6_000, 27.0), (8_000, 34.0), (10_000, 41.0)] {
        let t = mbqa_cost(&p.with_questions(q)).map_err(|e| e.to_string())?.total;
        check((t - expected).abs() <= 2.0, format!("MBQA at {q}: {t}"))?;
        totals.push(format!("{t:.2}"));
    }
    Ok(format!("LLM ${usd:.0}, MBQA {}", totals.join(" ")))
}

fn criterion_9(first: &Path, second: &Path) -> Outcome {
    let mut compared = 0;
    for part in ["artifacts", "reports"] {
        let (a, b) = (tree_hash(&first.join(part)), tree_hash(&second.join(part)));
        check(a.keys().eq(b.keys()), format!("{part}: file sets differ"))?;
        for (name, h) in &a {
            check(b[name] == *h, format!("{part}/{name} differs"))?;
            compared += 1;
        }
    }
    for f in ["state.json", "config.toml"] {
        check(fs::read(first.join(f)).unwrap() == fs::read(second.join(f)).unwrap(), format!("{f} differs"))?;
        compared += 1;
    }
    Ok(format!("{compared} files byte-identical"))
}

fn criterion_10() -> Outcome {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let read = |name: &str| fs::read_to_string(golden.join(name)).unwrap();
    let cases = [
        ("cqg_toy.txt", render_cqg_prompt(&["Whales use echolocation to hunt."], &["Eagles hunt from the sky."])),
        (
            "qaemb_toy.txt",
            render_qaemb_prompt(
                &["The committee approved the new budget.", "A storm closed the mountain pass."],
                &["Does the sentence involve a person?"],
            ),
        ),
        (
            "qa_toy.txt",
            render_qa_prompt(
                "Apple is a technology company.",
                &["Is the article about AI?", "Is the article about sports?", "Is the article about food?"],
            ),
        ),
    ];
    for (name, rendered) in &cases {
        check(read(name).as_bytes() == rendered.as_bytes(), format!("{name} differs"))?;
    }
    Ok("CQG, QAEmb and QA prompts byte-identical".into())
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let (w1, w2) = (dir.path().join("run1"), dir.path().join("run2"));
    let start = Instant::now();
    let first = demo::run_demo(&w1, None);
    let elapsed = start.elapsed();
    let second = demo::run_demo(&w2, None);
    let pipeline_ok = match (&first, &second) {
        (Ok(_), Ok(_)) => Ok(()),
        (Err(e), _) | (_, Err(e)) => Err(format!("demo run failed: {e}")),
    };
    let needs_runs = |f: &dyn Fn() -> Outcome| pipeline_ok.clone().and_then(|_| f());

    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "probe quality oracle", criterion_1()),
        (2, "question bank invariants", criterion_2()),
        (3, "head gradient check", criterion_3()),
        (4, "synthetic end to end", needs_runs(&|| criterion_4(&w1, elapsed))),
        (5, "metric oracles", criterion_5()),
        (6, "threshold monotonicity", needs_runs(&|| criterion_6(&w1))),
        (7, "pos_weight arithmetic", criterion_7()),
        (8, "cost model", criterion_8()),
        (9, "determinism", needs_runs(&|| criterion_9(&w1, &w2))),
        (10, "prompt fidelity", criterion_10()),
    ];
    let mut failures = 0;
    for (n, name, r) in &results {
        match r {
            Ok(detail) => println!("PASS criterion {n:>2} ({name}): {detail}"),
            Err(why) => {
                failures += 1;
                println!("FAIL criterion {n:>2} ({name}): {why}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}

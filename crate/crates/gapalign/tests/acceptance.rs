//! Acceptance suite. Every criterion is checked against an independently
//! written brute-force oracle (or analytic values) and prints one
//! pass/fail line; the test fails if any criterion fails.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::net::TcpListener;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use gapalign::corpus_io::reservoir_sample;
use gapalign::density::{
    kde_at, kde_batch, kde_self_excluded, kernel, BatchMode, DensityField, GridSpec, KdeParams,
    Point2,
};
use gapalign::diffset::{run_diffset, DiffsetConfig};
use gapalign::embedding::EmbeddingMatrix;
use gapalign::projection::{pca_fit, ProjectedPoint};
use gapalign::rewrite::{
    filter_queries, render_prompt, FilterPolicy, PromptKind, PromptTemplate, QueryCandidate,
    RejectReason, ANSWER_GENERATION_TEMPLATE, QUERY_GENERATION_TEMPLATE, QUERY_SCORING_TEMPLATE,
};
use gapalign::viz::{overlay_svg_string, OverlaySpec};

// ---------------------------------------------------------------- oracles

fn oracle_kernel(a: Point2, b: Point2, p: &KdeParams) -> f64 {
    let u = (a[0] - b[0]) / p.h_x;
    let v = (a[1] - b[1]) / p.h_y;
    (-(u.powi(2) + v.powi(2)) / (2.0 * p.sigma.powi(2))).exp()
}

fn oracle_kde(q: Point2, refs: &[Point2], p: &KdeParams) -> f64 {
    let s: f64 = refs.iter().map(|r| oracle_kernel(q, *r, p)).sum();
    s / (refs.len() as f64 * p.h_x * p.h_y)
}

fn oracle_kde_self_excluded(i: usize, pts: &[Point2], p: &KdeParams) -> f64 {
    let s: f64 = pts
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, r)| oracle_kernel(pts[i], *r, p))
        .sum();
    s / (pts.len() as f64 * p.h_x * p.h_y)
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = b.abs().max(1e-300);
    (a - b).abs() / scale
}

fn rand_points(rng: &mut ChaCha8Rng, n: usize, span: f64) -> Vec<Point2> {
    (0..n)
        .map(|_| [rng.gen::<f64>() * span - span / 2.0, rng.gen::<f64>() * span - span / 2.0])
        .collect()
}

fn rand_params(rng: &mut ChaCha8Rng) -> KdeParams {
    KdeParams {
        h_x: 0.2 + rng.gen::<f64>() * 1.8,
        h_y: 0.2 + rng.gen::<f64>() * 1.8,
        sigma: 0.5 + rng.gen::<f64>() * 1.5,
    }
}

// ------------------------------------------------------------ criterion 1

fn criterion_kde_oracle() {
    let start = Instant::now();
    for f in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + f);
        let nq = 1 + rng.gen_range(0..500);
        let nr = 1 + rng.gen_range(0..500);
        let queries = rand_points(&mut rng, nq, 6.0);
        let refs = rand_points(&mut rng, nr, 6.0);
        let params = rand_params(&mut rng);

        let exact = kde_batch(&queries, &refs, &params, BatchMode::Exact).unwrap();
        let truncated = kde_batch(&queries, &refs, &params, BatchMode::Truncated).unwrap();
        for (i, q) in queries.iter().enumerate() {
            let oracle = oracle_kde(*q, &refs, &params);
            let single = kde_at(*q, &refs, &params).unwrap();
            assert!(rel_err(single, oracle) <= 1e-7, "kde_at fixture {f} point {i}");
            assert!(rel_err(exact[i], oracle) <= 1e-7, "kde_batch exact fixture {f} point {i}");
            assert!(
                rel_err(truncated[i], exact[i]) <= 1e-6,
                "kde_batch truncated fixture {f} point {i}: {} vs {}",
                truncated[i],
                exact[i]
            );
        }
        if refs.len() >= 2 {
            for i in 0..refs.len() {
                let oracle = oracle_kde_self_excluded(i, &refs, &params);
                let got = kde_self_excluded(i, &refs, &params).unwrap();
                assert!(rel_err(got, oracle) <= 1e-7, "self-excluded fixture {f} point {i}");
            }
        }
    }
    assert!(start.elapsed().as_secs() < 30, "criterion 1 exceeded 30 s");
}

// ------------------------------------------------------------ criterion 2

fn criterion_analytic_kernel() {
    assert_eq!(kernel([0.0, 0.0], [1.0, 0.0], 1.0), (-0.5f64).exp());
    let params = KdeParams::default();
    let v = kde_self_excluded(0, &[[1.5, -2.0], [1.5, -2.0]], &params).unwrap();
    assert_eq!(v, 0.5);
}

// ------------------------------------------------------------ criterion 3

fn oracle_threshold_select(
    pre: &[Point2],
    sft: &[Point2],
    params: &KdeParams,
    tau: f64,
    normalize: bool,
) -> Vec<bool> {
    let densities: Vec<f64> = pre.iter().map(|p| oracle_kde(*p, sft, params)).collect();
    let max = densities.iter().copied().fold(0.0f64, f64::max);
    densities
        .iter()
        .map(|&d| {
            let score = if normalize {
                if max > 0.0 {
                    d / max
                } else {
                    0.0
                }
            } else {
                d
            };
            score < tau
        })
        .collect()
}

fn oracle_ratio_select(pre: &[Point2], sft: &[Point2], params: &KdeParams, tau: f64) -> Vec<bool> {
    (0..pre.len())
        .map(|i| {
            let f_sft = oracle_kde(pre[i], sft, params);
            let f_pre = oracle_kde_self_excluded(i, pre, params);
            let score = if f_sft == 0.0 { f64::INFINITY } else { f_pre / f_sft };
            score > tau
        })
        .collect()
}

fn criterion_diffset_oracle() {
    let start = Instant::now();
    let taus = [0.1, 0.7, 1.0, 2.0];
    for f in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + f);
        let np = 2 + rng.gen_range(0..299);
        let ns = 1 + rng.gen_range(0..300);
        let pre_pts = rand_points(&mut rng, np, 8.0);
        let sft_pts = rand_points(&mut rng, ns, 8.0);
        let params = rand_params(&mut rng);
        // the implementation widens f32 point coordinates to f64; feed the
        // oracle the identical widened values
        let pre: Vec<ProjectedPoint> = pre_pts
            .iter()
            .enumerate()
            .map(|(i, p)| ProjectedPoint { id: format!("p{i}"), x: p[0] as f32, y: p[1] as f32 })
            .collect();
        let sft: Vec<ProjectedPoint> = sft_pts
            .iter()
            .enumerate()
            .map(|(i, p)| ProjectedPoint { id: format!("s{i}"), x: p[0] as f32, y: p[1] as f32 })
            .collect();
        let pre_w: Vec<Point2> = pre.iter().map(|p| [p.x as f64, p.y as f64]).collect();
        let sft_w: Vec<Point2> = sft.iter().map(|p| [p.x as f64, p.y as f64]).collect();

        let mut prev_threshold: Option<Vec<bool>> = None;
        let mut prev_ratio: Option<Vec<bool>> = None;
        for tau in taus {
            // the normalized threshold criterion is only defined for tau in
            // (0, 1]; above that the raw-density form is exercised
            let normalize = tau <= 1.0;
            let mut cfg = DiffsetConfig::threshold(tau);
            cfg.normalize_threshold_densities = normalize;
            cfg.kde = Some(params);
            let got: Vec<bool> = run_diffset(&pre, &sft, &cfg)
                .unwrap()
                .iter()
                .map(|v| v.selected)
                .collect();
            let want = oracle_threshold_select(&pre_w, &sft_w, &params, tau, normalize);
            assert_eq!(got, want, "threshold fixture {f} tau {tau}");
            if normalize {
                if let Some(prev) = &prev_threshold {
                    // larger tau can only add points
                    assert!(
                        prev.iter().zip(&got).all(|(a, b)| !a || *b),
                        "threshold monotonicity fixture {f} tau {tau}"
                    );
                }
                prev_threshold = Some(got);
            }

            let mut cfg = DiffsetConfig::ratio(tau);
            cfg.kde = Some(params);
            let got: Vec<bool> = run_diffset(&pre, &sft, &cfg)
                .unwrap()
                .iter()
                .map(|v| v.selected)
                .collect();
            let want = oracle_ratio_select(&pre_w, &sft_w, &params, tau);
            assert_eq!(got, want, "ratio fixture {f} tau {tau}");
            if let Some(prev) = &prev_ratio {
                // larger tau can only remove points
                assert!(
                    got.iter().zip(prev).all(|(a, b)| !a || *b),
                    "ratio monotonicity fixture {f} tau {tau}"
                );
            }
            prev_ratio = Some(got);
        }
    }
    assert!(start.elapsed().as_secs() < 60, "criterion 3 exceeded 60 s");
}

// ------------------------------------------------------------ criterion 4

fn criterion_reservoir_uniformity() {
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    let start = Instant::now();
    let n = 10usize;
    let k = 3usize;
    let trials = 100_000u64;
    let mut counts = [0u64; 10];
    for seed in 0..trials {
        let sample =
            reservoir_sample((0..n).map(gapalign::Result::Ok), k, seed).unwrap();
        assert_eq!(sample.len(), k);
        for item in sample {
            counts[item] += 1;
        }
    }
    let expected = (trials * k as u64) as f64 / n as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let critical = ChiSquared::new((n - 1) as f64).unwrap().inverse_cdf(1.0 - 0.001);
    assert!(
        chi2 < critical,
        "chi-square {chi2:.2} exceeds critical value {critical:.2} (counts {counts:?})"
    );

    // a stream no longer than k comes back whole and in order
    let short = reservoir_sample((0..3usize).map(gapalign::Result::Ok), 5, 1).unwrap();
    assert_eq!(short, vec![0, 1, 2]);
    let exact = reservoir_sample((0..5usize).map(gapalign::Result::Ok), 5, 9).unwrap();
    assert_eq!(exact, vec![0, 1, 2, 3, 4]);
    assert!(start.elapsed().as_secs() < 10, "criterion 4 exceeded 10 s");
}

// ------------------------------------------------------------ criterion 5

fn criterion_pca_oracle() {
    for f in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + f);
        let d = 3 + (rng.next_u64() as usize) % 18; // 3..=20
        let n = 50 + (rng.next_u64() as usize) % 150;
        // anisotropic scales so the top axes are well separated
        let scales: Vec<f64> = (0..d).map(|j| 10.0 / (1.0 + j as f64)).collect();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for s in &scales {
                data.push((normal.sample(&mut rng) * s) as f32);
            }
        }
        let m = EmbeddingMatrix {
            ids: (0..n).map(|i| format!("r{i}")).collect(),
            dim: d,
            data,
            model_tag: "fixture".into(),
        };
        let model = pca_fit(&m).unwrap();
        model.validate().unwrap();

        // oracle: dense covariance eigendecomposition over the same data
        let mut mean = vec![0.0f64; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += m.row(i)[j] as f64;
            }
        }
        for v in &mut mean {
            *v /= n as f64;
        }
        let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += (m.row(i)[a] as f64 - mean[a]) * (m.row(i)[b] as f64 - mean[b]);
                }
            }
        }
        cov /= (n - 1) as f64;
        let eig = cov.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        for axis in 0..2 {
            let oracle_vec = eig.eigenvectors.column(order[axis]);
            let dot: f64 = model.components[axis]
                .iter()
                .zip(oracle_vec.iter())
                .map(|(a, b)| *a as f64 * b)
                .sum();
            assert!(
                dot.abs() >= 1.0 - 1e-6,
                "fixture {f} axis {axis}: |cos| = {}",
                dot.abs()
            );
            let rel = (model.explained_variance[axis] as f64 - eig.eigenvalues[order[axis]]).abs()
                / eig.eigenvalues[order[axis]].max(1e-12);
            assert!(rel < 1e-4, "fixture {f} axis {axis} eigenvalue mismatch");
        }

        // optimality spot-check: no random direction beats component 0
        let centered: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|j| m.row(i)[j] as f64 - mean[j]).collect())
            .collect();
        let var_along = |dir: &[f64]| -> f64 {
            centered
                .iter()
                .map(|row| row.iter().zip(dir).map(|(a, b)| a * b).sum::<f64>().powi(2))
                .sum::<f64>()
                / (n - 1) as f64
        };
        let c0: Vec<f64> = model.components[0].iter().map(|v| *v as f64).collect();
        let best = var_along(&c0);
        for _ in 0..20 {
            let mut dir: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut dir {
                *v /= norm;
            }
            assert!(var_along(&dir) <= best * (1.0 + 1e-9), "fixture {f}: random direction beat PC1");
        }
    }
}

// ------------------------------------------------------------ criterion 6

fn criterion_prompt_fidelity() {
    // the shipped template bytes are pinned by hash; the same hashes are
    // recorded in resources/prompts/manifest.sha256
    let pinned = [
        (QUERY_GENERATION_TEMPLATE, "3c956c6212e6190a206172d8a1a1df84b6c5661fc2d884974519eef7a5e75323"),
        (QUERY_SCORING_TEMPLATE, "965606c2fe765bc53ee50e6858928a14dba8d23a7a4b3593ff010fa71e5382bb"),
        (ANSWER_GENERATION_TEMPLATE, "8f9b800325d3b0d776120f186f29fa615ef3e0e2c40f0675cd9a235ed4e67596"),
    ];
    for (text, want) in pinned {
        let got: String = Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert_eq!(got, want, "template drifted from pinned bytes");
    }

    // rendering differs from the template only at the {} slots
    let t1 = PromptTemplate::shipped(PromptKind::QueryGeneration);
    let rendered = render_prompt(&t1, &["<<TEXT>>"]).unwrap();
    assert_eq!(rendered, QUERY_GENERATION_TEMPLATE.replacen("{}", "<<TEXT>>", 1));

    let t2 = PromptTemplate::shipped(PromptKind::QueryScoring);
    let rendered = render_prompt(&t2, &["<<QUERY>>"]).unwrap();
    assert_eq!(rendered, QUERY_SCORING_TEMPLATE.replacen("{}", "<<QUERY>>", 1));

    let t3 = PromptTemplate::shipped(PromptKind::AnswerGeneration);
    let rendered = render_prompt(&t3, &["<<TEXT>>", "<<QUESTION>>"]).unwrap();
    let want = ANSWER_GENERATION_TEMPLATE
        .replacen("{}", "<<TEXT>>", 1)
        .replacen("{}", "<<QUESTION>>", 1);
    assert_eq!(rendered, want);
}

// ------------------------------------------------------------ criterion 7

fn criterion_filter_semantics() {
    let example = QueryCandidate {
        origin_id: "doc".into(),
        question: "What is the role of CRISPR-Cas9?".into(),
        quality: Some(8),
        difficulty: Some(5),
        additional_info_needed: Some(true),
        failed: false,
    };
    let (kept, rejected) = filter_queries(vec![example.clone()], &FilterPolicy::default());
    assert!(kept.is_empty());
    assert_eq!(rejected.len(), 1);
    assert_eq!(rejected[0].1, RejectReason::NeedsAdditionalInfo);

    let lenient = FilterPolicy { reject_if_additional_info: false, ..FilterPolicy::default() };
    let (kept, rejected) = filter_queries(vec![example.clone()], &lenient);
    assert_eq!(kept.len(), 1);
    assert!(rejected.is_empty());

    // boundary: quality 5 is rejected, quality 6 kept (min_quality = 6)
    for (quality, expect_kept) in [(5u8, false), (6u8, true)] {
        let c = QueryCandidate {
            quality: Some(quality),
            additional_info_needed: Some(false),
            ..example.clone()
        };
        let (kept, rejected) = filter_queries(vec![c], &FilterPolicy::default());
        assert_eq!(!kept.is_empty(), expect_kept, "quality {quality}");
        if !expect_kept {
            assert_eq!(rejected[0].1, RejectReason::LowQuality);
        }
    }
}

// --------------------------------------------- criterion 8: stub server

struct StubChatServer {
    endpoint: String,
    requests: Arc<AtomicUsize>,
}

impl StubChatServer {
    fn start() -> StubChatServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let endpoint = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let counter = requests.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let counter = counter.clone();
                std::thread::spawn(move || handle_stub_connection(stream, &counter));
            }
        });
        StubChatServer { endpoint, requests }
    }

    fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

fn handle_stub_connection(mut stream: std::net::TcpStream, counter: &AtomicUsize) {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        match stream.read(&mut chunk) {
            Ok(0) => return,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(_) => return,
        }
        if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break pos + 4;
        }
    };
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_ascii_lowercase();
    let content_length: usize = headers
        .lines()
        .find_map(|l| l.strip_prefix("content-length:"))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0);
    while buf.len() < header_end + content_length {
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(_) => return,
        }
    }
    counter.fetch_add(1, Ordering::SeqCst);
    let body: serde_json::Value =
        serde_json::from_slice(&buf[header_end..header_end + content_length]).unwrap_or_default();
    let prompt = body["messages"][0]["content"].as_str().unwrap_or("");
    // the three pipeline steps are distinguished by their template openings
    let content = if prompt.starts_with("Your task is to generate two questions") {
        serde_json::json!({"questions": [
            {"question": "What process does the passage describe?"},
            {"question": "Which quantities does the passage relate, and how?"}
        ]})
        .to_string()
    } else if prompt.starts_with("Your task is to evaluate the given query") {
        serde_json::json!({"quality": 8, "difficulty": 5, "additional_info_needed": false})
            .to_string()
    } else {
        serde_json::json!({"answer": "A grounded answer derived from the provided text."})
            .to_string()
    };
    let reply =
        serde_json::json!({"choices": [{"message": {"content": content}}]}).to_string();
    let response = format!(
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.len(),
        reply
    );
    let _ = stream.write_all(response.as_bytes());
}

fn workdir_digests(workdir: &Path) -> BTreeMap<String, String> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.file_name().is_some_and(|n| n == ".lock") {
                continue;
            }
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                let digest: String = Sha256::digest(std::fs::read(&path).unwrap())
                    .iter()
                    .map(|b| format!("{b:02x}"))
                    .collect();
                out.insert(rel, digest);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(workdir, workdir, &mut out);
    out
}

fn count_lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

fn criterion_hermetic_end_to_end() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let words = ["gravity", "enzyme", "voltage", "harvest", "orbit", "lattice", "monsoon", "ledger"];
    let mut corpus = String::new();
    for i in 0..200 {
        let w1 = words[rng.gen_range(0..words.len())];
        let w2 = words[rng.gen_range(0..words.len())];
        corpus.push_str(&format!(
            "{}\n",
            serde_json::json!({"text": format!("Passage {i}: notes on {w1} and {w2}, case {}.", rng.next_u64())})
        ));
    }
    let corpus_path = root.join("corpus.jsonl");
    std::fs::write(&corpus_path, corpus).unwrap();

    let mut sft = String::new();
    for i in 0..50 {
        let w = words[rng.gen_range(0..words.len())];
        sft.push_str(&format!(
            "{}\n",
            serde_json::json!({
                "instruction": format!("Question {i}: explain {w}."),
                "response": format!("Answer {i}: {w} works as follows.")
            })
        ));
    }
    let sft_path = root.join("sft.jsonl");
    std::fs::write(&sft_path, sft).unwrap();

    let server = StubChatServer::start();
    let workdir = root.join("work");
    let merge_ratio = 0.05f64;
    let config = serde_json::json!({
        "corpus_path": corpus_path,
        "sft_path": sft_path,
        "reservoir_k": 200,
        "seed": 7,
        "embedding": {"kind": "mock_deterministic", "model_name": "mock", "mock_dim": 16},
        "diffset": {"criterion": "threshold", "tau": 0.7},
        "rewrite": {
            "client": {
                "endpoint_url": server.endpoint,
                "model_name": "stub-chat",
                "max_retries": 1,
                "timeout_secs": 10
            }
        },
        "merge": {"ratio": merge_ratio, "seed": 11, "shuffle": true},
        "viz": {"nx": 40, "ny": 40},
        "workdir": workdir
    });
    let config_path = root.join("gapalign.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let args = ["gapalign", "--config", config_path.to_str().unwrap(), "run"];
    assert_eq!(gapalign::cli::main_with_args(args), 0, "first run failed");

    for name in [
        "corpus_sample.jsonl", "sft.jsonl", "corpus_emb.bin", "sft_emb.bin", "pca_model.json",
        "corpus_points.jsonl", "sft_points.jsonl", "corpus_density.json", "sft_density.json",
        "verdicts.jsonl", "diffset.jsonl", "rewritten.jsonl", "rewrite_report.json",
        "combined.jsonl", "merge_manifest.json", "overlay.svg", "manifest.json",
    ] {
        assert!(workdir.join(name).exists(), "missing artifact {name}");
    }

    let n_sft = count_lines(&workdir.join("sft.jsonl"));
    let n_rewritten = count_lines(&workdir.join("rewritten.jsonl"));
    let n_combined = count_lines(&workdir.join("combined.jsonl"));
    assert_eq!(n_sft, 50);
    assert!(count_lines(&workdir.join("diffset.jsonl")) > 0, "difference set is empty");
    assert!(n_rewritten > 0);
    let target = (merge_ratio * n_sft as f64).round() as usize;
    assert_eq!(n_combined, n_sft + target.min(n_rewritten));

    let digests_first = workdir_digests(&workdir);
    let requests_first = server.request_count();
    assert!(requests_first > 0);

    assert_eq!(gapalign::cli::main_with_args(args), 0, "second run failed");
    assert_eq!(workdir_digests(&workdir), digests_first, "second run changed artifacts");
    assert_eq!(server.request_count(), requests_first, "second run hit the network");
    assert!(start.elapsed().as_secs() < 60, "criterion 8 exceeded 60 s");
}

// ------------------------------------------------------------ criterion 9

fn criterion_two_cluster_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let jitter = Normal::new(0.0, 0.3).unwrap();
    let cluster = |cx: f64, cy: f64, n: usize, prefix: &str, rng: &mut ChaCha8Rng| {
        (0..n)
            .map(|i| ProjectedPoint {
                id: format!("{prefix}{i}"),
                x: (cx + jitter.sample(rng)) as f32,
                y: (cy + jitter.sample(rng)) as f32,
            })
            .collect::<Vec<_>>()
    };
    let sft = cluster(0.0, 0.0, 100, "s", &mut rng);
    let mut pre = cluster(0.0, 0.0, 150, "a", &mut rng);
    pre.extend(cluster(10.0, 10.0, 150, "b", &mut rng));

    for cfg in [DiffsetConfig::threshold(0.7), DiffsetConfig::ratio(1.0)] {
        let verdicts = run_diffset(&pre, &sft, &cfg).unwrap();
        let selected_b = verdicts.iter().filter(|v| v.id.starts_with('b') && v.selected).count();
        let selected_a = verdicts.iter().filter(|v| v.id.starts_with('a') && v.selected).count();
        assert!(
            selected_b as f64 >= 0.95 * 150.0,
            "{:?}: only {selected_b}/150 off-cluster points selected",
            cfg.criterion
        );
        assert!(
            selected_a as f64 <= 0.05 * 150.0,
            "{:?}: {selected_a}/150 in-cluster points selected",
            cfg.criterion
        );
    }
}

// ----------------------------------------------------------- criterion 10

fn golden_fixture_field(tag: &str, values: Vec<f32>) -> DensityField {
    DensityField {
        params: KdeParams::default(),
        grid: GridSpec { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0, nx: 4, ny: 4 },
        values,
        source_tag: tag.into(),
    }
}

fn criterion_viz_golden() {
    let base: Vec<f32> = (0..16).map(|i| 0.05 + (i as f32 * 0.37).sin().abs()).collect();
    let mut overlay = vec![0.1f32; 16];
    overlay[9] = 2.5; // argmax at (ix=1, iy=2)
    let spec = OverlaySpec::new(
        golden_fixture_field("base", base),
        golden_fixture_field("overlay", overlay),
        "golden 4x4",
    );
    let svg = overlay_svg_string(&spec).unwrap();
    assert_eq!(svg, overlay_svg_string(&spec).unwrap());

    let golden_path =
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/overlay_4x4.svg");
    if std::env::var("REGEN_GOLDEN").is_ok() {
        std::fs::create_dir_all(golden_path.parent().unwrap()).unwrap();
        std::fs::write(&golden_path, &svg).unwrap();
    }
    let golden = std::fs::read_to_string(&golden_path).expect("golden SVG fixture missing");
    assert_eq!(svg, golden, "rendered SVG differs from golden bytes");

    // the single darkest overlay cell sits where the field argmax is
    let darkest = "#08306b"; // dark end of the blues ramp
    let lines: Vec<&str> = svg.lines().filter(|l| l.contains(darkest)).collect();
    assert_eq!(lines.len(), 1);
    let (ax, ay) = spec.overlay.argmax();
    assert_eq!((ax, ay), (1, 2));
    let cell = 400.0 / 4.0;
    let expected_x = 16.0 + ax as f64 * cell;
    let expected_y = 16.0 + 28.0 + (4 - 1 - ay) as f64 * cell;
    assert!(lines[0].contains(&format!("x=\"{expected_x:.2}\"")), "{}", lines[0]);
    assert!(lines[0].contains(&format!("y=\"{expected_y:.2}\"")), "{}", lines[0]);
}

// ------------------------------------------------------------------ main

#[test]
fn acceptance() {
    let criteria: Vec<(&str, Box<dyn FnOnce()>)> = vec![
        ("1 kde-oracle-equivalence", Box::new(criterion_kde_oracle)),
        ("2 analytic-kernel-values", Box::new(criterion_analytic_kernel)),
        ("3 difference-set-oracle", Box::new(criterion_diffset_oracle)),
        ("4 reservoir-uniformity", Box::new(criterion_reservoir_uniformity)),
        ("5 pca-correctness", Box::new(criterion_pca_oracle)),
        ("6 prompt-fidelity", Box::new(criterion_prompt_fidelity)),
        ("7 filter-semantics", Box::new(criterion_filter_semantics)),
        ("8 hermetic-end-to-end", Box::new(criterion_hermetic_end_to_end)),
        ("9 two-cluster-gap", Box::new(criterion_two_cluster_gap)),
        ("10 viz-determinism", Box::new(criterion_viz_golden)),
    ];
    let mut failures = Vec::new();
    for (name, f) in criteria {
        match std::panic::catch_unwind(AssertUnwindSafe(f)) {
            Ok(()) => println!("criterion {name}: pass"),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                println!("criterion {name}: FAIL ({msg})");
                failures.push(name);
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}

//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails or exceeds its time budget.
//!
//! Oracles here are written independently of the library code they check.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prunekit::clustering::{
    centroid_similarity_matrix, distance_length_profile, near_duplicate_centroid_groups,
};
use prunekit::embeddings::{normalize, synthetic_embed};
use prunekit::harness::{
    aggregate, bin_losses, generate_synthetic_corpus, make_bootstrap_subsets, pack, packing_order, Chunk,
    PackOrder, SyntheticCorpusSpec,
};
use prunekit::pruning::{prune_length_top_tokens, prune_random_docs, prune_scip_combined, prune_semdedup};
use prunekit::{
    build_cdf, kmeans, BootstrapPlan, Clustering, ClusteringConfig, CorpusManifest, EmbeddingMatrix,
    LengthBinning, PackingConfig, Split,
};

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, u64, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn calibrated_corpus() -> CorpusManifest {
    generate_synthetic_corpus(&SyntheticCorpusSpec {
        n_docs: 50_000,
        calibration_target: Some((0.02, 0.20)),
        ..Default::default()
    })
    .expect("calibration")
    .manifest
}

fn random_matrix(r: &mut ChaCha8Rng, n: usize, dim: usize) -> EmbeddingMatrix {
    let data: Vec<f32> = (0..n * dim).map(|_| r.random_range(-1.0f32..1.0)).collect();
    normalize(&EmbeddingMatrix::new(n, dim, data, false).unwrap()).unwrap()
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

/// Counts sorted longest first.
fn sorted_desc(m: &CorpusManifest) -> Vec<u64> {
    let mut c: Vec<u64> = m.documents().iter().map(|d| d.token_count).collect();
    c.sort_unstable_by(|a, b| b.cmp(a));
    c
}

fn criterion_1() -> Outcome {
    let m = calibrated_corpus();
    let cdf = build_cdf(&m).map_err(|e| e.to_string())?;
    let share = cdf.token_share_of_longest_docs(0.02).map_err(|e| e.to_string())?;
    let doc_share = cdf
        .doc_share_covering_top_tokens(0.20)
        .map_err(|e| e.to_string())?;

    let counts = sorted_desc(&m);
    let total: u64 = counts.iter().sum();
    let top = (0.02 * counts.len() as f64).ceil() as usize;
    let oracle_share = counts[..top].iter().sum::<u64>() as f64 / total as f64;
    let mut acc = 0u64;
    let mut k = 0;
    while (acc as f64) < 0.20 * total as f64 {
        acc += counts[k];
        k += 1;
    }
    let oracle_doc_share = k as f64 / counts.len() as f64;

    check(
        (share - oracle_share).abs() < 1e-12,
        format!("share {share} != oracle {oracle_share}"),
    )?;
    check(
        (doc_share - oracle_doc_share).abs() < 1e-12,
        format!("doc share {doc_share} != oracle {oracle_doc_share}"),
    )?;
    check(
        (0.18..=0.22).contains(&share),
        format!("share {share} outside [0.18, 0.22]"),
    )?;
    check(doc_share <= 0.03, format!("doc share {doc_share} > 0.03"))?;
    Ok(format!(
        "top-2% token share {share:.4}, doc share for 20% tokens {doc_share:.4}"
    ))
}

fn criterion_2() -> Outcome {
    let m = calibrated_corpus();
    let mut fracs = Vec::new();
    for seed in 0..5 {
        let r = prune_random_docs(&m, 0.20, seed).map_err(|e| e.to_string())?;
        check(
            r.docs_pruned == 10_000,
            format!("seed {seed}: {} docs pruned", r.docs_pruned),
        )?;
        let tokens: u64 = r.pruned_ids.iter().map(|&i| m.document(i).token_count).sum();
        check(
            tokens == r.tokens_pruned,
            "tokens_pruned disagrees with pruned ids",
        )?;
        fracs.push(tokens as f64 / m.total_tokens() as f64);
    }
    let mean = fracs.iter().sum::<f64>() / fracs.len() as f64;
    check(
        (0.18..=0.22).contains(&mean),
        format!("mean fraction_tokens {mean}"),
    )?;
    Ok(format!("mean fraction_tokens over 5 seeds {mean:.4}"))
}

fn criterion_3() -> Outcome {
    let mut seen = Vec::new();
    for (case, (seed, k)) in [(0u64, 10usize), (1, 37), (2, 100), (3, 3), (4, 250)]
        .into_iter()
        .enumerate()
    {
        let m = generate_synthetic_corpus(&SyntheticCorpusSpec {
            n_docs: 1000,
            seed,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?
        .manifest;
        let bins = LengthBinning::new(vec![0, 64, 256]).unwrap();
        let e = synthetic_embed(&m, 16, seed, 0.7, &bins).map_err(|e| e.to_string())?;
        let c = kmeans(
            &e,
            &ClusteringConfig {
                k,
                seed,
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let r = prune_scip_combined(&m, &c, 0.16, 0.04).map_err(|e| e.to_string())?;
        check(
            (198..=202).contains(&r.docs_pruned),
            format!("case {case} (K={k}): {} docs pruned", r.docs_pruned),
        )?;
        seen.push(r.docs_pruned);
    }
    Ok(format!("docs_pruned per corpus {seen:?}"))
}

/// All-pairs semdedup: components of the epsilon graph inside each cluster,
/// keeping the member closest to its centroid (lowest id on ties).
fn semdedup_oracle(e: &EmbeddingMatrix, c: &Clustering, eps: f64) -> BTreeSet<u64> {
    let n = e.n_rows();
    let mut pruned = BTreeSet::new();
    for cluster in 0..c.k() {
        let members: Vec<usize> = (0..n).filter(|&i| c.assignment()[i] == cluster).collect();
        let linked = |a: usize, b: usize| e.row(a) == e.row(b) || 1.0 - dot64(e.row(a), e.row(b)) <= eps;
        let mut seen = vec![false; members.len()];
        for start in 0..members.len() {
            if seen[start] {
                continue;
            }
            let mut component = vec![start];
            seen[start] = true;
            let mut stack = vec![start];
            while let Some(x) = stack.pop() {
                for y in 0..members.len() {
                    if !seen[y] && linked(members[x], members[y]) {
                        seen[y] = true;
                        component.push(y);
                        stack.push(y);
                    }
                }
            }
            let keep = component
                .iter()
                .map(|&i| members[i])
                .min_by(|&a, &b| c.distance()[a].total_cmp(&c.distance()[b]).then(a.cmp(&b)))
                .unwrap();
            pruned.extend(
                component
                    .iter()
                    .map(|&i| members[i] as u64)
                    .filter(|&d| d != keep as u64),
            );
        }
    }
    pruned
}

fn criterion_4() -> Outcome {
    let mut total_pruned = 0;
    let mut cases = 0;
    for corpus in 0..20u64 {
        let mut r = rng(1000 + corpus);
        let n = r.random_range(20..=200usize);
        let dim = r.random_range(3..=8usize);
        let mut data: Vec<f32> = (0..n * dim).map(|_| r.random_range(-1.0f32..1.0)).collect();
        // plant exact and near duplicates
        for _ in 0..n / 8 {
            let (src, dst) = (r.random_range(0..n), r.random_range(0..n));
            let jitter = if r.random_bool(0.5) { 0.0 } else { 0.01 };
            for d in 0..dim {
                data[dst * dim + d] = data[src * dim + d] + jitter * r.random_range(-1.0f32..1.0);
            }
        }
        let e = normalize(&EmbeddingMatrix::new(n, dim, data, false).unwrap()).map_err(|e| e.to_string())?;
        let counts: Vec<u64> = (0..n).map(|_| r.random_range(1..500)).collect();
        let m = CorpusManifest::from_token_counts(&counts).unwrap();
        let c = kmeans(
            &e,
            &ClusteringConfig {
                k: 5,
                seed: corpus,
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        for eps in [0.01, 0.05, 0.2] {
            let got: BTreeSet<u64> = prune_semdedup(&m, &e, &c, eps)
                .map_err(|e| e.to_string())?
                .pruned_ids
                .into_iter()
                .collect();
            let want = semdedup_oracle(&e, &c, eps);
            check(
                got == want,
                format!(
                    "corpus {corpus} eps {eps}: {} pruned vs oracle {}",
                    got.len(),
                    want.len()
                ),
            )?;
            total_pruned += got.len();
            cases += 1;
        }
    }
    Ok(format!(
        "{cases} cases match the all-pairs oracle ({total_pruned} pruned in total)"
    ))
}

/// Spherical objective history must never rise beyond the relative slack.
fn monotone(history: &[f64]) -> bool {
    history
        .windows(2)
        .all(|w| w[1] <= w[0] + 1e-7 * w[0].abs().max(1e-12))
}

fn ari_oracle(a: &[usize], b: &[usize]) -> f64 {
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| pairs(v)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let all = pairs(a.len() as u64);
    let expected = rows * cols / all;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

fn criterion_5() -> Outcome {
    for run in 0..50u64 {
        let mut r = rng(run);
        let n = r.random_range(50..400usize);
        let dim = r.random_range(2..16usize);
        let k = r.random_range(2..12usize);
        let e = random_matrix(&mut r, n, dim);
        let c = kmeans(
            &e,
            &ClusteringConfig {
                k,
                seed: run,
                max_iters: 50,
                tol: 0.0,
            },
        )
        .map_err(|e| e.to_string())?;
        check(
            monotone(c.objective_history()),
            format!("run {run}: objective rose: {:?}", c.objective_history()),
        )?;
    }

    let mut r = rng(77);
    let (blobs, per, dim) = (5, 100, 16);
    let centers: Vec<Vec<f32>> = (0..blobs)
        .map(|_| (0..dim).map(|_| r.random_range(-1.0f32..1.0)).collect())
        .collect();
    let mut data = Vec::new();
    let mut truth = Vec::new();
    for (b, center) in centers.iter().enumerate() {
        for _ in 0..per {
            data.extend(center.iter().map(|x| x + r.random_range(-0.05f32..0.05)));
            truth.push(b);
        }
    }
    let e = normalize(&EmbeddingMatrix::new(blobs * per, dim, data, false).unwrap()).unwrap();
    let c = kmeans(
        &e,
        &ClusteringConfig {
            k: 5,
            seed: 3,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let ari = ari_oracle(c.assignment(), &truth);
    check(ari >= 0.99, format!("blob recovery ARI {ari}"))?;

    let e = random_matrix(&mut r, 300, 12);
    let c = kmeans(
        &e,
        &ClusteringConfig {
            k: 1,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let mut mean = [0.0f64; 12];
    for i in 0..300 {
        for (m, x) in mean.iter_mut().zip(e.row(i)) {
            *m += *x as f64;
        }
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    let worst = mean
        .iter()
        .zip(c.centroids().row(0))
        .map(|(m, x)| (m / norm - *x as f64).abs())
        .fold(0.0, f64::max);
    check(worst <= 1e-6, format!("K=1 centroid off by {worst}"))?;
    Ok(format!(
        "50 monotone runs, blob ARI {ari:.4}, K=1 max deviation {worst:.2e}"
    ))
}

fn avg_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &t in &idx[i..=j] {
            ranks[t] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn criterion_6() -> Outcome {
    let m = generate_synthetic_corpus(&SyntheticCorpusSpec {
        n_docs: 5000,
        seed: 11,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?
    .manifest;
    let mut counts: Vec<u64> = m.documents().iter().map(|d| d.token_count).collect();
    counts.sort_unstable();
    let bins = LengthBinning::new(vec![0, counts[counts.len() / 2]]).unwrap();
    let short = m
        .documents()
        .iter()
        .filter(|d| bins.bin_of(d.token_count) == 0)
        .count();

    let e = synthetic_embed(&m, 32, 11, 0.9, &bins).map_err(|e| e.to_string())?;
    let c = kmeans(
        &e,
        &ClusteringConfig {
            k: 10,
            seed: 11,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let profile = distance_length_profile(&c, &m).map_err(|e| e.to_string())?;
    let xs: Vec<f64> = profile.points.iter().map(|p| p.distance).collect();
    let ys: Vec<f64> = profile.points.iter().map(|p| p.token_count as f64).collect();
    let oracle = pearson(&avg_ranks(&xs), &avg_ranks(&ys));
    check(
        (oracle - profile.spearman).abs() < 1e-9,
        format!("spearman {} vs oracle {oracle}", profile.spearman),
    )?;
    check(profile.spearman > 0.5, format!("spearman {}", profile.spearman))?;

    let groups = near_duplicate_centroid_groups(&centroid_similarity_matrix(&c), 0.9);
    let largest = groups.iter().map(Vec::len).max().unwrap_or(0);
    check(largest >= 2, "no multi-centroid group at threshold 0.9")?;
    Ok(format!(
        "bins {short}/{} docs, spearman {:.3}, largest centroid group {largest}",
        m.len() - short,
        profile.spearman
    ))
}

fn criterion_7() -> Outcome {
    let mut r = rng(7);
    for corpus in 0..1000 {
        let n = r.random_range(1..=50usize);
        let hi = if r.random_bool(0.3) { 4 } else { 1000 };
        let counts: Vec<u64> = (0..n).map(|_| r.random_range(1..=hi)).collect();
        let m = CorpusManifest::from_token_counts(&counts).unwrap();
        // P = a / 1000 exactly, so the oracle can compare in integers
        let a: u64 = match corpus % 10 {
            0 => 0,
            1 => 1000,
            _ => r.random_range(0..=1000),
        };
        let rep = prune_length_top_tokens(&m, a as f64 / 1000.0).map_err(|e| e.to_string())?;
        let total: u64 = counts.iter().sum();
        let pruned: BTreeSet<u64> = rep.pruned_ids.iter().copied().collect();
        let crosses = |tokens: u64| tokens * 1000 >= a * total;

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| counts[y].cmp(&counts[x]).then(x.cmp(&y)));
        let mut prefix = vec![0u64];
        for &i in &order {
            prefix.push(prefix.last().unwrap() + counts[i]);
        }
        let k = (0..=n).find(|&k| crosses(prefix[k])).unwrap();
        let want: BTreeSet<u64> = order[..k].iter().map(|&i| i as u64).collect();
        check(
            pruned == want,
            format!("corpus {corpus}: pruned {pruned:?}, oracle {want:?}"),
        )?;

        for p in &pruned {
            for q in (0..n as u64).filter(|q| !pruned.contains(q)) {
                check(
                    counts[*p as usize] >= counts[q as usize],
                    format!("corpus {corpus}: suffix property broken by {p} vs {q}"),
                )?;
            }
        }
        check(
            crosses(rep.tokens_pruned),
            format!("corpus {corpus}: target not reached"),
        )?;
        for (j, s) in prefix.iter().enumerate().take(pruned.len()) {
            check(
                !crosses(*s),
                format!("corpus {corpus}: prefix {j} already crosses"),
            )?;
        }
    }
    Ok("1000 corpora: suffix property and first-crossing minimality hold".into())
}

fn criterion_8() -> Outcome {
    let mut r = rng(8);
    for corpus in 0..100 {
        let n = r.random_range(1..=60usize);
        let counts: Vec<u64> = (0..n).map(|_| r.random_range(1..=9000)).collect();
        let m = CorpusManifest::from_token_counts(&counts).unwrap();
        let ctx = r.random_range(1..=5000usize);
        let order = packing_order(&m, Split::Train, PackOrder::Shuffle { seed: corpus });
        let chunks = pack(
            &m,
            &order,
            &PackingConfig {
                context_len: ctx,
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let mut covered = vec![0u64; n];
        for span in chunks.iter().flat_map(|c| &c.spans) {
            check(
                span.start_tok == covered[span.doc_id as usize],
                format!("corpus {corpus}: span gap"),
            )?;
            covered[span.doc_id as usize] = span.end_tok;
        }
        check(
            covered == counts,
            format!("corpus {corpus}: tokens not conserved"),
        )?;
        let lens: Vec<u64> = chunks.iter().map(Chunk::len).collect();
        check(
            lens[..lens.len() - 1].iter().all(|&l| l == ctx as u64),
            format!("corpus {corpus}: short interior chunk"),
        )?;
    }

    let bins = LengthBinning::default();
    let cfg = PackingConfig::default();
    let one = CorpusManifest::from_token_counts(&[2]).unwrap();
    let chunks = pack(&one, &[0], &cfg).map_err(|e| e.to_string())?;
    let out = bin_losses(&chunks, &[2f64.ln(), 8f64.ln()], &bins, &one).map_err(|e| e.to_string())?;
    check(
        (out[0].perplexity - 4.0).abs() <= 1e-10 * 4.0,
        format!("ln2/ln8 gave {}", out[0].perplexity),
    )?;

    for case in 0..20u64 {
        let counts: Vec<u64> = (0..10).map(|_| r.random_range(1..30_000)).collect();
        let m = CorpusManifest::from_token_counts(&counts).unwrap();
        let chunks = pack(&m, &m.train_ids(), &cfg).map_err(|e| e.to_string())?;
        let losses: Vec<f64> = (0..m.total_tokens()).map(|_| r.random_range(0.0..6.0)).collect();
        let out = bin_losses(&chunks, &losses, &bins, &m).map_err(|e| e.to_string())?;
        // stream position -> doc via the id-ordered concatenation
        let mut sums = vec![(0.0f64, 0u64); bins.len()];
        let mut pos = 0;
        for &c in &counts {
            let b = bins.bin_of(c);
            for l in &losses[pos..pos + c as usize] {
                sums[b].0 += l;
                sums[b].1 += 1;
            }
            pos += c as usize;
        }
        let expected: Vec<f64> = sums
            .iter()
            .filter(|s| s.1 > 0)
            .map(|s| (s.0 / s.1 as f64).exp())
            .collect();
        check(out.len() == expected.len(), format!("case {case}: bin count"))?;
        for (got, want) in out.iter().zip(&expected) {
            check(
                (got.perplexity - want).abs() <= 1e-10 * want,
                format!("case {case}: {} vs {want}", got.perplexity),
            )?;
        }
    }

    let m = CorpusManifest::from_token_counts(&[10_000, 100]).unwrap();
    let chunks = pack(&m, &[0, 1], &cfg).map_err(|e| e.to_string())?;
    let spanned = chunks
        .iter()
        .filter(|c| c.spans.iter().any(|s| s.doc_id == 0))
        .count();
    check(spanned == 3, format!("10,000-token doc spans {spanned} chunks"))?;
    let mut losses = vec![3f64.ln(); 10_000];
    losses.extend(vec![5f64.ln(); 100]);
    let out = bin_losses(&chunks, &losses, &bins, &m).map_err(|e| e.to_string())?;
    check(out.len() == 2, "expected two populated bins")?;
    check(
        out[1].lower == 4096 && out[1].tokens == 10_000,
        "long doc tokens not attributed to its own bin",
    )?;
    check(
        (out[1].perplexity - 3.0).abs() <= 3e-10,
        format!("long-doc bin {}", out[1].perplexity),
    )?;
    check(
        (out[0].perplexity - 5.0).abs() <= 5e-10,
        format!("short-doc bin {}", out[0].perplexity),
    )?;
    Ok("100 packings conserve tokens; closed forms and full-length attribution hold".into())
}

fn criterion_9() -> Outcome {
    for n in [1000u64, 1001, 7] {
        let m = CorpusManifest::from_token_counts(&vec![3; n as usize]).unwrap();
        let subsets = make_bootstrap_subsets(&m, &BootstrapPlan::default()).map_err(|e| e.to_string())?;
        check(subsets.len() == 3, "expected 3 subsets")?;
        for s in &subsets {
            check(
                s.len() as u64 == n / 2,
                format!("n={n}: subset of {} docs", s.len()),
            )?;
        }
    }
    let a = aggregate(&[1.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
    let se = a.stderr.unwrap_or(f64::NAN);
    check((se - 0.57735).abs() <= 1e-5, format!("stderr {se}"))?;
    Ok(format!("subsets of floor(n/2) docs; stderr {se:.5}"))
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_prunekit"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr).trim()),
    )
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.push((rel, std::fs::read(&p)?));
        }
    }
    Ok(())
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    run_cli(
        d,
        &[
            "synth",
            "--n-docs",
            "50000",
            "--calibrate",
            "0.02:0.2",
            "--out",
            "corpus.jsonl",
            "--embeddings",
            "emb.embd",
            "--dim",
            "16",
            "--bins",
            "0,64",
        ],
    )?;
    let specs = r#"[
        {"strategy": "none"},
        {"strategy": "length_top_tokens", "P": 0.2},
        {"strategy": "length_shortest_tokens", "P": 0.2},
        {"strategy": "random_docs", "P": 0.2, "seed": 1},
        {"strategy": "scip_combined"},
        {"strategy": "semdedup", "epsilon": 0.005},
        {"strategy": "ssl_prototypes", "P": 0.2},
        {"strategy": "d4", "epsilon": 0.005, "P": 0.2}
    ]"#;
    for (name, out) in [("t1.json", "out_t1"), ("t8.json", "out_t8")] {
        let cfg = format!(
            r#"{{"corpus": "corpus.jsonl", "embeddings": "emb.embd", "clustering": {{"k": 50, "seed": 5}},
                "prune_specs": {specs}, "validation": {{"per_bin_quota": 100, "seed": 2}},
                "output_dir": "{out}"}}"#
        );
        std::fs::write(d.join(name), cfg).map_err(|e| e.to_string())?;
    }
    run_cli(d, &["--threads", "1", "run", "--config", "t1.json"])?;
    run_cli(d, &["--threads", "8", "run", "--config", "t8.json"])?;

    let (mut a, mut b) = (Vec::new(), Vec::new());
    collect_files(&d.join("out_t1"), &d.join("out_t1"), &mut a).map_err(|e| e.to_string())?;
    collect_files(&d.join("out_t8"), &d.join("out_t8"), &mut b).map_err(|e| e.to_string())?;
    let names = |v: &[(String, Vec<u8>)]| v.iter().map(|f| f.0.clone()).collect::<Vec<_>>();
    check(names(&a) == names(&b), "artifact file lists differ")?;
    for (fa, fb) in a.iter().zip(&b) {
        check(fa.1 == fb.1, format!("{} differs between thread counts", fa.0))?;
    }
    let reports = a
        .iter()
        .filter(|f| f.0.starts_with("reports") && f.0.ends_with(".json"))
        .count();
    check(reports == 24, format!("{reports} reports written, expected 24"))?;
    check(
        a.iter().any(|f| f.0 == "accounting.md"),
        "accounting table missing",
    )?;
    Ok(format!(
        "{} artifacts byte-identical for --threads 1 and 8",
        a.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "length CDF shape", 10, criterion_1),
        (2, "random pruning token fraction", 5, criterion_2),
        (3, "combined small+far budget", 5, criterion_3),
        (4, "semdedup oracle equivalence", 30, criterion_4),
        (5, "k-means correctness", 30, criterion_5),
        (6, "distance/length confound", 20, criterion_6),
        (7, "length-pruning exactness", 10, criterion_7),
        (8, "packing and binned perplexity", 10, criterion_8),
        (9, "bootstrap and aggregation", 1, criterion_9),
        (10, "thread-count determinism", 120, criterion_10),
    ];
    let only: Option<u32> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > Duration::from_secs(limit) => {
                Err(format!("{detail}; exceeded {limit} s budget"))
            }
            other => other,
        };
        match outcome {
            Ok(detail) => println!(
                "criterion {id:>2} PASS  {name} ({:.2} s): {detail}",
                elapsed.as_secs_f64()
            ),
            Err(why) => {
                failed += 1;
                println!(
                    "criterion {id:>2} FAIL  {name} ({:.2} s): {why}",
                    elapsed.as_secs_f64()
                );
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}

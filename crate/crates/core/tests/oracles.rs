//! Library results checked against independent, deliberately naive
//! reimplementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rogue_dims::behavior::{
    encode_dst1, read_distributions, write_distributions, DistributionPair, DstReader,
};
use rogue_dims::decomp::{anisotropy, mean_cc};
use rogue_dims::informativity::{r_squared_removed, Criterion, Measure, RemovalSpec};
use rogue_dims::postprocess::{
    apply, default_abtt_components, fit_abtt, load_transform, save_transform,
};
use rogue_dims::store::{compute_stats, sample_pairs, EmbeddingCorpus, TokenMeta};
use rogue_dims::Error;

fn random_corpus(n: usize, d: usize, seed: u64, scales: &[f64]) -> EmbeddingCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d)
        .map(|i| (rng.random_range(-1.0..1.0) * scales[i % d]) as f32)
        .collect();
    let meta = (0..n).map(|i| TokenMeta::new(format!("w{}", i % 7), (i / 10) as i64, (i % 10) as i64)).collect();
    EmbeddingCorpus::new("oracle", 0, d, data, meta).unwrap()
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn naive_covariance(c: &EmbeddingCorpus) -> Vec<Vec<f64>> {
    let (n, d) = (c.n() as f64, c.d());
    let mu: Vec<f64> = (0..d)
        .map(|j| c.rows().map(|r| r[j] as f64).sum::<f64>() / n)
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in c.rows() {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] as f64 - mu[i]) * (r[j] as f64 - mu[j]) / n;
            }
        }
    }
    cov
}

#[test]
fn abtt_eigenvalues_and_total_variance_match_jacobi() {
    let scales = [5.0, 3.0, 0.3, 1.0, 2.0, 0.5];
    let c = random_corpus(400, 6, 11, &scales);
    let oracle = jacobi_eigenvalues(naive_covariance(&c));
    for n_comp in 1..=3 {
        let t = fit_abtt(&c, n_comp).unwrap();
        let rogue_dims::postprocess::TransformKind::AllButTheTop { eigenvalues, .. } = &t.kind else {
            panic!("wrong kind");
        };
        for (a, b) in eigenvalues.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9 * oracle[0], "{a} vs {b}");
        }
        let out = apply(&t, &c).unwrap();
        let before: f64 = oracle.iter().sum();
        let after: f64 = compute_stats(&out).unwrap().variance.iter().sum();
        let expect = before - oracle[..n_comp].iter().sum::<f64>();
        assert!(((after - expect) / expect).abs() < 1e-5, "{after} vs {expect}");

        // nothing left along the removed directions
        let left = naive_covariance(&out);
        for j in 0..n_comp {
            let u = t.component(j).unwrap();
            let var: f64 = (0..6)
                .map(|a| (0..6).map(|b| u[a] * left[a][b] * u[b]).sum::<f64>())
                .sum();
            assert!(var / oracle[0] < 1e-8, "component {j}: {var}");
        }
    }
}

#[test]
fn abtt_exact_case() {
    // Points on a tilted line plus a small orthogonal wobble.
    let rows: Vec<Vec<f32>> = (0..8)
        .map(|i| {
            let t = i as f32 - 3.5;
            // +,-,-,+ repeated: zero mean and uncorrelated with t
            let w = if matches!(i % 4, 0 | 3) { 0.25 } else { -0.25 };
            vec![t + w, t - w, 1.0]
        })
        .collect();
    let meta = (0..8).map(|i| TokenMeta::new("x", 0, i)).collect();
    let c = EmbeddingCorpus::from_rows("m", 0, &rows, meta).unwrap();
    let t = fit_abtt(&c, 1).unwrap();
    let u = t.component(0).unwrap();
    let s = 0.5f64.sqrt();
    assert!((u[0] - s).abs() < 1e-12 && (u[1] - s).abs() < 1e-12 && u[2].abs() < 1e-12);
    let out = apply(&t, &c).unwrap();
    let ev = jacobi_eigenvalues(naive_covariance(&out));
    assert!(ev[ev.len() - 1].abs() / ev[0] < 1e-8);
}

#[test]
fn abtt_default_components() {
    assert_eq!(default_abtt_components(768), 7);
    assert_eq!(default_abtt_components(300), 3);
    assert_eq!(default_abtt_components(64), 1);
    assert_eq!(default_abtt_components(2), 1);
}

#[test]
fn transform_round_trip() {
    let c = random_corpus(50, 4, 3, &[1.0, 2.0, 3.0, 4.0]);
    let t = fit_abtt(&c, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.json");
    save_transform(&t, &p).unwrap();
    let back = load_transform(&p).unwrap();
    assert_eq!(back.name(), t.name());
    assert_eq!(back.n_components(), 2);
    let a = apply(&t, &c).unwrap();
    let b = apply(&back, &c).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn mean_cc_matches_naive_loops() {
    let c = random_corpus(60, 5, 8, &[1.0, 4.0, 1.0, 0.1, 2.0]);
    let s = sample_pairs(&c, 500, 2).unwrap();
    let r = mean_cc(&c, &s).unwrap();
    let mut per = [0.0f64; 5];
    let mut total = 0.0;
    for &(a, b) in &s.pairs {
        let (u, v) = (c.row(a), c.row(b));
        let nu = u.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nv = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        for j in 0..5 {
            let cc = u[j] as f64 * v[j] as f64 / (nu * nv);
            per[j] += cc;
            total += cc;
        }
    }
    let m = s.len() as f64;
    for j in 0..5 {
        assert!((r.per_dim_cc[j] - per[j] / m).abs() < 1e-12);
    }
    assert!((r.anisotropy - total / m).abs() < 1e-12);
    assert_eq!(r.anisotropy, anisotropy(&c, &s).unwrap());
}

#[test]
fn r_squared_matches_naive_pearson() {
    let c = random_corpus(80, 6, 21, &[1.0, 1.0, 8.0, 1.0, 1.0, 1.0]);
    let s = sample_pairs(&c, 400, 5).unwrap();
    let spec = RemovalSpec::explicit(Criterion::Variance, vec![2], 6).unwrap();
    let r = r_squared_removed(&c, &s, &spec, Measure::Euclidean).unwrap();
    let dist = |u: &[f32], v: &[f32], skip: Option<usize>| {
        (0..6)
            .filter(|&j| Some(j) != skip)
            .map(|j| (u[j] as f64 - v[j] as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let full: Vec<f64> = s.pairs.iter().map(|&(a, b)| dist(c.row(a), c.row(b), None)).collect();
    let part: Vec<f64> = s.pairs.iter().map(|&(a, b)| dist(c.row(a), c.row(b), Some(2))).collect();
    let n = full.len() as f64;
    let (mx, my) = (full.iter().sum::<f64>() / n, part.iter().sum::<f64>() / n);
    let sxy: f64 = full.iter().zip(&part).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = full.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = part.iter().map(|y| (y - my).powi(2)).sum();
    let expect = sxy * sxy / (sxx * syy);
    assert!((r.r_squared - expect).abs() < 1e-10);
    assert_eq!(r.removed_dims, vec![2]);
}

fn softmax(x: &[f64]) -> Vec<f32> {
    let z: f64 = x.iter().map(|v| v.exp()).sum();
    x.iter().map(|v| (v.exp() / z) as f32).collect()
}

#[test]
fn dst1_round_trips_and_streams() {
    let pairs: Vec<DistributionPair> = (0..6)
        .map(|i| {
            let p = softmax(&[0.1 * i as f64, 1.0, -0.5, 2.0]);
            let q = softmax(&[0.0, 1.0, 0.5 * i as f64, 2.0]);
            DistributionPair::new(p, q, (i % 2) as u32, (i / 2) as u32, i as u64).unwrap()
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.dst");
    write_distributions(&p, 4, &pairs).unwrap();
    assert_eq!(read_distributions(&p).unwrap(), pairs);
    let r = DstReader::open(&p).unwrap();
    assert_eq!((r.version, r.count, r.vocab), (1, 6, 4));

    let t = DistributionPair::truncated(vec![7, 2], vec![0.5, 0.3, 0.2], vec![0.4, 0.4, 0.2], 3, 1, 9).unwrap();
    let bytes = encode_dst1(10, std::slice::from_ref(&t)).unwrap();
    let p2 = dir.path().join("t.dst");
    std::fs::write(&p2, &bytes).unwrap();
    assert_eq!(read_distributions(&p2).unwrap(), vec![t]);

    // header promises more records than the file holds
    let mut cut = std::fs::read(&p).unwrap();
    cut.truncate(cut.len() - 3);
    std::fs::write(&p, &cut).unwrap();
    let e = read_distributions(&p).unwrap_err();
    assert!(matches!(e, Error::Consistency(_)));
    assert_eq!(e.exit_code(), 3);
}

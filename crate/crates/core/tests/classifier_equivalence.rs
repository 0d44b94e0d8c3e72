use mixnoise::rng::sample_standard_normal;
use mixnoise::{AnalyticClassifier, Matrix, SeededRng};
use proptest::prelude::*;

/// Dense Gauss-Jordan inverse with partial pivoting, kept separate from the
/// crate's own factorizations.
fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs()))
            .unwrap();
        m.swap(c, p);
        let piv = m[c][c];
        for v in m[c].iter_mut() {
            *v /= piv;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    let pivot_row = m[c].clone();
                    for (v, pv) in m[r].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// W = (Z^T Z + lambda I)^-1 Z^T Y computed naively.
fn batch_ridge(z: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Vec<Vec<f64>> {
    let d = z[0].len();
    let c = y[0].len();
    let mut gram = vec![vec![0.0; d]; d];
    let mut zy = vec![vec![0.0; c]; d];
    for (zr, yr) in z.iter().zip(y) {
        for i in 0..d {
            for j in 0..d {
                gram[i][j] += zr[i] * zr[j];
            }
            for k in 0..c {
                zy[i][k] += zr[i] * yr[k];
            }
        }
    }
    for (i, row) in gram.iter_mut().enumerate() {
        row[i] += lambda;
    }
    let inv = invert(&gram);
    (0..d)
        .map(|i| {
            (0..c)
                .map(|k| (0..d).map(|j| inv[i][j] * zy[j][k]).sum())
                .collect()
        })
        .collect()
}

fn rows_of(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn rel_frobenius(a: &Matrix<f64>, b: &[Vec<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            num += (a.row(i)[j] - v).powi(2);
            den += v * v;
        }
    }
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

/// A stream of chunks where each chunk introduces new classes, like a task
/// sequence.
struct Instance {
    dim: usize,
    lambda: f64,
    chunks: Vec<(Matrix<f64>, Vec<usize>)>,
}

fn instance(seed: u64) -> Instance {
    let mut rng = SeededRng::new(seed);
    let dim = 8 + rng.below(57);
    let n_chunks = 2 + rng.below(4);
    let lambda = [0.1, 1.0, 10.0][rng.below(3)];
    let mut next_class = 0;
    let chunks = (0..n_chunks)
        .map(|_| {
            // mix of n < d and n > d chunks exercises both update paths
            let rows = 4 + rng.below(2 * dim);
            let new = 1 + rng.below(3);
            let classes: Vec<usize> = (next_class..next_class + new).collect();
            next_class += new;
            let labels = (0..rows).map(|i| classes[i % classes.len()]).collect();
            (sample_standard_normal::<f64>(&mut rng, rows, dim), labels)
        })
        .collect();
    Instance {
        dim,
        lambda,
        chunks,
    }
}

#[test]
fn recursive_matches_batch_on_random_instances() {
    let start = std::time::Instant::now();
    for seed in 0..20 {
        let inst = instance(1000 + seed);
        let mut clf = AnalyticClassifier::new(inst.dim, inst.lambda).unwrap();
        let mut all_z = Vec::new();
        let mut all_labels = Vec::new();
        for (z, labels) in &inst.chunks {
            clf.update_with_labels(z, labels).unwrap();
            all_z.extend(rows_of(z));
            all_labels.extend(labels.iter().copied());
        }
        let c = clf.num_classes();
        let y: Vec<Vec<f64>> = all_labels
            .iter()
            .map(|&l| {
                (0..c)
                    .map(|k| if clf.classes()[k] == l { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let w = batch_ridge(&all_z, &y, inst.lambda);
        let err = rel_frobenius(clf.weights(), &w);
        assert!(
            err < 1e-8,
            "instance {seed}: dim {} relative error {err:e}",
            inst.dim
        );
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn one_large_batch_equals_four_small() {
    let mut rng = SeededRng::new(5);
    let z = sample_standard_normal::<f64>(&mut rng, 512, 48);
    let labels: Vec<usize> = (0..512).map(|i| i % 6).collect();

    let mut whole = AnalyticClassifier::new(48, 1.0).unwrap();
    whole.update_with_labels(&z, &labels).unwrap();

    let mut pieces = AnalyticClassifier::new(48, 1.0).unwrap();
    pieces.add_classes(&(0..6).collect::<Vec<_>>());
    for k in 0..4 {
        let idx: Vec<usize> = (k * 128..(k + 1) * 128).collect();
        pieces
            .update_with_labels(&z.select_rows(&idx), &labels[k * 128..(k + 1) * 128])
            .unwrap();
    }
    assert!(pieces.weights().relative_error(whole.weights()) < 1e-8);
    assert!(pieces.autocorr_inv().relative_error(whole.autocorr_inv()) < 1e-8);
}

#[test]
fn inverse_tracks_regularized_gram() {
    let inst = instance(77);
    let mut clf = AnalyticClassifier::new(inst.dim, inst.lambda).unwrap();
    let mut all_z = Vec::new();
    for (z, labels) in &inst.chunks {
        clf.update_with_labels(z, labels).unwrap();
        all_z.extend(rows_of(z));
    }
    let d = inst.dim;
    let mut gram = vec![vec![0.0; d]; d];
    for r in &all_z {
        for i in 0..d {
            for j in 0..d {
                gram[i][j] += r[i] * r[j];
            }
        }
    }
    for (i, row) in gram.iter_mut().enumerate() {
        row[i] += inst.lambda;
    }
    assert!(rel_frobenius(clf.autocorr_inv(), &invert(&gram)) < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn inverse_stays_symmetric(seed in 0u64..10_000, rows in 1usize..40, dim in 2usize..24) {
        let mut rng = SeededRng::new(seed);
        let z = sample_standard_normal::<f64>(&mut rng, rows, dim);
        let labels: Vec<usize> = (0..rows).map(|i| i % 3).collect();
        let mut clf = AnalyticClassifier::new(dim, 0.5).unwrap();
        clf.update_with_labels(&z, &labels).unwrap();
        let r = clf.autocorr_inv();
        for i in 0..dim {
            for j in 0..dim {
                prop_assert_eq!(r.row(i)[j], r.row(j)[i]);
            }
        }
    }

    #[test]
    fn update_order_of_rows_within_chunk_is_irrelevant(seed in 0u64..10_000) {
        let mut rng = SeededRng::new(seed);
        let z = sample_standard_normal::<f64>(&mut rng, 30, 10);
        let labels: Vec<usize> = (0..30).map(|i| i % 4).collect();
        let mut a = AnalyticClassifier::new(10, 1.0).unwrap();
        a.update_with_labels(&z, &labels).unwrap();

        let perm: Vec<usize> = (0..30).rev().collect();
        let labels_rev: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let mut b = AnalyticClassifier::new(10, 1.0).unwrap();
        b.add_classes(&[0, 1, 2, 3]);
        b.update_with_labels(&z.select_rows(&perm), &labels_rev).unwrap();
        prop_assert!(a.weights().relative_error(b.weights()) < 1e-10);
    }
}

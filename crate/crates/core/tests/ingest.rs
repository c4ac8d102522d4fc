mod common;

use std::io::Write;

use permsplit::ingest::read_ratings;
use permsplit::{
    compute_weights, fit_ml, load_ratings, write_ratings, FitOptions, FormatOptions, Rating, RatingsTable,
};
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::Rng;

use common::*;

fn to_csv(table: &RatingsTable, ids: Option<&permsplit::IdMaps>) -> Vec<u8> {
    let mut out = Vec::new();
    write_ratings(table, ids, &mut out, &FormatOptions::default()).unwrap();
    out
}

fn token_table() -> impl Strategy<Value = Vec<(String, String, u8)>> {
    prop::collection::btree_map(("[a-z][a-z0-9_]{0,6}", "[A-Z0-9]{1,5}"), 0u8..=1, 1..60)
        .prop_map(|m| m.into_iter().map(|((e, c), y)| (e, c, y)).collect())
}

proptest! {
    #[test]
    fn numeric_ids_round_trip(seed in any::<u64>(), s2 in 0.1..9.0_f64) {
        let table = random_table(&mut rng(seed), 12, 9, s2);
        let text = to_csv(&table, None);
        let loaded = read_ratings(&text[..], &FormatOptions::default()).unwrap();
        prop_assert_eq!(to_csv(&loaded.table, Some(&loaded.ids)), text);
        let restored = RatingsTable::from_entries(loaded.table.entries().map(|r| {
            Rating::new(
                loaded.ids.experts.token(r.expert_id).unwrap().parse().unwrap(),
                loaded.ids.clusters.token(r.cluster_id).unwrap().parse().unwrap(),
                r.rating,
            )
        }))
        .unwrap();
        prop_assert_eq!(restored, table);
    }

    #[test]
    fn string_ids_round_trip(rows in token_table()) {
        let mut text = String::from("expert_id,cluster_id,rating\n");
        for (e, c, y) in &rows {
            text.push_str(&format!("{e},{c},{y}\n"));
        }
        let loaded = read_ratings(text.as_bytes(), &FormatOptions::default()).unwrap();
        prop_assert_eq!(loaded.table.n_ratings(), rows.len());
        let again = read_ratings(&to_csv(&loaded.table, Some(&loaded.ids))[..], &FormatOptions::default()).unwrap();
        prop_assert_eq!(again, loaded);
    }
}

/// Per-expert counts following a piecewise-linear quantile curve through the
/// described quartiles, with the top scaled so the total matches.
fn case_study_counts(experts: usize, total: usize, quartiles: [f64; 3], min: f64) -> Vec<usize> {
    let knots = |top: f64| {
        [
            (0.0, min),
            (0.25, quartiles[0]),
            (0.5, quartiles[1]),
            (0.75, quartiles[2]),
            (1.0, top),
        ]
    };
    let count_at = |u: f64, top: f64| {
        let k = knots(top);
        let i = k.iter().rposition(|&(q, _)| q <= u).unwrap().min(3);
        let (q0, v0) = k[i];
        let (q1, v1) = k[i + 1];
        v0 + (v1 - v0) * (u - q0) / (q1 - q0)
    };
    let sum = |top: f64| {
        (0..experts)
            .map(|i| count_at((i as f64 + 0.5) / experts as f64, top))
            .sum::<f64>()
    };
    let (s0, s1) = (sum(0.0), sum(1.0));
    let top = (total as f64 - s0) / (s1 - s0);
    let mut counts: Vec<usize> = (0..experts)
        .map(|i| count_at((i as f64 + 0.5) / experts as f64, top).round() as usize)
        .collect();
    let drift = total as i64 - counts.iter().sum::<usize>() as i64;
    let last = counts.last_mut().unwrap();
    *last = (*last as i64 + drift) as usize;
    counts
}

fn quartile(sorted: &[usize], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * (pos - lo as f64)
}

#[test]
fn case_study_shaped_file_loads() {
    const EXPERTS: usize = 147;
    const CLUSTERS: usize = 22_015;
    const ROWS: usize = 409_552;
    let counts = case_study_counts(EXPERTS, ROWS, [345.0, 1200.0, 2370.0], 40.0);
    assert!(counts.iter().all(|&c| c <= CLUSTERS));
    let mut r = rng(147);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ratings.csv");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path).unwrap());
    writeln!(file, "expert_id,cluster_id,rating").unwrap();
    // Every cluster gets at least one rating from the largest raters.
    let mut order: Vec<usize> = (0..EXPERTS).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(counts[i]));
    let mut next_uncovered = 0;
    for &i in &order {
        let mut picked: Vec<usize> = Vec::with_capacity(counts[i]);
        let fresh = (CLUSTERS - next_uncovered).min(counts[i]);
        picked.extend(next_uncovered..next_uncovered + fresh);
        next_uncovered += fresh;
        for c in sample(&mut r, CLUSTERS, CLUSTERS) {
            if picked.len() == counts[i] {
                break;
            }
            if c >= next_uncovered - fresh && c < next_uncovered {
                continue;
            }
            picked.push(c);
        }
        for c in picked {
            writeln!(
                file,
                "E{:03},{},{}",
                i + 1,
                250_000 + c * 3,
                u8::from(r.random_bool(0.2))
            )
            .unwrap();
        }
    }
    drop(file);

    let loaded = load_ratings(&path, &FormatOptions::default()).unwrap();
    let t = &loaded.table;
    assert_eq!(
        (t.n_experts(), t.n_clusters(), t.n_ratings()),
        (EXPERTS, CLUSTERS, ROWS)
    );
    let mut per_expert: Vec<usize> = t.experts().iter().map(|e| e.ratings.len()).collect();
    per_expert.sort_unstable();
    let (q1, q2, q3) = (
        quartile(&per_expert, 0.25),
        quartile(&per_expert, 0.5),
        quartile(&per_expert, 0.75),
    );
    assert!((q1 - 345.0).abs() < 20.0, "{q1}");
    assert!((q2 - 1200.0).abs() < 40.0, "{q2}");
    assert!((q3 - 2370.0).abs() < 60.0, "{q3}");
    assert_eq!(loaded.ids.clusters.token(0), Some("250000"));
    assert_eq!(loaded.ids.experts.token(146), Some("E147"));
}

#[test]
fn weight_scale() {
    let mut r = rng(21);
    for _ in 0..200 {
        let table = random_table(&mut r, 15, 25, 1.0);
        let w = compute_weights(&table);
        let n = table.n_clusters() as f64;
        for e in table.experts() {
            let k = e.ratings.len() as f64;
            assert!(w[&e.id] >= 1.0);
            assert!((w[&e.id] * k - n).abs() <= n * f64::EPSILON);
        }
    }
}

/// Floating point cannot make `(N / k) * k == N` hold for every pair; the
/// product is within one unit in the last place, and exact for most pairs.
#[test]
fn weight_times_count_is_n_to_one_ulp() {
    let mut exact = 0usize;
    let mut total = 0usize;
    for n in 1..=2000u32 {
        let nf = f64::from(n);
        for k in 1..=n {
            let w = nf / f64::from(k);
            assert!(w >= 1.0);
            let prod = w * f64::from(k);
            assert!((prod - nf).abs() <= nf * f64::EPSILON, "n={n} k={k}");
            total += 1;
            exact += usize::from(prod == nf);
        }
    }
    println!("exact for {exact} of {total} pairs");
    assert!(exact as f64 > 0.8 * total as f64);
}

#[test]
fn weighting_moves_estimates_toward_light_raters() {
    // Heavy raters score every cluster, mostly 0 on clusters 1 to 4. Light
    // raters only see clusters 1 to 4 and mostly score them 1.
    let mut entries = Vec::new();
    for e in 1..=10u64 {
        for c in 1..=20u64 {
            let y = if c <= 4 {
                u8::from((e + c) % 4 == 0)
            } else {
                u8::from((e + c) % 2 == 0)
            };
            entries.push(Rating::new(e, c, y));
        }
    }
    for e in 11..=20u64 {
        for c in 1..=4u64 {
            entries.push(Rating::new(e, c, u8::from((e + c) % 4 != 0)));
        }
    }
    let table = RatingsTable::from_entries(entries).unwrap();
    let weights = compute_weights(&table);
    assert_eq!(weights[&1], 1.0);
    assert_eq!(weights[&11], 5.0);
    let options = FitOptions::default();
    let plain = fit_ml(&table, &options).unwrap();
    let weighted = fit_ml(&table.clone().with_weights(&weights).unwrap(), &options).unwrap();
    assert!(plain.converged && weighted.converged);
    for c in 1..=4 {
        assert!(
            weighted.params.beta_of(c).unwrap() > plain.params.beta_of(c).unwrap() + 0.2,
            "cluster {c}"
        );
    }
}

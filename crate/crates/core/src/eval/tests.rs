use std::collections::{BTreeMap, HashMap, VecDeque};

use proptest::prelude::*;

use super::*;

fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}

/// Every string over `alphabet` of length at most `max_len`.
fn all_strings(alphabet: &[char], max_len: usize) -> Vec<Vec<char>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &c in alphabet {
                let mut t: Vec<char> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Breadth-first search over single-symbol edits, restricted to strings of
/// length at most `max_len`.
fn bfs_distances(start: &[char], alphabet: &[char], max_len: usize) -> HashMap<Vec<char>, usize> {
    let mut dist = HashMap::from([(start.to_vec(), 0)]);
    let mut queue = VecDeque::from([start.to_vec()]);
    while let Some(s) = queue.pop_front() {
        let d = dist[&s];
        let mut next = Vec::new();
        for i in 0..s.len() {
            let mut t = s.clone();
            t.remove(i);
            next.push(t);
            for &c in alphabet {
                let mut t = s.clone();
                t[i] = c;
                next.push(t);
            }
        }
        if s.len() < max_len {
            for i in 0..=s.len() {
                for &c in alphabet {
                    let mut t = s.clone();
                    t.insert(i, c);
                    next.push(t);
                }
            }
        }
        for t in next {
            if !dist.contains_key(&t) {
                dist.insert(t.clone(), d + 1);
                queue.push_back(t);
            }
        }
    }
    dist
}

#[test]
fn matches_exhaustive_edit_search() {
    let alphabet = ['a', 'b', 'c'];
    let strings = all_strings(&alphabet, 4);
    for a in &strings {
        let dist = bfs_distances(a, &alphabet, 4);
        for b in &strings {
            let e = edit_distance(a, b);
            assert_eq!(e.distance, dist[b], "{a:?} -> {b:?}");
            assert_eq!(e.substitutions + e.insertions + e.deletions, e.distance);
            assert_eq!(b.len() + e.deletions, a.len() + e.insertions);
        }
    }
}

#[test]
fn simple_cases() {
    assert_eq!(edit_distance(&chars("abc"), &chars("abc")).distance, 0);
    let e = edit_distance(&chars(""), &chars("abcd"));
    assert_eq!((e.distance, e.insertions), (4, 4));
    let e = edit_distance(&chars("kitten"), &chars("sitting"));
    assert_eq!(e.distance, 3);
    assert_eq!((e.substitutions, e.insertions, e.deletions), (2, 1, 0));
}

#[test]
fn substitution_preferred_on_ties() {
    let e = edit_distance(&chars("a"), &chars("b"));
    assert_eq!((e.substitutions, e.insertions, e.deletions), (1, 0, 0));
}

fn corpus(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn corpus_fixtures() {
    let refs = corpus(&[("1", "a b c")]);
    let r = score_corpus(&corpus(&[("1", "a b")]), &refs).unwrap();
    assert!((r.wer() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(r.words.deletions, 1);
    assert!((r.cer() - 2.0 / 5.0).abs() < 1e-15);

    let same = score_corpus(&refs, &refs).unwrap();
    assert_eq!((same.cer(), same.wer()), (0.0, 0.0));

    // corpus-level, not per-utterance averaging
    let refs = corpus(&[("1", "ab"), ("2", "abcdefgh")]);
    let hyps = corpus(&[("1", "xy"), ("2", "abcdefgh")]);
    assert!((score_corpus(&hyps, &refs).unwrap().cer() - 0.2).abs() < 1e-15);

    let missing = score_corpus(&BTreeMap::new(), &refs).unwrap();
    assert_eq!(missing.chars.deletions, 10);
    assert!(matches!(score_corpus(&refs, &BTreeMap::new()), Err(Error::Input(_))));
}

#[test]
fn transcript_files() {
    let t = parse_transcripts("u1\thello world\t-1.500000\nu2\t\n").unwrap();
    assert_eq!(t["u1"], "hello world");
    assert_eq!(t["u2"], "");
    assert!(matches!(parse_transcripts("u1 no tab"), Err(Error::Format { line: 1, .. })));
}

#[test]
fn curves_round_trip() {
    let mut log = MetricsLog::default();
    for e in 1..=3 {
        log.push(EpochMetrics {
            epoch: e,
            cycle_loss: if e == 2 { f64::NAN } else { 0.1 * e as f64 + 1e-7 },
            val_acc: 0.5 + 0.01 * e as f64,
            val_cer: 0.3 / e as f64,
            val_wer: 0.6 / e as f64,
        });
    }
    let csv = log.to_csv();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv.lines().next().unwrap(), "epoch,cycle_loss,val_acc,val_cer,val_wer");
    let back = parse_curves(&csv).unwrap();
    for (a, b) in log.rows.iter().zip(&back.rows) {
        assert_eq!(a.epoch, b.epoch);
        for (x, y) in [
            (a.cycle_loss, b.cycle_loss),
            (a.val_acc, b.val_acc),
            (a.val_cer, b.val_cer),
            (a.val_wer, b.val_wer),
        ] {
            assert!((x.is_nan() && y.is_nan()) || (x - y).abs() < 1e-9);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    export_curves(&log, &path).unwrap();
    assert!(path.with_extension("svg").exists());
    assert!(export_curves(&MetricsLog::default(), &path).is_err());
    assert!(matches!(
        export_curves(&log, dir.path().join("missing/dir/curve.csv")),
        Err(Error::Io { .. })
    ));
}

fn short_seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn edit_distance_is_a_metric(a in short_seq(), b in short_seq(), c in short_seq()) {
        let d = |x: &[u8], y: &[u8]| edit_distance(x, y).distance;
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &b) == 0, a == b);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
    }

    #[test]
    fn corpus_score_ignores_order(texts in prop::collection::vec(("[ab ]{0,6}", "[ab ]{0,6}"), 1..6)) {
        let refs: Vec<(String, String)> =
            texts.iter().enumerate().map(|(i, (r, _))| (format!("u{i}"), r.clone())).collect();
        let hyps: Vec<(String, String)> =
            texts.iter().enumerate().map(|(i, (_, h))| (format!("u{i}"), h.clone())).collect();
        let fwd = score_corpus(&hyps.iter().cloned().collect(), &refs.iter().cloned().collect()).unwrap();
        let rev = score_corpus(
            &hyps.iter().rev().cloned().collect(),
            &refs.iter().rev().cloned().collect(),
        ).unwrap();
        prop_assert_eq!(fwd, rev);
    }
}

use std::io::Cursor;

use sidmlp::experiment::Dataset;
use sidmlp::synth::{read_dataset, split_leave_last_out, write_dataset, GeneratorProfile, UserRecord};

fn tiny() -> Dataset {
    Dataset::generate(&GeneratorProfile::by_name("tiny").unwrap()).unwrap()
}

#[test]
fn histories_respect_profile() {
    let ds = tiny();
    let p = &ds.profile;
    assert_eq!(ds.records.len(), p.users);
    for r in &ds.records {
        assert!((p.history_min..=p.history_max).contains(&r.items.len()));
        for it in &r.items {
            ds.catalog.index_of(*it).unwrap();
        }
        assert_eq!(r.serialized_len(p.l), 2 + p.l * r.items.len());
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = tiny();
    let b = tiny();
    assert_eq!(a.records, b.records);
    let mut p = GeneratorProfile::by_name("tiny").unwrap();
    p.seed = 7;
    let c = Dataset::generate(&p).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn leave_last_out_split() {
    let recs = vec![
        UserRecord { user_id: 0, items: vec![1, 2] },
        UserRecord { user_id: 1, items: vec![1, 2, 3] },
        UserRecord { user_id: 2, items: (10..20).collect() },
    ];
    let s = split_leave_last_out(&recs);
    assert_eq!(s.dropped, 1);
    assert_eq!(s.test.len(), 2);
    assert_eq!((s.test[0].record, s.test[0].prefix_len, s.test[0].target), (1, 2, 3));
    assert_eq!((s.val[0].prefix_len, s.val[0].target), (1, 2));
    // a 3-item history has no training targets
    assert!(s.train.iter().all(|e| e.record == 2));
    let targets: Vec<u32> = s.train.iter().map(|e| e.target).collect();
    assert_eq!(targets, vec![14, 15, 16, 17]);
    for e in &s.train {
        assert_eq!(recs[e.record].items[e.prefix_len], e.target);
        assert_eq!(e.history(&recs).len(), e.prefix_len);
    }
    assert_eq!(s.test[1].history(&recs), &recs[2].items[..9]);
}

#[test]
fn dataset_text_round_trip() {
    let ds = tiny();
    let mut buf = Vec::new();
    write_dataset(&mut buf, 4, &ds.records).unwrap();
    let (l, back) = read_dataset(Cursor::new(buf)).unwrap();
    assert_eq!(l, 4);
    assert_eq!(back, ds.records);
    assert!(read_dataset(Cursor::new("#users L=4\n3\t1 x\n")).is_err());
    assert!(read_dataset(Cursor::new("")).is_err());
}

#[test]
fn saved_dataset_reloads_identically() {
    let ds = tiny();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.records, ds.records);
    assert!(back.catalog.items().eq(ds.catalog.items()));
    assert_eq!(back.oracle.fingerprint(), ds.oracle.fingerprint());
    assert_eq!(back.split.test, ds.split.test);
    let h = &ds.records[0].items[..3];
    assert_eq!(
        back.oracle.next_item_log_probs(h).unwrap(),
        ds.oracle.next_item_log_probs(h).unwrap()
    );
}

use std::collections::{BTreeSet, HashSet};
use std::io::Cursor;

use proptest::prelude::*;
use sidmlp::catalog::{Catalog, SemanticId};
use sidmlp::synth::{generate_catalog, GeneratorProfile};
use sidmlp::Error;

fn build(l: usize, c: usize, sids: &[Vec<u16>]) -> sidmlp::Result<Catalog> {
    let items = sids
        .iter()
        .enumerate()
        .map(|(i, s)| (100 + i as u32, SemanticId::new(s.clone())))
        .collect();
    Catalog::build(l, c, items)
}

fn unique_sids(l: usize, c: u16) -> impl Strategy<Value = Vec<Vec<u16>>> {
    prop::collection::btree_set(prop::collection::vec(0..c, l), 1..60)
        .prop_map(|s| s.into_iter().collect())
}

proptest! {
    #[test]
    fn trie_continuations_match_brute_force(sids in unique_sids(3, 6)) {
        let cat = build(3, 6, &sids).unwrap();
        let trie = cat.trie();
        for s in &sids {
            for t in 0..3 {
                let prefix = &s[..t];
                let want: BTreeSet<u16> = sids
                    .iter()
                    .filter(|o| &o[..t] == prefix)
                    .map(|o| o[t])
                    .collect();
                let got = trie.valid_continuations(prefix).unwrap();
                prop_assert_eq!(got.clone(), want.iter().copied().collect::<Vec<_>>());
                let mask = trie.mask_vector(prefix).unwrap();
                prop_assert_eq!(mask.len(), 6);
                for d in 0..6u16 {
                    prop_assert_eq!(mask[d as usize], want.contains(&d));
                }
            }
        }
    }

    #[test]
    fn node_counts_equal_distinct_prefixes(sids in unique_sids(3, 5)) {
        let cat = build(3, 5, &sids).unwrap();
        for t in 0..=3 {
            let distinct: HashSet<&[u16]> = sids.iter().map(|s| &s[..t]).collect();
            prop_assert_eq!(cat.trie().nodes_at(t), distinct.len());
        }
    }

    #[test]
    fn sid_item_maps_are_inverse(sids in unique_sids(2, 9)) {
        let cat = build(2, 9, &sids).unwrap();
        for (id, sid) in cat.items() {
            prop_assert_eq!(cat.item_of_sid(sid.digits()).unwrap(), id);
            prop_assert_eq!(cat.sid_of_item(id).unwrap(), sid);
        }
    }

    #[test]
    fn text_round_trip(sids in unique_sids(3, 7)) {
        let cat = build(3, 7, &sids).unwrap();
        let mut buf = Vec::new();
        cat.write(&mut buf).unwrap();
        let back = Catalog::read(Cursor::new(buf)).unwrap();
        prop_assert_eq!(back.len(), cat.len());
        prop_assert_eq!(back.items().map(|(i, s)| (i, s.clone())).collect::<Vec<_>>(),
            cat.items().map(|(i, s)| (i, s.clone())).collect::<Vec<_>>());
    }
}

#[test]
fn invalid_prefixes_have_no_continuations() {
    let cat = build(2, 4, &[vec![0, 1], vec![2, 3]]).unwrap();
    assert!(cat.trie().node(&[1]).is_none());
    assert!(cat.trie().valid_continuations(&[1]).is_err());
    assert!(cat.item_of_sid(&[0, 3]).is_err());
}

#[test]
fn duplicate_sid_rejected() {
    match build(2, 4, &[vec![0, 1], vec![0, 1]]) {
        Err(Error::DuplicateSid { first, second, .. }) => assert_eq!((first, second), (100, 101)),
        other => panic!("{:?}", other.err()),
    }
}

#[test]
fn malformed_catalogs_rejected() {
    assert!(build(2, 4, &[vec![0, 4]]).is_err());
    assert!(build(2, 4, &[vec![0, 1, 2]]).is_err());
    assert!(build(2, 4, &[]).is_err());
    let dup_id = vec![(1, SemanticId::new(vec![0, 0])), (1, SemanticId::new(vec![0, 1]))];
    assert!(Catalog::build(2, 4, dup_id).is_err());
    assert!(Catalog::read(Cursor::new("#sid L=2 C=4\n1\t0-9\n")).is_err());
    assert!(Catalog::read(Cursor::new("garbage\n")).is_err());
}

#[test]
fn generated_catalogs_follow_branching_targets() {
    for name in ["small", "tiny"] {
        let p = GeneratorProfile::by_name(name).unwrap();
        let cat = generate_catalog(&p).unwrap();
        assert_eq!(cat.len(), p.items);
        let stats = cat.branching_profile();
        for (got, want) in stats.branching.iter().zip(&p.branching) {
            assert!((got / want - 1.0).abs() <= 0.2, "{name}: {got} vs {want}");
        }
        // ids are assigned in SID order
        let sids: Vec<_> = cat.items().map(|(_, s)| s.digits().to_vec()).collect();
        assert!(sids.windows(2).all(|w| w[0] < w[1]));
        let hist_total: u32 = stats.digit_histograms[0].iter().sum();
        assert_eq!(hist_total as usize, p.items);
    }
}

#[test]
fn catalog_generation_is_deterministic() {
    let p = GeneratorProfile::small();
    let a = generate_catalog(&p).unwrap();
    let b = generate_catalog(&p).unwrap();
    assert!(a.items().eq(b.items()));
    let mut q = p.clone();
    q.seed += 1;
    let c = generate_catalog(&q).unwrap();
    assert!(!a.items().eq(c.items()));
}

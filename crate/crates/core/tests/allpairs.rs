mod support;

use std::collections::HashMap;
use std::fs;

use nell_core::allpairs::{
    aggregate, build_table, extract_relation_pairs, read_table, sentences_of, write_table, AllPairsTable,
    CategoryPairKey, PairKey, ProfileStamp, RelationPairKey, Side, CATEGORY_FILE, RELATION_FILE,
};
use nell_core::corpus::{identify_entities, tokenize, Document, EntityMention, Gazetteer, LanguageProfile};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::naive;

fn fr() -> LanguageProfile {
    LanguageProfile::builtin("fr").unwrap()
}

fn docs(texts: &[String]) -> Vec<Document> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| Document {
            doc_id: format!("d{i:02}.txt"),
            text: t.clone(),
        })
        .collect()
}

fn as_naive(table: &AllPairsTable) -> (naive::CategoryCounts, naive::RelationCounts) {
    let cats = table
        .category_counts
        .iter()
        .map(|(k, &n)| {
            let side = if k.side == Side::Left { 'L' } else { 'R' };
            ((k.ne.clone(), side, k.tp.clone()), n)
        })
        .collect();
    let rels = table
        .relation_counts
        .iter()
        .map(|(k, &n)| ((k.ne1.clone(), k.ne2.clone(), k.tp.clone()), n))
        .collect();
    (cats, rels)
}

#[test]
fn counts_match_the_naive_recount() {
    let mut rows = 0;
    for seed in 0..25u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let texts = naive::random_corpus(&mut rng, 120, 12);
        let gazetteer: Vec<String> = ["Paulo do Rio", "city", "Saint"]
            .iter()
            .filter(|_| rng.gen_bool(0.5))
            .map(|s| s.to_string())
            .collect();
        let mut profile = fr();
        profile.case_sensitive_matching = seed % 3 != 0;
        let table = build_table(&docs(&texts), &profile, &Gazetteer::new(&gazetteer));
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        assert_eq!(as_naive(&table), naive::count(&refs, &profile, &gazetteer), "seed {seed}");
        rows += table.category_counts.len() + table.relation_counts.len();
    }
    assert!(rows > 1000, "generator too sparse: {rows} rows");
}

#[test]
fn stored_patterns_are_verbatim_and_in_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let texts = naive::random_corpus(&mut rng, 150, 12);
    let profile = fr();
    let documents = docs(&texts);
    let table = build_table(&documents, &profile, &Gazetteer::default());
    let sentences: Vec<Vec<String>> = documents
        .iter()
        .flat_map(|d| sentences_of(d, &profile))
        .map(|s| s.tokens.into_iter().map(|t| t.text).collect())
        .collect();
    let occurs = |tp: &str| {
        let parts: Vec<&str> = tp.split(' ').collect();
        sentences
            .iter()
            .any(|s| s.windows(parts.len()).any(|w| w.iter().zip(&parts).all(|(a, b)| a == b)))
    };
    for k in table.category_counts.keys() {
        let n = k.tp.split(' ').count();
        assert!((profile.min_gram..=profile.max_gram).contains(&n), "{k:?}");
        assert!(occurs(&k.tp), "{k:?}");
    }
    for k in table.relation_counts.keys() {
        let n = k.tp.split(' ').count();
        assert!((1..=profile.max_relation_gap).contains(&n), "{k:?}");
        assert!(occurs(&k.tp), "{k:?}");
        assert_ne!(k.ne1, k.ne2);
    }
    assert!(table.category_counts.values().all(|&n| n >= 1));
}

#[test]
fn four_mentions_give_six_ordered_pairs() {
    let s = tokenize("Ana met Bea and Cid saw Dan", "d", 0);
    let mentions: Vec<EntityMention> = [0, 2, 4, 6]
        .iter()
        .map(|&i| EntityMention {
            start: i,
            end: i + 1,
            surface: s.token(i).to_string(),
        })
        .collect();
    let got = extract_relation_pairs(&s, &mentions, &fr());
    let mut expected = Vec::new();
    for (i, a) in mentions.iter().enumerate() {
        for b in &mentions[i + 1..] {
            expected.push((a.surface.clone(), b.surface.clone(), s.join(a.end, b.start)));
        }
    }
    let got: Vec<_> = got.into_iter().map(|k| (k.ne1, k.ne2, k.tp)).collect();
    assert_eq!(got.len(), 6);
    assert_eq!(got, expected);
}

#[test]
fn single_mention_has_no_relations() {
    let s = tokenize("Lyon est une belle ville", "d", 0);
    let m = identify_entities(&s, &fr(), &Gazetteer::default());
    assert_eq!(m.len(), 1);
    assert!(extract_relation_pairs(&s, &m, &fr()).is_empty());
}

fn stamp() -> ProfileStamp {
    ProfileStamp::of(&fr())
}

fn key_strategy() -> impl Strategy<Value = PairKey> {
    let ne = prop::sample::select(vec!["Lyon", "Paris", "São Paulo", "Rio"]);
    let tp = prop::sample::select(vec!["is a city", "est une ville", "is near"]);
    prop_oneof![
        (ne.clone(), any::<bool>(), tp.clone()).prop_map(|(ne, left, tp)| PairKey::Category(CategoryPairKey {
            ne: ne.into(),
            side: if left { Side::Left } else { Side::Right },
            tp: tp.into(),
        })),
        (ne.clone(), ne, tp).prop_map(|(a, b, tp)| PairKey::Relation(RelationPairKey {
            ne1: a.into(),
            ne2: b.into(),
            tp: tp.into(),
        })),
    ]
}

proptest! {
    #[test]
    fn aggregate_is_a_homomorphism(
        s1 in proptest::collection::vec(key_strategy(), 0..60),
        s2 in proptest::collection::vec(key_strategy(), 0..60),
        s3 in proptest::collection::vec(key_strategy(), 0..60),
    ) {
        let agg = |s: &[PairKey]| aggregate(stamp(), s.to_vec());
        let all: Vec<PairKey> = s1.iter().chain(&s2).cloned().collect();
        let merged = agg(&s1).merge(agg(&s2)).unwrap();
        prop_assert_eq!(&agg(&all), &merged);
        prop_assert_eq!(&agg(&s2).merge(agg(&s1)).unwrap(), &merged);
        let left = agg(&s1).merge(agg(&s2)).unwrap().merge(agg(&s3)).unwrap();
        let right = agg(&s1).merge(agg(&s2).merge(agg(&s3)).unwrap()).unwrap();
        prop_assert_eq!(left, right);
        prop_assert_eq!(agg(&s1).merge(AllPairsTable::empty(stamp())).unwrap(), agg(&s1));
    }
}

#[test]
fn aggregate_matches_hashmap_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let distinct: Vec<PairKey> = (0..50)
        .map(|i| {
            if i % 2 == 0 {
                PairKey::Category(CategoryPairKey {
                    ne: format!("N{i}"),
                    side: Side::Right,
                    tp: "a b c".into(),
                })
            } else {
                PairKey::Relation(RelationPairKey {
                    ne1: format!("N{i}"),
                    ne2: "M".into(),
                    tp: "x".into(),
                })
            }
        })
        .collect();
    let stream: Vec<PairKey> = (0..10_000).map(|_| distinct[rng.gen_range(0..50)].clone()).collect();
    let mut naive: HashMap<String, u64> = HashMap::new();
    for k in &stream {
        *naive.entry(format!("{k:?}")).or_default() += 1;
    }
    let table = aggregate(stamp(), stream);
    assert_eq!(table.category_total() + table.relation_total(), 10_000);
    for (k, n) in &table.category_counts {
        assert_eq!(naive[&format!("{:?}", PairKey::Category(k.clone()))], *n);
    }
    for (k, n) in &table.relation_counts {
        assert_eq!(naive[&format!("{:?}", PairKey::Relation(k.clone()))], *n);
    }
    assert_eq!(table.category_counts.len() + table.relation_counts.len(), naive.len());
    assert!(aggregate(stamp(), Vec::new()).is_empty());
}

#[test]
fn merge_refuses_other_profiles() {
    let en = AllPairsTable::empty(ProfileStamp::of(&LanguageProfile::builtin("en").unwrap()));
    assert!(AllPairsTable::empty(stamp()).merge(en).is_err());
}

#[test]
fn files_round_trip_and_are_byte_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let texts = naive::random_corpus(&mut rng, 80, 10);
    let table = build_table(&docs(&texts), &fr(), &Gazetteer::default());
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_table(&table, a.path()).unwrap();
    let again = build_table(&docs(&texts), &fr(), &Gazetteer::default());
    write_table(&again, b.path()).unwrap();
    for f in [CATEGORY_FILE, RELATION_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    assert_eq!(read_table(a.path()).unwrap(), table);
}

#[test]
fn shard_order_does_not_change_the_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let texts = naive::random_corpus(&mut rng, 60, 10);
    let mut documents = docs(&texts);
    let forward = build_table(&documents, &fr(), &Gazetteer::default());
    documents.reverse();
    assert_eq!(build_table(&documents, &fr(), &Gazetteer::default()), forward);
}

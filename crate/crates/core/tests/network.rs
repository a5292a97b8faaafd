mod common;

use common::cohort_table;
use friendbounds::data::{
    columns, compute_age_distance, compute_cohort_means, compute_degree_measures, EdgeList, Individual,
    ObservationTable,
};
use friendbounds::ColumnSource;
use proptest::prelude::*;

fn col(t: &ObservationTable, name: &str) -> Vec<f64> {
    t.column(name).unwrap()
}

#[test]
fn three_edge_graph_by_hand() {
    let t = cohort_table(&[(1, 9, &[14.0, 14.2, 14.5])]);
    let e = EdgeList::new(vec![(2, 1), (3, 1), (1, 2)], &t).unwrap();
    let d = compute_degree_measures(&t, &e).unwrap();
    assert_eq!(col(&d, columns::GRADE_INDEGREE)[0], 2.0);
    assert_eq!(col(&d, columns::OUTDEGREE)[0], 1.0);
    assert_eq!(col(&d, columns::RECIPROCATED)[0], 1.0);
    assert_eq!(col(&d, columns::NETWORK_SIZE)[0], 2.0);
}

#[test]
fn other_grade_counts_for_school_only() {
    let t = cohort_table(&[(1, 9, &[14.0, 14.3]), (1, 10, &[15.0]), (2, 9, &[14.1])]);
    let e = EdgeList::new(vec![(3, 1), (2, 1), (4, 1)], &t).unwrap();
    let d = compute_degree_measures(&t, &e).unwrap();
    assert_eq!(col(&d, columns::GRADE_INDEGREE)[0], 1.0);
    assert_eq!(col(&d, columns::SCHOOL_INDEGREE)[0], 2.0);
    assert_eq!(col(&d, columns::INDEGREE)[0], 3.0);
}

#[test]
fn worked_age_distance_example() {
    let t = cohort_table(&[(1, 9, &[14.0, 13.5, 13.0]), (1, 10, &[13.8, 13.5, 13.2])]);
    let d = compute_age_distance(&t).unwrap();
    let dist = col(&d, columns::AGE_DISTANCE);
    assert_eq!(&dist[..3], &[0.75, 0.5, 0.75]);
    // 13.8 - 13.5 is not exactly 0.3 in binary
    assert!((dist[4] - 0.3).abs() < 1e-12);
    let m = compute_cohort_means(&d, &[columns::AGE_DISTANCE]).unwrap();
    assert_eq!(col(&m, "mean_age_distance")[0], 2.0 / 3.0);
    let m = compute_cohort_means(&t, &["age"]).unwrap();
    assert_eq!(col(&m, "mean_age")[1], 13.5);
}

#[test]
fn older_and_younger_components() {
    let t = cohort_table(&[(1, 9, &[14.0, 13.5, 13.0, 13.5])]);
    let d = compute_age_distance(&t).unwrap();
    // equal ages count as neither older nor younger
    assert_eq!(col(&d, columns::AGE_DISTANCE_OLDER)[1], 0.5);
    assert_eq!(col(&d, columns::AGE_DISTANCE_YOUNGER)[1], 0.5);
    assert_eq!(col(&d, columns::AGE_DISTANCE_OLDER)[0], 0.0);
}

#[test]
fn singleton_cohort_has_no_distance() {
    let t = cohort_table(&[(1, 9, &[14.0]), (1, 10, &[15.0, 15.5])]);
    let d = compute_age_distance(&t).unwrap();
    assert!(col(&d, columns::AGE_DISTANCE)[0].is_nan());
    assert_eq!(col(&d, columns::AGE_DISTANCE)[1], 0.5);
}

#[test]
fn cohort_means_are_per_cell() {
    let t = cohort_table(&[(1, 9, &[14.0, 15.0]), (1, 10, &[16.0, 17.0, 18.0])]);
    let m = compute_cohort_means(&t, &["age"]).unwrap();
    assert_eq!(col(&m, "mean_age"), vec![14.5, 14.5, 17.0, 17.0, 17.0]);
}

#[test]
fn invalid_edges_are_rejected() {
    let t = cohort_table(&[(1, 9, &[14.0, 14.5])]);
    assert!(EdgeList::new(vec![(1, 1)], &t).is_err());
    assert!(EdgeList::new(vec![(1, 9)], &t).is_err());
    assert!(EdgeList::new(vec![(1, 2), (1, 2)], &t).is_err());
}

#[test]
fn invalid_individuals_are_rejected() {
    assert!(ObservationTable::new(vec![Individual::new(1, 1, 9, -2.0)]).is_err());
    let a = Individual::new(1, 1, 9, 14.0);
    assert!(ObservationTable::new(vec![a.clone(), a]).is_err());
}

fn random_graph() -> impl Strategy<Value = (Vec<(i64, i64, f64)>, Vec<(usize, usize)>)> {
    (2usize..200).prop_flat_map(|n| {
        let people = prop::collection::vec((1i64..4, 9i64..11, 12.0f64..17.0), n);
        let edges = prop::collection::vec((0..n, 0..n), 0..4 * n);
        (people, edges)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn degrees_match_brute_force((people, raw) in random_graph()) {
        let inds: Vec<Individual> = people
            .iter()
            .enumerate()
            .map(|(i, &(s, g, a))| Individual::new(i as i64 + 1, s, g, a))
            .collect();
        let t = ObservationTable::new(inds).unwrap();
        let mut edges: Vec<(i64, i64)> = raw
            .iter()
            .filter(|(a, b)| a != b)
            .map(|&(a, b)| (a as i64 + 1, b as i64 + 1))
            .collect();
        edges.sort();
        edges.dedup();
        let list = EdgeList::new(edges.clone(), &t).unwrap();
        let d = compute_degree_measures(&t, &list).unwrap();
        let grade_in = col(&d, columns::GRADE_INDEGREE);
        let indeg = col(&d, columns::INDEGREE);
        let outdeg = col(&d, columns::OUTDEGREE);
        let recip = col(&d, columns::RECIPROCATED);
        let same = |a: i64, b: i64| {
            let (x, y) = (&people[a as usize - 1], &people[b as usize - 1]);
            x.0 == y.0 && x.1 == y.1
        };
        let mut within_out = vec![0.0; people.len()];
        for i in 0..people.len() {
            let id = i as i64 + 1;
            let count = edges.iter().filter(|&&(s, r)| r == id && same(s, r)).count() as f64;
            prop_assert_eq!(grade_in[i], count);
            prop_assert!(recip[i] <= indeg[i].min(outdeg[i]));
            within_out[i] = edges.iter().filter(|&&(s, r)| s == id && same(s, r)).count() as f64;
        }
        prop_assert_eq!(grade_in.iter().sum::<f64>(), within_out.iter().sum::<f64>());
    }

    #[test]
    fn age_distance_ignores_a_common_shift(ages in prop::collection::vec(12.0f64..17.0, 2..30), shift in -3.0f64..3.0) {
        let base = cohort_table(&[(1, 9, &ages)]);
        let shifted_ages: Vec<f64> = ages.iter().map(|a| a + shift).collect();
        let moved = cohort_table(&[(1, 9, &shifted_ages)]);
        let a = col(&compute_age_distance(&base).unwrap(), columns::AGE_DISTANCE);
        let b = col(&compute_age_distance(&moved).unwrap(), columns::AGE_DISTANCE);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let ma = col(&compute_cohort_means(&base, &["age"]).unwrap(), "mean_age")[0];
        let mb = col(&compute_cohort_means(&moved, &["age"]).unwrap(), "mean_age")[0];
        prop_assert!((mb - ma - shift).abs() <= 1e-12);
    }
}

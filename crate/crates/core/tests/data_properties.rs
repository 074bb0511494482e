use proptest::prelude::*;

use hlsirm::data::{
    read_dataset, recode, simulate_dataset, write_dataset, Group, RawDataset, RawGroup, RecodingRule, ResponseDataset,
    ResponseMatrix, SimulateOptions, Sizes, Truth,
};
use hlsirm::model::{logistic, ModelState};

fn dataset_strategy() -> impl Strategy<Value = ResponseDataset> {
    (1usize..5, 1usize..6).prop_flat_map(|(k, p)| {
        prop::collection::vec(
            prop::collection::vec(prop::collection::vec(prop::option::of(any::<bool>()), p), 1..5),
            k,
        )
        .prop_map(move |groups| {
            let groups = groups
                .into_iter()
                .enumerate()
                .map(|(g, rows)| Group {
                    id: format!("school {g}"),
                    respondent_ids: (0..rows.len()).map(|i| format!("s{g}-{i}")).collect(),
                    responses: ResponseMatrix::from_rows(rows).unwrap(),
                })
                .collect();
            ResponseDataset::new(groups, (0..p).map(|j| format!("item_{j}")).collect()).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn csv_round_trip_is_lossless(data in dataset_strategy()) {
        let mut first = Vec::new();
        write_dataset(&data, &mut first).unwrap();
        let back = read_dataset(first.as_slice(), None).unwrap();
        prop_assert_eq!(&back, &data);
        let mut second = Vec::new();
        write_dataset(&back, &mut second).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn raising_a_raw_level_never_clears_the_code(scale in 2u32..10, cut_frac in 0.0f64..1.0, a in 1i64..10, b in 1i64..10) {
        let cut = 2 + ((scale - 1) as f64 * cut_frac) as u32;
        let cut = cut.min(scale);
        let (lo, hi) = (a.min(b).min(scale as i64), a.max(b).min(scale as i64));
        let raw = RawDataset {
            groups: vec![RawGroup { id: "g".into(), respondent_ids: vec!["lo".into(), "hi".into()], values: vec![vec![Some(lo)], vec![Some(hi)]] }],
            item_ids: vec!["q".into()],
        };
        let coded = recode(&raw, &[RecodingRule::new("q", scale, cut).unwrap()]).unwrap();
        let r = &coded.group(0).responses;
        prop_assert!(r.get(0, 0).unwrap() <= r.get(1, 0).unwrap());
    }
}

#[test]
fn item_endorsement_rates_converge_to_logistic_intercepts() {
    let sizes = Sizes::new(vec![600, 500, 400], 6, 2);
    let mut truth = ModelState::zeros(&sizes.group_sizes, sizes.num_items, sizes.dim);
    truth.item_intercepts = vec![-2.0, -0.8, 0.0, 0.4, 1.3, 3.0];
    let options = SimulateOptions { suppress_residuals: true, ..Default::default() };
    let (data, _) = simulate_dataset(&Truth::State(truth.clone()), &sizes, 17, &options).unwrap();
    let n = data.total_respondents() as f64;
    for (j, b) in truth.item_intercepts.iter().enumerate() {
        let ones = data
            .groups()
            .iter()
            .map(|g| (0..g.size()).filter(|&i| g.responses.get(i, j) == Some(true)).count())
            .sum::<usize>() as f64;
        let p = logistic(*b);
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((ones / n - p).abs() < 4.0 * se, "item {j}: rate {} vs {p}", ones / n);
    }
}

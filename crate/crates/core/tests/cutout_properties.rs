use orthotune::cutout::{apply_cutout, similarity_from_tokens, SimilarityMap};
use orthotune::Matrix;
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = (usize, usize, Vec<i8>)> {
    (1usize..=5, 1usize..=5).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-3i8..=3, r * c)))
}

proptest! {
    #[test]
    fn top_k_matches_brute_force((rows, cols, levels) in grid_strategy(), k_frac in 0.0f64..=1.0) {
        let values: Vec<f64> = levels.iter().map(|&v| v as f64 / 3.0).collect();
        let n = values.len();
        let k = ((n as f64) * k_frac).round() as usize;
        let map = SimilarityMap::new(Matrix::from_vec(rows, cols, values.clone()).unwrap());
        let mut picked = map.top_k(k).unwrap();
        picked.sort_unstable();
        let expect: Vec<usize> = (0..n)
            .filter(|&i| (0..n).filter(|&j| values[j] > values[i] || (values[j] == values[i] && j < i)).count() < k)
            .collect();
        prop_assert_eq!(picked, expect);
    }

    #[test]
    fn cutout_touches_only_the_chosen_rows((rows, cols, levels) in grid_strategy(), k_frac in 0.0f64..=1.0) {
        let n = rows * cols;
        let k = ((n as f64) * k_frac).round() as usize;
        let map = SimilarityMap::new(Matrix::from_vec(rows, cols, levels.iter().map(|&v| v as f64 / 3.0).collect()).unwrap());
        let image = Matrix::from_fn(n, 3, |i, j| 1.0 + (i * 3 + j) as f64);
        let cut = apply_cutout(&image, &map, k).unwrap();
        let chosen = map.top_k(k).unwrap();
        for p in 0..n {
            if chosen.contains(&p) {
                prop_assert!(cut.row(p).iter().all(|&v| v == 0.0));
            } else {
                prop_assert_eq!(cut.row(p), image.row(p));
            }
        }
    }

    #[test]
    fn similarities_are_cosines(tokens in prop::collection::vec(-3.0f64..3.0, 16 * 4), text in prop::collection::vec(-3.0f64..3.0, 4)) {
        let t = Matrix::from_vec(16, 4, tokens).unwrap();
        let q = Matrix::from_vec(1, 4, text).unwrap();
        let map = similarity_from_tokens(&t, &q, 4, 4).unwrap();
        for v in map.grid().data() {
            prop_assert!((-1.0..=1.0).contains(v));
        }
    }
}

#[test]
fn k_beyond_grid_is_rejected() {
    let map = SimilarityMap::new(Matrix::zeros(2, 2));
    assert!(map.top_k(5).is_err());
    assert!(apply_cutout(&Matrix::zeros(4, 2), &map, 5).is_err());
}

#[test]
fn token_grid_must_match() {
    let t = Matrix::zeros(15, 4);
    assert!(similarity_from_tokens(&t, &Matrix::zeros(1, 4), 4, 4).is_err());
}

use dlmwpo::policy_opt::{group_advantage, wd1_weights};
use dlmwpo::tasks::{
    arithmetic_reward, countdown_reward, random_expression, sudoku_reward, CountdownInstance, Grid,
    SudokuInstance, XML_PENALTY_CAP,
};
use dlmwpo::trainer::RunConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rewards() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 2..17)
}

proptest! {
    #[test]
    fn weights_normalize_and_mirror(r in rewards(), psi in prop::sample::select(vec![0.1, 1.0, 10.0])) {
        let a = group_advantage(&r).unwrap();
        let (wp, wn) = wd1_weights(&a, psi).unwrap();
        prop_assert!((wp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((wn.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        let (mirror, _) = wd1_weights(&neg, psi).unwrap();
        prop_assert_eq!(&mirror, &wn);
        for i in 0..a.len() {
            for j in 0..a.len() {
                if a[i] > a[j] {
                    prop_assert!(wp[i] >= wp[j] && wn[i] <= wn[j]);
                }
            }
        }
    }

    #[test]
    fn advantages_center_and_ignore_shifts(r in rewards(), c in -10.0f64..10.0) {
        let a = group_advantage(&r).unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        let b = group_advantage(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn rewards_are_total_and_bounded(text in ".{0,60}") {
        let cd = CountdownInstance { numbers: vec![2, 3, 4], target: 24, witness: "2*3*4".into() };
        let c = countdown_reward(&text, &cd).total;
        prop_assert!(c == 0.0 || c == 0.1 || c == 1.0);
        let sol: Grid = [[1, 2, 3, 4], [3, 4, 1, 2], [2, 1, 4, 3], [4, 3, 2, 1]];
        let mut puzzle = sol;
        puzzle[0][0] = 0;
        puzzle[3][3] = 0;
        let s = sudoku_reward(&text, &SudokuInstance { puzzle, solution: sol }).total;
        prop_assert!((0.0..=1.0).contains(&s));
        let a = arithmetic_reward(&text, 7).total;
        prop_assert!((-XML_PENALTY_CAP..=4.5).contains(&a));
    }

    #[test]
    fn countdown_ignores_whitespace_and_reordering(seed in any::<u64>(), pad in "[ \t]{0,3}") {
        let nums = [3u32, 5, 8];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let expr = random_expression(&nums, &mut rng);
        let value = dlmwpo::tasks::parse_expression(&expr).unwrap().value;
        prop_assume!(matches!(value, Some(v) if v >= 0));
        let inst = CountdownInstance { numbers: nums.to_vec(), target: value.unwrap() as u32, witness: expr.clone() };
        prop_assert_eq!(countdown_reward(&expr, &inst).total, 1.0);
        let spaced: String = expr.chars().flat_map(|ch| [ch].into_iter().chain(pad.chars())).collect();
        prop_assert_eq!(countdown_reward(&spaced, &inst).total, 1.0);
        let extra = format!("{pad}({expr}){pad}*1");
        prop_assert_eq!(countdown_reward(&extra, &inst).total, 0.0);
    }

    #[test]
    fn countdown_commutes(perm in Just(vec![3u32, 5, 8]).prop_shuffle(), times in any::<bool>()) {
        let op = if times { "*" } else { "+" };
        let target = if times { 120 } else { 16 };
        let inst = CountdownInstance { numbers: vec![3, 5, 8], target, witness: String::new() };
        let text = format!("{}{op}{}{op}{}", perm[0], perm[1], perm[2]);
        prop_assert_eq!(countdown_reward(&text, &inst).total, 1.0);
    }

    #[test]
    fn config_render_round_trips(g in 2usize..16, lr in 1e-6f64..1e-2, mu in 1usize..9) {
        let mut c = RunConfig::default();
        c.apply_override(&format!("num_generations={g}")).unwrap();
        c.apply_override(&format!("learning_rate={lr}")).unwrap();
        c.apply_override(&format!("num_iterations={mu}")).unwrap();
        let back = RunConfig::parse(&c.render()).unwrap();
        prop_assert_eq!(back.render(), c.render());
        prop_assert_eq!(back.resolve().unwrap().train.optimizer.learning_rate, lr);
    }
}

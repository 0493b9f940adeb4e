mod common;

use common::*;

#[test]
fn elbo_gradient_matches_finite_differences() {
    let (cfg, params) = small_model(1);
    let rep = gradcheck(&params, &elbo_loss(&cfg, 2), 100, 3);
    assert!(rep.max_rel_err <= 1e-3, "{rep:?}");
}

#[test]
fn diffu_grpo_gradient_matches_finite_differences() {
    let (cfg, params) = small_model(4);
    let rep = gradcheck(&params, &grpo_loss(&cfg, &params, 5), 100, 6);
    assert!(rep.max_rel_err <= 1e-3, "{rep:?}");
}

#[test]
fn wd1_gradient_matches_finite_differences() {
    let (cfg, params) = small_model(7);
    let rep = gradcheck(&params, &wd1_loss(&cfg, 8), 100, 9);
    assert!(rep.max_rel_err <= 1e-3, "{rep:?}");
}

#[test]
fn gradcheck_detects_a_detached_term() {
    // w·stopgrad(3w): backprop sees 3w, the true gradient is 6w
    let (_, params) = small_model(10);
    let loss: LossFn = Box::new(|tape| {
        let w = tape.param_named("head.b").unwrap();
        let k: Vec<f64> = tape.value(w).data().iter().map(|x| 3.0 * x).collect();
        tape.dot(w, &k).unwrap()
    });
    let rep = gradcheck(&params, &loss, 400, 11);
    assert!(rep.max_rel_err > 0.4, "{rep:?}");
}

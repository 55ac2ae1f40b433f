//! Residual identity, dependency direction and convexity of the
//! cross-resolution mixing stack.

use proptest::prelude::*;
use xfmnet::enhancement::{soft_fuse, EnhancementStack};
use xfmnet::layers::Ctx;
use xfmnet::numerics::{seeded_rng, ParamStore, Tensor, Var};

const LENS: [usize; 4] = [48, 24, 12, 6];
const D: usize = 3;

fn inputs(seed: u64) -> Vec<Tensor> {
    let mut rng = seeded_rng(seed);
    LENS.iter().map(|&t| Tensor::randn(&[t, D], 1.0, &mut rng)).collect()
}

fn run(store: &ParamStore, stack: &EnhancementStack, xs: &[Tensor], seasonal: bool) -> Vec<Tensor> {
    let mut cx = Ctx::eval(store);
    let vars: Vec<Var> = xs.iter().map(|x| cx.constant(x.clone())).collect();
    let out = if seasonal {
        stack.seasonal_bottom_up(&mut cx, &vars).unwrap()
    } else {
        stack.trend_top_down(&mut cx, &vars).unwrap()
    };
    out.into_iter().map(|v| cx.value(v).clone()).collect()
}

fn build(seed: u64) -> (ParamStore, EnhancementStack) {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let stack = EnhancementStack::new(&mut store, "enh", &LENS, D, &mut rng).unwrap();
    (store, stack)
}

#[test]
fn zero_parameters_are_identity() {
    let (mut store, stack) = build(1);
    store.zero_trainable();
    let xs = inputs(2);
    for seasonal in [true, false] {
        let out = run(&store, &stack, &xs, seasonal);
        for (a, b) in out.iter().zip(&xs) {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn zero_coarse_input_leaves_finer_trend_unchanged() {
    let (mut store, stack) = build(3);
    // Remove every bias so a zero coarse level contributes nothing.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.entry(id).name.ends_with(".b") {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
    }
    let mut xs = inputs(4);
    for x in xs.iter_mut().skip(1) {
        *x = Tensor::zeros(x.shape());
    }
    let out = run(&store, &stack, &xs, false);
    assert_eq!(out[0], xs[0]);
}

#[test]
fn seasonal_reads_only_finer_levels() {
    let (store, stack) = build(5);
    let xs = inputs(6);
    let base = run(&store, &stack, &xs, true);
    for l in 1..LENS.len() {
        let mut pert = xs.clone();
        pert[l] = pert[l].map(|v| v + 2.5);
        let out = run(&store, &stack, &pert, true);
        for f in 0..l {
            assert_eq!(out[f], base[f], "perturbing level {l} changed seasonal level {f}");
        }
        assert_ne!(out[l], base[l]);
    }
}

#[test]
fn trend_reads_only_coarser_levels() {
    let (store, stack) = build(7);
    let xs = inputs(8);
    let base = run(&store, &stack, &xs, false);
    for l in 0..LENS.len() - 1 {
        let mut pert = xs.clone();
        pert[l] = pert[l].map(|v| v + 2.5);
        let out = run(&store, &stack, &pert, false);
        for c in l + 1..LENS.len() {
            assert_eq!(out[c], base[c], "perturbing level {l} changed trend level {c}");
        }
        assert_ne!(out[l], base[l]);
    }
}

proptest! {
    #[test]
    fn soft_fuse_is_convex(
        a in prop::collection::vec(-10.0f64..10.0, 1..20),
        shift in prop::collection::vec(-10.0f64..10.0, 20),
        l0 in -20.0f64..20.0,
        l1 in -20.0f64..20.0,
    ) {
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let ta = Tensor::from_vec(a.clone());
        let tb = Tensor::from_vec(b.clone());
        let out = soft_fuse(&ta, &tb, [l0, l1]).unwrap();
        for ((o, x), y) in out.data().iter().zip(&a).zip(&b) {
            prop_assert!(*o >= x.min(*y) - 1e-12 && *o <= x.max(*y) + 1e-12);
        }
    }
}

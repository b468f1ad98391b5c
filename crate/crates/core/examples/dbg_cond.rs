use prer_core::rng::SeededRng;
use prer_core::tensor::params::ParamStore;

fn main() {
    // replicate block-0 conditioner pre-activations at d=2, cond=2
    let mut rng = SeededRng::new(40);
    let mut store = ParamStore::new();
    // FlowModel::build order: per block: bn buffers, then cp.f0, f1, f2, then perm
    // rebuild just the f0 layer with the same rng draws used in the failing run:
    let (w0, b0) = store.add_linear("f0", 3, 2, &mut rng);
    let w = store.get(w0).data();
    let b = store.get(b0).data();
    println!("w = {w:?}\nb = {b:?}");
    // input (a, onehot): a in [-2, 2], onehot unit
    for a in [-2.0f64, -1.0, 0.0, 1.0, 2.0] {
        for c in 0..2 {
            let oh = [if c == 0 { 1.0 } else { 0.0 }, if c == 1 { 1.0 } else { 0.0 }];
            let h0 = a * w[0] + oh[0] * w[2] + oh[1] * w[4] + b[0];
            let h1 = a * w[1] + oh[0] * w[3] + oh[1] * w[5] + b[1];
            println!("a={a:+.1} c={c}: pre-act ({h0:+.3}, {h1:+.3})");
        }
    }
}

// probe sensitivity magnitudes
use smp_core::policy::*;
use smp_core::presets;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let g = presets::chain(&["t", "a", "b", "c"]);
    let d_s = smp_core::sim::LIMB_STATE_DIM;
    for seed in [15u64, 1, 2, 3] {
        let p = SmpParams::new(Scheme::BothWay, 1, d_s, 16, MESSAGE_DIM, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let states: Vec<Vec<f64>> = (0..4).map(|_| (0..d_s).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let base = act_both_way(&states, &g, &p).unwrap();
        let mut lp = states.clone();
        lp[3][0] += 0.2;
        let out = act_both_way(&lp, &g, &p).unwrap();
        println!("seed {seed}: delta a_t = {:e}", (out.actions[0] - base.actions[0]).abs());
        // check up messages differ at each level
        for i in 0..4 {
            let du: f64 = out.up_messages[i].as_ref().unwrap().0.iter()
                .zip(base.up_messages[i].as_ref().unwrap().0.iter())
                .map(|(a,b)| (a-b).abs()).sum();
            println!("  limb {i}: up msg delta l1 = {du:e}");
        }
    }
}

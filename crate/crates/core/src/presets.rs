//! Shipped morphologies and environment configuration.
//!
//! The JSON files under `assets/` are the source of truth; these helpers
//! parse them at first use. `chain`, `double_chain` and `single_limb` build
//! synthetic trees for tests and experiments.

use crate::morphology::{parse_morphology, LimbSpec, MorphologyGraph};
use crate::sim::EnvConfig;

pub const WALKER_JSON: &str = include_str!("../assets/walker7.json");
pub const HOPPER_JSON: &str = include_str!("../assets/hopper4.json");
pub const HOPPER2_JSON: &str = include_str!("../assets/hopper2.json");
pub const HUMANOID_JSON: &str = include_str!("../assets/humanoid7.json");
pub const ENV_DEFAULT_JSON: &str = include_str!("../assets/env_default.json");

/// Seven-limb planar walker: torso with two three-limb legs.
pub fn walker() -> MorphologyGraph {
    parse_morphology(WALKER_JSON).expect("bundled walker asset is valid")
}

/// Four-limb hopper chain: torso, thigh, shin, foot.
pub fn hopper() -> MorphologyGraph {
    parse_morphology(HOPPER_JSON).expect("bundled hopper asset is valid")
}

/// Minimal two-limb hopper: torso plus one leg.
pub fn hopper2() -> MorphologyGraph {
    parse_morphology(HOPPER2_JSON).expect("bundled hopper2 asset is valid")
}

/// Seven-limb planar humanoid whose torso has three children.
pub fn humanoid() -> MorphologyGraph {
    parse_morphology(HUMANOID_JSON).expect("bundled humanoid asset is valid")
}

/// Default environment configuration.
pub fn env_default() -> EnvConfig {
    serde_json::from_str(ENV_DEFAULT_JSON).expect("bundled env config is valid")
}

fn generic_limb(name: &str, actuated: bool, order: u32) -> LimbSpec {
    LimbSpec {
        name: name.to_string(),
        length: 0.3,
        mass: 1.0,
        is_actuated: actuated,
        joint_low: -1.0,
        joint_high: 1.0,
        gear: 20.0,
        child_order_index: order,
    }
}

/// A chain rooted at the first name.
pub fn chain(names: &[&str]) -> MorphologyGraph {
    assert!(!names.is_empty());
    let limbs: Vec<LimbSpec> = names
        .iter()
        .enumerate()
        .map(|(i, n)| generic_limb(n, i != 0, 0))
        .collect();
    let parents: Vec<Option<String>> = (0..names.len())
        .map(|i| if i == 0 { None } else { Some(names[i - 1].to_string()) })
        .collect();
    MorphologyGraph::new("chain", limbs, parents, names[0]).unwrap()
}

/// A root with two chains of `arm_len` limbs each.
pub fn double_chain(arm_len: usize) -> MorphologyGraph {
    let mut limbs = vec![generic_limb("root", false, 0)];
    let mut parents: Vec<Option<String>> = vec![None];
    for side in ["a", "b"] {
        for i in 0..arm_len {
            let name = format!("{side}{i}");
            let parent = if i == 0 {
                "root".to_string()
            } else {
                format!("{side}{}", i - 1)
            };
            limbs.push(generic_limb(&name, true, if side == "a" { 0 } else { 1 }));
            parents.push(Some(parent));
        }
    }
    MorphologyGraph::new("double_chain", limbs, parents, "root").unwrap()
}

/// A single unactuated limb.
pub fn single_limb() -> MorphologyGraph {
    MorphologyGraph::new(
        "single",
        vec![generic_limb("root", false, 0)],
        vec![None],
        "root",
    )
    .unwrap()
}

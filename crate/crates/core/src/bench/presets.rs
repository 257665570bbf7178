//! Named scenario grids. Replicate counts are desk-scale defaults; pass a larger count
//! (for example 200) to run the full study.

use super::{Method, Scenario};

pub const PRESET_NAMES: &[&str] = &[
    "paper-small",
    "figure-errors-N",
    "figure-errors-p",
    "figure-errors-L",
    "figure-errors-K",
    "figure-rand-init",
    "parametric-rate",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub scenarios: Vec<Scenario>,
    pub replicates: u64,
}

const FIGURE_SEED: u64 = 20_240_601;

fn figure_methods() -> Vec<Method> {
    vec![Method::Mom, Method::EmMom, Method::EmDrRand(10), Method::EmOracle]
}

fn sweep(prefix: &str, values: &[u64], make: impl Fn(u64) -> (usize, usize, usize, u64)) -> Vec<Scenario> {
    values
        .iter()
        .map(|&v| {
            let (k, l, p, n) = make(v);
            let mut sc = Scenario::new(format!("{prefix}-{v}"), k, l, p, n, FIGURE_SEED);
            sc.methods = figure_methods();
            sc
        })
        .collect()
}

pub fn preset(name: &str) -> Option<Preset> {
    let (name, scenarios, replicates) = match name {
        "paper-small" => {
            let mut sc = Scenario::new("small", 2, 5, 300, 2000, 7);
            sc.methods = vec![
                Method::Mom,
                Method::EmMom,
                Method::EmDrRand(3),
                Method::EmRand(3),
                Method::EmOracle,
            ];
            sc.m_inits = 3;
            sc.n_axis_candidates = 20;
            ("paper-small", vec![sc], 4)
        }
        "figure-errors-N" => (
            "figure-errors-N",
            sweep("N", &[2000, 4000, 6000, 8000, 10_000], |n| (3, 50, 5000, n)),
            20,
        ),
        "figure-errors-p" => (
            "figure-errors-p",
            sweep("p", &[1000, 3000, 5000, 7000, 10_000], |p| (3, 50, p as usize, 7000)),
            20,
        ),
        "figure-errors-L" => (
            "figure-errors-L",
            sweep("L", &[20, 40, 60, 80, 100], |l| (3, l as usize, 7000, 10_000)),
            20,
        ),
        "figure-errors-K" => (
            "figure-errors-K",
            sweep("K", &[2, 4, 6, 8, 10], |k| (k as usize, 50, 7000, 10_000)),
            20,
        ),
        "figure-rand-init" => {
            let scenarios = [20usize, 50, 100]
                .iter()
                .map(|&l| {
                    let mut sc = Scenario::new(format!("rand-init-L-{l}"), 3, l, 7000, 10_000, FIGURE_SEED);
                    sc.methods = vec![
                        Method::EmDrRand(1),
                        Method::EmDrRand(10),
                        Method::EmRand(1),
                        Method::EmRand(10),
                        Method::EmOracle,
                    ];
                    sc
                })
                .collect();
            ("figure-rand-init", scenarios, 20)
        }
        "parametric-rate" => {
            let scenarios = [1000u64, 3000, 5000, 7000, 9000, 12_000, 15_000]
                .iter()
                .map(|&n| {
                    let mut sc = Scenario::new(format!("pN-{n}"), 2, 50, n as usize, n, FIGURE_SEED);
                    sc.methods = vec![Method::Mom, Method::EmMom, Method::EmOracle];
                    sc
                })
                .collect();
            ("parametric-rate", scenarios, 20)
        }
        _ => return None,
    };
    Some(Preset {
        name,
        scenarios,
        replicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_listed_preset_resolves_and_validates() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            assert_eq!(&p.name, name);
            assert!(!p.scenarios.is_empty());
            for sc in &p.scenarios {
                sc.validate().unwrap();
            }
        }
        assert!(preset("nope").is_none());
    }
}

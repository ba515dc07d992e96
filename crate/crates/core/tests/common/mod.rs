#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepfx_core::simulation::{Scenario, ScenarioId};
use sepfx_core::{Dataset, Event, NuisanceSet, NuisanceSpec, Record};

/// A scenario with random censoring switched off and no administrative cut-off.
pub fn uncensored(id: ScenarioId) -> Scenario {
    let mut s = Scenario::new(id);
    s.censoring.rate = 0.0;
    s.censoring.admin = f64::INFINITY;
    s
}

pub fn fitted(id: ScenarioId, n: usize, seed: u64) -> (Dataset, NuisanceSet) {
    let s = Scenario::new(id);
    let ds = s.generate(n, seed).unwrap();
    let nuis = NuisanceSet::fit(&ds, &s.working_spec()).unwrap();
    (ds, nuis)
}

pub fn fitted_uncensored(id: ScenarioId, n: usize, seed: u64) -> (Dataset, NuisanceSet) {
    let s = uncensored(id);
    let ds = s.generate(n, seed).unwrap();
    let nuis = NuisanceSet::fit(&ds, &s.working_spec()).unwrap();
    assert!(nuis.censoring.is_none());
    (ds, nuis)
}

/// Small dataset with two covariates, random arms, moderate censoring and
/// event times rounded to a coarse grid so that ties occur.
pub fn tied_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|_| {
            let w = vec![rng.random::<f64>(), rng.random::<f64>() - 0.5];
            let a = u8::from(rng.random::<bool>());
            let l1 = 0.3 * (0.4 * f64::from(a) + w[0]).exp();
            let l2 = 0.2 * (-0.3 * f64::from(a) + w[1]).exp();
            let t = -rng.random::<f64>().ln() / (l1 + l2);
            let c = -rng.random::<f64>().ln() / 0.15;
            let time = (t.min(c) * 4.0).ceil() / 4.0;
            let event = if c < t {
                Event::Censored
            } else if rng.random::<f64>() * (l1 + l2) < l1 {
                Event::Cause1
            } else {
                Event::Cause2
            };
            Record::new(time, event, a, w)
        })
        .collect();
    Dataset::new(records, vec!["w1".into(), "w2".into()]).unwrap()
}

pub fn standard_fit(ds: &Dataset) -> NuisanceSet {
    NuisanceSet::fit(ds, &NuisanceSpec::standard(ds.dim())).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ugc_core::partition::labeled_count;
use ugc_core::{
    count_macs, crossover, lr_schedule, mutate, partition, EmaTracker, SearchSpaceSpec, Topology,
};

fn spec_for(unet: bool, n_stages: usize) -> SearchSpaceSpec {
    let topology = if unet { Topology::UnetStyle } else { Topology::ResnetStyle };
    SearchSpaceSpec { topology, n_stages, trunk_blocks: 2, ..SearchSpaceSpec::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn widening_never_lowers_cost(unet: bool, stages in 1usize..4, seed: u64, gene_pick: usize) {
        let spec = spec_for(unet, stages);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let code = spec.sample_random(&mut rng);
        let g = gene_pick % code.widths.len();
        let pos = spec.width_choices.iter().position(|&w| w == code.widths[g]).unwrap();
        prop_assume!(pos + 1 < spec.width_choices.len());
        let mut wider = code.clone();
        wider.widths[g] = spec.width_choices[pos + 1];
        let (a, b) = (count_macs(&code, &spec, 64).unwrap(), count_macs(&wider, &spec, 64).unwrap());
        prop_assert!(b.macs >= a.macs && b.params >= a.params);
    }

    #[test]
    fn cost_lies_between_extremes(unet: bool, stages in 1usize..4, seed: u64) {
        let spec = spec_for(unet, stages);
        let code = spec.sample_random(&mut ChaCha8Rng::seed_from_u64(seed));
        let c = count_macs(&code, &spec, 64).unwrap();
        let lo = count_macs(&spec.sample_smallest(), &spec, 64).unwrap();
        let hi = count_macs(&spec.sample_largest(), &spec, 64).unwrap();
        prop_assert!(lo.macs <= c.macs && c.macs <= hi.macs);
        prop_assert!(lo.params <= c.params && c.params <= hi.params);
    }

    #[test]
    fn variation_operators_stay_in_the_space(unet: bool, seed: u64, prob in 0.0f64..=1.0) {
        let spec = spec_for(unet, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (spec.sample_random(&mut rng), spec.sample_random(&mut rng));
        prop_assert!(spec.validate_arch(&mutate(&a, &spec, prob, &mut rng)).is_ok());
        prop_assert!(spec.validate_arch(&crossover(&a, &b, &mut rng).unwrap()).is_ok());
    }

    #[test]
    fn partition_is_an_exact_split(n in 1usize..400, fraction in 0.001f64..=1.0, seed: u64) {
        let ids: Vec<String> = (0..n).map(|i| format!("{i:05}")).collect();
        let p = partition(&ids, fraction, seed).unwrap();
        prop_assert_eq!(p.labeled_ids.len(), labeled_count(n, fraction));
        prop_assert!(p.labeled_ids.iter().all(|id| !p.unlabeled_ids.contains(id)));
        let mut all: Vec<String> = p.labeled_ids.iter().chain(&p.unlabeled_ids).cloned().collect();
        all.sort();
        prop_assert_eq!(&all, &ids);
        prop_assert_eq!(partition(&ids, fraction, seed).unwrap(), p);
    }

    #[test]
    fn lr_is_bounded_and_non_increasing(total in 1u64..5000, frac in 0.0f64..=1.0, lr0 in 1e-6f64..1.0) {
        let mut prev = f64::INFINITY;
        for step in (0..=total).step_by((total as usize / 50).max(1)).chain([total]) {
            let lr = lr_schedule(step, total, lr0, frac).unwrap();
            prop_assert!((0.0..=lr0).contains(&lr) && lr <= prev);
            prev = lr;
        }
        prop_assert_eq!(lr_schedule(total, total, lr0, frac).unwrap(), 0.0);
    }

    #[test]
    fn ema_stays_within_observed_range(decay in 0.0f64..1.0, scores in prop::collection::vec(0.0f64..1.0, 1..60)) {
        let mut t = EmaTracker::new(decay).unwrap();
        for &s in &scores {
            t.update(s).unwrap();
        }
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(t.value >= lo - 1e-12 && t.value <= hi + 1e-12);
    }
}

use fgvr_lab::rng::seeded;
use fgvr_lab::sft::build_vocab;
use fgvr_lab::world::{
    cosine, generate_world, make_triplet, sample_fewshot, sample_images, split_categories, Split,
    World, WorldSpec,
};
use proptest::prelude::*;

fn spec(n_super: usize, subs: usize, sigma: f64, alpha: f64, seed: u64) -> WorldSpec {
    WorldSpec {
        n_super,
        subs_per_super: subs,
        feat_dim: 8,
        intra_sigma: sigma,
        inter_alpha: alpha,
        seed,
    }
}

/// Exhaustive scan for the most similar other seen category, lowest id on ties.
fn brute_force_negative(w: &World, sub: usize, seen: &[usize]) -> usize {
    let mut best = None;
    for &c in seen {
        if c == sub {
            continue;
        }
        let s = cosine(&w.subs[sub].prototype, &w.subs[c].prototype);
        match best {
            None => best = Some((c, s)),
            Some((bc, bs)) if s > bs || (s == bs && c < bc) => best = Some((c, s)),
            _ => {}
        }
    }
    best.unwrap().0
}

#[test]
fn ten_subs_at_sixty_percent_split_six_four() {
    let w = generate_world(0, spec(2, 5, 0.1, 0.5, 3)).unwrap();
    let s = split_categories(&w, 0.6, 9).unwrap();
    assert_eq!((s.seen.len(), s.unseen.len()), (6, 4));
}

#[test]
fn two_classes_pick_each_other() {
    let w = generate_world(0, spec(1, 2, 0.1, 0.5, 4)).unwrap();
    assert_eq!(w.hardest_negative(0, &[0, 1]).unwrap(), 1);
    assert_eq!(w.hardest_negative(1, &[0, 1]).unwrap(), 0);
}

#[test]
fn full_mixing_collapses_prototypes_without_error() {
    let w = generate_world(0, spec(3, 4, 0.1, 1.0, 5)).unwrap();
    for s in &w.subs {
        let first = &w.subs[s.super_id * 4].prototype;
        assert!(s.prototype.iter().zip(first).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn no_mixing_makes_intra_and_inter_cosines_alike() {
    // Monte-Carlo over many worlds: with alpha = 0 the super grouping carries
    // no geometric signal.
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for seed in 0..60 {
        let w = generate_world(0, spec(4, 4, 0.1, 0.0, seed)).unwrap();
        for a in &w.subs {
            for b in &w.subs {
                if a.id < b.id {
                    let c = cosine(&a.prototype, &b.prototype);
                    if a.super_id == b.super_id { intra.push(c) } else { inter.push(c) }
                }
            }
        }
    }
    let stats = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let v = x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        (m, (v / x.len() as f64).sqrt())
    };
    let ((mi, si), (me, se)) = (stats(&intra), stats(&inter));
    assert!((mi - me).abs() < 3.0 * (si * si + se * se).sqrt(), "{mi} vs {me}");
}

#[test]
fn mean_cosine_to_prototype_falls_with_noise() {
    let mut prev = f64::INFINITY;
    for sigma in [0.1, 0.3, 0.6] {
        let w = generate_world(0, spec(2, 3, sigma, 0.5, 8)).unwrap();
        let all: Vec<usize> = (0..w.subs.len()).collect();
        let imgs = sample_images(&w, &all, 200, Split::SeenTest, 1, "mc").unwrap();
        let m = imgs.iter().map(|i| cosine(&i.feat, &w.subs[i.sub_id].prototype)).sum::<f64>()
            / imgs.len() as f64;
        assert!(m < prev, "sigma {sigma}: {m} !< {prev}");
        prev = m;
    }
}

#[test]
fn noiseless_shots_equal_prototypes() {
    let w = generate_world(0, spec(2, 3, 0.0, 0.5, 8)).unwrap();
    let shots = sample_fewshot(&w, &[0, 1, 2, 4], 4, 3).unwrap();
    assert_eq!(shots.len(), 16);
    assert!(shots.iter().all(|s| s.feat == w.subs[s.sub_id].prototype));
}

#[test]
fn singleton_class_gives_flagged_jittered_positive() {
    let w = generate_world(0, spec(2, 3, 0.2, 0.5, 8)).unwrap();
    let shots = sample_fewshot(&w, &[0, 1], 1, 3).unwrap();
    let t = make_triplet(&shots[0], &shots, &w, &[0, 1], 0, &mut seeded(1)).unwrap();
    assert!(t.degenerate);
    assert_eq!(t.positive.sub_id, t.anchor.sub_id);
    assert_ne!(t.positive.id, t.anchor.id);
    assert_ne!(t.negative.sub_id, t.truth);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn world_shape_and_determinism(n_super in 1usize..5, subs in 2usize..6, alpha in 0.0f64..1.0, seed in 0u64..500) {
        let s = spec(n_super, subs, 0.2, alpha, seed);
        let w = generate_world(1, s).unwrap();
        prop_assert_eq!(&w, &generate_world(1, s).unwrap());
        prop_assert_eq!(w.subs.len(), n_super * subs);
        let mut names: Vec<String> = w.subs.iter().map(|c| c.name_text()).collect();
        names.sort();
        names.dedup();
        prop_assert_eq!(names.len(), w.subs.len());
        for c in &w.subs {
            let n: f64 = c.prototype.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }
        let vocab = build_vocab(std::slice::from_ref(&w)).unwrap();
        for c in &w.subs {
            let ids = vocab.encode(&c.name_text()).unwrap();
            prop_assert_eq!(vocab.decode(&ids).unwrap(), c.name_text());
        }
    }

    #[test]
    fn split_is_partition_and_stratified(n_super in 1usize..5, subs in 2usize..7, frac in 0.1f64..0.9, seed in 0u64..500) {
        let w = generate_world(0, spec(n_super, subs, 0.2, 0.5, seed)).unwrap();
        let s = split_categories(&w, frac, seed).unwrap();
        prop_assert_eq!(&s, &split_categories(&w, frac, seed).unwrap());
        let mut all: Vec<usize> = s.seen.iter().chain(&s.unseen).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..w.subs.len()).collect::<Vec<_>>());
        let total = w.subs.len();
        let target = ((total as f64 * frac).round() as usize).clamp(1, total - 1);
        prop_assert_eq!(s.seen.len(), target);
        for sup in 0..n_super {
            let k = s.seen.iter().filter(|&&c| w.subs[c].super_id == sup).count();
            let share = subs as f64 * frac;
            prop_assert!(k as f64 >= (share + 1e-9).floor() && k as f64 <= (share - 1e-9).ceil(), "super {} got {} of share {}", sup, k, share);
        }
    }

    #[test]
    fn triplets_satisfy_type_and_negative_rules(n_super in 1usize..4, subs in 2usize..5, k in 1usize..4, seed in 0u64..300) {
        let w = generate_world(0, spec(n_super, subs, 0.2, 0.6, seed)).unwrap();
        let split = split_categories(&w, 0.6, seed).unwrap();
        prop_assume!(split.seen.len() >= 2);
        let shots = sample_fewshot(&w, &split.seen, k, seed).unwrap();
        let mut rng = seeded(seed);
        for a in &shots {
            let t = make_triplet(a, &shots, &w, &split.seen, 0, &mut rng).unwrap();
            prop_assert_eq!(t.anchor.sub_id, t.truth);
            prop_assert_eq!(t.positive.sub_id, t.truth);
            prop_assert_ne!(t.negative.sub_id, t.truth);
            prop_assert_ne!(t.anchor.id, t.positive.id);
            prop_assert_eq!(t.degenerate, k == 1);
            prop_assert_eq!(t.negative.sub_id, brute_force_negative(&w, t.truth, &split.seen));
            prop_assert!(t.negative.feat.iter().all(|x| x.is_finite()));
        }
    }
}
